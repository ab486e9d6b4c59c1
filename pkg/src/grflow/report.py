"""Verification report records and JSON-lines persistence.

A report compares an LHS against an RHS with Monte Carlo standard errors and
an explicit discretization margin.  The verdict rule is

    PASS iff LHS <= RHS + 3 * combined_stderr + margin,

FAIL on the strict opposite, and INCONCLUSIVE when either side is not finite.
Serialization is canonical (sorted keys, fixed separators, repr floats) so
that identical experiments produce byte-identical files; wall-clock timings
are kept out of the record and written to a separate sidecar.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def canonical_json(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def digest(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


@dataclass
class VerificationReport:
    name: str
    lhs: float
    rhs: float
    lhs_stderr: float = 0.0
    rhs_stderr: float = 0.0
    margin: float = 0.0
    inputs: dict = field(default_factory=dict)
    seeds: tuple = ()
    notes: str = ""
    runtime: float | None = None   # excluded from serialization

    @property
    def combined_stderr(self):
        return float(np.hypot(self.lhs_stderr, self.rhs_stderr))

    @property
    def slack(self):
        """RHS + 3 stderr + margin - LHS; nonnegative means PASS."""
        return self.rhs + 3.0 * self.combined_stderr + self.margin - self.lhs

    @property
    def verdict(self):
        vals = (self.lhs, self.rhs, self.lhs_stderr, self.rhs_stderr, self.margin)
        if not all(np.isfinite(v) for v in vals):
            return "INCONCLUSIVE"
        return "PASS" if self.slack >= 0.0 else "FAIL"

    def to_dict(self):
        d = {
            "name": self.name,
            "lhs": float(self.lhs),
            "rhs": float(self.rhs),
            "lhs_stderr": float(self.lhs_stderr),
            "rhs_stderr": float(self.rhs_stderr),
            "margin": float(self.margin),
            "inputs": _jsonable(self.inputs),
            "inputs_digest": digest(self.inputs),
            "seeds": [int(s) for s in self.seeds],
            "verdict": self.verdict,
        }
        if self.notes:
            d["notes"] = self.notes
        return d

    def to_json(self):
        return canonical_json(self.to_dict())

    def __str__(self):
        pm = ""
        if self.combined_stderr:
            pm = f" (stderr {self.combined_stderr:.3g})"
        return (
            f"[{self.verdict}] {self.name}: lhs = {self.lhs:.6g}, "
            f"rhs = {self.rhs:.6g}, margin = {self.margin:.3g}{pm}"
        )


@dataclass
class DefectReport:
    """Output of the flow-characterization probe.

    `form` maps direction labels to the estimated value of the defect
    quadratic form (Rc_B + (1/2) d/dt(g - b))(v, v); `is_flow` is the overall
    verdict, True when every estimate is within 3 stderr of zero.
    """

    name: str
    form: dict = field(default_factory=dict)          # label -> estimate
    stderr: dict = field(default_factory=dict)        # label -> stderr
    threshold: float = 0.0
    inputs: dict = field(default_factory=dict)
    seeds: tuple = ()
    reports: list = field(default_factory=list)       # supporting reports
    runtime: float | None = None

    @property
    def max_abs(self):
        return max((abs(v) for v in self.form.values()), default=0.0)

    @property
    def is_flow(self):
        for k, v in self.form.items():
            tol = 3.0 * self.stderr.get(k, 0.0) + self.threshold
            if abs(v) > tol:
                return False
        return True

    @property
    def verdict(self):
        return "is GRF" if self.is_flow else "is not GRF"

    def to_dict(self):
        return {
            "name": self.name,
            "form": _jsonable(self.form),
            "stderr": _jsonable(self.stderr),
            "threshold": float(self.threshold),
            "inputs": _jsonable(self.inputs),
            "inputs_digest": digest(self.inputs),
            "seeds": [int(s) for s in self.seeds],
            "verdict": self.verdict,
            "reports": [r.to_dict() for r in self.reports],
        }

    def to_json(self):
        return canonical_json(self.to_dict())

    def __str__(self):
        return f"[{self.verdict}] {self.name}: max |defect| = {self.max_abs:.4g}"


def write_reports(path, reports):
    """Write reports as JSON lines (one canonical record per line)."""
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_timings(path, entries):
    """Sidecar for wall-clock runtimes, kept separate so report files stay
    byte-identical across thread counts and machines."""
    with open(path, "w") as fh:
        for name, seconds in entries:
            fh.write(json.dumps({"name": name, "seconds": seconds}) + "\n")
