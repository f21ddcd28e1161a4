"""Tube-in-tube containment checks.

An imitator tube whose every slice lies inside the matching expert slice is
as safe as the expert tube, with the imitator tube's own confidence. The
slice test is exact: the outer membership is maximised over the inner
ellipsoid by solving a trust-region subproblem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import AlignmentError, ShapeError

CONTAIN_RTOL = 1e-9


@dataclass(frozen=True)
class ContainmentReport:
    contained: tuple
    all_contained: bool
    first_violation: int | None
    probability_p: float
    gamma_imitator: float
    gamma_expert: float
    max_membership: tuple = ()
    witnesses: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.all_contained != all(self.contained):
            raise ValueError("all_contained must equal the conjunction of per-slice flags")
        if (self.first_violation is None) != self.all_contained:
            raise ValueError("first_violation is set exactly when some slice is not contained")

    def to_dict(self):
        return {
            "contained": list(self.contained),
            "all_contained": self.all_contained,
            "first_violation": self.first_violation,
            "probability_p": self.probability_p,
            "gamma_imitator": self.gamma_imitator,
            "gamma_expert": self.gamma_expert,
            "max_membership": list(self.max_membership),
            "witnesses": {str(k): list(v) for k, v in self.witnesses.items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _maximize_on_ball(M, b):
    """Maximise ||M u + b|| over ||u|| <= 1; returns (value, maximiser).

    The objective is convex, so the maximum sits on the unit sphere. With
    H = M^T M = Q diag(s) Q^T and g = M^T b the stationarity condition is
    (lam I - H) u = g with lam >= max(s), which reduces to the secular
    equation sum_i g_i^2 / (lam - s_i)^2 = 1 on (s_max, s_max + ||g||].
    """
    H = M.T @ M
    g = M.T @ b
    s, Q = np.linalg.eigh(H)
    gh = Q.T @ g
    s_max = s[-1]
    g_norm = np.linalg.norm(gh)
    scale = max(s_max, g_norm, 1.0)
    top = np.abs(s - s_max) <= 1e-12 * scale

    def norm_sq(lam):
        return float(np.sum(gh ** 2 / (lam - s) ** 2))

    hard = True
    if g_norm > 0 and np.any(np.abs(gh[top]) > 1e-14 * scale):
        lo = s_max + 1e-15 * scale
        hi = s_max + g_norm
        if norm_sq(lo) > 1.0:
            hard = False
            lam = hi if norm_sq(hi) >= 1.0 else brentq(
                lambda x: norm_sq(x) - 1.0, lo, hi, xtol=1e-15 * scale, rtol=4 * np.finfo(float).eps
            )
            w = gh / (lam - s)
    if hard:
        # g has no component along the top eigenspace: fill the remaining
        # norm with the top eigenvector.
        w = np.zeros_like(gh)
        rest = ~top
        w[rest] = gh[rest] / (s_max - s[rest])
        fill = max(0.0, 1.0 - float(w @ w))
        k = np.flatnonzero(top)[-1]
        sign = 1.0 if gh[k] >= 0 else -1.0
        w[k] = sign * np.sqrt(fill)
    u = Q @ w
    n = np.linalg.norm(u)
    if n > 1.0:
        u = u / n
    return float(np.linalg.norm(M @ u + b)), u


def _check_dims(inner, outer):
    if inner.dim != outer.dim:
        raise ShapeError(f"slice dimensions differ: {inner.dim} vs {outer.dim}")


def max_outer_membership(inner, outer):
    """Largest outer membership value over the inner ellipsoid, and where it occurs."""
    _check_dims(inner, outer)
    a_in_inv = np.linalg.inv(inner.A)
    M = (inner.r / outer.r) * outer.A @ a_in_inv
    b = outer.A @ (inner.c - outer.c) / outer.r
    value, u = _maximize_on_ball(M, b)
    witness = inner.c + inner.r * a_in_inv @ u
    return value, witness


def ellipsoid_contained(inner, outer, rtol=CONTAIN_RTOL):
    """True iff the inner ellipsoid lies in the outer one (closed sets)."""
    value, _ = max_outer_membership(inner, outer)
    return value <= 1.0 + rtol


def tube_contained(imitator_tube, expert_tube, rtol=CONTAIN_RTOL):
    """Slice-wise containment of the imitator tube in the expert tube."""
    if len(imitator_tube) != len(expert_tube):
        raise AlignmentError(
            f"tubes have {len(imitator_tube)} and {len(expert_tube)} slices"
        )
    if not np.allclose(imitator_tube.taus, expert_tube.taus, rtol=1e-9, atol=1e-12):
        raise AlignmentError("tube time grids differ")
    flags, values, witnesses = [], [], {}
    for j, (inner, outer) in enumerate(zip(imitator_tube.slices, expert_tube.slices)):
        value, witness = max_outer_membership(inner, outer)
        ok = value <= 1.0 + rtol
        flags.append(bool(ok))
        values.append(value)
        if not ok:
            witnesses[j] = witness.tolist()
    first = next((j for j, ok in enumerate(flags) if not ok), None)
    return ContainmentReport(
        contained=tuple(flags),
        all_contained=all(flags),
        first_violation=first,
        probability_p=1.0 - imitator_tube.gamma,
        gamma_imitator=imitator_tube.gamma,
        gamma_expert=expert_tube.gamma,
        max_membership=tuple(values),
        witnesses=witnesses,
    )


def save_report(path, report):
    with open(path, "w") as fh:
        fh.write(report.to_json() + "\n")
