"""Group LASSO, SCAD and MCP penalties and their radial proximal maps.

All penalties act on the Euclidean norm of a coefficient block.  The
proximal map is computed on the norm ``r = ||theta||`` by comparing the
minimizers of each smooth piece, which stays exact when a piece is concave
(small curvature relative to the concavity of SCAD/MCP).
"""
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidInput

LASSO, SCAD, MCP = 0, 1, 2
KIND_NAMES = {"lasso": LASSO, "scad": SCAD, "mcp": MCP}
DEFAULT_A = {LASSO: 0.0, SCAD: 3.7, MCP: 3.0}


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "mcp"
    lambda1: float = 0.0
    a: float = None
    penalize_first_block: bool = False

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind == "grouplasso":
            kind = "lasso"
        if kind not in KIND_NAMES:
            raise InvalidInput(f"unknown penalty {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        a = DEFAULT_A[KIND_NAMES[kind]] if self.a is None else float(self.a)
        if kind == "scad" and not a > 2:
            raise InvalidInput(f"SCAD needs a > 2, got {a}")
        if kind == "mcp" and not a > 1:
            raise InvalidInput(f"MCP needs a > 1, got {a}")
        object.__setattr__(self, "a", a)
        if self.lambda1 < 0 or math.isnan(self.lambda1):
            raise InvalidInput("lambda1 must be >= 0")

    @property
    def code(self):
        return KIND_NAMES[self.kind]

    def with_lambda(self, lam):
        return PenaltySpec(self.kind, lam, self.a, self.penalize_first_block)

    def to_json(self):
        return {"kind": self.kind, "a": self.a, "lambda1": self.lambda1,
                "penalize_first_block": self.penalize_first_block}


@njit(cache=True)
def _pen(kind, x, lam, a):
    if kind == 0:
        return lam * x
    if kind == 1:
        if x <= lam:
            return lam * x
        if x <= a * lam:
            return (2.0 * a * lam * x - x * x - lam * lam) / (2.0 * (a - 1.0))
        return lam * lam * (a + 1.0) / 2.0
    if x <= a * lam:
        return lam * x - x * x / (2.0 * a)
    return a * lam * lam / 2.0


@njit(cache=True)
def _h(kind, r, zeta, nu, lam, a):
    d = r - zeta
    return 0.5 * nu * d * d + _pen(kind, r, lam, a)


@njit(cache=True)
def _clip(v, lo, hi):
    return lo if v < lo else (hi if v > hi else v)


@njit(cache=True)
def radial_prox(kind, zeta, nu, lam, a):
    """argmin over r >= 0 of ``nu/2 (r - zeta)^2 + pen(r)`` for ``zeta >= 0``."""
    if zeta <= 0.0:
        return 0.0
    if kind == 0 or lam == 0.0:
        return max(0.0, zeta - lam / nu)
    cands = np.empty(7)
    n = 0
    cands[n] = 0.0
    n += 1
    if kind == 2:
        hi = a * lam
        c = nu - 1.0 / a
        if c > 0.0:
            cands[n] = _clip((nu * zeta - lam) / c, 0.0, hi)
            n += 1
        cands[n] = hi
        n += 1
        cands[n] = max(zeta, hi)
        n += 1
    else:
        cands[n] = _clip(zeta - lam / nu, 0.0, lam)
        n += 1
        cands[n] = lam
        n += 1
        hi = a * lam
        c = nu - 1.0 / (a - 1.0)
        if c > 0.0:
            cands[n] = _clip((nu * zeta - a * lam / (a - 1.0)) / c, lam, hi)
            n += 1
        cands[n] = hi
        n += 1
        cands[n] = max(zeta, hi)
        n += 1
    best = cands[0]
    fbest = _h(kind, best, zeta, nu, lam, a)
    for i in range(1, n):
        f = _h(kind, cands[i], zeta, nu, lam, a)
        if f < fbest or (f == fbest and cands[i] < best):
            best = cands[i]
            fbest = f
    return best


def penalty_value(spec, x):
    """Closed-form penalty of a block norm ``x >= 0``."""
    x = float(x)
    if x < 0 or math.isnan(x):
        raise InvalidInput("penalty argument must be >= 0")
    return float(_pen(spec.code, x, spec.lambda1, spec.a))


def group_threshold(spec, z, step_curvature):
    """argmin over theta of ``nu/2 ||theta - z||^2 + pen(||theta||)``."""
    z = np.asarray(z, dtype=float)
    if step_curvature <= 0:
        raise InvalidInput("step curvature must be positive")
    zeta = float(np.linalg.norm(z))
    if zeta == 0.0:
        return np.zeros_like(z)
    r = radial_prox(spec.code, zeta, float(step_curvature), spec.lambda1, spec.a)
    return z * (r / zeta)
