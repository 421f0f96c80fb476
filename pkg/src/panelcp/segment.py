"""Change-point detection by group-penalized least squares on coefficient jumps.

With ``beta_t = theta_1 + ... + theta_t`` the panel model becomes a regression
on the cumulative design ``X* = X A`` in which a change point at time ``t`` is
a nonzero block ``theta_t``.  Blocks are fitted by group coordinate descent
along a decreasing lambda grid and the grid point is chosen by extended BIC.

Times are 1-based in results (``change_points`` are in ``2..T``), while array
axes are 0-based as usual.
"""
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import DivergedFit, InvalidInput, RidgeFallbackWarning
from .penalties import PenaltySpec, _pen, radial_prox, group_threshold, penalty_value

__all__ = [
    "CumulativeDesign", "GroupFit", "ChangePointResult", "PenaltySpec",
    "build_cumulative_design", "diff_parameterize", "cumulate",
    "penalty_value", "group_threshold", "group_coordinate_descent",
    "lambda_path", "lambda_max", "ebic", "ebic_value", "detect_change_points",
    "objective_value", "block_metrics",
    "extract_change_points", "post_select_refit",
]


@dataclass(frozen=True)
class CumulativeDesign:
    """Per-time design blocks ``X_t`` (shape ``(T, N, m)``) of the screened covariates.

    ``X*`` is never materialized: ``apply`` forms prefix sums of the blocks of
    ``theta`` and ``adjoint`` forms suffix sums of ``X_t^T v_t``.
    """

    blocks: np.ndarray
    active: tuple = ()
    grams: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        b = np.array(self.blocks, dtype=float)
        if b.ndim != 3 or min(b.shape) < 1:
            raise InvalidInput("blocks must have shape (T, N, m) with positive sizes")
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)
        g = np.einsum("tni,tnj->tij", b, b)
        g.setflags(write=False)
        object.__setattr__(self, "grams", g)
        object.__setattr__(self, "active", tuple(int(j) for j in self.active))

    @property
    def n_times(self):
        return self.blocks.shape[0]

    @property
    def n_per_time(self):
        return self.blocks.shape[1]

    @property
    def group_size(self):
        return self.blocks.shape[2]

    @property
    def n_obs(self):
        return self.n_times * self.n_per_time

    @property
    def underdetermined(self):
        """True when the unpenalized problem has at least as many unknowns as rows."""
        return self.group_size * self.n_times >= self.n_obs

    def _theta(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(self.n_times, self.group_size)
        return theta

    def apply(self, theta):
        """``X* theta`` as a stacked (time-major) vector of length NT."""
        beta = np.cumsum(self._theta(theta), axis=0)
        return np.einsum("tnm,tm->tn", self.blocks, beta).ravel()

    def adjoint(self, v):
        """``X*^T v`` as a ``(T, m)`` array."""
        v = np.asarray(v, dtype=float).reshape(self.n_times, self.n_per_time)
        h = np.einsum("tnm,tn->tm", self.blocks, v)
        return np.cumsum(h[::-1], axis=0)[::-1]

    def suffix_grams(self):
        """``sum_{s >= t} X_s^T X_s`` for every t."""
        return np.cumsum(self.grams[::-1], axis=0)[::-1]

    def response_blocks(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_obs,):
            raise InvalidInput(f"y must have length {self.n_obs}, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise InvalidInput("y has non-finite entries")
        return y.reshape(self.n_times, self.n_per_time)


def build_cumulative_design(design, active):
    """Restrict a stacked design to ``active`` columns and split it by time."""
    active = [int(j) for j in active]
    if not active:
        raise InvalidInput("active set is empty")
    if len(set(active)) != len(active):
        raise InvalidInput("active set has duplicates")
    p = design.n_covariates
    if any(j < 0 or j >= p for j in active):
        raise InvalidInput("active column out of range")
    T, N = design.n_times, design.n_subjects
    blocks = design.x_stacked[:, active].reshape(T, N, len(active))
    return CumulativeDesign(blocks, tuple(active))


def diff_parameterize(beta):
    """Jump blocks ``theta`` with ``theta_1 = beta_1`` and ``theta_t = beta_t - beta_{t-1}``."""
    beta = np.asarray(beta, dtype=float)
    theta = np.empty_like(beta)
    theta[0] = beta[0]
    theta[1:] = beta[1:] - beta[:-1]
    return theta


def cumulate(theta):
    return np.cumsum(np.asarray(theta, dtype=float), axis=0)


@dataclass(frozen=True)
class GroupFit:
    """Penalized fit at one lambda.  ``theta`` has shape ``(T, m)``."""

    theta: np.ndarray
    objective_trace: np.ndarray
    lambda1: float
    converged: bool
    n_sweeps: int
    spec: PenaltySpec = None
    ebic: float = None

    @property
    def beta_path(self):
        return cumulate(self.theta)

    def block_norms(self):
        return np.linalg.norm(self.theta, axis=1)


@njit(cache=True)
def _block_norm(W, theta, t):
    m = theta.shape[1]
    acc = 0.0
    for k in range(m):
        v = 0.0
        for l in range(m):
            v += W[t, k, l] * theta[t, l]
        acc += v * v
    return math.sqrt(acc)


@njit(cache=True)
def _objective(blocks, Y, theta, W, kind, lam, a, pen_first, weight, nt):
    T, N, m = blocks.shape
    beta = np.zeros(m)
    rss = 0.0
    pen = 0.0
    for t in range(T):
        for k in range(m):
            beta[k] += theta[t, k]
        if t > 0 or pen_first:
            pen += _pen(kind, _block_norm(W, theta, t), lam, a)
        for i in range(N):
            r = Y[t, i]
            for k in range(m):
                r -= blocks[t, i, k] * beta[k]
            rss += r * r
    return rss / nt + weight * pen


@njit(cache=True)
def _gcd_kernel(blocks, grams, cy, Y, theta, W, Winv, nu, g1inv, kind, lam, a,
                pen_first, weight, tol, max_sweeps, trace):
    T, N, m = blocks.shape
    nt = float(T * N)
    h = np.empty((T, m))
    beta = np.empty(m)
    g = np.empty(m)
    z = np.empty(m)
    delta = np.empty(m)
    trace[0] = _objective(blocks, Y, theta, W, kind, lam, a, pen_first, weight, nt)
    if not np.isfinite(trace[0]):
        return 0, False
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        # fresh X_s^T r_s from the current coefficients, once per sweep
        beta[:] = 0.0
        for s in range(T):
            for k in range(m):
                beta[k] += theta[s, k]
            for k in range(m):
                acc = cy[s, k]
                for l in range(m):
                    acc -= grams[s, k, l] * beta[l]
                h[s, k] = acc
        biggest = 0.0
        for t in range(T):
            g[:] = 0.0
            for s in range(t, T):
                for k in range(m):
                    g[k] += h[s, k]
            for k in range(m):
                g[k] *= 2.0 / nt
            if t == 0 and not pen_first:
                for k in range(m):
                    acc = 0.0
                    for l in range(m):
                        acc += g1inv[k, l] * g[l]
                    delta[k] = acc
            else:
                if nu[t] <= 0.0:
                    continue
                # z = W theta_t + W^{-T} g / nu, the majorizer's unpenalized minimizer
                zn = 0.0
                for k in range(m):
                    acc = 0.0
                    for l in range(m):
                        acc += W[t, k, l] * theta[t, l] + Winv[t, l, k] * g[l] / nu[t]
                    z[k] = acc
                    zn += acc * acc
                zn = math.sqrt(zn)
                scale = 0.0
                if zn > 0.0:
                    scale = radial_prox(kind, zn, nu[t] / weight, lam, a) / zn
                for k in range(m):
                    acc = 0.0
                    for l in range(m):
                        acc += Winv[t, k, l] * z[l]
                    delta[k] = acc * scale - theta[t, k]
            moved = False
            for k in range(m):
                if delta[k] != 0.0:
                    moved = True
                ad = abs(delta[k])
                if ad > biggest:
                    biggest = ad
            if not moved:
                continue
            for k in range(m):
                theta[t, k] += delta[k]
            for s in range(t, T):
                for k in range(m):
                    acc = 0.0
                    for l in range(m):
                        acc += grams[s, k, l] * delta[l]
                    h[s, k] -= acc
        sweeps += 1
        trace[sweeps] = _objective(blocks, Y, theta, W, kind, lam, a, pen_first,
                                   weight, nt)
        if not np.isfinite(trace[sweeps]):
            return sweeps, False
        if biggest < tol:
            converged = True
            break
    return sweeps, converged


IDENTITY, ORTHONORMAL = "identity", "orthonormal"
LAMBDA_MAX_MARGIN = 1e-12


def block_metrics(cd, group_norm=ORTHONORMAL):
    """Per-block penalty metrics ``W_t`` and their inverses.

    ``identity`` penalizes ``||theta_t||``.  ``orthonormal`` penalizes
    ``||R_t theta_t||`` with ``R_t^T R_t = (1/NT) sum_{s>=t} X_s^T X_s``, i.e.
    the norm of the block after orthonormalizing its columns of ``X*``.
    """
    T, m = cd.n_times, cd.group_size
    if group_norm == IDENTITY:
        eye = np.broadcast_to(np.eye(m), (T, m, m)).copy()
        return eye, eye.copy()
    if group_norm != ORTHONORMAL:
        raise InvalidInput(f"unknown group norm {group_norm!r}")
    S = cd.suffix_grams() / cd.n_obs
    W = np.empty((T, m, m))
    Winv = np.empty((T, m, m))
    for t in range(T):
        St = S[t]
        # a tiny jitter keeps R_t invertible when a late block has fewer rows than m
        jitter = 1e-10 * max(np.trace(St) / m, 1e-300)
        try:
            L = np.linalg.cholesky(St)
        except np.linalg.LinAlgError:
            L = np.linalg.cholesky(St + jitter * np.eye(m))
        if np.min(np.abs(np.diag(L))) < math.sqrt(jitter):
            L = np.linalg.cholesky(St + jitter * np.eye(m))
        W[t] = L.T
        Winv[t] = np.linalg.inv(L.T)
    return W, Winv


def _penalty_weight(cd, weight):
    """``None`` means 1; ``"1/T"`` means ``1 / n_times``."""
    if weight is None:
        return 1.0
    if isinstance(weight, str):
        if weight.replace(" ", "").upper() == "1/T":
            return 1.0 / cd.n_times
        try:
            return float(weight)
        except ValueError:
            raise InvalidInput(f"bad penalty weight {weight!r}") from None
    return float(weight)


class _Solver:
    """Per-design quantities reused across the lambda grid."""

    def __init__(self, cd, y, group_norm=ORTHONORMAL, penalty_weight=None):
        self.cd = cd
        self.Y = np.ascontiguousarray(cd.response_blocks(y))
        self.blocks = np.ascontiguousarray(cd.blocks)
        self.grams = np.ascontiguousarray(cd.grams)
        self.cy = np.einsum("tnm,tn->tm", cd.blocks, self.Y)
        self.weight = _penalty_weight(cd, penalty_weight)
        if not self.weight > 0:
            raise InvalidInput("penalty weight must be positive")
        self.W, self.Winv = block_metrics(cd, group_norm)
        nt = cd.n_obs
        G = 2.0 / nt * cd.suffix_grams()
        # curvature of the majorizer in the penalized metric
        self.nu = np.array([np.linalg.eigvalsh(Wi.T @ Gt @ Wi)[-1]
                            for Gt, Wi in zip(G, self.Winv)])
        self.nu *= 1.0 + 1e-12
        self.nu[self.nu < 1e-14 * max(self.nu.max(), 1e-300)] = 0.0
        self.g1inv = np.linalg.pinv(G[0])

    def objective(self, spec, theta):
        theta = np.ascontiguousarray(np.asarray(theta, dtype=float).reshape(
            self.cd.n_times, self.cd.group_size))
        return float(_objective(self.blocks, self.Y, theta, self.W, spec.code,
                                float(spec.lambda1), float(spec.a),
                                bool(spec.penalize_first_block), self.weight,
                                float(self.cd.n_obs)))

    def fit(self, spec, init=None, tol=1e-7, max_sweeps=10000):
        cd = self.cd
        T, m = cd.n_times, cd.group_size
        if init is None:
            theta = np.zeros((T, m))
        else:
            theta = np.array(init, dtype=float).reshape(T, m)
        trace = np.empty(max_sweeps + 1)
        n, conv = _gcd_kernel(self.blocks, self.grams, self.cy, self.Y, theta,
                              self.W, self.Winv, self.nu, self.g1inv, spec.code,
                              float(spec.lambda1), float(spec.a),
                              bool(spec.penalize_first_block), self.weight,
                              float(tol), int(max_sweeps), trace)
        trace = trace[:n + 1].copy()
        if not np.all(np.isfinite(trace)):
            raise DivergedFit("non-finite objective during coordinate descent")
        theta.setflags(write=False)
        trace.setflags(write=False)
        return GroupFit(theta, trace, float(spec.lambda1), bool(conv), int(n), spec)

    def lambda_max(self, penalize_first_block=False):
        cd = self.cd
        T, m = cd.n_times, cd.group_size
        theta = np.zeros((T, m))
        if not penalize_first_block:
            theta[0] = _baseline_theta1(cd, self.Y)
        resid = self.Y.ravel() - cd.apply(theta)
        grad = 2.0 / cd.n_obs * cd.adjoint(resid)
        norms = np.linalg.norm(np.einsum("tlk,tl->tk", self.Winv, grad), axis=1)
        if not penalize_first_block:
            norms = norms[1:]
        if norms.size == 0:
            return 0.0
        # a relative margin so rounding in the block update cannot leave the
        # largest jump a few ulps away from zero
        return float(norms.max() / self.weight) * (1.0 + LAMBDA_MAX_MARGIN)


def group_coordinate_descent(cd, y, spec, init=None, tol=1e-7, max_sweeps=10000,
                             group_norm=ORTHONORMAL, penalty_weight=None):
    """Minimize ``(1/NT)||y - X* theta||^2 + w sum_t pen(||W_t theta_t||)``.

    Blocks are visited in time order.  A penalized block takes a
    majorize-minimize step whose curvature ``nu_t`` is the largest eigenvalue
    of the block Hessian ``(2/NT) sum_{s>=t} X_s^T X_s`` measured in the
    ``W_t`` metric, so no block update (and no sweep) increases the objective,
    also for SCAD and MCP.  With ``group_norm="orthonormal"`` that Hessian is
    a multiple of the identity and the step is the exact block minimizer.  An
    unpenalized first block is solved exactly.

    Parameters
    ----------
    cd : CumulativeDesign
    y : ndarray, shape (NT,)
        Stacked response, time-major.
    spec : PenaltySpec
    init : ndarray, shape (T, m), optional
        Warm start; zeros by default.
    tol : float
        Stop once the largest coordinate change in a sweep is below ``tol``.
    max_sweeps : int
    group_norm : {"orthonormal", "identity"}
        Metric ``W_t`` of the penalized block norm, see ``block_metrics``.
    penalty_weight : float or "1/T", optional
        ``w``; 1 by default.

    Returns
    -------
    GroupFit
    """
    if max_sweeps < 1:
        raise InvalidInput("max_sweeps must be >= 1")
    return _Solver(cd, y, group_norm, penalty_weight).fit(spec, init, tol, max_sweeps)


def objective_value(cd, y, spec, theta, group_norm=ORTHONORMAL, penalty_weight=None):
    """Penalized objective minimized by ``group_coordinate_descent``."""
    return _Solver(cd, y, group_norm, penalty_weight).objective(spec, theta)


def _baseline_theta1(cd, Y):
    """Least-squares coefficients of the constant-coefficient model."""
    G = cd.grams.sum(axis=0)
    c = np.einsum("tnm,tn->m", cd.blocks, Y)
    return np.linalg.lstsq(G, c, rcond=None)[0]


def lambda_max(cd, y, penalize_first_block=False, group_norm=ORTHONORMAL,
               penalty_weight=None):
    """Smallest lambda at which zero penalized blocks satisfy stationarity.

    With an unpenalized first block this is ``max_t ||W_t^{-T} g_t|| / w`` over
    ``t >= 2``, where ``g_t`` is the block-``t`` part of ``(2/NT) X*^T r`` and
    ``r`` the residual of the constant-coefficient least-squares fit.  The
    value carries a relative margin of ``LAMBDA_MAX_MARGIN``.
    """
    return _Solver(cd, y, group_norm, penalty_weight).lambda_max(penalize_first_block)


def lambda_path(cd, y, n_points=50, min_ratio=1e-3, penalize_first_block=False,
                group_norm=ORTHONORMAL, penalty_weight=None):
    """Geometric lambda grid from ``lambda_max`` down to ``lambda_max * min_ratio``."""
    _check_grid(n_points, min_ratio)
    lmax = lambda_max(cd, y, penalize_first_block, group_norm, penalty_weight)
    return _grid(lmax, n_points, min_ratio)


def _check_grid(n_points, min_ratio):
    if n_points < 2:
        raise InvalidInput("n_points must be >= 2")
    if not 0 < min_ratio < 1:
        raise InvalidInput("min_ratio must lie in (0, 1)")


def _grid(lmax, n_points, min_ratio):
    if lmax == 0.0:
        return np.zeros(n_points)
    return lmax * np.geomspace(1.0, min_ratio, n_points)


def _rss(cd, y, theta):
    r = np.asarray(y, dtype=float) - cd.apply(theta)
    return float(r @ r)


def ebic_value(rss, n_obs, n_times, df, gamma=0.5):
    """``NT log(RSS/NT) + df log NT + 2 gamma df log T``; ``-inf`` when RSS is 0."""
    if rss <= 0.0:
        warnings.warn("zero residual sum of squares; eBIC is -inf", RuntimeWarning,
                      stacklevel=3)
        return -math.inf
    return (n_obs * math.log(rss / n_obs) + df * math.log(n_obs)
            + 2.0 * gamma * df * math.log(n_times))


def ebic(fit, cd, y, gamma=0.5, rss="refit", zero_tol=1e-6):
    """Extended BIC of a fit.

    ``df`` is ``m`` times the number of nonzero blocks, block 1 included, where
    blocks ``t >= 2`` count when they pass ``extract_change_points``.  The RSS
    is that of the least-squares refit on those blocks (``rss="refit"``) or of
    the penalized fit itself (``rss="penalized"``).
    """
    cps = extract_change_points(fit.theta, zero_tol)
    first = 1 if (not np.any(fit.theta[0]) and fit.spec is not None
                  and fit.spec.penalize_first_block) else 0
    df = cd.group_size * (1 - first + len(cps))
    if rss == "refit":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RidgeFallbackWarning)
            value = _rss(cd, y, post_select_refit(cd, y, cps)[0])
    elif rss == "penalized":
        value = _rss(cd, y, fit.theta)
    else:
        raise InvalidInput(f"unknown eBIC RSS source {rss!r}")
    return ebic_value(value, cd.n_obs, cd.n_times, df, gamma)


def extract_change_points(theta, zero_tol=1e-6):
    """1-based times ``t >= 2`` whose block norm is large relative to the whole fit."""
    theta = np.asarray(theta, dtype=float)
    T = theta.shape[0]
    total = float(np.linalg.norm(theta))
    if total == 0.0:
        return ()
    norms = np.linalg.norm(theta, axis=1)
    cut = zero_tol * total / math.sqrt(T)
    return tuple(int(t) + 1 for t in range(1, T) if norms[t] > cut)


def post_select_refit(cd, y, change_points, ridge=1e-8):
    """Unpenalized least squares on blocks ``{1} ∪ S``; other blocks are zero.

    Returns ``(theta_refit, beta_path)``.  A rank-deficient refit design gets a
    ridge of ``ridge`` times its mean diagonal and a ``RidgeFallbackWarning``.
    """
    Y = cd.response_blocks(y)
    T, N, m = cd.n_times, cd.n_per_time, cd.group_size
    starts = sorted({1, *(int(t) for t in change_points)})
    if any(t < 1 or t > T for t in starts):
        raise InvalidInput("change point outside 1..T")
    # regime r covers times starts[r] .. starts[r+1]-1; X* for block starts[r]
    # is nonzero on every time >= starts[r]
    k = len(starts)
    A = np.zeros((T, N, k * m))
    for r, s in enumerate(starts):
        A[s - 1:, :, r * m:(r + 1) * m] = cd.blocks[s - 1:]
    A = A.reshape(T * N, k * m)
    yv = Y.ravel()
    AtA = A.T @ A
    rank = np.linalg.matrix_rank(A)
    if rank < k * m:
        warnings.warn(f"refit design has rank {rank} < {k * m}; using a ridge fallback",
                      RidgeFallbackWarning, stacklevel=2)
        lam = ridge * max(np.trace(AtA) / (k * m), 1e-300)
        coef = np.linalg.solve(AtA + lam * np.eye(k * m), A.T @ yv)
    else:
        coef = np.linalg.lstsq(A, yv, rcond=None)[0]
    theta = np.zeros((T, m))
    for r, s in enumerate(starts):
        theta[s - 1] = coef[r * m:(r + 1) * m]
    return theta, cumulate(theta)


@dataclass(frozen=True)
class ChangePointResult:
    change_points: tuple
    theta_refit: np.ndarray
    beta_path: np.ndarray
    selected_lambda1: float
    ebic_curve: tuple
    lambdas: tuple
    spec: PenaltySpec
    fit: GroupFit = None
    active: tuple = ()
    gamma: float = 0.5

    def to_json(self, design=None):
        out = {
            "change_points": list(self.change_points),
            "selected_lambda": self.selected_lambda1,
            "ebic_curve": [_finite_or_str(v) for v in self.ebic_curve],
            "lambdas": list(self.lambdas),
            "beta_path": self.beta_path.tolist(),
            "penalty": self.spec.with_lambda(self.selected_lambda1).to_json(),
            "gamma": self.gamma,
        }
        if design is not None:
            out["active"] = list(design.covariate_ids(self.active))
            out["change_point_labels"] = [design.time_ids[t - 1] for t in self.change_points]
        else:
            out["active_columns"] = list(self.active)
        if self.fit is not None:
            out["converged"] = self.fit.converged
            out["n_sweeps"] = self.fit.n_sweeps
        return out


def _finite_or_str(v):
    return v if math.isfinite(v) else ("-inf" if v < 0 else "inf")


def detect_change_points(cd, y, kind="mcp", a=None, n_lambdas=50, min_ratio=1e-3,
                         gamma=0.5, zero_tol=1e-6, penalize_first_block=False,
                         tol=1e-7, max_sweeps=10000, group_norm=ORTHONORMAL,
                         penalty_weight=None, ebic_rss="refit"):
    """Fit the lambda path with warm starts, pick lambda by eBIC and refit.

    Parameters
    ----------
    cd : CumulativeDesign
    y : ndarray, shape (NT,)
    kind : {"lasso", "scad", "mcp"}
    a : float, optional
        Concavity parameter; 3.7 for SCAD and 3 for MCP by default.
    n_lambdas, min_ratio : grid size and ``lambda_min / lambda_max``.
    gamma : float
        eBIC model-size weight.
    zero_tol : float
        Relative block-norm cutoff used to read off change points.
    group_norm, penalty_weight : see ``group_coordinate_descent``.
    ebic_rss : {"refit", "penalized"}
        Residuals scored by eBIC, see ``ebic``.

    Returns
    -------
    ChangePointResult
    """
    _check_grid(n_lambdas, min_ratio)
    base = PenaltySpec(kind, 0.0, a, penalize_first_block)
    solver = _Solver(cd, y, group_norm, penalty_weight)
    lambdas = _grid(solver.lambda_max(penalize_first_block), n_lambdas, min_ratio)
    fits, scores = [], []
    theta = None
    for lam in lambdas:
        fit = solver.fit(base.with_lambda(float(lam)), theta, tol, max_sweeps)
        score = ebic(fit, cd, y, gamma, ebic_rss, zero_tol)
        fits.append(replace(fit, ebic=score))
        scores.append(score)
        theta = fit.theta
    best = int(np.argmin(scores))
    chosen = fits[best]
    cps = extract_change_points(chosen.theta, zero_tol)
    theta_refit, beta_path = post_select_refit(cd, y, cps)
    return ChangePointResult(cps, theta_refit, beta_path, float(lambdas[best]),
                             tuple(float(s) for s in scores),
                             tuple(float(v) for v in lambdas), base, chosen,
                             cd.active, float(gamma))
