"""Variable screening: tilted current correlation (DTCCS), SIS and HOLP.

Covariate references in this module are column positions of
``StackedDesign.x_stacked`` (0-based).  Use ``StackedDesign.covariate_ids``
to map them to the original 1-based covariate numbers.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InvalidInput, SingularFit, SingularTilt

DTCCS, SIS, HOLP = "dtccs", "sis", "holp"


def default_keep(n_obs):
    """``floor(n / ln n)`` covariates, at least one."""
    if n_obs <= 2:
        return 1
    return max(1, int(math.floor(n_obs / math.log(n_obs))))


def gic_penalty(rule, n_obs, p):
    """Per-variable GIC penalty ``h_n`` for a rule name or explicit value."""
    if rule is None or rule == "consistent":
        return math.log(max(p, 2)) * math.log(max(math.log(n_obs), math.e)) / n_obs
    if rule == "plain":
        return math.log(max(p, 2)) / n_obs
    return float(rule)


@dataclass(frozen=True)
class ScreeningParams:
    """Tuning of the DTCCS iteration.

    ``pick_per_iter`` (d) and ``cap_m`` default to ``None`` meaning "auto";
    see ``resolve``.  ``lambda0_schedule`` is either ``"knots"`` or a
    non-increasing sequence of ridge levels (``inf`` allowed), padded with its
    last value when shorter than ``max_iters``.

    ``gic_hn`` is the per-variable GIC penalty.  ``None`` (or ``"consistent"``)
    uses ``log(p) * log(log n) / n``; ``"plain"`` uses ``log(p) / n``; a number
    is used as is.
    """

    pick_per_iter: int = None
    max_iters: int = 10
    cap_m: int = None
    lambda0_schedule: object = "knots"
    ridge_active: float = 1.0
    gic_hn: object = None
    omega: float = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidInput("max_iters must be >= 1")
        if self.pick_per_iter is not None and self.pick_per_iter < 1:
            raise InvalidInput("pick_per_iter must be >= 1")
        if self.omega is not None and not 0 < self.omega <= 1:
            raise InvalidInput("omega must lie in (0, 1]")
        if self.ridge_active < 0:
            raise InvalidInput("ridge_active must be >= 0")
        sched = self.lambda0_schedule
        if isinstance(sched, str):
            if sched != "knots":
                raise InvalidInput(f"unknown lambda0 schedule {sched!r}")
        else:
            vals = tuple(float(v) for v in sched)
            if not vals:
                raise InvalidInput("empty lambda0 schedule")
            if any(v < 0 or math.isnan(v) for v in vals):
                raise InvalidInput("lambda0 values must be >= 0")
            if any(b > a for a, b in zip(vals, vals[1:])):
                raise InvalidInput("lambda0 schedule must be non-increasing")
            object.__setattr__(self, "lambda0_schedule", vals)
        hn = self.gic_hn
        if isinstance(hn, str):
            if hn not in ("consistent", "plain"):
                raise InvalidInput(f"unknown gic_hn rule {hn!r}")
        elif hn is not None and not float(hn) >= 0:
            raise InvalidInput("gic_hn must be >= 0")

    def resolve(self, n_obs, p):
        """Concrete ``(d, cap_m, h_n)`` for a design of ``n_obs`` rows, ``p`` columns."""
        K = self.max_iters
        if self.pick_per_iter is not None:
            d = self.pick_per_iter
        elif self.omega is not None:
            d = max(1, int(math.floor(self.omega * n_obs)))
        else:
            d = max(1, n_obs // (2 * K))
        if self.cap_m is not None:
            cap = self.cap_m
        else:
            auto = min(math.sqrt(p / n_obs) * K * math.log(n_obs), n_obs - 1)
            cap = max(d, int(math.floor(auto)))
        cap = max(1, min(cap, n_obs - 1, p))
        return d, cap, gic_penalty(self.gic_hn, n_obs, p)

    def lambda0_at(self, k):
        """Explicit schedule value for iteration ``k`` (1-based)."""
        sched = self.lambda0_schedule
        return sched[min(k, len(sched)) - 1]


@dataclass
class IterationRecord:
    picked: tuple
    lambda0: float
    gic: float
    gic_increment: float


@dataclass
class ScreeningResult:
    method: str
    active: tuple
    iterations: list = field(default_factory=list)
    hdce_trace: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def to_json(self, design, params=None):
        iters = []
        for k, rec in enumerate(self.iterations, start=1):
            item = {
                "picked": design.covariate_ids(rec.picked),
                "lambda0": _json_float(rec.lambda0),
                "gic": _json_float(rec.gic),
                "gic_increment": _json_float(rec.gic_increment),
            }
            if k in self.hdce_trace:
                item["hdce"] = [float(v) for v in self.hdce_trace[k]]
            iters.append(item)
        out = {
            "method": self.method,
            "active": design.covariate_ids(self.active),
            "iterations": iters,
            "params": dict(params or {}),
        }
        out["params"].update({k: _json_float(v) for k, v in self.info.items()
                              if not isinstance(v, (list, tuple, np.ndarray))})
        for k, v in self.info.items():
            if isinstance(v, (list, tuple, np.ndarray)):
                out[k] = [_json_float(u) for u in v]
        return out


def _json_float(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return v


def _check_column(design, j):
    p = design.n_covariates
    if not 0 <= j < p:
        raise InvalidInput(f"covariate column {j} outside 0..{p - 1}")


class TiltedCorrelation:
    """Ridge-tilted projections and HDCE values for one design.

    The ``NT x NT`` Gram matrix ``X X'`` and its eigendecomposition are
    computed once; removing column ``j`` is a rank-one downdate handled by
    Sherman-Morrison, so each single-column evaluation costs ``O((NT)^2)``.
    A thin SVD of ``X`` serves the all-columns path.
    """

    def __init__(self, design):
        self.design = design
        self.X = design.x_stacked
        self._gram = None
        self._eig = None
        self._svd = None

    @property
    def gram(self):
        if self._gram is None:
            self._gram = self.X @ self.X.T
        return self._gram

    def downdated_gram(self, j):
        """``X_{-j} X_{-j}'`` via rank-one downdate of the full Gram matrix."""
        x = self.X[:, j]
        return self.gram - np.outer(x, x)

    def _eigh(self):
        if self._eig is None:
            d, V = linalg.eigh(self.gram)
            self._eig = (np.clip(d, 0.0, None), V)
        return self._eig

    def _apply_b(self, lam, v):
        d, V = self._eigh()
        return V @ ((V.T @ v) / (d + lam))

    def residualize(self, j, lam, v, form="dual"):
        """``(I - H_j) v`` for the ridge hat matrix of the other columns."""
        _check_column(self.design, j)
        v = np.asarray(v, dtype=float)
        if lam < 0 or math.isnan(lam):
            raise InvalidInput("lambda0 must be >= 0")
        if math.isinf(lam):
            return v.copy()
        if lam == 0:
            return self._residualize_exact(j, v)
        if form == "primal":
            Xm = np.delete(self.X, j, axis=1)
            if Xm.shape[1] == 0:
                return v.copy()
            A = Xm.T @ Xm + lam * np.eye(Xm.shape[1])
            return v - Xm @ linalg.solve(A, Xm.T @ v, assume_a="pos")
        if form != "dual":
            raise InvalidInput(f"unknown form {form!r}")
        # I - K_j (K_j + lam I)^-1 = lam (K_j + lam I)^-1, with K_j = K - x x'
        x = self.X[:, j]
        Bv = self._apply_b(lam, v)
        Bx = self._apply_b(lam, x)
        q = x @ Bx
        return lam * (Bv + Bx * ((x @ Bv) / (1.0 - q)))

    def _residualize_exact(self, j, v):
        Xm = np.delete(self.X, j, axis=1)
        n, q = Xm.shape
        if q == 0:
            return v.copy()
        if q <= n and np.linalg.matrix_rank(Xm) == q:
            coef = linalg.lstsq(Xm, v)[0]
            return v - Xm @ coef
        if np.linalg.matrix_rank(self.downdated_gram(j)) == n:
            return np.zeros_like(v)
        raise SingularTilt(f"lambda0 = 0 with rank-deficient design for column {j}")

    def hdce(self, j, z, lam):
        """Tilted correlation of column ``j`` with residual ``z``."""
        z = np.asarray(z, dtype=float)
        zn = np.linalg.norm(z)
        if zn == 0:
            return 0.0
        u = self.residualize(j, lam, self.X[:, j])
        un = np.linalg.norm(u)
        if un <= 1e-12 * max(1.0, np.linalg.norm(self.X[:, j])):
            return 0.0
        return float(np.clip((u @ z) / (un * zn), -1.0, 1.0))

    def hdce_all(self, z, lam):
        """HDCE for every column at once."""
        z = np.asarray(z, dtype=float)
        p = self.X.shape[1]
        zn = np.linalg.norm(z)
        if zn == 0:
            return np.zeros(p)
        if lam == 0:
            return np.array([self.hdce(j, z, 0.0) for j in range(p)])
        if math.isinf(lam):
            num = self.X.T @ z
            den = np.linalg.norm(self.X, axis=0) * zn
        else:
            # u_j is a positive multiple of B x_j with B = (X X' + lam I)^-1
            if self._svd is None:
                U, s, Wt = linalg.svd(self.X, full_matrices=False)
                self._svd = (U, s, Wt.T)
            U, s, W = self._svd
            f = s / (s * s + lam)
            num = W @ (f * (U.T @ z))
            den = np.sqrt((W * W) @ (f * f)) * zn
        out = np.zeros(p)
        ok = den > 1e-300
        out[ok] = num[ok] / den[ok]
        return np.clip(out, -1.0, 1.0)


def tilt_residualize(design, j, lambda0, v, form="dual"):
    return TiltedCorrelation(design).residualize(j, lambda0, v, form=form)


def hdce(design, j, z, lambda0):
    return TiltedCorrelation(design).hdce(j, z, lambda0)


def _ridge_coef(XA, y, ridge):
    G = XA.T @ XA
    if ridge == 0:
        if np.linalg.matrix_rank(XA) < XA.shape[1]:
            raise SingularFit("collinear active columns with ridge_active = 0")
        return linalg.solve(G, XA.T @ y, assume_a="pos")
    return linalg.solve(G + ridge * np.eye(G.shape[0]), XA.T @ y, assume_a="pos")


def current_residual(design, active, ridge_active=1.0):
    """Residual of ``Y`` after ridge regression on the active columns."""
    y = design.y_stacked
    active = list(active)
    if not active:
        return y.copy()
    XA = design.x_stacked[:, active]
    return y - XA @ _ridge_coef(XA, y, ridge_active)


def lambda0_knots(design, z, k, active=()):
    """Ridge level for iteration ``k``: ``inf`` first, then a squared order statistic.

    For ``k >= 2`` this is the square of the k-th largest ``|X_j' z|`` over
    the columns not yet active.
    """
    if k < 1:
        raise InvalidInput("iteration index starts at 1")
    if k == 1:
        return math.inf
    inactive = np.setdiff1d(np.arange(design.n_covariates), np.asarray(list(active), dtype=int))
    if inactive.size == 0:
        return 0.0
    c = np.sort(np.abs(design.x_stacked[:, inactive].T @ z))[::-1]
    return float(c[min(k, c.size) - 1] ** 2)


def _rss(design, active, ridge):
    y = design.y_stacked
    active = list(active)
    if not active:
        return float(y @ y)
    XA = design.x_stacked[:, active]
    coef, _, rank, _ = linalg.lstsq(XA, y)
    if rank < XA.shape[1]:
        coef = _ridge_coef(XA, y, ridge if ridge > 0 else 1.0)
    r = y - XA @ coef
    return float(r @ r)


def _score(rss, n_obs, size, hn):
    if rss <= 0:
        return -math.inf
    return math.log(rss / n_obs) + size * hn


def gic_score(design, active, hn, ridge_active=1.0):
    """Quadratic-loss GIC: ``log(RSS / NT) + |active| * h_n``."""
    if len(active) >= design.n_obs:
        raise InvalidInput("GIC needs |active| < NT")
    return _score(_rss(design, active, ridge_active), design.n_obs, len(active), hn)


def prefix_gic(design, order, hn, ridge_active=1.0):
    """GIC of every prefix ``order[:k]``, ``k = 0..len(order)``."""
    y = design.y_stacked
    n = design.n_obs
    out = np.empty(len(order) + 1)
    out[0] = _score(float(y @ y), n, 0, hn)
    if not order:
        return out
    XA = design.x_stacked[:, list(order)]
    Q, R = np.linalg.qr(XA)
    diag = np.abs(np.diag(R))
    if np.all(diag > 1e-10 * np.linalg.norm(XA, axis=0)):
        # nested least squares: RSS drops by (q_k' y)^2 per added column
        drops = np.cumsum((Q.T @ y) ** 2)
        rss = np.maximum(float(y @ y) - drops, 0.0)
        for k in range(1, len(order) + 1):
            out[k] = _score(rss[k - 1], n, k, hn)
    else:
        for k in range(1, len(order) + 1):
            out[k] = _score(_rss(design, order[:k], ridge_active), n, k, hn)
    return out


def _rank(scores, candidates):
    """Candidates sorted by decreasing |score|, lowest index first on ties."""
    candidates = np.asarray(candidates, dtype=int)
    mag = np.abs(scores[candidates])
    order = np.lexsort((candidates, -mag))
    return candidates[order]


def dtccs_screen(design, params=None, keep_trace=True):
    """Dynamic tilted current correlation screening.

    Each iteration refits the current residual on the active set, ranks the
    remaining columns by absolute tilted correlation and adds the top ``d``.
    The loop stops after ``max_iters``, once ``cap_m`` columns are active, or
    as soon as the GIC of the active set rises.  The returned active set is
    the prefix (in selection order) with the smallest GIC.
    """
    params = params or ScreeningParams()
    n, p = design.n_obs, design.n_covariates
    if n < 2 or p < 1:
        raise InvalidInput("empty design")
    d, cap, hn = params.resolve(n, p)
    tc = TiltedCorrelation(design)
    active = []
    records, trace = [], {}
    prev_gic = gic_score(design, [], hn, params.ridge_active)
    prev_lam = math.inf
    stop = "max_iters"
    for k in range(1, params.max_iters + 1):
        if len(active) >= cap:
            stop = "cap"
            break
        z = current_residual(design, active, params.ridge_active)
        if params.lambda0_schedule == "knots":
            lam = min(prev_lam, lambda0_knots(design, z, k, active))
        else:
            lam = params.lambda0_at(k)
        prev_lam = lam
        rho = tc.hdce_all(z, lam)
        inactive = np.setdiff1d(np.arange(p), np.asarray(active, dtype=int))
        take = min(d, cap - len(active), inactive.size)
        picked = tuple(int(j) for j in _rank(rho, inactive)[:take])
        active.extend(picked)
        g = gic_score(design, active, hn, params.ridge_active)
        records.append(IterationRecord(picked, lam, g, g - prev_gic))
        if keep_trace:
            trace[k] = rho
        if g > prev_gic:
            stop = "gic"
            break
        prev_gic = g
        if inactive.size == take:
            stop = "exhausted"
            break
    scores = prefix_gic(design, active, hn, params.ridge_active)
    best = int(np.argmin(scores[1:])) + 1 if active else 0
    info = {"d": d, "cap_m": cap, "gic_hn": hn, "stop": stop, "n_selected": best,
            "prefix_gic": scores.tolist()}
    return ScreeningResult(DTCCS, tuple(active[:best]), records, trace, info)


def sis_screen(design, keep=None):
    """Keep the ``keep`` columns with the largest ``|X_j' Y|``."""
    keep = default_keep(design.n_obs) if keep is None else int(keep)
    if keep < 1:
        raise InvalidInput("keep must be >= 1")
    score = design.x_stacked.T @ design.y_stacked
    order = _rank(score, np.arange(design.n_covariates))
    keep = min(keep, order.size)
    return ScreeningResult(SIS, tuple(int(j) for j in order[:keep]), info={"keep": keep})


def holp_coefficients(X, y):
    """Minimum-norm interpolator ``X'(XX')^-1 y`` and the jitter used (0 if none).

    A singular ``XX'`` gets a ridge of ``1e-8 * trace / n``.  When ``p <= n``
    the least-squares solution is returned instead.
    """
    n, p = X.shape
    if p <= n:
        return linalg.lstsq(X, y)[0], 0.0
    K = X @ X.T
    evals = linalg.eigvalsh(K)
    jitter = 0.0
    if evals[0] <= 1e-10 * max(evals[-1], 1e-300):
        jitter = 1e-8 * np.trace(K) / n
    return X.T @ linalg.solve(K + jitter * np.eye(n), y, assume_a="pos"), jitter


def holp_screen(design, keep=None):
    """Rank columns by ``|beta_j|`` of the minimum-norm interpolator."""
    keep = default_keep(design.n_obs) if keep is None else int(keep)
    if keep < 1:
        raise InvalidInput("keep must be >= 1")
    beta, jitter = holp_coefficients(design.x_stacked, design.y_stacked)
    order = _rank(beta, np.arange(design.n_covariates))
    keep = min(keep, order.size)
    return ScreeningResult(HOLP, tuple(int(j) for j in order[:keep]),
                           info={"keep": keep, "jitter": jitter})


def screen(design, method=DTCCS, params=None, keep=None, keep_trace=True):
    """Dispatch to ``dtccs_screen``, ``sis_screen`` or ``holp_screen``."""
    if method == DTCCS:
        return dtccs_screen(design, params, keep_trace)
    if method == SIS:
        return sis_screen(design, keep)
    if method == HOLP:
        return holp_screen(design, keep)
    raise InvalidInput(f"unknown screening method {method!r}")
