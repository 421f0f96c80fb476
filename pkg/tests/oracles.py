"""Slow, direct reference computations used as test oracles.

Nothing here calls into the package's numerical code paths; each function
evaluates the defining formula with dense matrices, explicit inverses,
quadrature or brute-force search.
"""
import numpy as np
from scipy import integrate


def make_design(n_subjects, n_times, p, seed, y=None):
    """Tiny ``StackedDesign``-like data built by hand (mean 0, norm sqrt(n))."""
    from panelcp.panel import StackedDesign

    rng = np.random.default_rng(seed)
    n = n_subjects * n_times
    X = rng.standard_normal((n, p))
    X -= X.mean(axis=0)
    X /= np.sqrt((X ** 2).sum(axis=0) / n)
    if y is None:
        y = X[:, :min(2, p)].sum(axis=1) + rng.standard_normal(n)
    y = y - y.mean()
    return StackedDesign(y, X, n_subjects, n_times)


# --- screening -------------------------------------------------------------

def tilt_primal(X, j, lam, v):
    """``(I - H_j) v`` with the explicit (p-1) x (p-1) ridge inverse."""
    Xm = np.delete(X, j, axis=1)
    H = Xm @ np.linalg.inv(Xm.T @ Xm + lam * np.eye(Xm.shape[1])) @ Xm.T
    return v - H @ v


def hdce_direct(X, j, z, lam):
    u = tilt_primal(X, j, lam, X[:, j])
    a = np.linalg.norm(u) * np.linalg.norm(z)
    return 0.0 if a == 0 else float(u @ z / a)


def ridge_residual(X, y, active, lam):
    XA = X[:, list(active)]
    coef = np.linalg.inv(XA.T @ XA + lam * np.eye(XA.shape[1])) @ XA.T @ y
    return y - XA @ coef


def pinv_interpolator(X, y):
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    return Vt.T @ ((U.T @ y) / s)


# --- penalties -------------------------------------------------------------

def scad_quad(x, lam, a):
    f = lambda t: lam * min(1.0, max(a - t / lam, 0.0) / (a - 1.0))
    return _quad(f, x, [lam, a * lam])


def mcp_quad(x, lam, a):
    f = lambda t: lam * max(1.0 - t / (a * lam), 0.0)
    return _quad(f, x, [a * lam])


def lasso_quad(x, lam, a=None):
    return lam * x


def _quad(f, x, kinks):
    pts = [k for k in kinks if 0 < k < x]
    val, _ = integrate.quad(f, 0.0, x, points=pts or None, epsabs=1e-12, epsrel=1e-12,
                            limit=200)
    return val


QUAD = {"lasso": lasso_quad, "scad": scad_quad, "mcp": mcp_quad}


def pen_closed(kind, x, lam, a):
    """Independent re-statement of the closed forms (used by brute-force oracles)."""
    x = abs(x)
    if kind == "lasso":
        return lam * x
    if kind == "scad":
        if x <= lam:
            return lam * x
        if x <= a * lam:
            return (2 * a * lam * x - x * x - lam * lam) / (2 * (a - 1))
        return lam * lam * (a + 1) / 2
    if x <= a * lam:
        return lam * x - x * x / (2 * a)
    return a * lam * lam / 2


# --- cumulative design -----------------------------------------------------

def dense_lower_a(T, m):
    """The blocked lower-triangular matrix of identities (beta = A theta)."""
    return np.kron(np.tril(np.ones((T, T))), np.eye(m))


def dense_block_diag(blocks):
    T, N, m = blocks.shape
    X = np.zeros((T * N, T * m))
    for t in range(T):
        X[t * N:(t + 1) * N, t * m:(t + 1) * m] = blocks[t]
    return X


def dense_xstar(blocks):
    T, N, m = blocks.shape
    return dense_block_diag(blocks) @ dense_lower_a(T, m)


def dense_objective(blocks, y, theta, kind, lam, a, weight, metrics=None, pen_first=False):
    """``(1/NT)||y - X* theta||^2 + w sum_t pen(||W_t theta_t||)`` with a dense X*."""
    T, N, m = blocks.shape
    theta = np.asarray(theta, dtype=float).reshape(T, m)
    r = y - dense_xstar(blocks) @ theta.ravel()
    total = r @ r / (T * N)
    for t in range(0 if pen_first else 1, T):
        v = theta[t] if metrics is None else metrics[t] @ theta[t]
        total += weight * pen_closed(kind, np.linalg.norm(v), lam, a)
    return total


def orthonormal_metrics(blocks):
    """``R_t`` with ``R_t' R_t = (1/NT) X*_t' X*_t`` from the dense X*."""
    T, N, m = blocks.shape
    Xs = dense_xstar(blocks)
    out = []
    for t in range(T):
        B = Xs[:, t * m:(t + 1) * m]
        out.append(np.linalg.cholesky(B.T @ B / (T * N)).T)
    return out


def pen_array(kind, x, lam, a):
    x = np.abs(x)
    if kind == "lasso":
        return lam * x
    if kind == "scad":
        return np.where(x <= lam, lam * x,
                        np.where(x <= a * lam, (2 * a * lam * x - x * x - lam * lam) / (2 * (a - 1)),
                                 lam * lam * (a + 1) / 2))
    return np.where(x <= a * lam, lam * x - x * x / (2 * a), a * lam * lam / 2)


def grid_minimize_scalar_blocks(blocks, y, kind, lam, a, weight, metrics=None,
                                lo=-3.0, hi=3.0, step=0.05, refine=5, starts=8):
    """Brute-force minimizer over theta in [lo, hi]^T for m = 1.

    A full grid at ``step`` is followed by ``refine`` rounds of local grids
    (step shrinking by 10 each round) around each of the ``starts`` best
    coarse points that are not grid neighbours of a better one.
    """
    T, N, m = blocks.shape
    assert m == 1
    Xs = dense_xstar(blocks)
    G = Xs.T @ Xs / (T * N)
    c = Xs.T @ y / (T * N)
    yy = y @ y / (T * N)
    scale = np.ones(T) if metrics is None else np.array([float(M[0, 0]) for M in metrics])

    def objective_many(P):
        quad = yy - 2 * P @ c + np.einsum("ki,ij,kj->k", P, G, P)
        pen = np.zeros(P.shape[0])
        for t in range(1, T):
            pen += pen_array(kind, scale[t] * P[:, t], lam, a)
        return quad + weight * pen

    axis = np.arange(lo, hi + step / 2, step)
    mesh = np.stack(np.meshgrid(*([axis] * T), indexing="ij"), axis=-1).reshape(-1, T)
    f = objective_many(mesh)
    order = np.argsort(f, kind="stable")
    seeds = []
    for k in order:
        cand = mesh[k]
        if all(np.max(np.abs(cand - s)) > 1.5 * step for s in seeds):
            seeds.append(cand)
        if len(seeds) == starts:
            break
    best, fbest = None, np.inf
    local = np.arange(-10, 11) / 10.0
    offsets = np.stack(np.meshgrid(*([local] * T), indexing="ij"), axis=-1).reshape(-1, T)
    for s in seeds:
        cur, fcur, h = s.copy(), objective_many(s[None])[0], step
        for _ in range(refine):
            cand = cur + offsets * h
            fc = objective_many(cand)
            k = int(np.argmin(fc))
            if fc[k] < fcur:
                cur, fcur = cand[k].copy(), fc[k]
            h /= 10
        if fcur < fbest:
            best, fbest = cur, fcur
    return best, fbest


def prox_grid(kind, zeta, nu, lam, a, hi=None, step=1e-5):
    """Dense grid minimizer of ``nu/2 (r - zeta)^2 + pen(r)`` over r >= 0."""
    hi = max(zeta, a * lam) + 1.0 if hi is None else hi
    r = np.arange(0.0, hi, step)
    f = 0.5 * nu * (r - zeta) ** 2 + pen_array(kind, r, lam, a)
    k = int(np.argmin(f))
    return r[k], f[k]
