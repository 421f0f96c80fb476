"""Balanced panel data: storage, CSV I/O, standardization and simulation.

Stacked designs are stored time-major: the ``N`` rows observed at time ``t``
(0-based) occupy positions ``t*N .. (t+1)*N - 1``.  Screening is invariant
to row order, and the change-point stage needs contiguous time blocks, so a
single layout serves both stages.
"""
import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_open
from .errors import (
    DegenerateColumn,
    InvalidInput,
    MalformedInput,
    ParseError,
    RankWarning,
    ScenarioTooSmall,
    UnbalancedPanel,
)

SEED_MASK = (1 << 64) - 1


def make_rng(seed):
    """PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & SEED_MASK))


def replication_seed(seed, rep):
    """Seed of replication ``rep``: ``seed XOR rep``."""
    return (int(seed) ^ int(rep)) & SEED_MASK


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """N subjects observed at the same T times.

    ``y`` has shape (N, T) and ``x`` has shape (N, T, p).
    """

    y: np.ndarray
    x: np.ndarray
    subject_ids: tuple = None
    time_ids: tuple = None

    def __post_init__(self):
        y = _frozen(self.y)
        x = _frozen(self.x)
        if y.ndim != 2:
            raise InvalidInput(f"y must be N x T, got shape {y.shape}")
        if x.ndim == 2:
            x = _frozen(x[:, :, None])
        if x.ndim != 3 or x.shape[:2] != y.shape:
            raise InvalidInput(f"x shape {x.shape} does not match y shape {y.shape}")
        n, t, p = x.shape
        if n < 2 or t < 2 or p < 1:
            raise InvalidInput(f"need N >= 2, T >= 2, p >= 1 (got N={n}, T={t}, p={p})")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise InvalidInput("panel contains NaN or Inf")
        subjects = tuple(range(1, n + 1)) if self.subject_ids is None else tuple(self.subject_ids)
        times = tuple(range(1, t + 1)) if self.time_ids is None else tuple(self.time_ids)
        if len(subjects) != n or len(times) != t:
            raise InvalidInput("subject_ids/time_ids lengths do not match the data")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "subject_ids", subjects)
        object.__setattr__(self, "time_ids", times)

    @property
    def n_subjects(self):
        return self.y.shape[0]

    @property
    def n_times(self):
        return self.y.shape[1]

    @property
    def n_covariates(self):
        return self.x.shape[2]


@dataclass(frozen=True)
class StackedDesign:
    """Centered/standardized ``NT x p`` design and ``NT`` response.

    Columns of ``x_stacked`` correspond to the original covariates listed in
    ``kept_columns`` (0-based); constant columns are dropped and carry a
    scale of 0 in ``col_scales``.
    """

    y_stacked: np.ndarray
    x_stacked: np.ndarray
    n_subjects: int
    n_times: int
    col_means: np.ndarray = None
    col_scales: np.ndarray = None
    subject_means_y: np.ndarray = None
    kept_columns: np.ndarray = None
    time_ids: tuple = None
    subject_ids: tuple = None

    def __post_init__(self):
        x = _frozen(self.x_stacked)
        y = _frozen(self.y_stacked).ravel()
        nt = self.n_subjects * self.n_times
        if x.ndim != 2 or x.shape[0] != nt or y.shape[0] != nt:
            raise InvalidInput(
                f"stacked shapes x={x.shape}, y={y.shape} inconsistent with N*T={nt}")
        p = x.shape[1]
        object.__setattr__(self, "x_stacked", x)
        object.__setattr__(self, "y_stacked", y)
        if self.kept_columns is None:
            object.__setattr__(self, "kept_columns", np.arange(p))
        kept = np.asarray(self.kept_columns, dtype=int)
        kept.setflags(write=False)
        object.__setattr__(self, "kept_columns", kept)
        n_orig = int(kept.max()) + 1 if kept.size else 0
        if self.col_means is None:
            object.__setattr__(self, "col_means", np.zeros(n_orig))
        if self.col_scales is None:
            object.__setattr__(self, "col_scales", np.ones(n_orig))
        if self.subject_means_y is None:
            object.__setattr__(self, "subject_means_y", np.zeros(self.n_subjects))
        if self.time_ids is None:
            object.__setattr__(self, "time_ids", tuple(range(1, self.n_times + 1)))
        if self.subject_ids is None:
            object.__setattr__(self, "subject_ids", tuple(range(1, self.n_subjects + 1)))

    @property
    def n_obs(self):
        return self.n_subjects * self.n_times

    @property
    def n_covariates(self):
        return self.x_stacked.shape[1]

    def row_index(self, i, t):
        """Stacked row of subject ``i`` at time ``t`` (both 0-based)."""
        if not (0 <= i < self.n_subjects and 0 <= t < self.n_times):
            raise IndexError((i, t))
        return t * self.n_subjects + i

    def time_block(self, t):
        return slice(t * self.n_subjects, (t + 1) * self.n_subjects)

    def covariate_ids(self, columns):
        """1-based original covariate numbers for design column positions."""
        return [int(self.kept_columns[c]) + 1 for c in columns]

    def columns_for_ids(self, ids):
        """Design column positions for 1-based original covariate numbers."""
        lookup = {int(k) + 1: pos for pos, k in enumerate(self.kept_columns)}
        try:
            return [lookup[int(i)] for i in ids]
        except KeyError as exc:
            raise InvalidInput(f"covariate x{exc.args[0]} is not in the design") from None

    def to_panel(self):
        """Unstack into a ``PanelDataset`` (kept columns only)."""
        n, t = self.n_subjects, self.n_times
        y = self.y_stacked.reshape(t, n).T
        x = self.x_stacked.reshape(t, n, -1).transpose(1, 0, 2)
        return PanelDataset(y, x, self.subject_ids, self.time_ids)


def standardize_and_stack(data):
    """Remove individual effects and standardize into a time-major stack.

    The response is demeaned within each subject (which removes an additive
    subject effect exactly) and then globally centered.  Each covariate
    column is centered and scaled to Euclidean norm ``sqrt(NT)``.
    """
    n, t, p = data.n_subjects, data.n_times, data.n_covariates
    nt = n * t
    subj_means = data.y.mean(axis=1)
    y = data.y - subj_means[:, None]
    # stack time-major: row t*N + i
    y_st = y.T.reshape(nt)
    y_st = y_st - y_st.mean()
    x_st = data.x.transpose(1, 0, 2).reshape(nt, p)
    means = x_st.mean(axis=0)
    xc = x_st - means
    scales = np.sqrt(np.einsum("ij,ij->j", xc, xc) / nt)
    tiny = 1e-12 * np.maximum(1.0, np.abs(means))
    degenerate = scales <= tiny
    if degenerate.any():
        dropped = [int(j) + 1 for j in np.flatnonzero(degenerate)]
        warnings.warn(f"dropping constant covariate columns {dropped}", DegenerateColumn,
                      stacklevel=2)
        scales = np.where(degenerate, 0.0, scales)
    kept = np.flatnonzero(~degenerate)
    if kept.size == 0:
        raise InvalidInput("every covariate column is constant")
    xs = xc[:, kept] / scales[kept]
    if xs.shape[1] >= nt:
        # centering costs one dimension, so NT - 1 is the attainable rank
        rank = np.linalg.matrix_rank(xs)
        if rank < nt - 1:
            warnings.warn(f"stacked design has row rank {rank} < NT - 1 = {nt - 1}",
                          RankWarning, stacklevel=2)
    return StackedDesign(
        y_stacked=y_st,
        x_stacked=xs,
        n_subjects=n,
        n_times=t,
        col_means=_frozen(means),
        col_scales=_frozen(scales),
        subject_means_y=_frozen(subj_means),
        kept_columns=kept,
        time_ids=data.time_ids,
        subject_ids=data.subject_ids,
    )


# ---------------------------------------------------------------------------
# CSV

DEFAULT_SCHEMA = {"subject": "subject", "time": "time", "y": "y", "x": None}


def _sort_key_labels(labels):
    try:
        keyed = [(float(s), s) for s in labels]
    except ValueError:
        return sorted(labels)
    return [s for _, s in sorted(keyed)]


def _as_label(s):
    try:
        v = float(s)
    except ValueError:
        return s
    return int(v) if v.is_integer() and "." not in s and "e" not in s.lower() else v


def load_panel_csv(path, schema=None):
    """Read a balanced panel from CSV.

    The default layout is a header ``subject,time,y,x1,...,xp`` and one
    observation per line.  ``schema`` may rename the ``subject``, ``time``
    and ``y`` columns and give an explicit list of covariate columns under
    ``"x"``; by default every remaining column is a covariate, in header
    order.
    """
    sch = dict(DEFAULT_SCHEMA)
    if schema:
        sch.update(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedInput(f"{path}: empty file") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    col = {name: k for k, name in enumerate(header)}
    for key in ("subject", "time", "y"):
        if sch[key] not in col:
            raise MalformedInput(f"{path}: missing column {sch[key]!r}")
    if sch["x"] is None:
        special = {sch["subject"], sch["time"], sch["y"]}
        xcols = [h for h in header if h not in special]
    else:
        xcols = list(sch["x"])
        missing = [h for h in xcols if h not in col]
        if missing:
            raise MalformedInput(f"{path}: missing covariate columns {missing}")
    if not xcols:
        raise MalformedInput(f"{path}: no covariate columns")
    ks, kt, ky = col[sch["subject"]], col[sch["time"]], col[sch["y"]]
    kx = [col[h] for h in xcols]

    cells = {}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header) or any(row[k].strip() == "" for k in [ks, kt, ky] + kx):
            raise MalformedInput(f"{path}:{lineno}: missing cell")
        s, tm = row[ks].strip(), row[kt].strip()
        try:
            vals = [float(row[ky])] + [float(row[k]) for k in kx]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        if (s, tm) in cells:
            raise UnbalancedPanel(f"{path}:{lineno}: duplicate observation ({s}, {tm})")
        cells[(s, tm)] = vals

    subjects = list(dict.fromkeys(s for s, _ in cells))
    times = _sort_key_labels(list(dict.fromkeys(tm for _, tm in cells)))
    if len(cells) != len(subjects) * len(times):
        have = {}
        for s, tm in cells:
            have.setdefault(s, set()).add(tm)
        for s in subjects:
            gap = [tm for tm in times if tm not in have[s]]
            if gap:
                raise UnbalancedPanel(f"{path}: subject {s} missing time(s) {gap}")
    arr = np.array([[cells[(s, tm)] for tm in times] for s in subjects], dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{path}: non-finite value")
    return PanelDataset(
        y=arr[:, :, 0],
        x=arr[:, :, 1:],
        subject_ids=tuple(_as_label(s) for s in subjects),
        time_ids=tuple(_as_label(tm) for tm in times),
    )


def write_panel_csv(data, path):
    """Write ``data`` in the default CSV layout with 17 significant digits."""
    p = data.n_covariates
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "time", "y"] + [f"x{j + 1}" for j in range(p)])
        for i, s in enumerate(data.subject_ids):
            for t, tm in enumerate(data.time_ids):
                vals = [data.y[i, t], *data.x[i, t]]
                w.writerow([s, tm] + [format(v, ".17g") for v in vals])


# ---------------------------------------------------------------------------
# Simulation

N_RELEVANT = 6


@dataclass(frozen=True)
class SimulationScenario:
    n_subjects: int
    n_times: int
    n_covariates: int
    signal_high: float = 7.0
    signal_low: float = 2.0
    signal_const: float = 5.0
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_subjects, self.n_times) < 2:
            raise InvalidInput("need at least 2 subjects and 2 time points")
        if self.n_covariates < N_RELEVANT:
            raise ScenarioTooSmall(
                f"the coefficient schedule needs p >= {N_RELEVANT}, got {self.n_covariates}")
        if self.noise_sd <= 0:
            raise InvalidInput("noise_sd must be positive")


@dataclass(frozen=True)
class GroundTruth:
    true_covariates: tuple
    true_change_points: tuple
    seed: int
    beta: np.ndarray = field(repr=False, compare=False, default=None)

    def to_json(self):
        return {
            "true_covariates": list(self.true_covariates),
            "true_change_points": list(self.true_change_points),
            "seed": self.seed,
        }


def true_change_points(n_times):
    """Times (1-based) at which the simulated coefficients jump."""
    t = n_times
    pts = {t // 3 + 1, t // 2 + 1, (2 * t) // 3 + 1}
    return tuple(sorted(c for c in pts if 2 <= c <= t))


def coefficient_schedule(sc):
    """``T x p`` matrix of coefficients; row ``t`` holds beta at time ``t+1``."""
    t_idx = np.arange(1, sc.n_times + 1)
    T = sc.n_times
    hi, lo = sc.signal_high, sc.signal_low
    beta = np.zeros((T, sc.n_covariates))
    b12 = np.where(t_idx <= T // 2, lo, hi)
    b34 = np.where(t_idx <= T // 3, lo, np.where(t_idx <= (2 * T) // 3, hi, lo))
    beta[:, 0] = beta[:, 1] = b12
    beta[:, 2] = beta[:, 3] = b34
    beta[:, 4] = beta[:, 5] = sc.signal_const
    return beta


def simulate_panel(scenario, seed=None):
    """Draw a synthetic panel with three coefficient change points.

    ``y_it = alpha_i + x_it' beta_t + u_it`` with standard normal subject
    effects and covariates and ``N(0, noise_sd^2)`` errors.  Covariates 1-2
    switch low->high at ``T//2 + 1``, covariates 3-4 switch low->high->low at
    ``T//3 + 1`` and ``2T//3 + 1``, covariates 5-6 are constant and the rest
    are irrelevant.

    Returns ``(PanelDataset, GroundTruth)``.
    """
    sc = scenario
    seed = sc.seed if seed is None else seed
    rng = make_rng(seed)
    n, T, p = sc.n_subjects, sc.n_times, sc.n_covariates
    alpha = rng.standard_normal(n)
    x = rng.standard_normal((n, T, p))
    u = sc.noise_sd * rng.standard_normal((n, T))
    beta = coefficient_schedule(sc)
    y = alpha[:, None] + np.einsum("itj,tj->it", x, beta) + u
    truth = GroundTruth(
        true_covariates=tuple(range(1, N_RELEVANT + 1)),
        true_change_points=true_change_points(T),
        seed=int(seed),
        beta=beta,
    )
    return PanelDataset(y, x), truth

