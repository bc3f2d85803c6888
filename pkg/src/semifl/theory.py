"""Box-kernel classification with pseudo-labeled strong augmentation.

A binary task is described by its regression function ``m(x) = P(Y=1 | X=x)``.
The labeled/test distribution and the unlabeled distribution may differ. The
semi-supervised learner

1. keeps unlabeled points where an initial estimate is confident,
   ``min(1 - m_init(x), m_init(x)) <= delta``;
2. labels each kept point by thresholding ``m_init`` at 1/2 and replaces the
   point by a strongly augmented copy;
3. fits a Nadaraya-Watson box-kernel estimate on labeled plus augmented data.

Excess risk over the Bayes rule is estimated by Monte Carlo from the identity
``R = E[|2 m(X) - 1| * 1{C_hat(X) != C(X)}]`` with ``X`` drawn from the
labeled distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError


def _as_points(x, d: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if (d is None or d == 1) else x.reshape(1, -1)
    return x


@dataclass
class KernelClassifier:
    """Stored sample plus bandwidth; ``m_hat`` is the box-kernel Nadaraya-Watson estimate."""

    points: np.ndarray
    labels: np.ndarray
    bandwidth: float
    _index: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.points = _as_points(self.points)
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if len(self.points) != len(self.labels):
            raise ConfigError("points and labels differ in length")
        if not self.bandwidth > 0:
            raise ConfigError("bandwidth must be > 0")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise ConfigError("labels must be 0 or 1")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def _build(self):
        if self._index is None:
            if self.dim == 1:
                order = np.argsort(self.points[:, 0], kind="stable")
                xs = self.points[order, 0]
                cs = np.concatenate([[0.0], np.cumsum(self.labels[order])])
                self._index = ("sorted", xs, cs)
            else:
                pos = self.points[self.labels == 1.0]
                self._index = ("tree", cKDTree(self.points), cKDTree(pos) if len(pos) else None)
        return self._index

    def neighbor_counts(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(points within the bandwidth, positive points within the bandwidth) per query."""
        q = _as_points(x, self.dim)
        if len(self) == 0:
            return np.zeros(len(q)), np.zeros(len(q))
        kind, a, b = self._build()
        h = self.bandwidth
        if kind == "sorted":
            lo = np.searchsorted(a, q[:, 0] - h, side="left")
            hi = np.searchsorted(a, q[:, 0] + h, side="right")
            return (hi - lo).astype(np.float64), b[hi] - b[lo]
        total = np.asarray(a.query_ball_point(q, r=h, return_length=True), dtype=np.float64)
        pos = (np.asarray(b.query_ball_point(q, r=h, return_length=True), dtype=np.float64)
               if b is not None else np.zeros(len(q)))
        return total, pos


def nw_estimate(clf: KernelClassifier, x) -> np.ndarray:
    """Fraction of positive labels within distance ``h``; 0 where no point is that close."""
    total, pos = clf.neighbor_counts(x)
    out = np.zeros_like(total)
    hit = total > 0
    out[hit] = pos[hit] / total[hit]
    return out


def classify(clf: KernelClassifier, x) -> np.ndarray:
    """``1{m_hat(x) - 1/2}`` with the indicator equal to 1 at zero."""
    return (nw_estimate(clf, x) >= 0.5).astype(np.int64)


# -- tasks -----------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Logistic ``m(x) = 1 / (1 + exp(-beta . x))``; labeled X ~ N(0, I), unlabeled X ~ Laplace."""

    beta: tuple[float, ...] = (2.0,)
    unlabeled_scale: float = 2.0

    @property
    def dim(self) -> int:
        return len(self.beta)

    def m(self, x) -> np.ndarray:
        z = _as_points(x, self.dim) @ np.asarray(self.beta)
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic

    def bayes(self, x) -> np.ndarray:
        return (self.m(x) >= 0.5).astype(np.int64)

    def sample_labeled_x(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(size=(n, self.dim))

    def sample_labeled(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        x = self.sample_labeled_x(n, rng)
        return x, (rng.random(n) < self.m(x)).astype(np.float64)

    def sample_unlabeled(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.laplace(scale=self.unlabeled_scale, size=(n, self.dim))


def shrink_operator(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``gamma * x`` with ``gamma ~ Uniform(0, 1)`` per point: pulls tail points toward the boundary."""
    return x * rng.random((len(x), 1))


def identity_operator(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.array(x, dtype=np.float64, copy=True)


OPERATORS: dict[str, Callable] = {"shrink": shrink_operator, "identity": identity_operator}


@dataclass(frozen=True)
class TheoryConfig:
    delta: float = 0.1
    zeta: float = 0.5
    n_init: int = 1000
    n_u_grid: tuple[int, ...] = (200, 800, 3200, 12800)
    operator: str = "shrink"
    mc_samples: int = 200_000
    bandwidth_scale: float = 1.0
    # exponents of the margin/smoothness/tail/coverage conditions, used for
    # the bandwidth rule and for reporting the theoretical rate
    alpha: float = 1.0
    q: float = 1.0
    s: float = 1.0
    v: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.delta < 0.5:
            raise ConfigError("delta must be in (0, 1/2)")
        if not 0.0 < self.zeta < 1.0:
            raise ConfigError("zeta must be in (0, 1)")
        grid = tuple(int(n) for n in self.n_u_grid)
        object.__setattr__(self, "n_u_grid", grid)
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1:
            raise ConfigError("n_u_grid must be a non-empty, strictly increasing list of positive sizes")
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown augmentation operator {self.operator!r}")
        if self.n_init < 1 or self.mc_samples < 1:
            raise ConfigError("n_init and mc_samples must be >= 1")
        if not self.bandwidth_scale > 0:
            raise ConfigError("bandwidth_scale must be > 0")


def ssl_rate_exponent(cfg: TheoryConfig, d: int) -> float:
    """Exponent of ``n_u`` in the risk bound of the augmented learner."""
    return cfg.q * (cfg.alpha + 1) / (cfg.q * (cfg.alpha + 3 + cfg.v + cfg.s) + d)


def labeled_rate_exponent(cfg: TheoryConfig, d: int) -> float:
    return cfg.q * (cfg.alpha + 1) / (cfg.q * (cfg.alpha + 3) + d)


def critical_zeta(cfg: TheoryConfig, d: int) -> float:
    """Below this ``zeta`` (with ``n_la ~ n_u^zeta``) the augmented learner has the better bound."""
    return (cfg.q * (cfg.alpha + 3) + d) / (cfg.q * (cfg.alpha + 3 + cfg.v + cfg.s) + d)


def ssl_bandwidth(cfg: TheoryConfig, n_u: int, d: int) -> float:
    return cfg.bandwidth_scale * n_u ** (-1.0 / (cfg.q * (cfg.alpha + 3 + cfg.v + cfg.s) + d))


def labeled_bandwidth(cfg: TheoryConfig, n_la: int, d: int) -> float:
    return cfg.bandwidth_scale * max(n_la, 1) ** (-1.0 / (cfg.q * (cfg.alpha + 3) + d))


# -- the three steps -------------------------------------------------------

def _m_values(m_init, x) -> np.ndarray:
    if isinstance(m_init, KernelClassifier):
        return nw_estimate(m_init, x)
    return np.asarray(m_init(x), dtype=np.float64).ravel()


def select_high_confidence(m_init, x_u, delta: float, require_support: bool = True) -> np.ndarray:
    """Indices of rows with ``min(1 - m_init(x), m_init(x)) <= delta``.

    For a kernel ``m_init``, a row with no stored point within the bandwidth
    has ``m_hat = 0`` by convention, which is a default rather than evidence.
    With ``require_support`` such rows are not treated as confident; without it
    every far tail point would be pseudo-labeled 0.
    """
    if not 0.0 < delta < 0.5:
        raise ConfigError("delta must be in (0, 1/2)")
    if isinstance(m_init, KernelClassifier):
        total, pos = m_init.neighbor_counts(x_u)
        m = np.divide(pos, total, out=np.zeros_like(total), where=total > 0)
        ok = np.minimum(1.0 - m, m) <= delta
        if require_support:
            ok &= total > 0
        return np.flatnonzero(ok)
    m = _m_values(m_init, x_u)
    return np.flatnonzero(np.minimum(1.0 - m, m) <= delta)


def augment_and_pseudolabel(x_sel, m_init, operator, rng: np.random.Generator):
    """Pseudo-labels from the original points, paired with augmented copies.

    Returns ``(y_hat, x_tilde)``.
    """
    x_sel = _as_points(x_sel)
    op = OPERATORS[operator] if isinstance(operator, str) else operator
    y_hat = (_m_values(m_init, x_sel) >= 0.5).astype(np.float64)
    return y_hat, op(x_sel, rng)


def train_ssl(d_l: tuple[np.ndarray, np.ndarray], d_high: tuple[np.ndarray, np.ndarray],
              bandwidth: float) -> KernelClassifier:
    """Kernel classifier over the union of labeled and pseudo-labeled augmented data.

    Both arguments are ``(x, y)`` pairs; duplicates are kept with multiplicity.
    """
    xl, yl = _as_points(d_l[0]), np.asarray(d_l[1], dtype=np.float64).ravel()
    yh, xh = np.asarray(d_high[0], dtype=np.float64).ravel(), _as_points(d_high[1])
    if len(yl) + len(yh) == 0:
        raise ConfigError("labeled and augmented sets are both empty")
    if len(yl) and len(yh) and xl.shape[1] != xh.shape[1]:
        raise ConfigError("labeled and augmented points differ in dimension")
    parts = [(x, y) for x, y in ((xl, yl), (xh, yh)) if len(y)]
    return KernelClassifier(np.concatenate([p[0] for p in parts]),
                            np.concatenate([p[1] for p in parts]), bandwidth)


def excess_risk(clf, task: SyntheticTask, n_mc: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo excess risk over the Bayes rule and its standard error.

    ``clf`` is a :class:`KernelClassifier` or any callable returning 0/1 labels.
    """
    if n_mc < 1:
        raise ConfigError("n_mc must be >= 1")
    rng = np.random.default_rng(seed)
    x = task.sample_labeled_x(n_mc, rng)
    pred = classify(clf, x) if isinstance(clf, KernelClassifier) else np.asarray(clf(x)).ravel()
    m = task.m(x)
    loss = np.abs(2.0 * m - 1.0) * (pred != task.bayes(x))
    se = float(loss.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else 0.0
    return float(loss.mean()), se


# -- rate experiment -------------------------------------------------------

@dataclass
class RateRow:
    n_u: int
    n_la: int
    seed: int
    risk_ssl: float
    risk_labeled: float
    se_ssl: float
    se_labeled: float
    n_high: int
    flagged: bool


@dataclass
class RateTable:
    rows: list[RateRow]
    slope_fit: float | None
    theory_exponent: float
    critical_zeta: float

    def medians(self) -> dict[int, dict[str, float]]:
        out = {}
        for n in sorted({r.n_u for r in self.rows}):
            cell = [r for r in self.rows if r.n_u == n]
            out[n] = {
                "risk_ssl": float(np.median([r.risk_ssl for r in cell])),
                "risk_labeled": float(np.median([r.risk_labeled for r in cell])),
                "se_ssl": float(np.median([r.se_ssl for r in cell])),
            }
        return out

    CSV_COLUMNS = ("n_u", "n_la", "seed", "risk_ssl", "risk_labeled", "slope_fit")

    def csv_rows(self) -> list[tuple]:
        return [(r.n_u, r.n_la, r.seed, r.risk_ssl, r.risk_labeled, self.slope_fit) for r in self.rows]


def run_cell(task: SyntheticTask, cfg: TheoryConfig, n_u: int, seed: int) -> RateRow:
    d = task.dim
    rng = np.random.default_rng([seed, n_u])
    x0, y0 = task.sample_labeled(cfg.n_init, rng)
    m_init = KernelClassifier(x0, y0, cfg.n_init ** (-1.0 / (2 + d)))
    n_la = int(round(n_u ** cfg.zeta))
    d_l = task.sample_labeled(n_la, rng)
    x_u = task.sample_unlabeled(n_u, rng)
    keep = select_high_confidence(m_init, x_u, cfg.delta)
    y_hat, x_tilde = augment_and_pseudolabel(x_u[keep], m_init, cfg.operator, rng)
    mc_seed = int(rng.integers(2**63))
    lab = KernelClassifier(d_l[0], d_l[1], labeled_bandwidth(cfg, n_la, d))
    r_l, se_l = excess_risk(lab, task, cfg.mc_samples, mc_seed)
    if len(keep) == 0:
        return RateRow(n_u, n_la, seed, r_l, r_l, se_l, se_l, 0, True)
    ssl = train_ssl(d_l, (y_hat, x_tilde), ssl_bandwidth(cfg, n_u, d))
    r_s, se_s = excess_risk(ssl, task, cfg.mc_samples, mc_seed)
    return RateRow(n_u, n_la, seed, r_s, r_l, se_s, se_l, len(keep), False)


def fit_loglog_slope(n: Sequence[float], risk: Sequence[float]) -> float | None:
    """Least-squares slope of log(risk) on log(n) over cells with positive risk."""
    pts = [(math.log(a), math.log(b)) for a, b in zip(n, risk) if b > 0]
    if len(pts) < 2:
        return None
    xs, ys = np.array(pts).T
    return float(np.polyfit(xs, ys, 1)[0])


def rate_experiment(task: SyntheticTask, cfg: TheoryConfig, seeds: Sequence[int]) -> RateTable:
    if not seeds:
        raise ConfigError("need at least one seed")
    rows = [run_cell(task, cfg, n_u, int(s)) for n_u in cfg.n_u_grid for s in seeds]
    table = RateTable(rows, None, ssl_rate_exponent(cfg, task.dim), critical_zeta(cfg, task.dim))
    med = table.medians()
    table.slope_fit = fit_loglog_slope(list(med), [v["risk_ssl"] for v in med.values()])
    return table
