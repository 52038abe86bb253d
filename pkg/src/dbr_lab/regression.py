"""Estimators over finite function classes: ERM, disagreement-based regression
(empirical, population and adaptive-threshold), the two-member star blend and
L-infinity regression, plus the risk functionals used to audit them.

Every argmin breaks ties towards the lowest member index within
``TIE_TOL``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DiscreteDistribution, FunctionClass, FunctionTable, RegressionDataset
from .errors import ClassSizeError, PreconditionViolation

TIE_TOL = 1e-12


@dataclass(frozen=True)
class FitResult:
    index: int
    objective_value: float
    tie_count: int = 1


@dataclass(frozen=True)
class DbrConfig:
    tau: float
    tie_tolerance: float = TIE_TOL

    def __post_init__(self):
        if not self.tau >= 0:
            raise PreconditionViolation(f"tau must be >= 0, got {self.tau}")


@dataclass(frozen=True)
class AdaptiveResult:
    index: int
    tau_hat: float
    grid: list
    empty_version_space: bool = False
    version_spaces: dict = field(default_factory=dict, compare=False)
    eps_stat: float = 0.0


def lowest_argmin(values, tol: float = TIE_TOL) -> FitResult:
    values = np.asarray(values, dtype=float)
    best = values.min()
    tied = np.flatnonzero(values <= best + tol)
    return FitResult(int(tied[0]), float(values[tied[0]]), int(tied.size))


def _check_grid(fclass: FunctionClass, *tables):
    for t in tables:
        if t.m != fclass.m:
            raise PreconditionViolation("inputs live on different grids")


# --------------------------------------------------------------------------
# ERM


def erm_objectives(dataset: RegressionDataset, fclass: FunctionClass) -> np.ndarray:
    dataset.check_grid(fclass.m)
    resid = fclass.matrix[:, dataset.cells] - dataset.y
    return np.mean(resid * resid, axis=1)


def erm_fit(dataset: RegressionDataset, fclass: FunctionClass, tie_tolerance: float = TIE_TOL) -> FitResult:
    return lowest_argmin(erm_objectives(dataset, fclass), tie_tolerance)


def erm_population(f_star: FunctionTable, d_train: DiscreteDistribution, fclass: FunctionClass,
                   tie_tolerance: float = TIE_TOL) -> FitResult:
    _check_grid(fclass, f_star, d_train)
    diff = fclass.matrix - f_star.values
    return lowest_argmin((diff * diff) @ d_train.weights, tie_tolerance)


# --------------------------------------------------------------------------
# Pairwise losses


def disagreement(f: np.ndarray, g: np.ndarray, tau: float) -> np.ndarray:
    return np.abs(f - g) >= tau


def empirical_pairwise_loss(f: FunctionTable, g: FunctionTable, tau: float,
                            dataset: RegressionDataset) -> float:
    """Filtered square-loss regret of ``f`` against ``g``, summed sample by sample."""
    if f.m != g.m:
        raise PreconditionViolation("f and g live on different grids")
    dataset.check_grid(f.m)
    fx = f.values[dataset.cells]
    gx = g.values[dataset.cells]
    y = dataset.y
    w = disagreement(fx, gx, tau)
    terms = np.where(w, (fx - y) ** 2 - (gx - y) ** 2, 0.0)
    return float(terms.sum() / dataset.n)


def population_pairwise_loss(f: FunctionTable, g: FunctionTable, tau: float,
                             f_star: FunctionTable, d_train: DiscreteDistribution) -> float:
    """Population pairwise loss via the noise-free identity
    E[(f-y)^2 - (g-y)^2 | x] = (f-f*)^2 - (g-f*)^2."""
    if not f.m == g.m == f_star.m == d_train.m:
        raise PreconditionViolation("inputs live on different grids")
    w = disagreement(f.values, g.values, tau)
    terms = np.where(w, (f.values - f_star.values) ** 2 - (g.values - f_star.values) ** 2, 0.0)
    return float(np.dot(d_train.weights, terms))


def _pair_tensor(F: np.ndarray, tau: float):
    diff = F[:, None, :] - F[None, :, :]
    return diff, np.abs(diff) >= tau


def empirical_loss_matrix(dataset: RegressionDataset, fclass: FunctionClass, tau: float) -> np.ndarray:
    """All pairwise empirical losses L[i, j] = L_hat(f_i; f_j).

    Uses per-cell counts and label sums, since
    (f-y)^2 - (g-y)^2 = (f-g)(f+g-2y) is linear in y given the cell.
    """
    counts, sums = dataset.cell_stats(fclass.m)
    occupied = counts > 0
    F = fclass.matrix[:, occupied]
    c, s = counts[occupied], sums[occupied]
    diff, w = _pair_tensor(F, tau)
    total = F[:, None, :] + F[None, :, :]
    terms = np.where(w, diff * (c * total - 2.0 * s), 0.0)
    return terms.sum(axis=2) / dataset.n


def population_loss_matrix(f_star: FunctionTable, d_train: DiscreteDistribution,
                           fclass: FunctionClass, tau: float) -> np.ndarray:
    _check_grid(fclass, f_star, d_train)
    F = fclass.matrix
    sq = (F - f_star.values) ** 2
    _, w = _pair_tensor(F, tau)
    terms = np.where(w, sq[:, None, :] - sq[None, :, :], 0.0)
    return terms @ d_train.weights


# --------------------------------------------------------------------------
# DBR


def dbr_fit(dataset: RegressionDataset, fclass: FunctionClass, config: DbrConfig) -> FitResult:
    inner = empirical_loss_matrix(dataset, fclass, config.tau).max(axis=1)
    return lowest_argmin(inner, config.tie_tolerance)


def dbr_population(f_star: FunctionTable, d_train: DiscreteDistribution, fclass: FunctionClass,
                   config: DbrConfig) -> FitResult:
    inner = population_loss_matrix(f_star, d_train, fclass, config.tau).max(axis=1)
    return lowest_argmin(inner, config.tie_tolerance)


def dyadic_grid(tau_min: float, tau_max: float = 1.0) -> list:
    """Powers of two in [tau_min, tau_max], ascending."""
    if tau_min > tau_max:
        return []
    hi = math.floor(math.log2(tau_max))
    lo = math.ceil(math.log2(tau_min)) if tau_min > 0 else hi
    grid = [2.0**i for i in range(lo, hi + 1)]
    return [t for t in grid if tau_min <= t <= tau_max]


def adaptive_tau_grid(n: int, k: int, delta: float, tau_max: float = 1.0):
    """Threshold grid and its lower end, resolved by a short fixed-point pass
    (the grid size enters the lower end through a log)."""
    size = 1
    tau_min = math.inf
    grid: list = []
    for _ in range(2):
        tau_min = math.sqrt(160.0 * math.log(k * size / delta) / (3.0 * n))
        grid = dyadic_grid(tau_min, tau_max)
        size = max(len(grid), 1)
    tau_min = math.sqrt(160.0 * math.log(k * size / delta) / (3.0 * n))
    return tau_min, grid


def dbr_adaptive_fit(dataset: RegressionDataset, fclass: FunctionClass, delta: float,
                     tau_max: float = 1.0) -> AdaptiveResult:
    """DBR with a data-driven threshold picked from a dyadic grid.

    For each grid threshold the near-minimizers of the min-max objective
    form a version space; the smallest threshold whose upward intersection
    is non-empty wins. When the grid is empty (tiny n) it is clamped to
    ``[tau_max]``; when even the top version space is empty the plain DBR
    fit at ``tau_max`` is returned with ``empty_version_space`` set.
    """
    if not 0 < delta < 1:
        raise PreconditionViolation("delta must lie in (0, 1)")
    k, n = len(fclass), dataset.n
    _, grid = adaptive_tau_grid(n, k, delta, tau_max)
    if not grid:
        grid = [float(tau_max)]
    eps_stat = 80.0 * math.log(k * len(grid) / delta) / (3.0 * n)

    spaces = {}
    for tau in grid:
        inner = empirical_loss_matrix(dataset, fclass, tau).max(axis=1)
        spaces[tau] = np.flatnonzero(inner <= eps_stat / 2)

    running = np.arange(k)
    tau_hat, chosen = None, None
    for tau in reversed(grid):
        running = np.intersect1d(running, spaces[tau])
        if running.size == 0:
            break
        tau_hat, chosen = tau, running
    if chosen is None:
        fit = dbr_fit(dataset, fclass, DbrConfig(grid[-1]))
        return AdaptiveResult(fit.index, grid[-1], grid, True, spaces, eps_stat)
    return AdaptiveResult(int(chosen[0]), tau_hat, grid, False, spaces, eps_stat)


# --------------------------------------------------------------------------
# Baselines from the discussion of other algorithms


def _golden_section(fn, a: float, b: float, tol: float = 1e-10) -> float:
    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return (a + b) / 2


def star_fit_population(fclass: FunctionClass, f_star: FunctionTable, d_train: DiscreteDistribution,
                        alpha_grid: int = 101):
    """Best blend (1 - alpha) * members[0] + alpha * members[1] in L2(d_train).

    Grid search, then golden-section refinement inside the bracketing grid
    cell; the refined alpha is kept only if it beats the grid value by more
    than the tie tolerance (rounding alone must not move alpha).
    """
    if len(fclass) != 2:
        raise ClassSizeError(f"star blend needs exactly 2 members, got {len(fclass)}")
    if alpha_grid < 2:
        raise PreconditionViolation("alpha_grid must be >= 2")
    _check_grid(fclass, f_star, d_train)
    a, b = fclass.matrix
    w = d_train.weights

    def objective(alpha):
        diff = (1 - alpha) * a + alpha * b - f_star.values
        return float(np.dot(w, diff * diff))

    alphas = np.linspace(0.0, 1.0, alpha_grid)
    values = np.array([objective(t) for t in alphas])
    i = lowest_argmin(values).index
    alpha = float(alphas[i])
    lo, hi = float(alphas[max(i - 1, 0)]), float(alphas[min(i + 1, alpha_grid - 1)])
    refined = _golden_section(objective, lo, hi)
    if objective(refined) < values[i] - TIE_TOL:
        alpha = refined
    return alpha, FunctionTable((1 - alpha) * a + alpha * b)


def linf_objectives(dataset: RegressionDataset, fclass: FunctionClass) -> np.ndarray:
    dataset.check_grid(fclass.m)
    return np.max(np.abs(fclass.matrix[:, dataset.cells] - dataset.y), axis=1)


def linf_fit(dataset: RegressionDataset, fclass: FunctionClass, tie_tolerance: float = TIE_TOL) -> FitResult:
    return lowest_argmin(linf_objectives(dataset, fclass), tie_tolerance)


# --------------------------------------------------------------------------
# Audit functionals


def filtered_excess_risk(f: FunctionTable, f_star: FunctionTable, d: DiscreteDistribution,
                         threshold: float, eps: float) -> float:
    """E_d[ 1{|f - f*| >= threshold} ((f - f*)^2 - eps^2) ]."""
    if threshold < 0:
        raise PreconditionViolation("threshold must be >= 0")
    if not f.m == f_star.m == d.m:
        raise PreconditionViolation("inputs live on different grids")
    gap = np.abs(f.values - f_star.values)
    terms = np.where(gap >= threshold, gap * gap - eps * eps, 0.0)
    return float(np.dot(d.weights, terms))


def tail_probability(f: FunctionTable, f_star: FunctionTable, d: DiscreteDistribution,
                     threshold: float) -> float:
    if threshold < 0:
        raise PreconditionViolation("threshold must be >= 0")
    gap = np.abs(f.values - f_star.values)
    return float(d.weights[gap >= threshold].sum())


def dbr_sample_bound(k: int, n: int, delta: float) -> float:
    """160 log(2|F|/delta) / (3n)."""
    return 160.0 * math.log(2 * k / delta) / (3.0 * n)


def concentration_slack(k: int, n: int, delta: float) -> float:
    """eps_stat = 80 log(|F|/delta) / (3n)."""
    return 80.0 * math.log(k / delta) / (3.0 * n)
