"""Discrete covariate grids, distributions, predictors and regression scenarios.

The covariate space [0, 1] is cut into ``m`` equal cells; every object here is
piecewise constant on those cells, so sums over cells are exact integrals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import PreconditionViolation, ScenarioError, SupportViolation

PROB_TOL = 1e-12
SEED_MASK = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & SEED_MASK))


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CovariateGrid:
    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise PreconditionViolation(f"grid size must be a positive integer, got {self.m}")
        object.__setattr__(self, "m", int(self.m))

    @property
    def width(self) -> float:
        return 1.0 / self.m

    def cell_bounds(self, i: int) -> tuple[float, float]:
        return i / self.m, (i + 1) / self.m

    def cell_of(self, x: float) -> int:
        """Index of the cell containing ``x``; the right endpoint 1 maps to the last cell."""
        if not 0.0 <= x <= 1.0:
            raise PreconditionViolation(f"x={x} outside [0, 1]")
        return min(int(math.floor(x * self.m)), self.m - 1)


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise PreconditionViolation("weights must be a non-empty vector")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise PreconditionViolation("weights must be finite and non-negative")
        total = float(w.sum())
        if abs(total - 1.0) > PROB_TOL:
            raise PreconditionViolation(f"weights sum to {total!r}, not 1")
        # already normalised at float precision: keep the bits (exact round trips)
        if abs(total - 1.0) > w.size * np.finfo(float).eps:
            w = w / total
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, m: int) -> "DiscreteDistribution":
        return cls(np.full(m, 1.0 / m))

    @classmethod
    def uniform_on(cls, m: int, cells: Sequence[int]) -> "DiscreteDistribution":
        w = np.zeros(m)
        cells = list(cells)
        w[cells] = 1.0 / len(cells)
        return cls(w)

    @property
    def m(self) -> int:
        return self.weights.size

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    def __eq__(self, other):
        return isinstance(other, DiscreteDistribution) and np.array_equal(self.weights, other.weights)


@dataclass(frozen=True, eq=False)
class FunctionTable:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise PreconditionViolation("function table must be a non-empty vector")
        if np.any(~np.isfinite(v)) or np.max(np.abs(v)) > 1.0:
            raise PreconditionViolation("function values must lie in [-1, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def constant(cls, m: int, c: float) -> "FunctionTable":
        return cls(np.full(m, float(c)))

    @property
    def m(self) -> int:
        return self.values.size

    def sup_distance(self, other: "FunctionTable") -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def __eq__(self, other):
        return isinstance(other, FunctionTable) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


@dataclass(frozen=True, eq=False)
class FunctionClass:
    members: tuple

    def __post_init__(self):
        members = tuple(
            f if isinstance(f, FunctionTable) else FunctionTable(f) for f in self.members
        )
        if not members:
            raise PreconditionViolation("function class must be non-empty")
        m = members[0].m
        if any(f.m != m for f in members):
            raise PreconditionViolation("all members must share one grid")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "_matrix", _frozen(np.stack([f.values for f in members])))

    @property
    def matrix(self) -> np.ndarray:
        """Members stacked row-wise, shape (|F|, m)."""
        return self._matrix

    @property
    def m(self) -> int:
        return self.members[0].m

    def __len__(self):
        return len(self.members)

    def __getitem__(self, i) -> FunctionTable:
        return self.members[i]

    def __iter__(self):
        return iter(self.members)

    def __eq__(self, other):
        return isinstance(other, FunctionClass) and np.array_equal(self.matrix, other.matrix)


@dataclass(frozen=True)
class NoiseModel:
    """Label noise around the regression function.

    ``two_point``: y = f*(x) +/- b with equal probability.
    ``bernoulli``: y in {0, 1} with P(y = 1) = f*(x).
    """

    kind: str
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("two_point", "bernoulli"):
            raise PreconditionViolation(f"unknown noise kind {self.kind!r}")
        if self.kind == "two_point" and not self.b >= 0:
            raise PreconditionViolation("two-point amplitude must be >= 0")

    @classmethod
    def two_point(cls, b: float) -> "NoiseModel":
        return cls("two_point", float(b))

    @classmethod
    def bernoulli(cls) -> "NoiseModel":
        return cls("bernoulli", 0.0)

    def check(self, f_star: FunctionTable):
        v = f_star.values
        if self.kind == "two_point":
            if self.b + np.max(np.abs(v)) > 1.0 + 1e-15:
                raise PreconditionViolation("two-point labels would leave [-1, 1]")
        elif np.any(v < 0) or np.any(v > 1):
            raise PreconditionViolation("Bernoulli noise needs f* in [0, 1]")

    def sample(self, means: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.kind == "bernoulli":
            return (u < means).astype(float)
        return means + np.where(u < 0.5, self.b, -self.b)

    def conditional_variance(self, means: np.ndarray) -> np.ndarray:
        if self.kind == "bernoulli":
            return means * (1.0 - means)
        return np.full_like(means, self.b**2, dtype=float)


def density_ratio_coefficient(d_test: DiscreteDistribution, d_train: DiscreteDistribution) -> float:
    if d_test.m != d_train.m:
        raise PreconditionViolation("distributions live on different grids")
    t, s = d_test.weights, d_train.weights
    bad = (t > 0) & (s == 0)
    if np.any(bad):
        raise SupportViolation(f"d_test has mass on cells {np.flatnonzero(bad).tolist()} where d_train is zero")
    mask = t > 0
    return float(np.max(t[mask] / s[mask]))


def misspecification_level(fclass: FunctionClass, f_star: FunctionTable) -> float:
    """min over members of the sup-norm distance to ``f_star``."""
    if fclass.m != f_star.m:
        raise PreconditionViolation("class and f_star live on different grids")
    return float(np.min(np.max(np.abs(fclass.matrix - f_star.values), axis=1)))


def risk(f: FunctionTable, f_star: FunctionTable, d: DiscreteDistribution) -> float:
    """Squared prediction error of ``f`` under the covariate law ``d``."""
    if not f.m == f_star.m == d.m:
        raise PreconditionViolation("inputs live on different grids")
    diff = f.values - f_star.values
    return float(np.dot(d.weights, diff * diff))


@dataclass(frozen=True, eq=False)
class Scenario:
    grid: CovariateGrid
    d_train: DiscreteDistribution
    d_test: DiscreteDistribution
    f_star: FunctionTable
    fclass: FunctionClass
    noise: NoiseModel
    eps_inf: float = field(init=False)
    c_inf: float = field(init=False)
    name: str = ""

    def __post_init__(self):
        m = self.grid.m
        if not (self.d_train.m == self.d_test.m == self.f_star.m == self.fclass.m == m):
            raise PreconditionViolation("scenario components live on different grids")
        self.noise.check(self.f_star)
        object.__setattr__(self, "c_inf", density_ratio_coefficient(self.d_test, self.d_train))
        object.__setattr__(self, "eps_inf", misspecification_level(self.fclass, self.f_star))

    def risk_train(self, f) -> float:
        return risk(_as_table(self, f), self.f_star, self.d_train)

    def risk_test(self, f) -> float:
        return risk(_as_table(self, f), self.f_star, self.d_test)

    def best_index(self) -> int:
        """Lowest index of a member attaining the misspecification level."""
        dist = np.max(np.abs(self.fclass.matrix - self.f_star.values), axis=1)
        return int(np.flatnonzero(dist == dist.min())[0])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "grid": {"m": self.grid.m},
            "d_train": {"weights": self.d_train.weights.tolist()},
            "d_test": {"weights": self.d_test.weights.tolist()},
            "f_star": {"values": self.f_star.values.tolist()},
            "class": {"members": [{"values": f.values.tolist()} for f in self.fclass]},
            "noise": {"kind": self.noise.kind, "b": self.noise.b},
            "eps_inf": self.eps_inf,
            "c_inf": self.c_inf,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        try:
            sc = cls(
                grid=CovariateGrid(doc["grid"]["m"]),
                d_train=DiscreteDistribution(doc["d_train"]["weights"]),
                d_test=DiscreteDistribution(doc["d_test"]["weights"]),
                f_star=FunctionTable(doc["f_star"]["values"]),
                fclass=FunctionClass(tuple(mem["values"] for mem in doc["class"]["members"])),
                noise=NoiseModel(doc["noise"]["kind"], doc["noise"].get("b", 0.0)),
                name=doc.get("name", ""),
            )
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed scenario document: {exc}") from exc
        except PreconditionViolation as exc:
            raise ScenarioError(str(exc)) from exc
        for key in ("eps_inf", "c_inf"):
            if key in doc and doc[key] != getattr(sc, key):
                raise ScenarioError(f"cached {key}={doc[key]!r} disagrees with recomputed {getattr(sc, key)!r}")
        return sc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def _as_table(sc: Scenario, f) -> FunctionTable:
    if isinstance(f, FunctionTable):
        return f
    if isinstance(f, (int, np.integer)):
        return sc.fclass[int(f)]
    return FunctionTable(f)


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    cells: np.ndarray
    y: np.ndarray
    seed: int = 0

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        y = np.asarray(self.y, dtype=float)
        if cells.shape != y.shape or cells.ndim != 1:
            raise PreconditionViolation("cells and labels must be equal-length vectors")
        if cells.size == 0:
            raise PreconditionViolation("dataset must be non-empty")
        if np.any(cells < 0) or np.any(np.abs(y) > 1.0):
            raise PreconditionViolation("negative cell index or |y| > 1")
        object.__setattr__(self, "cells", _frozen(cells, np.int64))
        object.__setattr__(self, "y", _frozen(y))

    @classmethod
    def from_pairs(cls, pairs, seed: int = 0) -> "RegressionDataset":
        pairs = list(pairs)
        return cls([c for c, _ in pairs], [y for _, y in pairs], seed)

    @property
    def n(self) -> int:
        return self.cells.size

    @property
    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.cells.tolist(), self.y.tolist()))

    def __len__(self):
        return self.n

    def check_grid(self, m: int):
        if int(self.cells.max()) >= m:
            raise PreconditionViolation(f"cell index {int(self.cells.max())} outside grid of size {m}")

    def cell_stats(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell counts and label sums (sufficient statistics for square losses)."""
        self.check_grid(m)
        counts = np.bincount(self.cells, minlength=m).astype(float)
        sums = np.bincount(self.cells, weights=self.y, minlength=m)
        return counts, sums


def sample_cells(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of cell indices from uniforms ``u`` in [0, 1)."""
    cdf = np.cumsum(weights)
    last = int(np.flatnonzero(weights > 0)[-1])
    cdf[last:] = 1.0
    return np.searchsorted(cdf, u, side="right")


def sample_dataset(scenario: Scenario, n: int, seed: int) -> RegressionDataset:
    if int(n) != n or n < 1:
        raise PreconditionViolation(f"n must be a positive integer, got {n}")
    n = int(n)
    rng = make_rng(seed)
    cells = sample_cells(scenario.d_train.weights, rng.random(n))
    y = scenario.noise.sample(scenario.f_star.values[cells], rng.random(n))
    return RegressionDataset(cells, y, seed)


# --------------------------------------------------------------------------
# Hand-built scenarios


def make_scenario_amplification(eps_inf: float, c_inf: float, zeta: float, m: int,
                                strict: bool = True) -> Scenario:
    """ERM lower-bound construction: f_bad piles its error onto the test block.

    Members are ordered (f_bar, f_bad). ``strict=False`` admits the boundary
    ``zeta == sqrt(c_inf) * eps_inf`` used by the star-algorithm analysis.
    """
    if not 0 < eps_inf < 1:
        raise PreconditionViolation("eps_inf must lie in (0, 1)")
    if not c_inf >= 1:
        raise PreconditionViolation("c_inf must be >= 1")
    scale = math.sqrt(c_inf) * eps_inf
    if scale > 0.5:
        raise PreconditionViolation(f"sqrt(C)*eps = {scale} exceeds 1/2")
    if not zeta > 0 or (zeta >= scale if strict else zeta > scale):
        raise PreconditionViolation(f"zeta={zeta} outside (0, sqrt(C)*eps={scale})")
    k = round(c_inf)
    if abs(k - c_inf) > 1e-12 or m % k:
        raise PreconditionViolation(f"m={m} must be divisible by an integral c_inf={c_inf}")
    block = m // k
    grid = CovariateGrid(m)
    f_bar = np.full(m, 0.5 + eps_inf)
    f_bad = np.full(m, 0.5)
    f_bad[:block] = 0.5 + zeta
    return Scenario(
        grid=grid,
        d_train=DiscreteDistribution.uniform(m),
        d_test=DiscreteDistribution.uniform_on(m, range(block)),
        f_star=FunctionTable.constant(m, 0.5),
        fclass=FunctionClass((f_bar, f_bad)),
        noise=NoiseModel.bernoulli(),
        name=f"amplification(eps={eps_inf}, C={c_inf}, zeta={zeta}, m={m})",
    )


def make_scenario_linf_inconsistency() -> Scenario:
    """Single covariate, y ~ Ber(1/4), class {1/4, 1/2}."""
    point = DiscreteDistribution([1.0])
    return Scenario(
        grid=CovariateGrid(1),
        d_train=point,
        d_test=point,
        f_star=FunctionTable([0.25]),
        fclass=FunctionClass(([0.25], [0.5])),
        noise=NoiseModel.bernoulli(),
        name="linf_inconsistency",
    )


def make_scenario_random(seed: int, m: int = 24, k: int = 6, eps_range=(0.01, 0.12),
                         noise: str = "two_point") -> Scenario:
    """Random instance satisfying the covariate-shift assumptions.

    The class always holds one member within ``eps`` of f* in sup norm;
    the others are a mix of noisy copies of f* and block-concentrated
    deviations in the style of the ERM lower bound.
    """
    rng = make_rng(seed)
    eps = float(rng.uniform(*eps_range))
    f_star = rng.uniform(0.25, 0.75, size=m)
    b = 0.2 if noise == "two_point" else 0.0

    d_train = rng.dirichlet(np.ones(m)) + 0.05 / m
    d_train /= d_train.sum()
    width = int(rng.integers(1, m + 1))
    start = int(rng.integers(0, m - width + 1))
    d_test = np.zeros(m)
    d_test[start:start + width] = rng.dirichlet(np.ones(width))
    d_test /= d_test.sum()

    u = rng.uniform(-1.0, 1.0, size=m)
    u[int(rng.integers(m))] = rng.choice([-1.0, 1.0])
    members = [f_star + eps * u]
    for _ in range(k - 1):
        kind = int(rng.integers(3))
        if kind == 0:
            g = f_star + rng.uniform(-4, 4) * eps * rng.uniform(-1, 1, size=m)
        elif kind == 1:
            g = f_star.copy()
            g[start:start + width] += rng.choice([-1, 1]) * rng.uniform(eps, 6 * eps)
        else:
            g = rng.uniform(0.0, 1.0, size=m)
        members.append(np.clip(g, -1.0 + b, 1.0 - b))
    order = rng.permutation(k)
    members = [members[i] for i in order]
    return Scenario(
        grid=CovariateGrid(m),
        d_train=DiscreteDistribution(d_train),
        d_test=DiscreteDistribution(d_test),
        f_star=FunctionTable(f_star),
        fclass=FunctionClass(tuple(members)),
        noise=NoiseModel.two_point(b) if noise == "two_point" else NoiseModel.bernoulli(),
        name=f"random(seed={seed})",
    )


def make_scenario_eight_member(eps_inf: float = 0.05) -> Scenario:
    """Fixed 8-member misspecified instance used for finite-sample checks."""
    m = 16
    x = (np.arange(m) + 0.5) / m
    f_star = 0.5 + 0.2 * np.sin(2 * np.pi * x)
    pattern = np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
    block = np.zeros(m)
    block[:4] = 1.0
    members = [
        f_star + eps_inf * pattern,
        f_star + 0.25 * block,
        f_star - 0.25 * block[::-1],
        np.full(m, 0.5),
        f_star + 2.5 * eps_inf,
        f_star + 0.15 * np.cos(6 * np.pi * x),
        0.5 + 0.2 * np.sin(2 * np.pi * x + 0.6),
        f_star - 4 * eps_inf * pattern,
    ]
    d_test = np.zeros(m)
    d_test[:4] = 0.25
    return Scenario(
        grid=CovariateGrid(m),
        d_train=DiscreteDistribution.uniform(m),
        d_test=DiscreteDistribution(d_test),
        f_star=FunctionTable(f_star),
        fclass=FunctionClass(tuple(members)),
        noise=NoiseModel.bernoulli(),
        name=f"eight_member(eps={eps_inf})",
    )


def make_scenario_realizable(m: int = 10, half_width: float = 0.2, step: float = 0.01) -> Scenario:
    """Well-specified instance: shifted copies f* + c on a fine grid of c, f* included."""
    x = (np.arange(m) + 0.5) / m
    f_star = 0.5 + 0.2 * (x - 0.5)
    k = int(round(half_width / step))
    shifts = [i * step for i in range(-k, k + 1)]
    d_test = np.zeros(m)
    d_test[: max(1, m // 5)] = 1.0
    return Scenario(
        grid=CovariateGrid(m),
        d_train=DiscreteDistribution.uniform(m),
        d_test=DiscreteDistribution(d_test / d_test.sum()),
        f_star=FunctionTable(f_star),
        fclass=FunctionClass(tuple(f_star + c for c in shifts)),
        noise=NoiseModel.bernoulli(),
        name=f"realizable(m={m}, K={2 * k + 1})",
    )
