"""Tabular discounted MDPs, exact policy evaluation and occupancies, coverage
diagnostics, and the (filtered) minimax value-function fit for offline RL.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import PROB_TOL, make_rng, sample_cells
from .errors import PreconditionViolation, ScenarioError, SingularSystem, SupportViolation
from .regression import TIE_TOL, FitResult, lowest_argmin

VI_TOL = 1e-12
VI_MAX_ITER = 100_000
# occupancy entries at or below this are treated as numerically unreachable
REACH_TOL = 1e-14


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiscountedMDP:
    P: np.ndarray
    R: np.ndarray
    d0: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        R = np.asarray(self.R, dtype=float)
        d0 = np.asarray(self.d0, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2] or d0.shape != (P.shape[0],):
            raise PreconditionViolation("inconsistent MDP shapes")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > PROB_TOL):
            raise PreconditionViolation("transition rows must be distributions")
        if np.any(R < 0) or np.any(R > 1):
            raise PreconditionViolation("rewards must lie in [0, 1]")
        if np.any(d0 < 0) or abs(d0.sum() - 1.0) > PROB_TOL:
            raise PreconditionViolation("d0 must be a distribution")
        if not 0 <= self.gamma < 1:
            raise PreconditionViolation("gamma must lie in [0, 1)")
        object.__setattr__(self, "P", _frozen(P))
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "d0", _frozen(d0))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def S(self) -> int:
        return self.P.shape[0]

    @property
    def A(self) -> int:
        return self.P.shape[1]

    @property
    def vmax(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    def to_dict(self) -> dict:
        return {"S": self.S, "A": self.A, "P": self.P.tolist(), "R": self.R.tolist(),
                "d0": self.d0.tolist(), "gamma": self.gamma}

    @classmethod
    def from_dict(cls, doc: dict) -> "DiscountedMDP":
        try:
            mdp = cls(doc["P"], doc["R"], doc["d0"], doc["gamma"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"malformed MDP document: {exc}") from exc
        if (doc.get("S", mdp.S), doc.get("A", mdp.A)) != (mdp.S, mdp.A):
            raise ScenarioError("declared S/A disagree with the arrays")
        return mdp


@dataclass(frozen=True, eq=False)
class QClass:
    """Ordered finite class of S x A value tables, stored as a (K, S, A) array."""

    tables: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tables, dtype=float)
        if t.ndim != 3 or t.shape[0] == 0:
            raise PreconditionViolation("QClass needs a non-empty (K, S, A) stack")
        if not np.all(np.isfinite(t)):
            raise PreconditionViolation("value tables must be finite")
        object.__setattr__(self, "tables", _frozen(t))

    def __len__(self):
        return self.tables.shape[0]

    def __getitem__(self, i):
        return self.tables[i]

    def check_bounds(self, mdp: DiscountedMDP):
        if self.tables.shape[1:] != (mdp.S, mdp.A):
            raise PreconditionViolation("class shape does not match the MDP")
        if np.any(self.tables < 0) or np.any(self.tables > mdp.vmax + 1e-12):
            raise PreconditionViolation("value tables must lie in [0, 1/(1-gamma)]")


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    mu: np.ndarray
    seed: int = 0

    @property
    def n(self) -> int:
        return self.s.size

    @property
    def tuples(self):
        return list(zip(self.s.tolist(), self.a.tolist(), self.r.tolist(), self.s_next.tolist()))

    def transition_counts(self, S: int, A: int) -> np.ndarray:
        """N[s, a, s'] tallies of the observed transitions."""
        flat = (self.s * A + self.a) * S + self.s_next
        return np.bincount(flat, minlength=S * A * S).reshape(S, A, S).astype(float)


# --------------------------------------------------------------------------
# Dynamic programming


def greedy_policy(f) -> np.ndarray:
    """argmax_a f(s, a), lowest action index on ties."""
    return np.argmax(np.asarray(f), axis=1)


def check_policy(pi, mdp: DiscountedMDP) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape != (mdp.S,) or np.any(pi < 0) or np.any(pi >= mdp.A):
        raise PreconditionViolation("policy must map every state to a valid action")
    return pi


def bellman_backup(f, mdp: DiscountedMDP) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (mdp.S, mdp.A):
        raise PreconditionViolation("table shape does not match the MDP")
    return mdp.R + mdp.gamma * (mdp.P @ f.max(axis=1))


def value_iteration(mdp: DiscountedMDP, tol: float = VI_TOL, max_iter: int = VI_MAX_ITER):
    """Optimal Q by repeated backups from zero; returns (Q, iterations)."""
    q = np.zeros((mdp.S, mdp.A))
    for it in range(1, max_iter + 1):
        nxt = bellman_backup(q, mdp)
        change = np.max(np.abs(nxt - q))
        q = nxt
        if change <= tol:
            return q, it
    return q, max_iter


def _policy_matrices(pi, mdp: DiscountedMDP):
    idx = np.arange(mdp.S)
    return mdp.P[idx, pi], mdp.R[idx, pi]


def policy_state_values(pi, mdp: DiscountedMDP) -> np.ndarray:
    pi = check_policy(pi, mdp)
    P_pi, R_pi = _policy_matrices(pi, mdp)
    system = np.eye(mdp.S) - mdp.gamma * P_pi
    try:
        v = np.linalg.solve(system, R_pi)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if np.max(np.abs(system @ v - R_pi)) > 1e-10:
        raise SingularSystem("policy evaluation residual above 1e-10")
    return v


def policy_value(pi, mdp: DiscountedMDP) -> float:
    return float(mdp.d0 @ policy_state_values(pi, mdp))


def occupancy(pi, mdp: DiscountedMDP) -> np.ndarray:
    """Normalised discounted state-action occupancy, shape (S, A)."""
    pi = check_policy(pi, mdp)
    P_pi, _ = _policy_matrices(pi, mdp)
    system = np.eye(mdp.S) - mdp.gamma * P_pi.T
    try:
        rho = np.linalg.solve(system, (1.0 - mdp.gamma) * mdp.d0)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    rho = np.clip(rho, 0.0, None)
    d = np.zeros((mdp.S, mdp.A))
    d[np.arange(mdp.S), pi] = rho
    return d


def induced_policies(fclass: QClass) -> list:
    """Distinct greedy policies of the class, in order of first appearance."""
    seen, out = set(), []
    for f in fclass.tables:
        pi = greedy_policy(f)
        key = pi.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(pi)
    return out


def _check_mu(mu, mdp: DiscountedMDP) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (mdp.S, mdp.A) or np.any(mu < 0) or abs(mu.sum() - 1.0) > PROB_TOL:
        raise PreconditionViolation("mu must be a distribution over S x A")
    return mu


def _covered_ratio(d: np.ndarray, mu: np.ndarray) -> float:
    reached = d > REACH_TOL
    if np.any(reached & (mu == 0)):
        cells = np.argwhere(reached & (mu == 0)).tolist()
        raise SupportViolation(f"occupancy reaches (s, a) cells {cells} that mu never samples")
    return float(np.max(d[reached] / mu[reached])) if np.any(reached) else 0.0


def concentrability(mu, fclass: QClass, mdp: DiscountedMDP) -> float:
    """max over induced policies of || d^pi / mu ||_inf."""
    mu = _check_mu(mu, mdp)
    return max(_covered_ratio(occupancy(pi, mdp), mu) for pi in induced_policies(fclass))


def closest_member(target: np.ndarray, fclass: QClass) -> int:
    dist = np.max(np.abs(fclass.tables - target), axis=(1, 2))
    return int(np.flatnonzero(dist == dist.min())[0])


def transfer_coefficient(mu, fclass: QClass, mdp: DiscountedMDP) -> float:
    """Worst L2(d^pi) / L2(mu) ratio of the residuals f - apx[f], where apx[f]
    is the sup-norm closest member to the backup of f."""
    mu = _check_mu(mu, mdp)
    occs = [occupancy(pi, mdp) for pi in induced_policies(fclass)]
    for d in occs:
        _covered_ratio(d, mu)
    best = None
    for f in fclass.tables:
        resid = f - fclass.tables[closest_member(bellman_backup(f, mdp), fclass)]
        sq = resid * resid
        denom = float(np.sum(mu * sq))
        if denom == 0.0:
            continue
        for d in occs:
            ratio = float(np.sum(d * sq)) / denom
            best = ratio if best is None else max(best, ratio)
    return 1.0 if best is None else best


def rl_misspec_level(fclass: QClass, mdp: DiscountedMDP) -> float:
    """Smallest eps for which both approximate realizability and approximate
    completeness hold in sup norm."""
    T = np.stack([bellman_backup(f, mdp) for f in fclass.tables])
    realizable = np.min(np.max(np.abs(fclass.tables - T), axis=(1, 2)))
    # dist[i, j] = || f_j - T f_i ||_inf
    dist = np.max(np.abs(fclass.tables[None, :] - T[:, None]), axis=(2, 3))
    complete = np.max(np.min(dist, axis=1))
    return float(max(realizable, complete))


def suboptimality(f_hat, mdp: DiscountedMDP, q_star=None) -> float:
    if q_star is None:
        q_star, _ = value_iteration(mdp)
    return policy_value(greedy_policy(q_star), mdp) - policy_value(greedy_policy(f_hat), mdp)


# --------------------------------------------------------------------------
# Data and fitting


def sample_offline_dataset(mdp: DiscountedMDP, mu, n: int, seed: int) -> OfflineDataset:
    if int(n) != n or n < 1:
        raise PreconditionViolation(f"n must be a positive integer, got {n}")
    mu = _check_mu(mu, mdp)
    n = int(n)
    rng = make_rng(seed)
    flat = sample_cells(mu.ravel(), rng.random(n))
    s, a = np.divmod(flat, mdp.A)
    cdf = np.cumsum(mdp.P, axis=2)
    cdf[..., -1] = 1.0
    u = rng.random(n)
    s_next = np.empty(n, dtype=np.int64)
    # one vectorised pass per distinct (s, a) keeps memory at O(n)
    for cell in np.unique(flat):
        rows = flat == cell
        si, ai = divmod(int(cell), mdp.A)
        s_next[rows] = np.searchsorted(cdf[si, ai], u[rows], side="right")
    s_next = np.minimum(s_next, mdp.S - 1)
    r = mdp.R[s, a]
    return OfflineDataset(s, a, r, s_next, _frozen(mu), seed)


def minimax_objectives(dataset: OfflineDataset, fclass: QClass, mdp: DiscountedMDP, tau: float,
                       filtered: bool = True) -> np.ndarray:
    """Inner max over g of the pairwise loss with targets built from each outer f.

    Works on transition counts: for a fixed cell the loss difference
    (f-y)^2 - (g-y)^2 = (f-g)(f+g-2y) is linear in y.
    """
    if tau < 0:
        raise PreconditionViolation("tau must be >= 0")
    S, A = mdp.S, mdp.A
    counts = dataset.transition_counts(S, A).reshape(S * A, S)
    cnt = counts.sum(axis=1)
    occupied = cnt > 0
    counts, cnt = counts[occupied], cnt[occupied]
    rsum = cnt * mdp.R.ravel()[occupied]
    F = fclass.tables.reshape(len(fclass), S * A)[:, occupied]
    V = fclass.tables.max(axis=2)
    ysum = rsum[None, :] + mdp.gamma * (V @ counts.T)  # (K, cells)
    diff = F[:, None, :] - F[None, :, :]
    total = F[:, None, :] + F[None, :, :]
    terms = diff * (cnt * total - 2.0 * ysum[:, None, :])
    if filtered:
        terms = np.where(np.abs(diff) >= tau, terms, 0.0)
    return terms.sum(axis=2).max(axis=1) / dataset.n


def minimax_objectives_direct(dataset: OfflineDataset, fclass: QClass, mdp: DiscountedMDP, tau: float,
                              filtered: bool = True) -> np.ndarray:
    """Same objective summed tuple by tuple (reference path for tests)."""
    K = len(fclass)
    out = np.empty(K)
    for i in range(K):
        y = dataset.r + mdp.gamma * fclass.tables[i].max(axis=1)[dataset.s_next]
        fi = fclass.tables[i][dataset.s, dataset.a]
        best = -np.inf
        for j in range(K):
            gj = fclass.tables[j][dataset.s, dataset.a]
            terms = (fi - y) ** 2 - (gj - y) ** 2
            if filtered:
                terms = np.where(np.abs(fi - gj) >= tau, terms, 0.0)
            best = max(best, float(terms.sum() / dataset.n))
        out[i] = best
    return out


def dbr_minimax_fit(dataset: OfflineDataset, fclass: QClass, mdp: DiscountedMDP, tau: float,
                    filtered: bool = True, tie_tolerance: float = TIE_TOL) -> FitResult:
    """Filtered minimax fit; ``filtered=False`` is the classical minimax algorithm."""
    return lowest_argmin(minimax_objectives(dataset, fclass, mdp, tau, filtered), tie_tolerance)


# --------------------------------------------------------------------------
# Scenario bundles


@dataclass(frozen=True, eq=False)
class OfflineScenario:
    mdp: DiscountedMDP
    mu: np.ndarray
    fclass: QClass
    name: str = ""
    labels: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    def compute_diagnostics(self) -> dict:
        q_star, _ = value_iteration(self.mdp)
        return {
            "eps_inf": rl_misspec_level(self.fclass, self.mdp),
            "c_conc": concentrability(self.mu, self.fclass, self.mdp),
            "c_transfer": transfer_coefficient(self.mu, self.fclass, self.mdp),
            "suboptimality": [suboptimality(f, self.mdp, q_star) for f in self.fclass.tables],
        }

    def to_dict(self) -> dict:
        return {"name": self.name, "mdp": self.mdp.to_dict(), "mu": np.asarray(self.mu).tolist(),
                "class": [t.tolist() for t in self.fclass.tables], "labels": list(self.labels),
                "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, doc: dict) -> "OfflineScenario":
        try:
            sc = cls(DiscountedMDP.from_dict(doc["mdp"]), np.asarray(doc["mu"], dtype=float),
                     QClass(doc["class"]), doc.get("name", ""), tuple(doc.get("labels", ())),
                     doc.get("diagnostics", {}))
            _check_mu(sc.mu, sc.mdp)
            sc.fclass.check_bounds(sc.mdp)
        except (KeyError, TypeError, PreconditionViolation) as exc:
            raise ScenarioError(f"malformed offline scenario: {exc}") from exc
        return sc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def make_amplification_mdp(c_conc: float, eps: float = 0.05, gamma: float = 0.9,
                           margin: float = 0.9) -> OfflineScenario:
    """MDP analogue of the ERM lower bound.

    Contexts b (block), amb and o (filler) each pick one of two actions and
    move to absorbing states. mu puts mass 0.1/c_conc on the block, which the
    start distribution visits half the time. Members: f_bar (Q* shifted by
    eps on contexts, flipping the near-tie at amb), f_bad (exact except an
    error zeta on the block that flips its action), f_far (far off).
    """
    if c_conc < 4:
        raise PreconditionViolation("family is calibrated for c_conc >= 4")
    if not 0 < gamma < 1:
        raise PreconditionViolation("gamma must lie in (0, 1)")
    mu_block = 0.1 / c_conc
    zeta = margin * eps * math.sqrt(0.5 / mu_block)
    gap_block = 2 * margin * zeta
    vmax = 1.0 / (1.0 - gamma)
    b, amb, o, G, Zb, Za, F1, F2 = range(8)
    S, A = 8, 2
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    P[b, 0, G] = P[b, 1, Zb] = 1.0
    P[amb, 0, G] = P[amb, 1, Za] = 1.0
    P[o, 0, F1], P[o, 0, F2] = 0.5, 0.5
    P[o, 1, F1], P[o, 1, F2] = 0.3, 0.7
    rewards = {G: 1.0, Zb: 1.0 - gap_block / (gamma * vmax), Za: 1.0 - eps / (gamma * vmax), F1: 0.5, F2: 0.4}
    for z, rz in rewards.items():
        P[z, :, z] = 1.0
        R[z, :] = rz
    if not 0 <= rewards[Zb] <= 1:
        raise PreconditionViolation("block gap exceeds the reward range; lower c_conc or eps")
    d0 = np.zeros(S)
    d0[b] = d0[amb] = 0.5
    mdp = DiscountedMDP(P, R, d0, gamma)
    q_star, _ = value_iteration(mdp)

    ctx = np.zeros((S, A), dtype=bool)
    ctx[[b, amb, o]] = True
    f_bar = np.where(ctx, q_star + eps, q_star)
    f_bar[amb, 0] = q_star[amb, 0] - eps
    f_bad = q_star.copy()
    f_bad[b, 0] -= zeta
    f_bad[b, 1] += zeta
    f_far = np.where(ctx, q_star + np.array([-0.3, 0.3]), q_star)
    fclass = QClass(np.stack([f_bar, f_bad, f_far]))

    mu = np.zeros((S, A))
    mu[b] = mu_block / 2
    mu[amb] = 0.05
    mu[o] = (0.4 - mu_block) / 2
    mu[G, 0], mu[Zb, 0], mu[Za, 0] = 0.25, 0.125, 0.125
    sc = OfflineScenario(mdp, mu, fclass, f"amplification_mdp(C={c_conc}, eps={eps})", ("f_bar", "f_bad", "f_far"))
    fclass.check_bounds(mdp)
    diag = sc.compute_diagnostics()
    diag.update({"zeta": zeta, "mu_block": mu_block})
    return OfflineScenario(mdp, mu, fclass, sc.name, sc.labels, diag)


def random_mdp(seed: int, S: int = 5, A: int = 3, gamma: float = 0.9) -> DiscountedMDP:
    rng = make_rng(seed)
    P = rng.dirichlet(np.ones(S), size=(S, A))
    P /= P.sum(axis=2, keepdims=True)
    return DiscountedMDP(P, rng.uniform(0, 1, size=(S, A)), rng.dirichlet(np.ones(S)), gamma)


def make_chain_scenario(gamma: float = 0.8) -> OfflineScenario:
    """Four-state chain with a two-policy class and a lopsided mu (small
    instance for cross-checking the coverage diagnostics by hand)."""
    S, A = 4, 2
    P = np.zeros((S, A, S))
    for s in range(S):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, S - 1)] = 1.0
    R = np.zeros((S, A))
    R[S - 1, :] = 1.0
    R[0, 0] = 0.5
    mdp = DiscountedMDP(P, R, np.array([0.4, 0.3, 0.2, 0.1]), gamma)
    q_star, _ = value_iteration(mdp)
    left = q_star.copy()
    left[:, 0] = np.maximum(q_star[:, 0], q_star[:, 1]) + 0.1
    fclass = QClass(np.stack([q_star, np.clip(left, 0, mdp.vmax)]))
    mu = np.full((S, A), 0.02)
    mu[:, 1] = 0.23
    sc = OfflineScenario(mdp, mu / mu.sum(), fclass, "chain4", ("q_star", "left"))
    return OfflineScenario(mdp, sc.mu, fclass, sc.name, sc.labels, sc.compute_diagnostics())
