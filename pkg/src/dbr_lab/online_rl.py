"""Finite-horizon episodic MDPs, product value classes, the optimistic
version-space algorithm with (optionally filtered) squared Bellman error
constraints, coverability, and regret tracking.

Steps are numbered 1..H in the public API.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import PROB_TOL, make_rng
from .errors import ClassTooLarge, EmptyVersionSpace, PreconditionViolation, ScenarioError
from .regression import TIE_TOL

PRODUCT_LIMIT = 100_000
BETA_C = 4.0


def _frozen(a):
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EpisodicMDP:
    P: np.ndarray  # (H, S, A, S)
    R: np.ndarray  # (H, S, A)
    s1: int = 0

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if P.ndim != 4 or P.shape[1] != P.shape[3] or R.shape != P.shape[:3]:
            raise PreconditionViolation("expected P of shape (H, S, A, S) and R of shape (H, S, A)")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=3) - 1.0) > PROB_TOL):
            raise PreconditionViolation("transition rows must be distributions")
        if np.any(R < 0) or np.any(R > 1):
            raise PreconditionViolation("rewards must lie in [0, 1]")
        if R.reshape(R.shape[0], -1).max(axis=1).sum() > 1.0 + 1e-12:
            raise PreconditionViolation("per-episode reward could exceed 1")
        if not 0 <= int(self.s1) < P.shape[1]:
            raise PreconditionViolation("s1 out of range")
        object.__setattr__(self, "P", _frozen(P))
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "s1", int(self.s1))

    @property
    def H(self) -> int:
        return self.P.shape[0]

    @property
    def S(self) -> int:
        return self.P.shape[1]

    @property
    def A(self) -> int:
        return self.P.shape[2]

    def to_dict(self) -> dict:
        return {"S": self.S, "A": self.A, "H": self.H, "P": self.P.tolist(), "R": self.R.tolist(), "s1": self.s1}

    @classmethod
    def from_dict(cls, doc: dict) -> "EpisodicMDP":
        try:
            return cls(doc["P"], doc["R"], doc.get("s1", 0))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"malformed episodic MDP: {exc}") from exc


@dataclass(frozen=True, eq=False)
class ProductQClass:
    """F_1 x ... x F_H; member index is row-major over (i_1, ..., i_H)."""

    per_step: tuple

    def __post_init__(self):
        steps = tuple(np.asarray(t, dtype=float) for t in self.per_step)
        if not steps:
            raise PreconditionViolation("need at least one step")
        shape = steps[0].shape[1:]
        for t in steps:
            if t.ndim != 3 or t.shape[0] == 0 or t.shape[1:] != shape:
                raise PreconditionViolation("every step needs a non-empty (K_h, S, A) stack of one shape")
            if np.any(t < 0) or np.any(t > 1):
                raise PreconditionViolation("value tables must lie in [0, 1]")
        object.__setattr__(self, "per_step", tuple(_frozen(t) for t in steps))

    @property
    def H(self) -> int:
        return len(self.per_step)

    @property
    def sizes(self) -> tuple:
        return tuple(t.shape[0] for t in self.per_step)

    @property
    def product_size(self) -> int:
        return math.prod(self.sizes)

    def index_of(self, parts) -> int:
        return int(np.ravel_multi_index(tuple(parts), self.sizes))

    def parts_of(self, index: int) -> tuple:
        return tuple(int(i) for i in np.unravel_index(index, self.sizes))

    def member(self, index: int) -> list:
        return [self.per_step[h][i] for h, i in enumerate(self.parts_of(index))]

    def check_shape(self, mdp: EpisodicMDP):
        if self.H != mdp.H or self.per_step[0].shape[1:] != (mdp.S, mdp.A):
            raise PreconditionViolation("class does not match the MDP")


# --------------------------------------------------------------------------
# Exact planning quantities


def episodic_backup(f_next, mdp: EpisodicMDP, h: int) -> np.ndarray:
    if not 1 <= h <= mdp.H:
        raise PreconditionViolation(f"step {h} outside [1, {mdp.H}]")
    if h == mdp.H:
        return np.array(mdp.R[h - 1])
    f_next = np.asarray(f_next, dtype=float)
    return mdp.R[h - 1] + mdp.P[h - 1] @ f_next.max(axis=1)


def optimal_q(mdp: EpisodicMDP) -> list:
    """Backward induction; entry h-1 holds Q*_h."""
    q = [None] * mdp.H
    nxt = np.zeros((mdp.S, mdp.A))
    for h in range(mdp.H, 0, -1):
        nxt = q[h - 1] = episodic_backup(nxt, mdp, h)
    return q


def _check_policy(pi, mdp: EpisodicMDP) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape != (mdp.H, mdp.S) or np.any(pi < 0) or np.any(pi >= mdp.A):
        raise PreconditionViolation("policy must be an (H, S) array of valid actions")
    return pi


def _state_marginals(pi, mdp: EpisodicMDP) -> np.ndarray:
    rho = np.zeros((mdp.H, mdp.S))
    rho[0, mdp.s1] = 1.0
    idx = np.arange(mdp.S)
    for h in range(mdp.H - 1):
        rho[h + 1] = rho[h] @ mdp.P[h][idx, pi[h]]
    return rho


def episodic_occupancy(pi, mdp: EpisodicMDP, h: int) -> np.ndarray:
    pi = _check_policy(pi, mdp)
    if not 1 <= h <= mdp.H:
        raise PreconditionViolation(f"step {h} outside [1, {mdp.H}]")
    rho = _state_marginals(pi, mdp)[h - 1]
    d = np.zeros((mdp.S, mdp.A))
    d[np.arange(mdp.S), pi[h - 1]] = rho
    return d


def episodic_policy_value(pi, mdp: EpisodicMDP) -> float:
    pi = _check_policy(pi, mdp)
    rho = _state_marginals(pi, mdp)
    idx = np.arange(mdp.S)
    return float(sum(rho[h] @ mdp.R[h][idx, pi[h]] for h in range(mdp.H)))


def greedy_policy(tables) -> np.ndarray:
    """Per-step argmax, lowest action on ties; shape (H, S)."""
    return np.stack([np.argmax(t, axis=1) for t in tables])


def optimal_value(mdp: EpisodicMDP) -> float:
    return float(optimal_q(mdp)[0][mdp.s1].max())


def _step_occupancies(fclass: ProductQClass, mdp: EpisodicMDP) -> list:
    """For each step, the distinct d_h^pi over policies induced by the class."""
    fclass.check_shape(mdp)
    step_pols = []
    for t in fclass.per_step:
        seen = {}
        for tab in t:
            a = np.argmax(tab, axis=1)
            seen.setdefault(a.tobytes(), a)
        step_pols.append(list(seen.values()))
    idx = np.arange(mdp.S)
    start = np.zeros(mdp.S)
    start[mdp.s1] = 1.0
    prefixes = [start]
    out = []
    for h in range(mdp.H):
        occs, nxt = {}, {}
        for rho in prefixes:
            for a in step_pols[h]:
                d = np.zeros((mdp.S, mdp.A))
                d[idx, a] = rho
                occs.setdefault(d.tobytes(), d)
                if h + 1 < mdp.H:
                    r2 = rho @ mdp.P[h][idx, a]
                    nxt.setdefault(r2.tobytes(), r2)
        if len(occs) * max(len(nxt), 1) > PRODUCT_LIMIT:
            raise ClassTooLarge("too many distinct occupancies to enumerate")
        out.append(list(occs.values()))
        prefixes = list(nxt.values())
    return out


def coverability(fclass: ProductQClass, mdp: EpisodicMDP):
    """Returns (value, mu_star) with mu_star[h-1] proportional to the pointwise
    max occupancy m_h. Any mu has some ratio d/mu >= sum(m_h), which mu_star
    attains, so the value is exact."""
    value, mus = 0.0, []
    for occs in _step_occupancies(fclass, mdp):
        m = np.max(np.stack(occs), axis=0)
        mass = float(m.sum())
        value = max(value, mass)
        mus.append(m / mass)
    return value, mus


def coverability_lp(fclass: ProductQClass, mdp: EpisodicMDP) -> float:
    """Same quantity from a linear program: min sum(nu) s.t. nu >= d_h^pi for
    every induced pi (nu = t * mu linearises the min-max ratio)."""
    from scipy.optimize import linprog

    value = 0.0
    for occs in _step_occupancies(fclass, mdp):
        D = np.stack([d.ravel() for d in occs])
        n = D.shape[1]
        A_ub = np.tile(-np.eye(n), (D.shape[0], 1))
        res = linprog(np.ones(n), A_ub=A_ub, b_ub=-D.ravel(), bounds=[(0, None)] * n, method="highs")
        if res.status != 0:
            raise ArithmeticError(f"LP failed: {res.message}")
        value = max(value, float(res.fun))
    return value


def ratio_under(mu_h: np.ndarray, occs: list) -> float:
    """sup over the given occupancies of ||d / mu||_inf (inf if uncovered)."""
    worst = 0.0
    for d in occs:
        hit = d > 0
        if np.any(hit & (mu_h <= 0)):
            return math.inf
        if np.any(hit):
            worst = max(worst, float(np.max(d[hit] / mu_h[hit])))
    return worst


# --------------------------------------------------------------------------
# Version space


class VersionSpaceAccumulator:
    """Running sums S_h[i, j, k] of W(f_i, g_j) {(f_i - y_k)^2 - (g_j - y_k)^2}
    where y_k = r + max_a' f_{h+1,k}(s', a'), with F_{H+1} = {0}."""

    def __init__(self, fclass: ProductQClass, tau: float, filtered: bool = True):
        if tau < 0:
            raise PreconditionViolation("tau must be >= 0")
        self.fclass = fclass
        self.tau = float(tau)
        self.filtered = bool(filtered)
        H = fclass.H
        S = fclass.per_step[0].shape[1]
        self._vnext = [fclass.per_step[h + 1].max(axis=2) for h in range(H - 1)] + [np.zeros((1, S))]
        self.sums = [np.zeros((fclass.sizes[h], fclass.sizes[h], self._vnext[h].shape[0])) for h in range(H)]
        self.history = []
        self.episode_count = 0

    def increment(self, h: int, s: int, a: int, r: float, s_next: int) -> np.ndarray:
        """Per-triple contribution of one step-h transition (h is 0-based)."""
        fx = self.fclass.per_step[h][:, s, a]
        y = r + self._vnext[h][:, s_next]
        f = fx[:, None, None]
        g = fx[None, :, None]
        term = (f - y) ** 2 - (g - y) ** 2
        if self.filtered:
            term = np.where(np.abs(f - g) >= self.tau, term, 0.0)
        return term

    def add_episode(self, transitions):
        """transitions: H tuples (s, a, r, s_next) in step order."""
        for h, tr in enumerate(transitions):
            self.sums[h] += self.increment(h, *tr)
        self.history.append(tuple(transitions))
        self.episode_count += 1

    def recompute(self) -> list:
        fresh = [np.zeros_like(s) for s in self.sums]
        for ep in self.history:
            for h, tr in enumerate(ep):
                fresh[h] += self.increment(h, *tr)
        return fresh

    def step_ok(self, beta: float) -> list:
        """ok[h][i, k]: the step-h constraint holds for (f_h = i, f_{h+1} = k)."""
        return [s.max(axis=1) <= beta for s in self.sums]


def feasible_counts(ok: list) -> list:
    """cnt[h][i]: number of completions (i_{h+1}, ..., i_H) of f_h = i that
    satisfy every constraint from step h on."""
    cnt = [None] * len(ok)
    tail = np.ones(1, dtype=np.int64)
    for h in range(len(ok) - 1, -1, -1):
        tail = cnt[h] = ok[h].astype(np.int64) @ tail
    return cnt


def contains(ok: list, parts) -> bool:
    nxt = list(parts[1:]) + [0]
    return all(bool(ok[h][i, nxt[h]]) for h, i in enumerate(parts))


def optimistic_member(fclass: ProductQClass, ok: list, cnt: list, s1: int, tol: float = TIE_TOL):
    """Lowest product index among members maximising max_a f_1(s1, a), or None."""
    values = fclass.per_step[0][:, s1, :].max(axis=1)
    live = np.flatnonzero(cnt[0] > 0)
    if live.size == 0:
        return None
    best = values[live].max()
    parts = [int(live[values[live] >= best - tol][0])]
    for h in range(1, fclass.H):
        choices = np.flatnonzero(ok[h - 1][parts[-1]] & (cnt[h] > 0))
        parts.append(int(choices[0]))
    return tuple(parts)


def golf_beta(T: int, H: int, size: int, delta: float, c: float = BETA_C) -> float:
    return c * math.log(T * H * size / delta)


@dataclass
class RegretCurve:
    per_episode: np.ndarray
    cumulative: np.ndarray

    @classmethod
    def from_gaps(cls, gaps) -> "RegretCurve":
        gaps = np.asarray(gaps, dtype=float)
        return cls(gaps, np.cumsum(gaps))

    def average(self, t: int) -> float:
        return float(self.cumulative[t - 1] / t)

    def tail_average(self, fraction: float = 0.5) -> float:
        """Mean per-episode gap over the final ``fraction`` of episodes."""
        T = self.per_episode.size
        start = T - max(1, int(round(T * fraction)))
        return float(self.per_episode[start:].mean())


@dataclass
class EpisodeLogs:
    chosen_index: np.ndarray
    version_space_size: np.ndarray
    per_episode_gap: np.ndarray
    cumulative_regret: np.ndarray
    tracked_member: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "chosen_index", "version_space_size", "per_episode_gap", "cumulative_regret"])
            for t in range(self.chosen_index.size):
                w.writerow([t + 1, int(self.chosen_index[t]), int(self.version_space_size[t]),
                            repr(float(self.per_episode_gap[t])), repr(float(self.cumulative_regret[t]))])


def golf_dbr_run(mdp: EpisodicMDP, fclass: ProductQClass, T: int, tau: float, beta: float,
                 filtered: bool = True, seed: int = 0, track=None):
    """Optimistic planning in the filtered version space, one episode at a time.

    ``track`` (a product index) records whether that member is still in the
    version space at the start of every episode.
    """
    if T < 1 or beta < 0:
        raise PreconditionViolation("need T >= 1 and beta >= 0")
    fclass.check_shape(mdp)
    if fclass.product_size > PRODUCT_LIMIT:
        raise ClassTooLarge(f"product class has {fclass.product_size} members")
    rng = make_rng(seed)
    acc = VersionSpaceAccumulator(fclass, tau, filtered)
    j_star = optimal_value(mdp)
    cdf = np.cumsum(mdp.P, axis=3)
    cdf[..., -1] = 1.0
    track_parts = fclass.parts_of(track) if track is not None else None
    value_cache = {}
    chosen = np.empty(T, dtype=np.int64)
    sizes = np.empty(T, dtype=np.int64)
    gaps = np.empty(T)
    tracked = np.zeros(T, dtype=bool)
    for t in range(T):
        ok = acc.step_ok(beta)
        cnt = feasible_counts(ok)
        parts = optimistic_member(fclass, ok, cnt, mdp.s1)
        if parts is None:
            raise EmptyVersionSpace(f"version space empty before episode {t + 1}; beta={beta} too small",
                                    episode=t + 1)
        if track_parts is not None:
            tracked[t] = contains(ok, track_parts)
        sizes[t] = int(cnt[0].sum())
        chosen[t] = fclass.index_of(parts)
        if parts not in value_cache:
            pi = greedy_policy([fclass.per_step[h][i] for h, i in enumerate(parts)])
            value_cache[parts] = (pi, j_star - episodic_policy_value(pi, mdp))
        pi, gaps[t] = value_cache[parts]
        u = rng.random(mdp.H)
        s, transitions = mdp.s1, []
        for h in range(mdp.H):
            a = int(pi[h, s])
            s_next = int(np.searchsorted(cdf[h, s, a], u[h], side="right"))
            s_next = min(s_next, mdp.S - 1)
            transitions.append((s, a, float(mdp.R[h, s, a]), s_next))
            s = s_next
        acc.add_episode(transitions)
    curve = RegretCurve.from_gaps(gaps)
    logs = EpisodeLogs(chosen, sizes, gaps, curve.cumulative, tracked)
    return curve, logs


# --------------------------------------------------------------------------
# Scenarios


class OnlineScenario(NamedTuple):
    mdp: EpisodicMDP
    fclass: ProductQClass
    diagnostics: dict


def quantize(values: np.ndarray, q: float) -> np.ndarray:
    """Round to the grid {0, q, 2q, ...} (half to even), clipped to [0, 1]."""
    if q <= 0:
        return np.array(values, dtype=float)
    return np.clip(np.rint(np.asarray(values) / q) * q, 0.0, 1.0)


def _dedup(tables: list) -> list:
    out = []
    for t in tables:
        if not any(np.array_equal(t, u) for u in out):
            out.append(t)
    return out


def realized_eps(fclass: ProductQClass, mdp: EpisodicMDP) -> float:
    """max over h and f' in F_{h+1} of the sup-distance from T_h f' to F_h."""
    worst = 0.0
    nxt = [np.zeros((mdp.S, mdp.A))]
    for h in range(mdp.H, 0, -1):
        tables = fclass.per_step[h - 1]
        for f_next in nxt:
            target = episodic_backup(f_next, mdp, h)
            worst = max(worst, float(np.min(np.max(np.abs(tables - target), axis=(1, 2)))))
        nxt = list(tables)
    return worst


def make_online_scenario(spec: dict) -> OnlineScenario:
    """Build F backwards from F_{H+1} = {0}: each F_h holds the quantised
    backups of F_{h+1} followed by the step's distractors, deduplicated.

    spec keys: P, R, s1 (default 0), q (default 0), distractors
    ({step: [tables]}, steps 1-based), name.
    """
    try:
        mdp = EpisodicMDP(spec["P"], spec["R"], spec.get("s1", 0))
    except KeyError as exc:
        raise ScenarioError(f"scenario spec missing {exc}") from exc
    for key in ("S", "A", "H"):
        if key in spec and spec[key] != getattr(mdp, key):
            raise ScenarioError(f"declared {key} disagrees with the arrays")
    q = float(spec.get("q", 0.0))
    distractors = {int(h): [np.asarray(t, dtype=float) for t in ts] for h, ts in spec.get("distractors", {}).items()}
    steps = [None] * mdp.H
    nxt = [np.zeros((mdp.S, mdp.A))]
    chain = np.zeros((mdp.S, mdp.A))
    chain_parts = [0] * mdp.H
    total = 1
    for h in range(mdp.H, 0, -1):
        built = [quantize(episodic_backup(f, mdp, h), q) for f in nxt]
        tables = _dedup(built + distractors.get(h, []))
        total *= len(tables)
        if total > PRODUCT_LIMIT:
            raise ClassTooLarge(f"product class exceeds {PRODUCT_LIMIT} members")
        chain = quantize(episodic_backup(chain, mdp, h), q)
        chain_parts[h - 1] = next(i for i, t in enumerate(tables) if np.array_equal(t, chain))
        steps[h - 1] = np.stack(tables)
        nxt = tables
    fclass = ProductQClass(tuple(steps))
    c_cov, _ = coverability(fclass, mdp)
    diagnostics = {
        "name": spec.get("name", ""),
        "q": q,
        "sizes": list(fclass.sizes),
        "product_size": fclass.product_size,
        "eps_inf": realized_eps(fclass, mdp),
        "c_cov": c_cov,
        "chain_index": fclass.index_of(chain_parts),
        "j_star": optimal_value(mdp),
    }
    return OnlineScenario(mdp, fclass, diagnostics)


def scenario_to_json(spec: dict) -> str:
    def plain(v):
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, dict):
            return {str(k): plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v
    return json.dumps(plain(spec))


def arm_chain_spec(p, distractor_arms=(), q: float = 0.0, optimistic_value: float = 1.0,
                   next_step_bump: float = 0.0, name: str = "") -> dict:
    """Two-step instance: at s1 arm a leads to the good state w.p. p[a]; the
    second step pays 1 in the good state and 0 in the bad one.

    Each arm in ``distractor_arms`` gets a step-1 table that copies the
    quantised backup of the reward but claims ``optimistic_value`` on that
    arm. ``next_step_bump`` > 0 adds a second-step table that overvalues the
    bad state by that amount.
    """
    p = np.asarray(p, dtype=float)
    A = p.size
    S, s1, good, bad = 3, 0, 1, 2
    P = np.zeros((2, S, A, S))
    P[0, s1, :, good] = p
    P[0, s1, :, bad] = 1 - p
    for s in (good, bad):
        P[0, s, :, s] = 1.0
    for s in range(S):
        P[1, s, :, s] = 1.0
    R = np.zeros((2, S, A))
    R[1, good, :] = 1.0
    base = quantize(episodic_backup(R[1], EpisodicMDP(P, R, s1), 1), q)
    dist1 = []
    for arm in distractor_arms:
        t = base.copy()
        t[s1, arm] = optimistic_value
        dist1.append(t)
    distractors = {1: dist1}
    if next_step_bump > 0:
        t = R[1].copy()
        t[bad, :] = next_step_bump
        distractors[2] = [t]
    return {"name": name, "S": S, "A": A, "H": 2, "P": P, "R": R, "s1": s1, "q": q, "distractors": distractors}


def make_complete_instance() -> OnlineScenario:
    """Exactly complete (q = 0) four-arm instance with optimistic distractors."""
    spec = arm_chain_spec([0.3, 0.5, 0.6, 0.2], distractor_arms=(0, 1, 2, 3), q=0.0,
                          next_step_bump=0.2, name="complete_arms4")
    return make_online_scenario(spec)


def make_floor_instance(k: int, q: float = 0.1) -> OnlineScenario:
    """k arms, quantisation q: arms 0 and 1 (p = 0.40, 0.45) quantise to the
    same value so the tie-break settles on the worse arm; every other arm pays
    nothing. One distractor per arm >= 1 makes the induced policies cover all
    k arms, so coverability is k while the realised misspecification is q/2."""
    if k < 2:
        raise PreconditionViolation("need at least two arms")
    p = np.zeros(k)
    p[0], p[1] = 0.40, 0.45
    spec = arm_chain_spec(p, distractor_arms=tuple(range(1, k)), q=q, name=f"floor_arms{k}")
    return make_online_scenario(spec)


def random_episodic_mdp(seed: int, S: int = 4, A: int = 2, H: int = 3) -> EpisodicMDP:
    rng = make_rng(seed)
    P = rng.dirichlet(np.ones(S), size=(H, S, A))
    P /= P.sum(axis=3, keepdims=True)
    R = rng.uniform(0, 1.0 / H, size=(H, S, A))
    return EpisodicMDP(P, R, 0)
