import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dbr_lab.core import make_rng
from dbr_lab.errors import PreconditionViolation, ScenarioError, SupportViolation
from dbr_lab.offline_rl import (
    DiscountedMDP, OfflineScenario, QClass, bellman_backup, closest_member, concentrability, dbr_minimax_fit,
    greedy_policy, induced_policies, make_amplification_mdp, make_chain_scenario, minimax_objectives,
    minimax_objectives_direct, occupancy, policy_value, random_mdp, rl_misspec_level, sample_offline_dataset,
    suboptimality, transfer_coefficient, value_iteration,
)


def single_state(gamma=0.9, r=1.0):
    return DiscountedMDP(np.ones((1, 1, 1)), [[r]], [1.0], gamma)


def bandit(gamma=0.5):
    return DiscountedMDP(np.ones((1, 2, 1)), [[1.0, 0.0]], [1.0], gamma)


def rollout_value(mdp, pi, episodes, seed, horizon=None):
    """Truncated Monte-Carlo returns; truncation bias is below gamma^horizon / (1 - gamma)."""
    rng = make_rng(seed)
    horizon = horizon or int(math.ceil(math.log(1e-8) / math.log(mdp.gamma)))
    s = rng.choice(mdp.S, size=episodes, p=mdp.d0)
    ret = np.zeros(episodes)
    disc = 1.0
    cdf = np.cumsum(mdp.P, axis=2)
    for _ in range(horizon):
        a = pi[s]
        ret += disc * mdp.R[s, a]
        u = rng.random(episodes)
        s = np.minimum((u[:, None] > cdf[s, a]).sum(axis=1), mdp.S - 1)
        disc *= mdp.gamma
    return ret.mean(), ret.std() / math.sqrt(episodes)


# -- MDP validation and serialisation ----------------------------------------


def test_mdp_validation():
    with pytest.raises(PreconditionViolation):
        DiscountedMDP(np.full((1, 1, 1), 0.9), [[0.0]], [1.0], 0.9)
    with pytest.raises(PreconditionViolation):
        DiscountedMDP(np.ones((1, 1, 1)), [[1.5]], [1.0], 0.9)
    with pytest.raises(PreconditionViolation):
        DiscountedMDP(np.ones((1, 1, 1)), [[0.5]], [1.0], 1.0)


def test_mdp_json_round_trip():
    mdp = random_mdp(3)
    back = DiscountedMDP.from_dict(json.loads(json.dumps(mdp.to_dict())))
    assert np.array_equal(back.P, mdp.P) and np.array_equal(back.R, mdp.R) and back.gamma == mdp.gamma
    with pytest.raises(ScenarioError):
        DiscountedMDP.from_dict({"P": [[[1.0]]], "R": [[0.5]]})


def test_offline_scenario_round_trip():
    sc = make_amplification_mdp(16)
    back = OfflineScenario.from_dict(json.loads(sc.to_json()))
    assert np.array_equal(back.fclass.tables, sc.fclass.tables) and np.array_equal(back.mu, sc.mu)


# -- backup, value iteration, evaluation -------------------------------------


def test_backup_examples():
    mdp = random_mdp(0)
    zero_r = DiscountedMDP(mdp.P, np.zeros_like(mdp.R), mdp.d0, mdp.gamma)
    assert np.all(bellman_backup(np.zeros((mdp.S, mdp.A)), zero_r) == 0)
    assert bellman_backup(np.array([[10.0]]), single_state()) == pytest.approx(10.0)


def test_repeated_backups_reach_value_iteration_fixed_point():
    mdp = random_mdp(1, S=5, A=3)
    q_star, _ = value_iteration(mdp)
    f = np.zeros((5, 3))
    for _ in range(1000):
        f = bellman_backup(f, mdp)
    assert np.max(np.abs(f - q_star)) <= 1e-9


@given(st.integers(0, 2**32 - 1))
def test_backup_is_gamma_contraction(seed):
    mdp = random_mdp(seed % 1000)
    rng = make_rng(seed)
    f, g = rng.uniform(0, mdp.vmax, size=(2, mdp.S, mdp.A))
    lhs = np.max(np.abs(bellman_backup(f, mdp) - bellman_backup(g, mdp)))
    assert lhs <= mdp.gamma * np.max(np.abs(f - g)) + 1e-12


def test_policy_value_examples():
    assert policy_value([0], single_state()) == pytest.approx(10.0, abs=1e-12)
    mdp = random_mdp(4)
    flat = DiscountedMDP(mdp.P, np.zeros_like(mdp.R), mdp.d0, mdp.gamma)
    assert policy_value(np.zeros(mdp.S, int), flat) == 0.0
    with pytest.raises(PreconditionViolation):
        policy_value([5] * mdp.S, mdp)


def test_policy_value_matches_rollouts():
    mdp = random_mdp(6, S=6, A=2)
    pi = np.array([0, 1, 1, 0, 1, 0])
    mean, se = rollout_value(mdp, pi, 100_000, 6)
    assert abs(mean - policy_value(pi, mdp)) <= 5 * se


def test_occupancy_examples():
    assert np.array_equal(occupancy([0], single_state()), [[1.0]])
    mdp = random_mdp(7)
    tiny = DiscountedMDP(mdp.P, mdp.R, mdp.d0, 1e-12)
    pi = np.arange(mdp.S) % mdp.A
    expected = np.zeros((mdp.S, mdp.A))
    expected[np.arange(mdp.S), pi] = mdp.d0
    assert np.max(np.abs(occupancy(pi, tiny) - expected)) <= 1e-9


@given(st.integers(0, 500), st.integers(0, 2**16))
def test_occupancy_matches_truncated_series(seed, pol):
    mdp = random_mdp(seed)
    pi = np.array([(pol >> s) % mdp.A for s in range(mdp.S)])
    P_pi = mdp.P[np.arange(mdp.S), pi]
    rho, acc = mdp.d0.copy(), np.zeros(mdp.S)
    for h in range(1000):
        acc += (1 - mdp.gamma) * mdp.gamma**h * rho
        rho = rho @ P_pi
    d = occupancy(pi, mdp)
    assert abs(d.sum() - 1) <= 1e-10
    assert np.max(np.abs(d.sum(axis=1) - acc)) <= 1e-8


# -- coverage diagnostics ----------------------------------------------------


def brute_concentrability(mu, fclass, mdp):
    best = 0.0
    for f in fclass.tables:
        d = occupancy(greedy_policy(f), mdp)
        for s in range(mdp.S):
            for a in range(mdp.A):
                if d[s, a] > 1e-14:
                    best = max(best, d[s, a] / mu[s, a])
    return best


def brute_transfer(mu, fclass, mdp):
    best = None
    for f in fclass.tables:
        tf = bellman_backup(f, mdp)
        dists = [np.max(np.abs(g - tf)) for g in fclass.tables]
        apx = fclass.tables[dists.index(min(dists))]
        e2 = (f - apx) ** 2
        den = float((mu * e2).sum())
        if den == 0:
            continue
        for g in fclass.tables:
            r = float((occupancy(greedy_policy(g), mdp) * e2).sum()) / den
            best = r if best is None else max(best, r)
    return 1.0 if best is None else best


def test_concentrability_examples():
    mdp = random_mdp(8)
    q_star, _ = value_iteration(mdp)
    single = QClass(q_star[None])
    d = occupancy(greedy_policy(q_star), mdp)
    assert concentrability(d, single, mdp) == pytest.approx(1.0, abs=1e-12)
    uniform = np.full((mdp.S, mdp.A), 1 / (mdp.S * mdp.A))
    rng = make_rng(8)
    fclass = QClass(rng.uniform(0, mdp.vmax, size=(5, mdp.S, mdp.A)))
    assert concentrability(uniform, fclass, mdp) <= mdp.S * mdp.A + 1e-12
    sc = make_chain_scenario()
    assert concentrability(sc.mu, sc.fclass, sc.mdp) == pytest.approx(
        brute_concentrability(sc.mu, sc.fclass, sc.mdp), rel=1e-12)


def test_concentrability_support_violation():
    sc = make_chain_scenario()
    mu = np.array(sc.mu)
    mu[:, 0] = 0.0
    mu /= mu.sum()
    with pytest.raises(SupportViolation):
        concentrability(mu, sc.fclass, sc.mdp)


def test_transfer_examples():
    mdp = random_mdp(9)
    q_star, _ = value_iteration(mdp)
    assert transfer_coefficient(np.full((mdp.S, mdp.A), 1 / (mdp.S * mdp.A)), QClass(q_star[None]), mdp) == 1.0
    sc = make_chain_scenario()
    assert transfer_coefficient(sc.mu, sc.fclass, sc.mdp) == pytest.approx(
        brute_transfer(sc.mu, sc.fclass, sc.mdp), rel=1e-12)


def test_transfer_single_policy_matched_measure():
    mdp = random_mdp(10)
    q_star, _ = value_iteration(mdp)
    pi = greedy_policy(q_star)
    d = occupancy(pi, mdp)
    # second member shares the greedy policy, so only one occupancy matters
    f = q_star + 0.01
    fclass = QClass(np.clip(np.stack([q_star, f]), 0, mdp.vmax))
    assert len(induced_policies(fclass)) == 1
    assert transfer_coefficient(d, fclass, mdp) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_transfer_never_exceeds_concentrability(seed):
    rng = make_rng(seed)
    mdp = random_mdp(seed, S=4, A=2)
    fclass = QClass(rng.uniform(0, mdp.vmax, size=(4, 4, 2)))
    mu = rng.dirichlet(np.ones(8)).reshape(4, 2)
    assert transfer_coefficient(mu, fclass, mdp) <= concentrability(mu, fclass, mdp) * (1 + 1e-12)


def test_misspec_level_examples():
    mdp = random_mdp(11)
    q_star, _ = value_iteration(mdp)
    assert rl_misspec_level(QClass(q_star[None]), mdp) <= 1e-10
    shifted = q_star + 0.05
    # backup of a uniform shift moves every entry by gamma * 0.05
    assert rl_misspec_level(QClass(shifted[None]), mdp) == pytest.approx(0.05 * (1 - mdp.gamma), abs=1e-9)
    ones = DiscountedMDP(mdp.P, np.ones_like(mdp.R), mdp.d0, mdp.gamma)
    assert rl_misspec_level(QClass(np.zeros((1, mdp.S, mdp.A))), ones) == 1.0


def test_closest_member_lowest_index():
    tables = np.stack([np.full((1, 1), 1.0), np.full((1, 1), 3.0), np.full((1, 1), 1.0)])
    assert closest_member(np.full((1, 1), 2.0), QClass(tables)) == 0


def test_induced_policies_dedup():
    t = np.array([[[1.0, 0.0]], [[2.0, 0.5]], [[0.0, 1.0]]])
    pols = induced_policies(QClass(t))
    assert [p.tolist() for p in pols] == [[0], [1]]


# -- data and fitting --------------------------------------------------------


def test_sample_dataset_examples():
    sc = make_amplification_mdp(4)
    ds = sample_offline_dataset(sc.mdp, sc.mu, 20_000, 1)
    succ = np.argmax(sc.mdp.P[ds.s, ds.a], axis=1)
    deterministic = sc.mdp.P[ds.s, ds.a].max(axis=1) == 1.0
    assert np.array_equal(ds.s_next[deterministic], succ[deterministic])
    assert np.array_equal(ds.r, sc.mdp.R[ds.s, ds.a])
    again = sample_offline_dataset(sc.mdp, sc.mu, 20_000, 1)
    assert np.array_equal(ds.s_next, again.s_next) and np.array_equal(ds.a, again.a)
    with pytest.raises(PreconditionViolation):
        sample_offline_dataset(sc.mdp, sc.mu, 0, 1)


def test_sampled_pairs_match_mu():
    mdp = random_mdp(12)
    mu = make_rng(12).dirichlet(np.ones(mdp.S * mdp.A)).reshape(mdp.S, mdp.A)
    ds = sample_offline_dataset(mdp, mu, 100_000, 12)
    counts = np.bincount(ds.s * mdp.A + ds.a, minlength=mdp.S * mdp.A)
    exp = mu.ravel() * ds.n
    chi2 = float(np.sum((counts - exp) ** 2 / exp))
    assert chi2 < 50  # 14 dof


def test_minimax_fit_examples():
    sc = make_amplification_mdp(16)
    ds = sample_offline_dataset(sc.mdp, sc.mu, 1000, 2)
    single = QClass(sc.fclass.tables[:1])
    fit = dbr_minimax_fit(ds, single, sc.mdp, 0.15)
    assert (fit.index, fit.objective_value) == (0, 0.0)
    huge = 2 / (1 - sc.mdp.gamma) + 1
    fit = dbr_minimax_fit(ds, sc.fclass, sc.mdp, huge)
    assert (fit.index, fit.objective_value) == (0, 0.0)


@given(st.integers(0, 10_000), st.floats(0, 3), st.booleans())
@settings(max_examples=30)
def test_aggregated_minimax_matches_tuple_sum(seed, tau, filtered):
    rng = make_rng(seed)
    mdp = random_mdp(seed, S=4, A=2)
    fclass = QClass(rng.uniform(0, mdp.vmax, size=(3, 4, 2)))
    mu = rng.dirichlet(np.ones(8)).reshape(4, 2)
    ds = sample_offline_dataset(mdp, mu, 300, seed)
    a = minimax_objectives(ds, fclass, mdp, tau, filtered)
    b = minimax_objectives_direct(ds, fclass, mdp, tau, filtered)
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert np.all(a >= -1e-12)


def test_amplification_family_diagnostics():
    for c in (4, 16, 64):
        sc = make_amplification_mdp(c)
        d = sc.diagnostics
        assert d["eps_inf"] == pytest.approx(0.05, abs=1e-12)
        assert d["c_conc"] == pytest.approx(c, rel=1e-12)
        assert d["c_transfer"] <= d["c_conc"]
        assert d["suboptimality"][0] == pytest.approx(0.025, abs=1e-12)
        assert d["suboptimality"][1] == pytest.approx(0.9 * d["zeta"], rel=1e-9)


def test_filtered_fit_within_guarantee_scale():
    for c in (4, 64):
        sc = make_amplification_mdp(c)
        q_star, _ = value_iteration(sc.mdp)
        eps = sc.diagnostics["eps_inf"]
        for seed in range(3):
            ds = sample_offline_dataset(sc.mdp, sc.mu, 100_000, seed)
            f = dbr_minimax_fit(ds, sc.fclass, sc.mdp, 3 * eps).index
            assert suboptimality(sc.fclass[f], sc.mdp, q_star) <= 8 * eps / (1 - sc.mdp.gamma)


def layered_mdp(seed):
    """s0 -> {s1, s2} -> z (absorbing, zero reward): two backups reach Q* from
    any table that is zero at z, so {f, Tf, Q*} is closed under backup."""
    rng = make_rng(seed)
    S, A = 4, 2
    P = np.zeros((S, A, S))
    P[0] = rng.dirichlet(np.ones(2), size=A) @ np.eye(S)[[1, 2]]
    P[1, :, 3] = P[2, :, 3] = P[3, :, 3] = 1.0
    R = rng.uniform(0, 1, size=(S, A))
    R[3] = 0.0
    return DiscountedMDP(P, R, np.eye(S)[0], 0.9)


def test_unfiltered_and_tau_zero_agree_on_complete_class():
    for seed in range(5):
        mdp = layered_mdp(seed)
        rng = make_rng(100 + seed)
        raw = rng.uniform(0, 2, size=(3, 4, 2))
        raw[:, 3] = 0.0
        tables = list(raw) + [bellman_backup(f, mdp) for f in raw]
        tables += [bellman_backup(f, mdp) for f in tables[3:]]
        fclass = QClass(np.stack(tables))
        assert rl_misspec_level(fclass, mdp) == 0.0
        q_star, _ = value_iteration(mdp)
        mu = np.full((4, 2), 1 / 8)
        ds = sample_offline_dataset(mdp, mu, 2000, seed)
        a = dbr_minimax_fit(ds, fclass, mdp, 0.0, filtered=True)
        b = dbr_minimax_fit(ds, fclass, mdp, 0.0, filtered=False)
        assert a.index == b.index
        assert suboptimality(fclass[a.index], mdp, q_star) == suboptimality(fclass[b.index], mdp, q_star)


def test_suboptimality_examples():
    mdp = random_mdp(14)
    q_star, _ = value_iteration(mdp)
    assert abs(suboptimality(q_star, mdp)) <= 1e-9
    assert suboptimality(np.array([[0.0, 1.0]]), bandit()) == pytest.approx(2.0, abs=1e-12)


def test_suboptimality_matches_rollouts():
    mdp = random_mdp(15, S=5, A=2)
    q_star, _ = value_iteration(mdp)
    f = make_rng(15).uniform(0, mdp.vmax, size=(5, 2))
    pi_star, pi = greedy_policy(q_star), greedy_policy(f)
    m1, s1 = rollout_value(mdp, pi_star, 100_000, 1)
    m2, s2 = rollout_value(mdp, pi, 100_000, 2)
    assert abs((m1 - m2) - suboptimality(f, mdp, q_star)) <= 5 * math.hypot(s1, s2)


def test_class_bounds_checked():
    mdp = single_state()
    with pytest.raises(PreconditionViolation):
        QClass(np.full((1, 1, 1), 11.0)).check_bounds(mdp)
    with pytest.raises(PreconditionViolation):
        QClass(np.zeros((0, 1, 1)))
