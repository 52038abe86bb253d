import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dbr_lab.core import (
    CovariateGrid, DiscreteDistribution, FunctionClass, FunctionTable, NoiseModel, RegressionDataset, Scenario,
    density_ratio_coefficient, make_rng, make_scenario_amplification, make_scenario_eight_member,
    make_scenario_linf_inconsistency, make_scenario_random, make_scenario_realizable, misspecification_level, risk,
    sample_dataset,
)
from dbr_lab.errors import PreconditionViolation, ScenarioError, SupportViolation


def weights(m, min_size=1):
    return st.lists(st.floats(0.0, 10.0), min_size=m, max_size=m).filter(lambda w: sum(w) > 1e-3)


# -- grid and distributions ---------------------------------------------------


def test_grid_cells_partition_unit_interval():
    g = CovariateGrid(8)
    assert g.width == 1 / 8
    assert g.cell_bounds(3) == (3 / 8, 4 / 8)
    assert g.cell_of(0.0) == 0 and g.cell_of(0.999) == 7 and g.cell_of(3 / 8) == 3
    with pytest.raises(PreconditionViolation):
        CovariateGrid(0)


def test_distribution_renormalises_only_within_tolerance():
    d = DiscreteDistribution([0.5, 0.5 + 5e-13])
    assert abs(d.weights.sum() - 1) < 1e-15
    with pytest.raises(PreconditionViolation):
        DiscreteDistribution([0.5, 0.6])
    with pytest.raises(PreconditionViolation):
        DiscreteDistribution([1.5, -0.5])


def test_function_table_sup_bound():
    with pytest.raises(PreconditionViolation):
        FunctionTable([0.2, 1.01])
    assert FunctionTable.constant(3, -1.0).values.tolist() == [-1.0] * 3


def test_class_rejects_mixed_grids_and_empty():
    with pytest.raises(PreconditionViolation):
        FunctionClass(([0.1], [0.1, 0.2]))
    with pytest.raises(PreconditionViolation):
        FunctionClass(())


# -- coefficients ------------------------------------------------------------


def test_density_ratio_examples():
    d = DiscreteDistribution.uniform(32)
    assert density_ratio_coefficient(d, d) == 1.0
    sc = make_scenario_amplification(0.1, 16, 0.39, 1600)
    assert density_ratio_coefficient(sc.d_test, sc.d_train) == pytest.approx(16.0, abs=1e-12)
    with pytest.raises(SupportViolation):
        density_ratio_coefficient(DiscreteDistribution([0.5, 0.5]), DiscreteDistribution([1.0, 0.0]))


@given(weights(6), weights(6))
def test_density_ratio_at_least_one(a, b):
    b = [x + 0.01 for x in b]
    t, r = DiscreteDistribution(np.array(a) / sum(a)), DiscreteDistribution(np.array(b) / sum(b))
    c = density_ratio_coefficient(t, r)
    assert c >= 1 - 1e-12
    assert density_ratio_coefficient(r, r) == pytest.approx(1.0, abs=1e-12)


def test_density_ratio_one_iff_equal_on_support():
    r = DiscreteDistribution([0.25, 0.25, 0.5])
    assert density_ratio_coefficient(DiscreteDistribution([0.5, 0.5, 0.0]), r) == 2.0
    # a test distribution that differs from train must put excess mass somewhere
    assert density_ratio_coefficient(DiscreteDistribution([0.2, 0.3, 0.5]), r) > 1.0


def test_misspecification_examples():
    sc = make_scenario_amplification(0.1, 16, 0.39, 1600)
    assert misspecification_level(sc.fclass, sc.f_star) == pytest.approx(0.1, abs=1e-15)
    f = FunctionTable([0.3, 0.4])
    assert misspecification_level(FunctionClass((f, [0.0, 0.0])), f) == 0.0
    assert misspecification_level(FunctionClass(([1.0, 1.0],)), FunctionTable([0.0, 0.0])) == 1.0


def test_risk_examples():
    sc = make_scenario_amplification(0.1, 16, 0.39, 1600)
    assert risk(sc.f_star, sc.f_star, sc.d_test) == 0.0
    assert risk(sc.fclass[0], sc.f_star, sc.d_test) == pytest.approx(0.01, abs=1e-12)
    assert risk(sc.fclass[1], sc.f_star, sc.d_test) == pytest.approx(0.1521, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_risk_invariant_under_cell_relabeling(seed):
    rng = make_rng(seed)
    m = 7
    f, fs = rng.uniform(-1, 1, m), rng.uniform(-1, 1, m)
    d = rng.dirichlet(np.ones(m))
    perm = rng.permutation(m)
    a = risk(FunctionTable(f), FunctionTable(fs), DiscreteDistribution(d))
    b = risk(FunctionTable(f[perm]), FunctionTable(fs[perm]), DiscreteDistribution(d[perm]))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


# -- scenarios ---------------------------------------------------------------


def test_amplification_construction():
    sc = make_scenario_amplification(0.1, 16, 0.39, 1600)
    assert sc.c_inf == pytest.approx(16.0, abs=1e-12) and sc.eps_inf == pytest.approx(0.1)
    assert sc.risk_train(1) == pytest.approx(0.39**2 / 16, abs=1e-12)  # 0.00951 < 0.01
    assert sc.risk_train(0) == pytest.approx(0.01, abs=1e-12)
    flat = make_scenario_amplification(0.1, 1, 0.05, 100)
    assert np.all(flat.fclass[1].values == 0.55)
    with pytest.raises(PreconditionViolation):
        make_scenario_amplification(0.2, 16, 0.5, 1600)
    with pytest.raises(PreconditionViolation):
        make_scenario_amplification(0.1, 16, 0.39, 1000)  # block not aligned


@pytest.mark.parametrize("eps,c,zeta", [(0.1, 25, 0.45), (0.05, 16, 0.1), (0.1, 4, 0.15)])
def test_amplification_train_risks_closed_form(eps, c, zeta):
    sc = make_scenario_amplification(eps, c, zeta, 400)
    assert abs(sc.risk_train(1) - zeta**2 / c) <= 1e-12
    assert abs(sc.risk_train(0) - eps**2) <= 1e-12


def test_linf_scenario():
    sc = make_scenario_linf_inconsistency()
    assert sc.eps_inf == 0 and sc.c_inf == 1
    assert sc.best_index() == 0


def test_noise_model_range_checks():
    with pytest.raises(PreconditionViolation):
        NoiseModel.two_point(0.3).check(FunctionTable([0.8]))
    with pytest.raises(PreconditionViolation):
        NoiseModel.bernoulli().check(FunctionTable([-0.1]))


@pytest.mark.parametrize("noise", [NoiseModel.two_point(0.25), NoiseModel.bernoulli()])
def test_noise_conditional_mean(noise):
    means = np.array([0.1, 0.5, 0.7])
    rng = make_rng(11)
    n = 100_000
    draws = np.stack([noise.sample(np.full(n, mu), rng.random(n)) for mu in means])
    se = np.sqrt(noise.conditional_variance(means) / n)
    assert np.all(np.abs(draws.mean(axis=1) - means) <= 5 * se)


def test_sample_dataset_contract():
    sc = make_scenario_random(3)
    with pytest.raises(PreconditionViolation):
        sample_dataset(sc, 0, 1)
    a, b = sample_dataset(sc, 500, 42), sample_dataset(sc, 500, 42)
    assert np.array_equal(a.cells, b.cells) and np.array_equal(a.y, b.y)
    gap = np.abs(a.y - sc.f_star.values[a.cells])
    assert np.allclose(gap, sc.noise.b, atol=1e-15)
    assert not np.array_equal(sample_dataset(sc, 500, 43).y, a.y)


def test_sampled_cells_follow_train_distribution():
    sc = make_scenario_eight_member()
    ds = sample_dataset(sc, 100_000, 5)
    counts, _ = ds.cell_stats(sc.grid.m)
    expected = sc.d_train.weights * ds.n
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < 45  # 15 dof, far tail


def test_dataset_validation():
    with pytest.raises(PreconditionViolation):
        RegressionDataset.from_pairs([(0, 1.5)])
    ds = RegressionDataset.from_pairs([(0, 0.5), (2, -0.5)])
    with pytest.raises(PreconditionViolation):
        ds.check_grid(2)


def test_scenario_json_round_trip_is_exact():
    sc = make_scenario_random(9)
    doc = json.loads(sc.to_json())
    assert set(doc) >= {"grid", "d_train", "d_test", "f_star", "class", "noise", "eps_inf", "c_inf"}
    back = Scenario.from_json(sc.to_json())
    assert np.array_equal(back.fclass.matrix, sc.fclass.matrix)
    assert back.eps_inf == sc.eps_inf and back.c_inf == sc.c_inf
    doc["eps_inf"] = 0.5
    with pytest.raises(ScenarioError):
        Scenario.from_dict(doc)


def test_scenario_rejects_test_mass_off_train_support():
    f = FunctionTable([0.5, 0.5])
    with pytest.raises((SupportViolation, ScenarioError, PreconditionViolation)):
        Scenario(CovariateGrid(2), DiscreteDistribution([1.0, 0.0]), DiscreteDistribution([0.5, 0.5]), f,
                 FunctionClass((f,)), NoiseModel.bernoulli())


@given(st.integers(0, 10_000))
def test_random_scenarios_satisfy_assumptions(seed):
    sc = make_scenario_random(seed)
    assert 0 <= sc.eps_inf <= 0.12 + 1e-12  # planted member bounds it; others may do better
    assert sc.c_inf >= 1
    assert np.max(np.abs(sc.fclass.matrix)) <= 1
    assert np.max(np.abs(sc.f_star.values)) + sc.noise.b <= 1


def test_builtin_scenarios_are_consistent():
    for sc in (make_scenario_eight_member(), make_scenario_realizable()):
        assert sc.eps_inf == misspecification_level(sc.fclass, sc.f_star)
        assert math.isfinite(sc.c_inf)
    assert make_scenario_realizable().eps_inf == 0.0
