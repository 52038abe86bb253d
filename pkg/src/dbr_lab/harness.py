"""Experiment configuration, seeded sweeps and result persistence.

A run writes ``results.csv`` (one row per metric) and ``manifest.json``
(config echo, package version, wall time) into the output directory.
Metric values depend only on the config, so re-running reproduces the CSV
byte for byte.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, acceptance, core, offline_rl, online_rl, regression
from .errors import ConfigError, DbrLabError, ScenarioError
from .regression import DbrConfig

KINDS = ("regression_sweep", "lower_bound", "adaptive_tau", "star_linf", "offline_rl", "online_rl", "verify")
CSV_HEADER = ["experiment", "replicate", "seed", "n", "algorithm", "metric", "value"]

REGRESSION_SCENARIOS = {
    "amplification_c25": lambda: core.make_scenario_amplification(0.1, 25, 0.45, 1000),
    "star_c16": lambda: core.make_scenario_amplification(0.1, 16, 0.4, 1600, strict=False),
    "linf_singleton": core.make_scenario_linf_inconsistency,
    "eight_member": core.make_scenario_eight_member,
    "realizable": core.make_scenario_realizable,
}
OFFLINE_SCENARIOS = {
    "amplification_mdp_c4": lambda: offline_rl.make_amplification_mdp(4),
    "amplification_mdp_c16": lambda: offline_rl.make_amplification_mdp(16),
    "amplification_mdp_c64": lambda: offline_rl.make_amplification_mdp(64),
    "chain4": offline_rl.make_chain_scenario,
}
ONLINE_SCENARIOS = {
    "complete_arms4": online_rl.make_complete_instance,
    "floor_arms2": lambda: online_rl.make_floor_instance(2),
    "floor_arms8": lambda: online_rl.make_floor_instance(8),
    "floor_arms32": lambda: online_rl.make_floor_instance(32),
}
BUILDERS = {
    "amplification": core.make_scenario_amplification,
    "random": core.make_scenario_random,
    "eight_member": core.make_scenario_eight_member,
    "realizable": core.make_scenario_realizable,
    "linf_singleton": core.make_scenario_linf_inconsistency,
    "amplification_mdp": offline_rl.make_amplification_mdp,
    "chain4": offline_rl.make_chain_scenario,
    "complete_arms4": online_rl.make_complete_instance,
    "floor_arms": online_rl.make_floor_instance,
}
DEFAULT_SCENARIO = {
    "regression_sweep": "amplification_c25",
    "lower_bound": "amplification_c25",
    "adaptive_tau": "amplification_c25",
    "star_linf": "star_c16",
    "offline_rl": "amplification_mdp_c16",
    "online_rl": "complete_arms4",
}


@dataclass
class ExperimentConfig:
    kind: str
    scenario: object = None  # builtin name, path to a JSON file, or inline dict
    n_grid: list = field(default_factory=lambda: [100, 1000])
    T: int = 1000
    replicates: int = 1
    base_seed: int = 0
    params: dict = field(default_factory=dict)
    output_path: str = "results"
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.replicates, int) or self.replicates < 1:
            raise ConfigError("replicates must be an integer >= 1")
        if not isinstance(self.base_seed, int) or not 0 <= self.base_seed < 2 ** 64:
            raise ConfigError("base_seed must be a 64-bit non-negative integer")
        grid = list(self.n_grid)
        if not grid or any(not isinstance(n, int) or n < 1 for n in grid):
            raise ConfigError("n_grid must be a non-empty list of positive integers")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("n_grid must be strictly increasing")
        if not isinstance(self.T, int) or self.T < 1:
            raise ConfigError("T must be a positive integer")
        if not isinstance(self.params, dict):
            raise ConfigError("params must be an object")
        self.n_grid = grid
        if not self.name:
            self.name = self.kind

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "kind" not in doc:
            raise ConfigError("config needs a 'kind'")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        cfg = cls.from_json(path.read_text())
        cfg._base_dir = str(path.parent)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    replicate: int
    seed: int
    n: object
    algorithm: str
    metric: str
    value: float

    def cells(self) -> list:
        v = self.value
        text = repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
        return [self.experiment, self.replicate, self.seed, self.n, self.algorithm, self.metric, text]


# --------------------------------------------------------------------------
# Scenario resolution


def _load_doc(ref, cfg):
    if isinstance(ref, dict):
        return ref
    path = Path(ref)
    if not path.is_absolute() and getattr(cfg, "_base_dir", None):
        path = Path(cfg._base_dir) / path
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc


def resolve_scenario(cfg: ExperimentConfig, ref=None, registry=None):
    ref = cfg.scenario if ref is None else ref
    kind = cfg.kind
    if ref is None:
        ref = DEFAULT_SCENARIO[kind]
    if registry is None:
        registry = {"offline_rl": OFFLINE_SCENARIOS, "online_rl": ONLINE_SCENARIOS}.get(kind, REGRESSION_SCENARIOS)
    if isinstance(ref, str) and ref in registry:
        return registry[ref]()
    doc = _load_doc(ref, cfg)
    if "builder" in doc:
        args = {k: v for k, v in doc.items() if k != "builder"}
        if doc["builder"] not in BUILDERS:
            raise ScenarioError(f"unknown builder {doc['builder']!r}")
        try:
            return BUILDERS[doc["builder"]](**args)
        except (TypeError, DbrLabError) as exc:
            raise ScenarioError(f"builder {doc['builder']!r} rejected {args}: {exc}") from exc
    if registry is OFFLINE_SCENARIOS:
        return offline_rl.OfflineScenario.from_dict(doc)
    if registry is ONLINE_SCENARIOS:
        try:
            return online_rl.make_online_scenario(doc)
        except DbrLabError as exc:
            raise ScenarioError(str(exc)) from exc
    return core.Scenario.from_dict(doc)


# --------------------------------------------------------------------------
# Sweeps


def _rows_regression(cfg, sc):
    tau = cfg.params.get("tau", 3 * sc.eps_inf)
    for n in cfg.n_grid:
        for r in range(cfg.replicates):
            seed = cfg.base_seed + r
            ds = core.sample_dataset(sc, n, seed)
            fits = {"erm": regression.erm_fit(ds, sc.fclass), "dbr": regression.dbr_fit(ds, sc.fclass, DbrConfig(tau))}
            for alg, fit in fits.items():
                yield r, seed, n, alg, "selected_index", fit.index
                yield r, seed, n, alg, "risk_train", sc.risk_train(fit.index)
                yield r, seed, n, alg, "risk_test", sc.risk_test(fit.index)


def _rows_lower_bound(cfg, sc):
    tau = cfg.params.get("tau", 3 * sc.eps_inf)
    seed = cfg.base_seed
    erm = regression.erm_population(sc.f_star, sc.d_train, sc.fclass)
    dbr = regression.dbr_population(sc.f_star, sc.d_train, sc.fclass, DbrConfig(tau))
    for alg, fit in (("erm_population", erm), ("dbr_population", dbr)):
        yield 0, seed, "inf", alg, "selected_index", fit.index
        yield 0, seed, "inf", alg, "risk_test", sc.risk_test(fit.index)
    yield 0, seed, "inf", "reference", "c_inf_eps_inf_sq", sc.c_inf * sc.eps_inf ** 2
    yield 0, seed, "inf", "reference", "eps_inf_sq", sc.eps_inf ** 2


def _rows_adaptive(cfg, sc):
    delta = cfg.params.get("delta", 0.1)
    for n in cfg.n_grid:
        for r in range(cfg.replicates):
            seed = cfg.base_seed + r
            res = regression.dbr_adaptive_fit(core.sample_dataset(sc, n, seed), sc.fclass, delta)
            yield r, seed, n, "dbr_adaptive", "selected_index", res.index
            yield r, seed, n, "dbr_adaptive", "tau_hat", res.tau_hat
            yield r, seed, n, "dbr_adaptive", "empty_version_space", int(res.empty_version_space)
            yield r, seed, n, "dbr_adaptive", "risk_train", sc.risk_train(res.index)
            yield r, seed, n, "dbr_adaptive", "risk_test", sc.risk_test(res.index)


def _rows_star_linf(cfg, sc):
    parts = cfg.params.get("parts", ["star", "linf"])
    if "star" in parts:
        alpha, blend = regression.star_fit_population(sc.fclass, sc.f_star, sc.d_train)
        yield 0, cfg.base_seed, "inf", "star_population", "alpha", alpha
        yield 0, cfg.base_seed, "inf", "star_population", "risk_test", sc.risk_test(blend)
    if "linf" in parts:
        lsc = resolve_scenario(cfg, cfg.params.get("linf_scenario", "linf_singleton"), REGRESSION_SCENARIOS)
        for n in cfg.n_grid:
            for r in range(cfg.replicates):
                seed = cfg.base_seed + r
                fit = regression.linf_fit(core.sample_dataset(lsc, n, seed), lsc.fclass)
                yield r, seed, n, "linf", "selected_index", fit.index
                yield r, seed, n, "linf", "risk_train", lsc.risk_train(fit.index)


def _rows_offline(cfg, sc):
    tau = cfg.params.get("tau", 3 * offline_rl.rl_misspec_level(sc.fclass, sc.mdp))
    q_star, _ = offline_rl.value_iteration(sc.mdp)
    variants = [("dbr_minimax", True), ("minimax", False)]
    if "filtered" in cfg.params:
        variants = [v for v in variants if v[1] == bool(cfg.params["filtered"])]
    for n in cfg.n_grid:
        for r in range(cfg.replicates):
            seed = cfg.base_seed + r
            ds = offline_rl.sample_offline_dataset(sc.mdp, sc.mu, n, seed)
            for alg, flag in variants:
                fit = offline_rl.dbr_minimax_fit(ds, sc.fclass, sc.mdp, tau, filtered=flag)
                yield r, seed, n, alg, "selected_index", fit.index
                yield r, seed, n, alg, "suboptimality", offline_rl.suboptimality(sc.fclass[fit.index], sc.mdp, q_star)


def _rows_online(cfg, sc, out_dir):
    mdp, fclass, diag = sc
    p = cfg.params
    tau = p.get("tau", 3 * diag["eps_inf"])
    beta = p.get("beta", online_rl.golf_beta(cfg.T, mdp.H, fclass.product_size, p.get("delta", 0.1),
                                             p.get("c", online_rl.BETA_C)))
    variants = [("golf_dbr", True), ("golf", False)] if p.get("compare", False) else [("golf_dbr", p.get("filtered", True))]
    for r in range(cfg.replicates):
        seed = cfg.base_seed + r
        for alg, flag in variants:
            curve, logs = online_rl.golf_dbr_run(mdp, fclass, cfg.T, tau, beta, flag, seed, track=diag["chain_index"])
            if p.get("episode_logs", False):
                logs.write_csv(out_dir / f"episodes_{alg}_rep{r}.csv")
            yield r, seed, cfg.T, alg, "cumulative_regret", float(curve.cumulative[-1])
            yield r, seed, cfg.T, alg, "tail_average_gap", curve.tail_average()
            yield r, seed, cfg.T, alg, "final_version_space_size", int(logs.version_space_size[-1])
            yield r, seed, cfg.T, alg, "chain_member_survived", int(logs.tracked_member.all())


def _rows_verify(cfg, echo):
    for res in acceptance.run_all(echo):
        yield 0, cfg.base_seed, "", f"criterion_{res.cid}", "passed", int(res.passed)


def run_experiment(config: ExperimentConfig, echo=None) -> Path:
    """Run the sweep, write results.csv and manifest.json, return the directory."""
    out_dir = Path(config.output_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    kind = config.kind
    if kind == "verify":
        rows = _rows_verify(config, echo)
    else:
        sc = resolve_scenario(config)
        gen = {"regression_sweep": _rows_regression, "lower_bound": _rows_lower_bound, "adaptive_tau": _rows_adaptive,
               "star_linf": _rows_star_linf, "offline_rl": _rows_offline}.get(kind)
        rows = gen(config, sc) if gen else _rows_online(config, sc, out_dir)
    rows = [ResultRow(config.name, *row) for row in rows]
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow(row.cells())
    manifest = {
        "config": config.to_dict(),
        "version": __version__,
        "wall_time_s": time.perf_counter() - t0,
        "rows": len(rows),
    }
    if kind == "verify":
        manifest["all_passed"] = all(r.value == 1 for r in rows)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return out_dir


def verify_acceptance(echo=print) -> list:
    """Run every acceptance criterion; returns the CriterionResult list."""
    return acceptance.run_all(echo)


def all_passed(results) -> bool:
    return all(r.passed for r in results)
