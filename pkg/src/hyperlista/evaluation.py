"""NMSE curves and the synthetic benchmark experiments.

Every experiment is a pure function of its config: dictionaries, training,
validation and test sets come from child seeds of one master seed, and the
fixed-schedule baselines plus HyperLISTA are tuned on the same minibatch.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dictionary import build_setup
from .hypersearch import GridSpec, SearchReport, grid_search
from .metrics import CONVENTIONS, aggregate_db, nmse_db, nmse_ratio, ratio_to_db
from .problems import GenConfig, Instance, ProblemSetup, generate_dictionary, generate_instances
from .solvers import (CgSwitchConfig, HyperParams, RecoveryTrace,
                      fit_fixed_schedule, fit_ista_lambda, lipschitz_constant, run_batch,
                      run_ista)

log = logging.getLogger(__name__)

__all__ = [
    "nmse_db", "MetricCurve", "mean_curve", "ExperimentConfig", "PROFILES", "METHODS",
    "prepare_data", "tune_methods", "method_curves", "run_standard", "run_adaptivity_suite",
    "run_extrapolation", "SuperlinearConfig", "SuperlinearResult",
    "run_superlinear_experiment", "derive_seeds", "hp_digest",
]

METHODS = ("ista", "alista_fixed", "alista_mm_fixed", "hyperlista")
PROFILES = {"quick": (2048, 256, 256), "full": (51200, 2048, 2048)}
METHOD_LABELS = {
    "ista": "ISTA",
    "alista_fixed": "ALISTA (layer-wise grid fit)",
    "alista_mm_fixed": "ALISTA-MM (layer-wise grid fit)",
    "hyperlista": "HyperLISTA",
}


def derive_seeds(seed: int, count: int) -> list:
    """Independent 63-bit child seeds of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]


def hp_digest(hp: HyperParams) -> str:
    blob = json.dumps(hp.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- curves -----------------------------------------------------------------------------

@dataclass
class MetricCurve:
    per_layer_nmse_db: np.ndarray
    method_label: str
    config_label: str
    convention: str = "ratio"
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> float:
        return float(self.per_layer_nmse_db[-1])

    def at(self, layer: int) -> float:
        return float(self.per_layer_nmse_db[layer])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "nmse_db"])
            for k, v in enumerate(self.per_layer_nmse_db):
                w.writerow([k, repr(float(v))])

    def to_dict(self) -> dict:
        return {"method": self.method_label, "config": self.config_label,
                "convention": self.convention, "meta": self.meta,
                "nmse_db": [float(v) for v in self.per_layer_nmse_db]}


def _padded_ratios(traces: Sequence[RecoveryTrace], X_star: np.ndarray,
                   length: Optional[int] = None) -> np.ndarray:
    """Per-step NMSE ratios, shorter traces padded with their last iterate."""
    steps = [t.iterates.shape[0] for t in traces]
    length = max(steps) if length is None else length
    out = np.empty((len(traces), length))
    for i, t in enumerate(traces):
        r = nmse_ratio(t.iterates[:length], X_star[i])
        out[i, :r.size] = r
        out[i, r.size:] = r[-1]
    return out


def _curve_from_ratios(R: np.ndarray, convention: str) -> np.ndarray:
    return np.array([aggregate_db(R[:, k], convention) for k in range(R.shape[1])])


def mean_curve(traces: Sequence[RecoveryTrace], instances: Sequence[Instance],
               convention: str = "ratio", method_label: str = "",
               config_label: str = "") -> MetricCurve:
    """Average per-layer NMSE over aligned traces and instances."""
    if len(traces) != len(instances):
        raise ValueError(f"{len(traces)} traces but {len(instances)} instances")
    if not traces:
        raise ValueError("no traces")
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")
    X_star = np.stack([inst.x_star for inst in instances])
    R = _padded_ratios(traces, X_star)
    return MetricCurve(_curve_from_ratios(R, convention), method_label, config_label,
                       convention)


# -- experiment config ------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Synthetic benchmark setup.

    ``seed`` is the master seed; the dictionary, training, validation and
    test sets use independent child seeds of it. The shift experiments
    reuse the test seed, so every shifted test set pairs instance by
    instance with the matched one.
    """

    m: int = 250
    n: int = 500
    sparsity_p: float = 0.1
    magnitude_sigma: float = 1.0
    snr_db: Optional[float] = None
    profile: str = "quick"
    methods: tuple = METHODS
    layers_train: int = 16
    layers_test: int = 16
    seed: int = 0
    grid: GridSpec = field(default_factory=GridSpec)
    convention: str = "ratio"
    p_mode: str = "fraction"
    hyperlista_cg: CgSwitchConfig = field(default_factory=lambda: CgSwitchConfig(mode="off"))
    threads: int = 1
    counts: Optional[tuple] = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if not self.methods:
            raise ValueError("method list is empty")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.layers_train < 1 or self.layers_test < 1:
            raise ValueError("layer counts must be positive")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}")
        object.__setattr__(self, "methods", tuple(self.methods))

    @property
    def sizes(self) -> tuple:
        return tuple(self.counts) if self.counts is not None else PROFILES[self.profile]

    @property
    def seeds(self) -> dict:
        d, tr, va, te = derive_seeds(self.seed, 4)
        return {"dictionary": d, "train": tr, "validation": va, "test": te}

    def train_gen(self) -> GenConfig:
        return GenConfig(self.m, self.n, self.sparsity_p, self.magnitude_sigma, self.snr_db,
                         seed=self.seeds["train"], count=self.sizes[0])

    def test_gen(self, **changes) -> GenConfig:
        base = GenConfig(self.m, self.n, self.sparsity_p, self.magnitude_sigma, self.snr_db,
                         seed=self.seeds["test"], count=self.sizes[2])
        return base.replace(**changes)

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["seeds"] = self.seeds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = {k: v for k, v in d.items() if k != "seeds"}
        if "grid" in d and isinstance(d["grid"], dict):
            d["grid"] = GridSpec.from_dict(d["grid"])
        if "hyperlista_cg" in d and isinstance(d["hyperlista_cg"], dict):
            d["hyperlista_cg"] = CgSwitchConfig(**d["hyperlista_cg"])
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        if d.get("counts") is not None:
            d["counts"] = tuple(d["counts"])
        return cls(**d)


@dataclass
class ExperimentData:
    setup: ProblemSetup
    train: list
    validation: list
    test: list


@dataclass
class TunedMethods:
    """Frozen parameters of every method after tuning."""

    hp: Optional[HyperParams] = None
    search: Optional[SearchReport] = None
    ista_lambda: Optional[float] = None
    ista_L: Optional[float] = None
    schedules: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "hyperlista": None if self.hp is None else self.hp.to_dict(),
            "hyperlista_digest": None if self.hp is None else hp_digest(self.hp),
            "ista_lambda": self.ista_lambda,
            "ista_L": self.ista_L,
            "schedules": {k: v.to_dict() for k, v in self.schedules.items()},
        }


def prepare_data(config: ExperimentConfig, setup: Optional[ProblemSetup] = None,
                 with_validation: bool = True) -> ExperimentData:
    """Dictionary (unless given) plus train / validation / test sets."""
    seeds = config.seeds
    if setup is None:
        A = generate_dictionary(config.m, config.n, seeds["dictionary"])
        setup = build_setup(A)
    train = generate_instances(setup, config.train_gen())
    val = []
    if with_validation:
        val = generate_instances(setup, config.train_gen().replace(
            seed=seeds["validation"], count=config.sizes[1]))
    test = generate_instances(setup, config.test_gen())
    return ExperimentData(setup, train, val, test)


def tune_methods(setup: ProblemSetup, train: Sequence[Instance], config: ExperimentConfig,
                 hp: Optional[HyperParams] = None,
                 search: Optional[SearchReport] = None) -> TunedMethods:
    """Fit every configured method on the tuning minibatch.

    A given ``hp`` (for instance loaded from a search report) is used as is.
    """
    batch = list(train)[:config.grid.minibatch_size]
    tuned = TunedMethods(search=search)
    K = config.layers_train
    if "ista" in config.methods:
        tuned.ista_L = lipschitz_constant(setup.A)
        tuned.ista_lambda = fit_ista_lambda(setup, batch, K)
    if "alista_fixed" in config.methods:
        tuned.schedules["alista_fixed"] = fit_fixed_schedule(setup, batch, K, momentum=False)
    if "alista_mm_fixed" in config.methods:
        tuned.schedules["alista_mm_fixed"] = fit_fixed_schedule(setup, batch, K, momentum=True)
    if "hyperlista" in config.methods:
        if hp is None:
            base = HyperParams(1.0, 0.0, 0.0, layers=K, cg=config.hyperlista_cg,
                               p_mode=config.p_mode)
            search = grid_search(setup, batch, config.grid, base=base, threads=config.threads,
                                 tuning_seed=config.seeds["train"], convention=config.convention)
            hp = search.best_hyperparams()
            tuned.search = search
        tuned.hp = hp
    return tuned


def _method_ratios(setup, tuned: TunedMethods, method: str, instances, layers: int):
    X_star = np.stack([inst.x_star for inst in instances])
    if method == "ista":
        run = run_ista(setup, instances, tuned.ista_lambda, layers, L=tuned.ista_L)
        return _padded_ratios(run.traces, X_star, layers + 1)
    if method in ("alista_fixed", "alista_mm_fixed"):
        sched = tuned.schedules[method].extended(layers)
        run = run_batch(setup, instances, schedule=sched, layers=layers, record=True,
                        on_nonfinite="zero")
        return _padded_ratios(run.traces, X_star, layers + 1)
    if method == "hyperlista":
        hp = tuned.hp.with_(layers=layers)
        run = run_batch(setup, instances, hp=hp, record=True, on_nonfinite="zero")
        return _padded_ratios(run.traces, X_star, None)
    raise ValueError(f"unknown method {method!r}")


def method_curves(setup: ProblemSetup, tuned: TunedMethods, methods: Sequence[str],
                  instances: Sequence[Instance], layers: int, config_label: str,
                  convention: str = "ratio") -> list:
    """One curve per method on ``instances``, ``layers`` steps each."""
    curves = []
    for method in methods:
        R = _method_ratios(setup, tuned, method, list(instances), layers)
        label = METHOD_LABELS[method]
        if method in tuned.schedules and layers > tuned.schedules[method].layers:
            label += " extrapolated"
        meta = {"method": method, "instances": len(instances), "layers": layers}
        if method == "hyperlista":
            meta["hp"] = tuned.hp.with_(layers=layers).to_dict()
            meta["hp_digest"] = hp_digest(tuned.hp)
        curves.append(MetricCurve(_curve_from_ratios(R, convention), label, config_label,
                                  convention, meta))
    return curves


def run_standard(setup: ProblemSetup, config: ExperimentConfig, data=None,
                 tuned: Optional[TunedMethods] = None) -> tuple:
    """Matched train / test comparison; returns ``(curves, tuned)``."""
    data = data or prepare_data(config, setup)
    tuned = tuned or tune_methods(data.setup, data.train, config)
    curves = method_curves(data.setup, tuned, config.methods, data.test, config.layers_test,
                           "matched", config.convention)
    return curves, tuned


SHIFTS = {
    "matched": {},
    "p=0.15": {"sparsity_p": 0.15},
    "sigma=2": {"magnitude_sigma": 2.0},
    "snr=30": {"snr_db": 30.0},
}


def run_adaptivity_suite(setup: ProblemSetup, config: ExperimentConfig, data=None,
                         tuned: Optional[TunedMethods] = None) -> tuple:
    """Frozen parameters on the matched and three shifted test sets.

    Returns ``(curves, tuned)``. Every curve carries the digest of the
    HyperLISTA parameters it was produced with.
    """
    data = data or prepare_data(config, setup)
    tuned = tuned or tune_methods(data.setup, data.train, config)
    digest = hp_digest(tuned.hp) if tuned.hp is not None else None
    curves = []
    for label, change in SHIFTS.items():
        instances = generate_instances(data.setup, config.test_gen(**change))
        for c in method_curves(data.setup, tuned, config.methods, instances,
                               config.layers_test, label, config.convention):
            c.meta["suite_hp_digest"] = digest
            c.meta["shift"] = change
            curves.append(c)
    return curves, tuned


def run_extrapolation(setup: ProblemSetup, config: ExperimentConfig, data=None,
                      tuned: Optional[TunedMethods] = None) -> tuple:
    """Tune at ``layers_train``, run to ``layers_test``.

    HyperLISTA keeps its scales; fixed schedules repeat their last layer.
    Returns ``(curves, tuned)``.
    """
    data = data or prepare_data(config, setup)
    tuned = tuned or tune_methods(data.setup, data.train, config)
    curves = method_curves(data.setup, tuned, config.methods, data.test, config.layers_test,
                           f"extrapolate-{config.layers_test}", config.convention)
    return curves, tuned


# -- superlinear experiment ------------------------------------------------------------------

@dataclass(frozen=True)
class SuperlinearConfig:
    """Small constant-amplitude problem with the CG hand-over.

    The CG-off ablation gets, per instance, exactly as many iterations as
    the CG run used on that instance.
    """

    m: int = 50
    n: int = 100
    sparsity_p: float = 0.1
    constant_value: float = 1.0
    dictionary_seed: int = 1
    tuning_seed: int = 5
    test_seed: int = 11
    tuning_count: int = 256
    test_count: int = 100
    max_iterations: int = 100
    stability_window: int = 10
    support_filter: float = 0.1
    stop_nmse_db: float = -250.0
    grid: GridSpec = field(default_factory=lambda: GridSpec(
        c1_range=(0.02, 0.3), c2_range=(0.0, 0.2), c3_range=(0.0, 0.0)))
    hp: Optional[tuple] = None  # fixed (c1, c2) skips the search
    single_index: int = 0
    threads: int = 1

    def gen(self, seed: int, count: int) -> GenConfig:
        return GenConfig(self.m, self.n, self.sparsity_p, nonzero_mode="constant",
                         constant_value=self.constant_value, seed=seed, count=count)

    def cg(self) -> CgSwitchConfig:
        return CgSwitchConfig(mode="support_stable", stability_window=self.stability_window,
                              support_filter=self.support_filter,
                              stop_nmse_db=self.stop_nmse_db,
                              total_budget=self.max_iterations)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SuperlinearConfig":
        d = dict(d)
        if isinstance(d.get("grid"), dict):
            d["grid"] = GridSpec.from_dict(d["grid"])
        if d.get("hp") is not None:
            d["hp"] = tuple(d["hp"])
        return cls(**d)


@dataclass
class SuperlinearResult:
    hp: HyperParams
    single_curve: MetricCurve
    mean_curve: MetricCurve
    final_nmse_db: np.ndarray
    steps: np.ndarray
    switch_layers: list
    ablation_final_nmse_db: np.ndarray
    stop_nmse_db: float
    search: Optional[SearchReport] = None

    @property
    def reach_rate(self) -> float:
        return float(np.mean(self.final_nmse_db <= self.stop_nmse_db))

    @property
    def ablation_reached(self) -> int:
        return int(np.sum(self.ablation_final_nmse_db <= self.stop_nmse_db))

    @property
    def single_switch(self) -> Optional[int]:
        return self.switch_layers[self.single_curve.meta["index"]]

    def single_rates(self) -> tuple:
        """Mean NMSE drop per step before and after the switch (dB)."""
        k = self.single_switch
        if k is None:
            return math.nan, math.nan
        c = self.single_curve.per_layer_nmse_db
        pre = (c[0] - c[k]) / k
        post_steps = len(c) - 1 - k
        post = (c[k] - c[-1]) / post_steps if post_steps > 0 else math.nan
        return float(pre), float(post)

    def to_dict(self) -> dict:
        pre, post = self.single_rates()
        switches = [s for s in self.switch_layers if s is not None]
        return {
            "hp": self.hp.to_dict(),
            "reach_rate": self.reach_rate,
            "ablation_reached": self.ablation_reached,
            "single_switch_layer": self.single_switch,
            "single_pre_switch_rate_db": pre,
            "single_post_switch_rate_db": post,
            "switch_layers": self.switch_layers,
            "switch_layer_median": float(np.median(switches)) if switches else None,
            "steps": [int(s) for s in self.steps],
            "final_nmse_db": [float(v) for v in self.final_nmse_db],
            "ablation_final_nmse_db": [float(v) for v in self.ablation_final_nmse_db],
            "single_curve": self.single_curve.to_dict(),
            "mean_curve": self.mean_curve.to_dict(),
        }


def run_superlinear_experiment(config: Optional[SuperlinearConfig] = None) -> SuperlinearResult:
    """Unrolled phase, CG hand-over on a stable support, stop at the floor."""
    config = config or SuperlinearConfig()
    A = generate_dictionary(config.m, config.n, config.dictionary_seed)
    setup = build_setup(A)
    cg = config.cg()
    base = HyperParams(1.0, 0.0, 0.0, layers=config.max_iterations, cg=cg)
    search = None
    if config.hp is None:
        tune = generate_instances(setup, config.gen(config.tuning_seed, config.tuning_count))
        search = grid_search(setup, tune, config.grid, base=base, threads=config.threads,
                             tuning_seed=config.tuning_seed)
        hp = search.best_hyperparams()
    else:
        hp = base.with_(c1=float(config.hp[0]), c2=float(config.hp[1]))
    log.info("superlinear run with c1=%g c2=%g", hp.c1, hp.c2)

    test = generate_instances(setup, config.gen(config.test_seed, config.test_count))
    run = run_batch(setup, test, hp=hp, record=True)
    X_star = np.stack([inst.x_star for inst in test])
    finals = nmse_db(run.finals, X_star)
    steps = np.array([t.steps for t in run.traces])
    switches = [t.cg_switch_layer for t in run.traces]

    # ablation: CG off, each instance gets the iterations its CG run used
    ablation = np.empty(len(test))
    for i, inst in enumerate(test):
        hp_off = hp.with_(layers=int(steps[i]),
                          cg=CgSwitchConfig(mode="off", stop_nmse_db=config.stop_nmse_db))
        out = run_batch(setup, [inst], hp=hp_off, record=False)
        ablation[i] = nmse_db(out.finals[0], inst.x_star)

    idx = config.single_index
    single = _padded_ratios([run.traces[idx]], X_star[idx:idx + 1])[0]
    single_curve = MetricCurve(ratio_to_db(single), "HyperLISTA + CG", "superlinear-single",
                               "ratio", {"index": idx, "switch_layer": switches[idx]})
    mean = mean_curve(run.traces, test, "ratio", "HyperLISTA + CG", "superlinear-mean")
    return SuperlinearResult(hp=hp, single_curve=single_curve, mean_curve=mean,
                             final_nmse_db=finals, steps=steps, switch_layers=switches,
                             ablation_final_nmse_db=ablation,
                             stop_nmse_db=config.stop_nmse_db, search=search)


def write_report(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
