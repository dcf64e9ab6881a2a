"""Two-pass grid search over the HyperLISTA scales ``(c1, c2, c3)``.

Fitness is plain inference: run the adaptive solver on a fixed minibatch
and average the final-layer NMSE. Pass 1 sweeps a coarse Cartesian grid,
pass 2 a finer grid in a box around the coarse winner.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Optional, Sequence

import numpy as np

from .metrics import aggregate_db, nmse_ratio
from .problems import Instance, ProblemSetup
from .solvers import CgSwitchConfig, HyperParams, run_batch

log = logging.getLogger(__name__)

# axes narrower than this collapse to a single point
DEGENERATE_WIDTH = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Search box and resolution.

    The default box was calibrated on the synthetic benchmark: the best
    ``c1`` sits well below 1 because ``mu * ||A^+ r||_1`` already
    overestimates the error scale, and ``c3`` only needs to cover the
    range where ``c3 * ln(ratio)`` crosses from 0 to 1.

    The minibatch is large because a too-large ``c1`` fails silently on
    rare flat-magnitude signals (the first threshold exceeds every entry
    and the iterate never leaves zero); small batches often miss them.
    """

    c1_range: tuple = (0.01, 0.3)
    c2_range: tuple = (0.0, 0.2)
    c3_range: tuple = (0.0, 0.3)
    coarse_points: int = 8
    fine_points: int = 8
    zoom_factor: float = 0.25
    minibatch_size: int = 1024

    def __post_init__(self):
        for name in ("c1_range", "c2_range", "c3_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"{name} must satisfy lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.c1_range[0] <= 0:
            raise ValueError("c1 must stay positive")
        if self.c2_range[0] < 0:
            raise ValueError("c2 must stay nonnegative")
        if self.c3_range[0] < 0 or self.c3_range[1] > 1:
            raise ValueError("c3 range must lie inside [0, 1]")
        if self.coarse_points < 2 or self.fine_points < 2:
            raise ValueError("need at least 2 points per axis")
        if not 0 < self.zoom_factor <= 1:
            raise ValueError("zoom_factor must lie in (0, 1]")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be positive")

    @property
    def ranges(self) -> tuple:
        return (self.c1_range, self.c2_range, self.c3_range)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        for name in ("c1_range", "c2_range", "c3_range"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


@dataclass(frozen=True)
class Evaluation:
    triple: tuple
    score: float
    pass_index: int


@dataclass
class SearchReport:
    evaluations: list
    best: tuple  # ((c1, c2, c3), score)
    tuning_seed: Optional[int]
    grid: Optional[GridSpec] = None
    base: dict = field(default_factory=dict)
    convention: str = "ratio"

    @property
    def best_triple(self) -> tuple:
        return self.best[0]

    @property
    def best_score(self) -> float:
        return self.best[1]

    def best_hyperparams(self) -> HyperParams:
        c1, c2, c3 = self.best_triple
        base = dict(self.base) if self.base else {"c1": c1, "c2": c2, "c3": c3}
        base.update(c1=c1, c2=c2, c3=c3)
        return HyperParams.from_dict(base)

    def to_dict(self) -> dict:
        return {
            "best": {"c1": self.best[0][0], "c2": self.best[0][1], "c3": self.best[0][2],
                     "nmse_db": self.best[1]},
            "tuning_seed": self.tuning_seed,
            "convention": self.convention,
            "grid": None if self.grid is None else self.grid.to_dict(),
            "hyperparams": self.best_hyperparams().to_dict(),
            "evaluations": [{"c1": e.triple[0], "c2": e.triple[1], "c3": e.triple[2],
                             "pass": e.pass_index, "nmse_db": e.score}
                            for e in self.evaluations],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["c1", "c2", "c3", "pass", "nmse_db"])
            for e in self.evaluations:
                w.writerow([repr(e.triple[0]), repr(e.triple[1]), repr(e.triple[2]),
                            e.pass_index, repr(e.score)])

    @classmethod
    def from_dict(cls, d: dict) -> "SearchReport":
        evals = [Evaluation((e["c1"], e["c2"], e["c3"]), e["nmse_db"], e["pass"])
                 for e in d.get("evaluations", [])]
        b = d["best"]
        grid = None if d.get("grid") is None else GridSpec.from_dict(d["grid"])
        return cls(evaluations=evals, best=((b["c1"], b["c2"], b["c3"]), b["nmse_db"]),
                   tuning_seed=d.get("tuning_seed"), grid=grid,
                   base=d.get("hyperparams", {}), convention=d.get("convention", "ratio"))

    @classmethod
    def read_json(cls, path) -> "SearchReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def evaluate_triple(setup: ProblemSetup, instances: Sequence[Instance], hp: HyperParams,
                    convention: str = "ratio") -> float:
    """Mean final NMSE (dB) of ``hp`` over ``instances``.

    Rows whose iterate overflows are zeroed, so a diverging triple scores
    0 dB instead of aborting the search.
    """
    instances = list(instances)
    if not instances:
        raise ValueError("need at least one instance")
    run = run_batch(setup, instances, hp=hp, record=False, on_nonfinite="zero")
    Xs = np.stack([inst.x_star for inst in instances])
    return aggregate_db(nmse_ratio(run.finals, Xs), convention)


def axis_points(lo: float, hi: float, count: int) -> list:
    if hi - lo <= DEGENERATE_WIDTH:
        return [float(lo)]
    return [float(v) for v in np.linspace(lo, hi, count)]


def zoom_box(center: float, lo: float, hi: float, zoom: float) -> tuple:
    """Interval of width ``zoom * (hi - lo)`` around ``center``, clipped."""
    half = 0.5 * zoom * (hi - lo)
    return max(lo, center - half), min(hi, center + half)


def _cells(axes) -> list:
    return [tuple(c) for c in product(*axes)]


def grid_search(setup: ProblemSetup, instances: Sequence[Instance],
                grid: Optional[GridSpec] = None, base: Optional[HyperParams] = None,
                threads: int = 1, tuning_seed: Optional[int] = None,
                convention: str = "ratio") -> SearchReport:
    """Coarse-to-fine search; returns every evaluation and the argmin.

    ``base`` supplies everything except the triple (layers, CG switch,
    p interpretation). Ties are broken by the smallest ``(c1, c2, c3)``, and
    the coarse winner is also a cell of the fine grid, so the
    result never gets worse than pass 1 and does not depend on ``threads``.
    """
    grid = grid or GridSpec()
    base = base or HyperParams(1.0, 0.0, 0.0, cg=CgSwitchConfig(mode="off"))
    batch = list(instances)[:grid.minibatch_size]
    if not batch:
        raise ValueError("need at least one tuning instance")
    cache: dict = {}

    def score(cell):
        hp = base.with_(c1=cell[0], c2=cell[1], c3=cell[2])
        return evaluate_triple(setup, batch, hp, convention)

    def run_pass(cells, pass_index):
        todo = [c for c in dict.fromkeys(cells) if c not in cache]
        if threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(score, todo))
        else:
            results = [score(c) for c in todo]
        cache.update(zip(todo, results))
        return [Evaluation(c, cache[c], pass_index) for c in cells]

    coarse_axes = [axis_points(lo, hi, grid.coarse_points) for lo, hi in grid.ranges]
    coarse = run_pass(_cells(coarse_axes), 1)
    c_best = min(coarse, key=lambda e: (e.score, e.triple))
    log.info("coarse pass: %d cells, best %s at %.3f dB",
             len(coarse), c_best.triple, c_best.score)

    fine_axes = []
    for centre, (lo, hi) in zip(c_best.triple, grid.ranges):
        flo, fhi = zoom_box(centre, lo, hi, grid.zoom_factor)
        fine_axes.append(axis_points(flo, fhi, grid.fine_points))
    fine_cells = _cells(fine_axes)
    if c_best.triple not in fine_cells:
        fine_cells.append(c_best.triple)
    fine = run_pass(fine_cells, 2)
    evaluations = coarse + fine
    best = min(evaluations, key=lambda e: (e.score, e.triple))
    log.info("fine pass: %d cells, best %s at %.3f dB", len(fine), best.triple, best.score)
    return SearchReport(evaluations=evaluations, best=(best.triple, best.score),
                        tuning_seed=tuning_seed, grid=grid, base=base.to_dict(),
                        convention=convention)

