"""Unrolled shrinkage-thresholding solvers.

Everything runs on row batches: ``X`` holds one iterate per row, ``Bm`` one
observation per row. In that layout ``W^T (b - A x)`` becomes
``(Bm - X A^T) W``. Single-instance entry points are thin wrappers over the
batch engine so a trace computed alone matches the batched one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .problems import Instance, ProblemSetup
from .thresholding import soft_threshold, support_select_threshold

log = logging.getLogger(__name__)

ZERO_RESIDUAL_RATIO = 1e-300
CG_MODES = ("off", "p_threshold", "support_stable")
P_MODES = ("fraction", "count")


class NonFiniteIterateError(FloatingPointError):
    def __init__(self, layer: int, params):
        self.layer = layer
        self.params = params
        super().__init__(f"non-finite iterate at layer {layer} with parameters {params}")


@dataclass(frozen=True)
class LayerParams:
    theta: float
    gamma: float
    beta: float
    p: int

    def __post_init__(self):
        if not (self.theta >= 0 and self.gamma > 0 and self.beta >= 0 and self.p >= 0):
            raise ValueError(f"invalid layer parameters {self}")


@dataclass(frozen=True)
class CgSwitchConfig:
    """When and how the unrolled phase hands over to conjugate gradients.

    ``mode`` is ``"off"``, ``"p_threshold"`` (fire once the support-selection
    count reaches ``p_fraction * n``) or ``"support_stable"`` (fire once the
    estimated support has been identical for ``stability_window``
    consecutive layers). ``stop_nmse_db`` needs the ground truth and is only
    meant for experiments; ``total_budget`` caps unrolled plus CG
    iterations.
    """

    mode: str = "p_threshold"
    p_fraction: float = 0.9
    stability_window: int = 10
    support_filter: float = 0.1
    max_cg_iters: Optional[int] = None
    cg_tol: float = 1e-14
    stop_nmse_db: Optional[float] = None
    total_budget: Optional[int] = None

    def __post_init__(self):
        if self.mode not in CG_MODES:
            raise ValueError(f"unknown CG mode {self.mode!r}")
        if not 0.0 < self.p_fraction <= 1.0:
            raise ValueError("p_fraction must lie in (0, 1]")
        if self.stability_window < 1:
            raise ValueError("stability_window must be >= 1")
        if not 0.0 <= self.support_filter < 1.0:
            raise ValueError("support_filter must lie in [0, 1)")


@dataclass(frozen=True)
class HyperParams:
    """The three HyperLISTA scales plus run switches.

    ``p_mode="fraction"`` reads the support-selection formula as a fraction
    of ``n``; ``"count"`` reads it as an entry count.
    """

    c1: float
    c2: float
    c3: float
    layers: int = 16
    cg: CgSwitchConfig = field(default_factory=CgSwitchConfig)
    p_mode: str = "fraction"

    def __post_init__(self):
        if not self.c1 > 0:
            raise ValueError("c1 must be positive")
        if self.c2 < 0:
            raise ValueError("c2 must be nonnegative")
        if not 0.0 <= self.c3 <= 1.0:
            raise ValueError("c3 must lie in [0, 1]")
        if self.layers < 0:
            raise ValueError("layers must be nonnegative")
        if self.p_mode not in P_MODES:
            raise ValueError(f"unknown p_mode {self.p_mode!r}")

    @property
    def triple(self) -> tuple:
        return (self.c1, self.c2, self.c3)

    def with_(self, **changes) -> "HyperParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        d = dict(d)
        cg = CgSwitchConfig(**d.pop("cg", {}))
        return cls(cg=cg, **d)


@dataclass
class RecoveryTrace:
    """Per-step record of one recovery run; ``iterates[0]`` is zero."""

    iterates: np.ndarray
    params: list
    phase_labels: list
    cg_switch_layer: Optional[int] = None
    warnings: list = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def steps(self) -> int:
        return len(self.iterates) - 1


@dataclass
class CgResult:
    x: np.ndarray
    iterates: list
    residual_norms: list
    converged: bool
    breakdown: bool


@dataclass(frozen=True)
class FixedSchedule:
    """Per-layer parameters shared by all instances (ALISTA-style baseline)."""

    params: tuple
    label: str = "fixed"

    @property
    def layers(self) -> int:
        return len(self.params)

    def extended(self, layers: int) -> "FixedSchedule":
        """Repeat the last layer's parameters up to ``layers``."""
        if layers <= self.layers:
            return FixedSchedule(self.params[:layers], self.label)
        tail = (self.params[-1],) * (layers - self.layers)
        return FixedSchedule(self.params + tail, self.label + "-extra")

    def to_dict(self) -> dict:
        return {"label": self.label,
                "params": [[p.theta, p.gamma, p.beta, p.p] for p in self.params]}

    @classmethod
    def from_dict(cls, d: dict) -> "FixedSchedule":
        return cls(tuple(LayerParams(float(t), float(g), float(b), int(p))
                         for t, g, b, p in d["params"]), d.get("label", "fixed"))


# -- single steps ---------------------------------------------------------------

def lipschitz_constant(A: np.ndarray, tol: float = 1e-8, max_iters: int = 10_000,
                       seed: int = 0) -> float:
    """Largest eigenvalue of ``A^T A`` by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iters):
        w = A.T @ (A @ v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - lam) <= tol * new:
            return new
        lam = new
    return lam


def ista_step(setup: ProblemSetup, b, x, lam: float, L: float):
    """One ISTA iteration with threshold ``lam / L``."""
    if L <= 0:
        raise ValueError("L must be positive")
    x = np.asarray(x, dtype=np.float64)
    z = x + (np.asarray(b) - x @ setup.A.T) @ setup.A / L
    return soft_threshold(z, lam / L)


def momentum_step(setup: ProblemSetup, b, x_k, x_km1, params: LayerParams, k: int):
    """``eta(x_k + gamma W^T (b - A x_k) + beta (x_k - x_km1))``; the momentum
    term is dropped at ``k = 0``."""
    x_k = np.asarray(x_k, dtype=np.float64)
    v = x_k + params.gamma * ((np.asarray(b) - x_k @ setup.A.T) @ setup.W)
    if k > 0 and params.beta != 0.0:
        v = v + params.beta * (x_k - np.asarray(x_km1))
    return support_select_threshold(v, params.theta, params.p)


def _adaptive_batch(setup: ProblemSetup, X, R, b_l1, hp: HyperParams, k: int):
    """Vectorized adaptive parameters; ``R = X A^T - Bm`` per row."""
    n = setup.n
    r_l1 = np.abs(R @ setup.A_pinv.T).sum(axis=1)
    gamma = np.ones(len(X))
    theta = hp.c1 * setup.mu * gamma * r_l1
    if k == 0:
        beta = np.zeros(len(X))
    else:
        beta = hp.c2 * setup.mu * np.count_nonzero(X, axis=1).astype(np.float64)

    p = np.zeros(len(X), dtype=np.int64)
    exact = r_l1 <= ZERO_RESIDUAL_RATIO * b_l1
    live = (b_l1 > 0) & ~exact
    if np.any(live):
        logratio = np.log(b_l1[live] / r_l1[live])
        raw = hp.c3 * np.minimum(logratio, n)
        if hp.p_mode == "fraction":
            raw = raw * n
        p[live] = np.clip(np.rint(raw), 0, n).astype(np.int64)
    p[exact & (b_l1 > 0)] = n
    theta[exact] = 0.0
    null = b_l1 == 0
    theta[null] = 0.0
    beta[null] = 0.0
    p[null] = 0
    return theta, gamma, beta, p


def adaptive_params(setup: ProblemSetup, x_k, b, hp: HyperParams, k: int,
                    b_pinv_l1: Optional[float] = None) -> LayerParams:
    """Instance-adaptive ``(theta, gamma, beta, p)`` for layer ``k``."""
    x = np.atleast_2d(np.asarray(x_k, dtype=np.float64))
    bb = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if b_pinv_l1 is None:
        b_pinv_l1 = float(np.abs(setup.A_pinv @ bb[0]).sum())
    R = x @ setup.A.T - bb
    theta, gamma, beta, p = _adaptive_batch(setup, x, R, np.array([b_pinv_l1]), hp, k)
    return LayerParams(float(theta[0]), float(gamma[0]), float(beta[0]), int(p[0]))


def estimate_support(x, filter_ratio: float = 0.0) -> np.ndarray:
    """Indices with ``|x_i| > filter_ratio * max|x|``; empty for ``x = 0``."""
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 <= filter_ratio < 1.0:
        raise ValueError("filter_ratio must lie in [0, 1)")
    a = np.abs(x)
    top = a.max() if a.size else 0.0
    if top == 0.0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(a > filter_ratio * top)


def _nmse_db(x, x_star) -> float:
    err = float(np.sum((x - x_star) ** 2))
    ref = float(np.sum(x_star ** 2))
    if err == 0.0:
        return -math.inf
    return 10.0 * math.log10(err / ref)


def cg_refine(setup: ProblemSetup, b, x_init, support, max_iters: Optional[int] = None,
              tol: float = 1e-14, x_star=None, stop_nmse_db: Optional[float] = None) -> CgResult:
    """Conjugate gradients on ``W_S^T A_S x_S = W_S^T b``.

    Starts from ``x_init`` restricted to ``support``; entries off the
    support stay zero. Stops after ``max_iters`` (default ``|S|``), when the
    residual drops below ``tol * ||W_S^T b||``, or, given ``x_star``, once
    the NMSE falls below ``stop_nmse_db``. If a non-positive curvature
    direction shows up the best iterate so far is returned with
    ``breakdown=True``.
    """
    S = np.asarray(support, dtype=np.int64)
    if S.size == 0:
        raise ValueError("empty support")
    n = setup.n
    WS, AS = setup.W[:, S], setup.A[:, S]
    Q = WS.T @ AS
    Q = 0.5 * (Q + Q.T)
    rhs = WS.T @ np.asarray(b, dtype=np.float64)
    iters = S.size if max_iters is None else int(max_iters)

    def embed(xs):
        full = np.zeros(n)
        full[S] = xs
        return full

    xs = np.asarray(x_init, dtype=np.float64)[S].copy()
    r = rhs - Q @ xs
    d = r.copy()
    rr = float(r @ r)
    stop = tol * float(np.linalg.norm(rhs))
    res = [math.sqrt(rr)]
    iterates = []
    best_x, best_res = xs.copy(), res[0]
    converged = res[0] <= stop
    breakdown = False
    for _ in range(iters):
        if converged:
            break
        Qd = Q @ d
        curv = float(d @ Qd)
        if curv <= 0.0 or not math.isfinite(curv):
            breakdown = True
            log.debug("CG breakdown: d^T Q d = %g on support of size %d", curv, S.size)
            break
        a = rr / curv
        xs = xs + a * d
        r = r - a * Qd
        rr_new = float(r @ r)
        res.append(math.sqrt(rr_new))
        iterates.append(embed(xs))
        if res[-1] < best_res:
            best_x, best_res = xs.copy(), res[-1]
        if res[-1] <= stop:
            converged = True
            break
        if x_star is not None and stop_nmse_db is not None \
                and _nmse_db(iterates[-1], x_star) <= stop_nmse_db:
            break
        d = r + (rr_new / rr) * d
        rr = rr_new
    x_out = embed(best_x) if breakdown else embed(xs)
    return CgResult(x=x_out, iterates=iterates, residual_norms=res,
                    converged=converged, breakdown=breakdown)


# -- batch engine -----------------------------------------------------------------

@dataclass
class BatchRun:
    finals: np.ndarray
    traces: Optional[list]
    switch_layers: np.ndarray
    failed: np.ndarray


def _as_batch(instances):
    if isinstance(instances, Instance):
        instances = [instances]
    if isinstance(instances, np.ndarray):
        return np.atleast_2d(instances), None
    Bm = np.stack([inst.b for inst in instances])
    Xs = np.stack([inst.x_star for inst in instances])
    return Bm, Xs


def run_batch(setup: ProblemSetup, instances, hp: Optional[HyperParams] = None,
              schedule: Optional[FixedSchedule] = None, layers: Optional[int] = None,
              cg: Optional[CgSwitchConfig] = None, record: bool = True,
              on_nonfinite: str = "raise") -> BatchRun:
    """Run the unrolled iteration on a batch of instances.

    Parameters come from ``hp`` (adaptive) or ``schedule`` (fixed). Each row
    may switch to CG independently; a switched or stopped row is frozen in
    the unrolled loop. With ``on_nonfinite="zero"`` a row whose iterate
    overflows is replaced by the zero vector instead of raising.
    """
    if (hp is None) == (schedule is None):
        raise ValueError("pass exactly one of hp or schedule")
    if not setup.is_built:
        raise ValueError("setup lacks W / mu; run build_setup first")
    Bm, Xs = _as_batch(instances)
    rows, n = Bm.shape[0], setup.n
    if layers is None:
        layers = hp.layers if hp is not None else schedule.layers
    if schedule is not None and schedule.layers < layers:
        raise ValueError(f"schedule has {schedule.layers} layers, {layers} requested")
    cg = cg if cg is not None else (hp.cg if hp is not None else CgSwitchConfig(mode="off"))
    budget = cg.total_budget
    if budget is not None:
        layers = min(layers, budget)
    want_stop = cg.stop_nmse_db is not None and Xs is not None

    b_l1 = np.abs(Bm @ setup.A_pinv.T).sum(axis=1)
    X = np.zeros((rows, n))
    Xprev = np.zeros((rows, n))
    active = np.ones(rows, dtype=bool)
    done_at = np.full(rows, layers, dtype=np.int64)
    switch = np.full(rows, -1, dtype=np.int64)
    failed = np.zeros(rows, dtype=bool)
    tails: list = [None] * rows
    notes: list = [[] for _ in range(rows)]
    stable_run = np.zeros(rows, dtype=np.int64)
    last_support: list = [None] * rows
    history = [X.copy()] if record else None
    param_hist = []

    def finish(i, k):
        active[i] = False
        done_at[i] = k

    for k in range(layers):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Xa, Xpa, Ba = X[idx], Xprev[idx], Bm[idx]
        R = Xa @ setup.A.T - Ba
        if hp is not None:
            theta, gamma, beta, p = _adaptive_batch(setup, Xa, R, b_l1[idx], hp, k)
        else:
            lp = schedule.params[k]
            theta = np.full(idx.size, lp.theta)
            gamma = np.full(idx.size, lp.gamma)
            beta = np.full(idx.size, lp.beta if k > 0 else 0.0)
            p = np.full(idx.size, min(lp.p, n), dtype=np.int64)
        with np.errstate(over="ignore", invalid="ignore"):
            V = Xa - gamma[:, None] * (R @ setup.W)
            if k > 0:
                V += beta[:, None] * (Xa - Xpa)
            Xn = support_select_threshold(V, theta, p)
        bad = ~np.all(np.isfinite(Xn), axis=1)
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            if on_nonfinite == "raise":
                raise NonFiniteIterateError(
                    k, dict(theta=float(theta[j]), gamma=float(gamma[j]),
                            beta=float(beta[j]), p=int(p[j]), row=int(idx[j])))
            Xn[bad] = 0.0
        Xprev[idx] = Xa
        X[idx] = Xn
        if record:
            full = np.full((4, rows), np.nan)
            full[:, idx] = np.stack([theta, gamma, beta, p.astype(np.float64)])
            param_hist.append(full)
            history.append(X.copy())

        for j in np.flatnonzero(bad):
            i = idx[j]
            failed[i] = True
            notes[i].append(f"non-finite iterate at layer {k}; output zeroed")
            finish(i, k + 1)

        for j, i in enumerate(idx):
            if not active[i]:
                continue
            if want_stop and _nmse_db(X[i], Xs[i]) <= cg.stop_nmse_db:
                finish(i, k + 1)
                continue
            fire = False
            if cg.mode == "p_threshold":
                fire = p[j] >= cg.p_fraction * n
            elif cg.mode == "support_stable":
                S = estimate_support(X[i], cg.support_filter)
                prev = last_support[i]
                if S.size and prev is not None and np.array_equal(S, prev):
                    stable_run[i] += 1
                else:
                    stable_run[i] = 1 if S.size else 0
                last_support[i] = S
                fire = stable_run[i] >= cg.stability_window
            if not fire:
                continue
            S = estimate_support(X[i], cg.support_filter)
            finish(i, k + 1)
            if S.size == 0:
                notes[i].append("empty support at CG switch; kept unrolled result")
                continue
            switch[i] = k + 1
            max_it = cg.max_cg_iters
            if budget is not None:
                room = budget - (k + 1)
                max_it = min(S.size if max_it is None else max_it, room)
            res = cg_refine(setup, Bm[i], X[i], S, max_iters=max_it, tol=cg.cg_tol,
                            x_star=None if Xs is None else Xs[i],
                            stop_nmse_db=cg.stop_nmse_db)
            if res.breakdown:
                notes[i].append("CG breakdown: system not positive definite on estimated support")
            tails[i] = res

    finals = X.copy()
    for i, res in enumerate(tails):
        if res is not None:
            finals[i] = res.x

    traces = None
    if record:
        traces = []
        for i in range(rows):
            L_i = int(done_at[i])
            its = [h[i] for h in history[:L_i + 1]]
            labels = ["unrolled"] * L_i
            plist = [LayerParams(float(ph[0, i]), float(ph[1, i]), float(ph[2, i]), int(ph[3, i]))
                     for ph in param_hist[:L_i]]
            res = tails[i]
            if res is not None:
                its.extend(res.iterates)
                labels.extend(["cg"] * len(res.iterates))
                if res.breakdown and res.iterates:
                    its[-1] = res.x
            traces.append(RecoveryTrace(
                iterates=np.array(its), params=plist, phase_labels=labels,
                cg_switch_layer=int(switch[i]) if switch[i] >= 0 else None,
                warnings=notes[i]))
    return BatchRun(finals=finals, traces=traces, switch_layers=switch, failed=failed)


def run_unrolled(setup: ProblemSetup, instance: Instance, hp: Optional[HyperParams] = None,
                 schedule: Optional[FixedSchedule] = None, layers: Optional[int] = None,
                 cg: Optional[CgSwitchConfig] = None) -> RecoveryTrace:
    """Unrolled run on one instance, adaptive (``hp``) or fixed (``schedule``).

    CG switching is off unless ``cg`` is given.
    """
    cg = cg if cg is not None else CgSwitchConfig(mode="off")
    return run_batch(setup, [instance], hp=hp, schedule=schedule, layers=layers,
                     cg=cg).traces[0]


def run_hyperlista(setup: ProblemSetup, instance: Instance, hp: HyperParams) -> RecoveryTrace:
    """Adaptive unrolled phase followed by CG on the estimated support."""
    return run_batch(setup, [instance], hp=hp).traces[0]


# -- ISTA ---------------------------------------------------------------------------

def run_ista(setup: ProblemSetup, instances, lam: float, layers: int,
             L: Optional[float] = None, record: bool = True) -> BatchRun:
    Bm, _ = _as_batch(instances)
    L = lipschitz_constant(setup.A) if L is None else L
    X = np.zeros((Bm.shape[0], setup.n))
    history = [X.copy()] if record else None
    for _ in range(layers):
        X = ista_step(setup, Bm, X, lam, L)
        if record:
            history.append(X)
    traces = None
    if record:
        lp = LayerParams(lam / L, 1.0 / L, 0.0, 0)
        traces = [RecoveryTrace(iterates=np.array([h[i] for h in history]),
                                params=[lp] * layers, phase_labels=["unrolled"] * layers)
                  for i in range(Bm.shape[0])]
    return BatchRun(finals=X, traces=traces, switch_layers=np.full(Bm.shape[0], -1),
                    failed=np.zeros(Bm.shape[0], dtype=bool))


def _score_db(X, Xs) -> float:
    ratio = np.sum((X - Xs) ** 2, axis=1) / np.sum(Xs ** 2, axis=1)
    m = float(np.mean(ratio))
    return -math.inf if m == 0.0 else 10.0 * math.log10(m)


def fit_ista_lambda(setup: ProblemSetup, instances: Sequence[Instance], layers: int,
                    grid: Optional[Sequence[float]] = None) -> float:
    """Pick the ISTA penalty from ``grid`` by final NMSE on ``instances``."""
    Bm, Xs = _as_batch(list(instances))
    L = lipschitz_constant(setup.A)
    grid = np.logspace(-4, 0, 17) if grid is None else grid
    scores = [(_score_db(run_ista(setup, Bm, lam, layers, L, record=False).finals, Xs), lam)
              for lam in grid]
    return float(min(scores)[1])


# -- fixed-schedule baselines -------------------------------------------------------

def alista_support_schedule(n: int, layers: int, percent: float = 1.2,
                            max_percent: float = 13.0) -> list:
    """``p_k = min(p * (k + 1), p_max)`` with both given in percent of ``n``."""
    return [int(round(n * min(percent * (k + 1), max_percent) / 100.0)) for k in range(layers)]


def fit_fixed_schedule(setup: ProblemSetup, instances: Sequence[Instance], layers: int,
                       momentum: bool = False,
                       beta_grid: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
                       gamma_grid: Sequence[float] = (0.8, 1.0, 1.2),
                       theta_points: int = 20, percent: float = 1.2,
                       max_percent: float = 13.0, label: Optional[str] = None) -> FixedSchedule:
    """Greedy layer-wise stand-in for a trained ALISTA / ALISTA-MM.

    Layer by layer, ``(gamma, theta)`` is picked from a grid to minimize the
    NMSE of that layer's output on ``instances``. ``theta`` candidates are
    scaled by the median peak magnitude of the pre-threshold vector. For
    ALISTA-MM one constant ``beta`` is chosen from ``beta_grid`` by the
    final-layer NMSE. Support selection follows the linear ALISTA ramp.
    """
    Bm, Xs = _as_batch(list(instances))
    n = setup.n
    ps = alista_support_schedule(n, layers, percent, max_percent)
    rel = np.concatenate([[0.0], np.logspace(-4, 0, theta_points)])
    betas = tuple(beta_grid) if momentum else (0.0,)
    best = None
    for beta in betas:
        X = np.zeros((Bm.shape[0], n))
        Xp = X.copy()
        params = []
        for k in range(layers):
            R = X @ setup.A.T - Bm
            G = R @ setup.W
            mom = beta * (X - Xp) if k > 0 else 0.0
            scale = float(np.median(np.max(np.abs(X - G + mom), axis=1)))
            choice = None
            for gamma in gamma_grid:
                V = X - gamma * G + mom
                for r in rel:
                    theta = r * scale
                    with np.errstate(over="ignore", invalid="ignore"):
                        Xn = support_select_threshold(V, theta, ps[k])
                        s = _score_db(Xn, Xs)
                    if not math.isfinite(s) and s != -math.inf:
                        continue
                    key = (s, gamma, theta)
                    if choice is None or key < choice[0]:
                        choice = (key, Xn)
            (s, gamma, theta), Xn = choice
            params.append(LayerParams(theta, gamma, beta if k > 0 else 0.0, ps[k]))
            Xp, X = X, Xn
        final = _score_db(X, Xs)
        if best is None or (final, beta) < best[0]:
            best = ((final, beta), params)
    name = label or ("alista-mm-fixed" if momentum else "alista-fixed")
    return FixedSchedule(tuple(best[1]), name)


def rounding_bound(setup: ProblemSetup, b, x) -> float:
    """Bound on the floating-point error of ``x + W^T (b - A x)``, entrywise."""
    u = np.finfo(np.float64).eps
    absx = np.abs(x)
    scale = np.abs(setup.W).T @ (np.abs(b) + np.abs(setup.A) @ absx)
    return float(u * (setup.m + setup.n + 2) * scale.max() + u * absx.max(initial=0.0))


def run_oracle_threshold(setup: ProblemSetup, instance: Instance, layers: int,
                         mu: Optional[float] = None, beta: float = 0.0,
                         p_schedule: Optional[Sequence[int]] = None,
                         float_margin: bool = False) -> RecoveryTrace:
    """Test mode: threshold ``mu * ||x_k - x*||_1`` computed from the truth.

    With this threshold no entry outside ``supp(x*)`` can ever become
    nonzero when ``mu`` bounds the off-diagonal of ``W^T A``, in exact
    arithmetic. Once the error nears machine precision the rounding error
    of the residual dominates; ``float_margin`` adds :func:`rounding_bound`
    to the threshold so the guarantee also holds in floating point.
    """
    mu = setup.mu if mu is None else mu
    ps = p_schedule or [0] * layers
    b = np.asarray(instance.b, dtype=np.float64)
    x = np.zeros(setup.n)
    xp = x.copy()
    its, plist = [x], []
    for k in range(layers):
        theta = mu * float(np.abs(x - instance.x_star).sum())
        if float_margin:
            theta += rounding_bound(setup, b, x)
        lp = LayerParams(theta, 1.0, beta if k > 0 else 0.0, int(ps[k]))
        xp, x = x, momentum_step(setup, instance.b, x, xp, lp, k)
        its.append(x)
        plist.append(lp)
    return RecoveryTrace(iterates=np.array(its), params=plist,
                         phase_labels=["unrolled"] * layers)
