"""Symmetric analytic weight matrix and coherence diagnostics.

The weight is parameterized as ``W = (G^T G) A`` so that ``W^T A`` is the
Gram matrix of ``GA`` and hence symmetric. ``G`` is found by alternating a
projected gradient step on an auxiliary unit-column matrix ``D`` with the
closed-form least-squares update ``G = D A^+``, while the coupling weight
``1/alpha`` is increased until ``D`` and ``GA`` agree.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .problems import ProblemSetup, pseudoinverse

log = logging.getLogger(__name__)

MAX_STEP_HALVINGS = 50


class DictionarySolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class DictSolverConfig:
    zeta0: float = 0.1
    alpha0: float = 0.1
    shrink_factor: float = 0.1
    inner_tol: float = 1e-6
    outer_tol: float = 1e-4
    max_iters: int = 200_000

    def __post_init__(self):
        if not 0.0 < self.shrink_factor < 1.0:
            raise ValueError("shrink_factor must lie in (0, 1)")
        if self.zeta0 <= 0 or self.alpha0 <= 0:
            raise ValueError("zeta0 and alpha0 must be positive")
        if self.inner_tol <= 0 or self.outer_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class DictSolveReport:
    D: np.ndarray
    G: np.ndarray
    f1_history: list = field(default_factory=list)
    f2_history: list = field(default_factory=list)
    # f1/4 + ||D - GA||^2 / (2 alpha): the function each D/G sweep descends
    merit_history: list = field(default_factory=list)
    alpha_history: list = field(default_factory=list)
    zeta_history: list = field(default_factory=list)
    phase_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def f1(self) -> float:
        return self.f1_history[-1]

    @property
    def f2(self) -> float:
        return self.f2_history[-1]

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "f1", "f2", "alpha", "zeta"])
            for i, row in enumerate(zip(self.f1_history, self.f2_history,
                                        self.alpha_history, self.zeta_history), start=1):
                w.writerow([i, *(repr(float(v)) for v in row)])


def gram_residual(M: np.ndarray) -> float:
    """``||M^T M - I||_F^2``."""
    R = M.T @ M
    R[np.diag_indices_from(R)] -= 1.0
    return float(np.sum(R * R))


def solve_dictionary(A: np.ndarray, config: DictSolverConfig | None = None,
                     A_pinv: np.ndarray | None = None) -> DictSolveReport:
    """Alternating solver for the symmetric-coherence problem.

    Each iteration takes a projected gradient step on ``D`` (columns are
    renormalized afterwards) and sets ``G = D A^+``. Whenever two consecutive
    ``f1 = ||D^T D - I||_F^2`` values agree to ``inner_tol``, ``alpha`` and
    ``zeta`` shrink; the run stops once ``f1`` matches
    ``f2 = ||(GA)^T GA - I||_F^2`` to ``outer_tol`` at such a point.
    """
    cfg = config or DictSolverConfig()
    A = np.asarray(A, dtype=np.float64)
    m, n = A.shape
    if not np.allclose(np.linalg.norm(A, axis=0), 1.0, atol=1e-8):
        raise ValueError("dictionary columns must have unit l2 norm")
    Ap = pseudoinverse(A) if A_pinv is None else A_pinv

    D = A.copy()
    G = np.eye(m)
    GA = A.copy()
    zeta, alpha = cfg.zeta0, cfg.alpha0
    report = DictSolveReport(D=D, G=G)
    prev_f1 = gram_residual(D)
    phase = 0

    for it in range(1, cfg.max_iters + 1):
        for _ in range(MAX_STEP_HALVINGS + 1):
            with np.errstate(over="ignore", invalid="ignore"):
                grad = D @ (D.T @ D)
                grad -= D
                step = D - zeta * grad - (zeta / alpha) * (D - GA)
                norms = np.linalg.norm(step, axis=0)
            if np.all(np.isfinite(step)) and np.all(norms > 0):
                break
            zeta *= 0.5
            log.warning("dictionary step blew up at iter %d; halving zeta to %g", it, zeta)
        else:
            raise DictionarySolverError(
                f"step size halved {MAX_STEP_HALVINGS} times without a finite update")
        D = step / norms
        G = D @ Ap
        GA = G @ A
        f1 = gram_residual(D)
        f2 = gram_residual(GA)
        if not (np.isfinite(f1) and np.isfinite(f2)):
            raise DictionarySolverError(f"non-finite objective at iteration {it}")
        report.f1_history.append(f1)
        report.f2_history.append(f2)
        report.merit_history.append(0.25 * f1 + float(np.sum((D - GA) ** 2)) / (2 * alpha))
        report.alpha_history.append(alpha)
        report.zeta_history.append(zeta)
        report.phase_history.append(phase)
        report.iterations = it

        if abs(prev_f1 - f1) <= cfg.inner_tol * max(f1, 1e-12):
            if abs(f1 - f2) <= cfg.outer_tol * max(f1, 1e-12):
                report.converged = True
                break
            alpha *= cfg.shrink_factor
            zeta *= cfg.shrink_factor
            phase += 1
        prev_f1 = f1

    report.D, report.G = D, G
    if not report.converged:
        log.warning("dictionary solver hit max_iters=%d (f1=%.6g, f2=%.6g)",
                    cfg.max_iters, report.f1_history[-1], report.f2_history[-1])
    return report


def mutual_coherence(D: np.ndarray) -> float:
    """``max_{i != j} |D_i^T D_j|`` over the columns of ``D``."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[1] < 2:
        raise ValueError("coherence needs at least two columns")
    return generalized_coherence(D, D)


def generalized_coherence(W: np.ndarray, A: np.ndarray) -> float:
    """``max_{i != j} |W_i^T A_j|``."""
    M = np.abs(W.T @ A)
    np.fill_diagonal(M, 0.0)
    return float(M.max())


def relative_asymmetry(M: np.ndarray) -> float:
    return float(np.linalg.norm(M - M.T) / np.linalg.norm(M))


def alista_weight(A: np.ndarray, tol: float = 1e-14, max_iters: int = 100_000) -> np.ndarray:
    """Unconstrained-W coherence minimizer used as a validation oracle.

    Solves ``min ||W^T A||_F^2  s.t.  diag(W^T A) = 1`` by projected gradient
    descent with step ``1 / (2 ||A||_2^2)``; the projection moves each column
    ``w_i`` onto the hyperplane ``a_i^T w_i = 1``.
    """
    A = np.asarray(A, dtype=np.float64)
    AAt = A @ A.T
    step = 1.0 / (2.0 * np.linalg.eigvalsh(AAt)[-1])
    col_sq = np.sum(A * A, axis=0)

    def project(W):
        return W + A * ((1.0 - np.sum(A * W, axis=0)) / col_sq)

    W = project(A.copy())
    obj = float(np.sum((W.T @ A) ** 2))
    for _ in range(max_iters):
        W = project(W - step * 2.0 * (AAt @ W))
        new = float(np.sum((W.T @ A) ** 2))
        if abs(obj - new) <= tol * new:
            obj = new
            break
        obj = new
    return W


def build_setup(A: np.ndarray, config: DictSolverConfig | None = None,
                return_report: bool = False):
    """Solve for ``D, G``, form ``W = (G^T G) A`` and ``mu = coherence(D)``."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    Ap = pseudoinverse(A)
    report = solve_dictionary(A, config, A_pinv=Ap)
    G, D = report.G, report.D
    W = (G.T @ G) @ A
    WtA = W.T @ A
    asym = relative_asymmetry(WtA)
    if asym > 1e-10:
        raise DictionarySolverError(f"W^T A asymmetric: relative asymmetry {asym:.3g}")
    setup = ProblemSetup(A=A, A_pinv=Ap, W=W, D=D, G=G, mu=mutual_coherence(D))
    return (setup, report) if return_report else setup
