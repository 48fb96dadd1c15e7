"""Matrix-free least squares with priorconditioning.

The alpha step of IAS minimizes

    ||b - M alpha||^2 / (2 sigma^2) + 1/2 ||D^{-1/2} alpha||^2

which, after the change of variables ``alpha = D^{1/2} w``, is the damped
least squares problem for ``sigma^{-1} M D^{1/2} w = sigma^{-1} b``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .hypermodel import NoiseModel, VarianceGrouping

__all__ = [
    "LinearOperator",
    "SolverConfig",
    "CglsResult",
    "SolveInfo",
    "cgls",
    "priorconditioned_solve",
    "whitened_operator",
    "dense_lsq",
    "RankDeficientError",
]

log = logging.getLogger(__name__)


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LinearOperator:
    nrows: int
    ncols: int
    apply: Callable[[np.ndarray], np.ndarray]
    apply_transpose: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_matrix(cls, A):
        A = getattr(A, "matrix", A)
        return cls(A.shape[0], A.shape[1], lambda x: A @ x, lambda y: A.T @ y)

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    def __matmul__(self, x):
        return self.apply(x)


@dataclass(frozen=True)
class SolverConfig:
    """Inner solver settings.

    ``mode`` is ``"tikhonov"`` for the identity-penalized whitened problem or
    ``"truncated"`` for unpenalized CGLS regularized by early stopping.
    ``method="direct"`` replaces CGLS by a dense factorization (small problems).
    ``max_iters=None`` means ``min(200, number of unknowns)``.
    """

    max_iters: int | None = None
    rel_residual_tol: float = 1e-6
    verbosity: str = "quiet"
    mode: str = "tikhonov"
    method: str = "cgls"

    def __post_init__(self):
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_residual_tol > 0:
            raise ValueError("rel_residual_tol must be positive")
        if self.mode not in ("tikhonov", "truncated"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.method not in ("cgls", "direct"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.verbosity not in ("quiet", "info", "debug"):
            raise ValueError(f"unknown verbosity {self.verbosity!r}")

    @classmethod
    def exact(cls, n=None, method="cgls"):
        """Tight settings whose result reproduces a dense solve."""
        return cls(max_iters=None if n is None else 20 * n, rel_residual_tol=1e-15, method=method)

    def iters_for(self, n):
        return self.max_iters if self.max_iters is not None else min(200, n)


@dataclass
class CglsResult:
    x: np.ndarray
    iters: int
    residual_history: np.ndarray
    zero_operator: bool = False

    def __iter__(self):
        return iter((self.x, self.iters, self.residual_history))


@dataclass
class SolveInfo:
    iters: int = 0
    residual_history: np.ndarray = field(default_factory=lambda: np.zeros(0))
    zero_operator: bool = False


def cgls(A, b, cfg: SolverConfig | None = None, *, damp: float = 0.0, x_history=False) -> CglsResult:
    """Conjugate gradients on the normal equations of ``min ||Ax - b||^2 + damp^2 ||x||^2``.

    Stops when ``||A^T(b - Ax) - damp^2 x|| / ||A^T b|| < rel_residual_tol``
    or after ``max_iters`` steps.  ``residual_history`` holds the norm of the
    (damped) stacked residual, starting from ``x = 0``.  Unpack as
    ``x, iters, history = cgls(...)``.
    """
    if not isinstance(A, LinearOperator):
        A = LinearOperator.from_matrix(A)
    cfg = cfg or SolverConfig()
    b = np.asarray(b, dtype=float)
    if b.shape != (A.nrows,):
        raise ValueError(f"b has shape {b.shape}, expected ({A.nrows},)")
    maxit = cfg.iters_for(A.ncols)
    d2 = damp * damp

    x = np.zeros(A.ncols)
    r = b.copy()
    s = A.apply_transpose(r)
    norm_s0 = np.linalg.norm(s)
    hist = [np.linalg.norm(r)]
    xs = [x.copy()] if x_history else None
    if norm_s0 == 0.0:
        zero_op = bool(np.linalg.norm(b) > 0)
        if zero_op:
            log.warning("cgls: A^T b = 0 with nonzero b; returning x = 0")
        res = CglsResult(x, 0, np.array(hist), zero_op)
        if x_history:
            res.x_history = np.array(xs)
        return res
    p = s.copy()
    gamma = norm_s0**2
    it = 0
    for it in range(1, maxit + 1):
        q = A.apply(p)
        denom = np.dot(q, q) + d2 * np.dot(p, p)
        if denom <= 0:
            it -= 1
            break
        step = gamma / denom
        x += step * p
        r -= step * q
        s = A.apply_transpose(r) - d2 * x
        gamma_new = np.dot(s, s)
        hist.append(np.sqrt(np.dot(r, r) + d2 * np.dot(x, x)))
        if x_history:
            xs.append(x.copy())
        rel = np.sqrt(gamma_new) / norm_s0
        if cfg.verbosity == "debug":
            log.debug("cgls it=%d rel=%.3e", it, rel)
        if rel < cfg.rel_residual_tol:
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    if cfg.verbosity in ("info", "debug"):
        log.info("cgls stopped after %d iterations", it)
    res = CglsResult(x, it, np.array(hist))
    if x_history:
        res.x_history = np.array(xs)
    return res


def whitened_operator(M, noise: NoiseModel, theta, grouping: VarianceGrouping) -> tuple[LinearOperator, np.ndarray]:
    """``sigma^{-1} M D^{1/2}`` as an operator, with the per-coefficient ``D^{1/2}``."""
    M = getattr(M, "matrix", M)
    theta = np.asarray(theta, dtype=float)
    if theta.size != grouping.n_groups or M.shape[1] != grouping.n_coeffs:
        raise ValueError(
            f"dimension mismatch: M {M.shape}, theta {theta.size}, grouping "
            f"({grouping.n_coeffs}, {grouping.n_groups})"
        )
    if np.any(~(theta > 0)):
        raise ValueError("theta must be strictly positive")
    dsq = np.sqrt(grouping.expand(theta))
    inv_s = 1.0 / noise.sigma
    op = LinearOperator(
        M.shape[0],
        M.shape[1],
        lambda w: inv_s * (M @ (dsq * w)),
        lambda y: dsq * (inv_s * (M.T @ y)),
    )
    return op, dsq


def _direct_whitened(M, b, noise, dsq, damp):
    """Dense solve of the whitened (damped) problem; data space when underdetermined."""
    A = (M * dsq) / noise.sigma
    rhs = b / noise.sigma
    L, K = A.shape
    if damp == 0.0:
        return np.linalg.lstsq(A, rhs, rcond=None)[0]
    d2 = damp * damp
    if L <= K:
        c = sla.cho_factor(A @ A.T + d2 * np.eye(L))
        return A.T @ sla.cho_solve(c, rhs)
    c = sla.cho_factor(A.T @ A + d2 * np.eye(K))
    return sla.cho_solve(c, A.T @ rhs)


def priorconditioned_solve(M, b, noise: NoiseModel, theta, grouping: VarianceGrouping,
                           cfg: SolverConfig | None = None, *, return_info=False):
    """alpha step: ``alpha = D^{1/2} w`` with ``w`` from the whitened least squares problem."""
    cfg = cfg or SolverConfig()
    Mm = getattr(M, "matrix", M)
    b = np.asarray(b, dtype=float)
    if b.shape != (Mm.shape[0],):
        raise ValueError(f"data vector has shape {b.shape}, lead field has {Mm.shape[0]} rows")
    op, dsq = whitened_operator(Mm, noise, theta, grouping)
    damp = 1.0 if cfg.mode == "tikhonov" else 0.0
    if cfg.method == "direct":
        w = _direct_whitened(np.asarray(Mm), b, noise, dsq, damp)
        info = SolveInfo(0)
    else:
        res = cgls(op, b / noise.sigma, cfg, damp=damp)
        w = res.x
        info = SolveInfo(res.iters, res.residual_history, res.zero_operator)
    alpha = dsq * w
    return (alpha, info) if return_info else alpha


def dense_lsq(A, b, rtol=None):
    """Least squares minimizer via column-pivoted QR.

    Raises :class:`RankDeficientError` if the numerical rank is below the
    number of columns.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    if m < n:
        raise RankDeficientError(f"underdetermined system {A.shape}: stack regularization rows first")
    Q, R, piv = sla.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = (rtol if rtol is not None else max(m, n) * np.finfo(float).eps) * (diag[0] if n else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < n:
        raise RankDeficientError(
            f"matrix of shape {A.shape} has numerical rank {rank} < {n} "
            f"(smallest |R_ii| = {diag.min():.3e}, threshold {tol:.3e})"
        )
    z = sla.solve_triangular(R, Q.T @ b)
    x = np.empty(n)
    x[piv] = z
    return x


def with_iters(cfg: SolverConfig, n: int) -> SolverConfig:
    return replace(cfg, max_iters=n)
