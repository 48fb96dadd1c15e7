"""Iterative Alternating Sequential (IAS) MAP estimation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .hypermodel import (
    HyperModel,
    NoiseModel,
    PosteriorState,
    VarianceGrouping,
    group_amplitudes,
    log_posterior,
    update_theta,
)
from .solver import SolverConfig, priorconditioned_solve

__all__ = ["IasConfig", "IasResult", "IasError", "ias_map", "ias_single_sweep", "theta_step"]

log = logging.getLogger(__name__)


class IasError(RuntimeError):
    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass
class IasConfig:
    """IAS settings.

    ``theta_init=None`` starts from ``theta0`` in every component.  In
    ``exact_mode`` the inner solves run to machine precision, which makes
    each half step an exact conditional maximization.
    """

    iterations: int = 15
    theta_init: float | np.ndarray | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    exact_mode: bool = False
    record_history: bool = True
    rel_change_tol: float | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.theta_init is not None and np.any(~(np.asarray(self.theta_init) > 0)):
            raise ValueError("theta_init must be positive")

    def inner_solver(self, n_coeffs):
        if self.exact_mode:
            return SolverConfig.exact(n_coeffs, method=self.solver.method)
        return self.solver


@dataclass
class IasResult:
    state: PosteriorState
    log_posterior_history: np.ndarray
    flags: np.ndarray
    inner_iters: np.ndarray
    alpha_history: np.ndarray | None = None
    theta_history: np.ndarray | None = None


def theta_step(alpha, hm: HyperModel, grouping: VarianceGrouping):
    upd = update_theta(group_amplitudes(alpha, grouping), hm, grouping.group_size)
    return upd.theta, upd.floored


def ias_single_sweep(state: PosteriorState, M, b, noise: NoiseModel, hm: HyperModel,
                     grouping: VarianceGrouping, solver: SolverConfig | None = None,
                     *, return_info=False):
    """One alpha update at the current theta followed by one theta update."""
    alpha, info = priorconditioned_solve(M, b, noise, state.theta, grouping, solver, return_info=True)
    theta, flags = theta_step(alpha, hm, grouping)
    new = PosteriorState(alpha, theta)
    return (new, info, flags) if return_info else new


def ias_map(M, b, noise: NoiseModel, hm: HyperModel, grouping: VarianceGrouping,
            cfg: IasConfig | None = None) -> IasResult:
    cfg = cfg or IasConfig()
    b = np.asarray(b, dtype=float)
    K = grouping.n_coeffs
    theta = np.full(grouping.n_groups, hm.theta0) if cfg.theta_init is None else \
        np.broadcast_to(np.asarray(cfg.theta_init, dtype=float), (grouping.n_groups,)).copy()
    state = PosteriorState(np.zeros(K), theta)
    solver = cfg.inner_solver(K)

    lp_hist = [log_posterior(state, b, M, noise, hm, grouping)] if cfg.record_history else []
    a_hist = [state.alpha] if cfg.record_history else None
    t_hist = [state.theta] if cfg.record_history else None
    inner = []
    flags = np.zeros(grouping.n_groups, dtype=bool)
    for i in range(cfg.iterations):
        prev_alpha = state.alpha
        try:
            state, info, flags = ias_single_sweep(state, M, b, noise, hm, grouping, solver, return_info=True)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            partial = IasResult(state, np.array(lp_hist), flags, np.array(inner, dtype=int))
            raise IasError(f"inner solve failed at iteration {i + 1}: {exc}", partial) from exc
        inner.append(info.iters)
        if cfg.record_history:
            lp_hist.append(log_posterior(state, b, M, noise, hm, grouping))
            a_hist.append(state.alpha)
            t_hist.append(state.theta)
        if flags.any():
            log.debug("iteration %d: %d theta components floored", i + 1, int(flags.sum()))
        if cfg.rel_change_tol is not None:
            na = np.linalg.norm(state.alpha)
            if na > 0 and np.linalg.norm(state.alpha - prev_alpha) / na < cfg.rel_change_tol:
                break
    return IasResult(
        state,
        np.array(lp_hist),
        flags,
        np.array(inner, dtype=int),
        np.array(a_hist) if cfg.record_history else None,
        np.array(t_hist) if cfg.record_history else None,
    )
