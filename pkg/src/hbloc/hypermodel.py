"""Conditionally Gaussian source prior with generalized gamma hyperprior.

The unnormalized joint log posterior over coefficients ``alpha`` and
variances ``theta`` is

    -||b - M alpha||^2 / (2 sigma^2) - 1/2 sum_k A_k / theta_k
    - sum_k (theta_k / theta0)^r + sum_k c_k log theta_k

with ``A_k`` the summed squared coefficients sharing variance ``k`` and
``c_k = r beta - 1 - g_k / 2`` (``g_k`` the group size).  With
``paper_exact_planar`` the log coefficient is frozen at ``r beta - 3/2`` for
every group size.

All ``update_theta_*`` functions return the maximizer of this expression in a
single ``theta_k`` with everything else fixed.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "HyperModel",
    "NoiseModel",
    "PosteriorState",
    "VarianceGrouping",
    "ThetaUpdate",
    "log_coefficient",
    "log_hyperprior",
    "log_likelihood",
    "log_conditional_prior",
    "log_posterior",
    "conditional_log_density",
    "group_amplitudes",
    "update_theta_gamma",
    "update_theta_invgamma",
    "update_theta_gengamma",
    "update_theta_higher_invgamma",
    "update_theta",
    "theta_floor",
    "equivalent_penalty_delta",
]

FLOOR_FACTOR = 1e-12
_NEWTON_RTOL = 1e-12


@dataclass(frozen=True)
class HyperModel:
    """Generalized gamma hyperprior ``GenGamma(r, beta, theta0)``.

    ``r = 1`` is the gamma distribution and ``r = -1`` the inverse gamma
    distribution.
    """

    r: float
    beta: float
    theta0: float
    paper_exact_planar: bool = False

    def __post_init__(self):
        if not np.isfinite(self.r) or self.r == 0:
            raise ValueError(f"r must be finite and nonzero, got {self.r}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.theta0 > 0:
            raise ValueError(f"theta0 must be positive, got {self.theta0}")

    @classmethod
    def gamma(cls, beta, theta0, **kw):
        return cls(1.0, beta, theta0, **kw)

    @classmethod
    def invgamma(cls, beta, theta0, **kw):
        return cls(-1.0, beta, theta0, **kw)

    @property
    def family(self) -> str:
        if self.r == 1:
            return "gamma"
        if self.r == -1:
            return "invgamma"
        if self.r < -1 and float(self.r).is_integer():
            return "higher_invgamma"
        return "gengamma"


@dataclass(frozen=True)
class NoiseModel:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class VarianceGrouping:
    """Map from coefficient index to the index of its variance."""

    group_of: np.ndarray
    n_groups: int = -1

    def __post_init__(self):
        g = np.asarray(self.group_of, dtype=np.intp)
        if g.ndim != 1:
            raise ValueError("group_of must be one-dimensional")
        n = int(g.max()) + 1 if g.size else 0
        if self.n_groups >= 0:
            if g.size and g.max() >= self.n_groups:
                raise ValueError("group index out of range")
            n = self.n_groups
        if g.size and g.min() < 0:
            raise ValueError("negative group index")
        object.__setattr__(self, "group_of", g)
        object.__setattr__(self, "n_groups", n)
        if np.any(self.group_size < 1):
            raise ValueError("every variance group must hold at least one coefficient")

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n))

    @classmethod
    def blocks(cls, n_groups, n_blocks):
        """Coefficients stacked as ``[alpha^1; alpha^2; ...]`` sharing variances."""
        return cls(np.tile(np.arange(n_groups), n_blocks), n_groups)

    @property
    def n_coeffs(self) -> int:
        return self.group_of.size

    @property
    def group_size(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.n_groups)

    def expand(self, theta):
        """Per-coefficient variances."""
        return np.asarray(theta, dtype=float)[self.group_of]

    def subset(self, groups):
        """Grouping restricted to ``groups`` and the coefficient indices it keeps."""
        groups = np.asarray(groups, dtype=np.intp)
        remap = np.full(self.n_groups, -1, dtype=np.intp)
        remap[groups] = np.arange(groups.size)
        coeffs = np.flatnonzero(remap[self.group_of] >= 0)
        return VarianceGrouping(remap[self.group_of[coeffs]], groups.size), coeffs


@dataclass
class PosteriorState:
    alpha: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if np.any(~(self.theta > 0)):
            raise ValueError("all theta components must be strictly positive")

    def copy(self):
        return PosteriorState(self.alpha.copy(), self.theta.copy())


@dataclass
class ThetaUpdate:
    """Vectorized theta update with per-component floor flags."""

    theta: np.ndarray
    floored: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


def theta_floor(hm: HyperModel) -> float:
    return hm.theta0 * FLOOR_FACTOR


def log_coefficient(hm: HyperModel, g=1):
    """Coefficient multiplying ``log theta_k`` in the joint log posterior."""
    if hm.paper_exact_planar:
        return hm.r * hm.beta - 1.5 + 0.0 * np.asarray(g, dtype=float)
    return hm.r * hm.beta - 1.0 - 0.5 * np.asarray(g, dtype=float)


def _check_theta(theta):
    theta = np.asarray(theta, dtype=float)
    if np.any(~(theta > 0)):
        raise ValueError("theta components must be strictly positive")
    return theta


def log_hyperprior(theta, hm: HyperModel) -> float:
    """Unnormalized log density of ``GenGamma(r, beta, theta0)``, summed over components."""
    theta = _check_theta(np.atleast_1d(theta))
    return float(-np.sum((theta / hm.theta0) ** hm.r) + (hm.r * hm.beta - 1.0) * np.sum(np.log(theta)))


def group_amplitudes(alpha, grouping: VarianceGrouping):
    """Summed squared coefficients per variance group."""
    alpha = np.asarray(alpha, dtype=float)
    return np.bincount(grouping.group_of, weights=alpha * alpha, minlength=grouping.n_groups)


def _matvec(M, x):
    return np.asarray(M @ x, dtype=float)


def log_likelihood(alpha, b, M, noise: NoiseModel) -> float:
    r = np.asarray(b, dtype=float) - _matvec(_as_matrix(M), alpha)
    return float(-0.5 * np.dot(r, r) / noise.sigma**2)


def log_conditional_prior(alpha, theta, grouping: VarianceGrouping, hm: HyperModel | None = None) -> float:
    """``-1/2 sum A_k/theta_k - 1/2 sum g_k log theta_k``.

    With a ``paper_exact_planar`` hypermodel the normalization uses ``1/2``
    per variance instead of ``g_k/2``.
    """
    theta = _check_theta(theta)
    A = group_amplitudes(alpha, grouping)
    g = grouping.group_size
    if hm is not None and hm.paper_exact_planar:
        g = np.ones_like(g)
    return float(-0.5 * np.sum(A / theta) - 0.5 * np.sum(g * np.log(theta)))


def log_posterior(state: PosteriorState, b, M, noise: NoiseModel, hm: HyperModel,
                  grouping: VarianceGrouping) -> float:
    M = _as_matrix(M)
    alpha, theta = state.alpha, _check_theta(state.theta)
    if alpha.size != grouping.n_coeffs or theta.size != grouping.n_groups:
        raise ValueError(
            f"state sizes (alpha {alpha.size}, theta {theta.size}) do not match grouping "
            f"({grouping.n_coeffs}, {grouping.n_groups})"
        )
    if M.shape != (np.size(b), alpha.size):
        raise ValueError(f"lead field shape {M.shape} inconsistent with data {np.size(b)} / alpha {alpha.size}")
    resid = np.asarray(b, dtype=float) - _matvec(M, alpha)
    A = group_amplitudes(alpha, grouping)
    c = log_coefficient(hm, grouping.group_size)
    return float(
        -0.5 * np.dot(resid, resid) / noise.sigma**2
        - 0.5 * np.sum(A / theta)
        - np.sum((theta / hm.theta0) ** hm.r)
        + np.sum(c * np.log(theta))
    )


def conditional_log_density(theta, A, hm: HyperModel, g=1):
    """Log density of a single ``theta_k`` given its group amplitude ``A``."""
    theta = np.asarray(theta, dtype=float)
    return -0.5 * A / theta - (theta / hm.theta0) ** hm.r + log_coefficient(hm, g) * np.log(theta)


def _floor_or_root(theta, hm, warn=True):
    tmin = theta_floor(hm)
    if not (theta >= tmin) or not np.isfinite(theta):
        if warn:
            warnings.warn("theta update has no admissible positive stationary point; floored",
                          RuntimeWarning, stacklevel=3)
        return tmin, True
    return theta, False


def update_theta_gamma(A, hm: HyperModel, g=1, *, return_flag=False):
    """Gamma hyperprior (``r = 1``): positive root of a quadratic."""
    if hm.r != 1:
        raise ValueError("update_theta_gamma requires r = 1")
    if A < 0:
        raise ValueError("A must be nonnegative")
    eta = float(log_coefficient(hm, g))
    t0 = hm.theta0
    if A == 0 and eta <= 0:
        theta = 0.0
    else:
        disc = math.sqrt(eta * eta + 2.0 * A / t0)
        # cancellation-free form for negative eta
        theta = 0.5 * t0 * (eta + disc) if eta >= 0 else A / (disc - eta)
    theta, flag = _floor_or_root(theta, hm)
    return (theta, flag) if return_flag else theta


def update_theta_invgamma(A, hm: HyperModel, g=1, *, return_flag=False):
    """Inverse gamma hyperprior (``r = -1``): ``(A/2 + theta0) / kappa``."""
    if hm.r != -1:
        raise ValueError("update_theta_invgamma requires r = -1")
    if A < 0:
        raise ValueError("A must be nonnegative")
    kappa = -float(log_coefficient(hm, g))
    theta, flag = _floor_or_root((0.5 * A + hm.theta0) / kappa, hm)
    return (theta, flag) if return_flag else theta


def _stationarity(s, a, r, c):
    """``theta * d/dtheta log density`` in ``s = log(theta/theta0)`` and its derivative.

    ``a = A / (2 theta0)``.
    """
    em = math.exp(-s)
    er = math.exp(r * s)
    return a * em - r * er + c, -a * em - r * r * er


def _safeguarded_newton(a, r, c, lo=math.log(1e-8), hi=math.log(1e8)):
    h = lambda s: _stationarity(s, a, r, c)[0]  # noqa: E731
    # h is strictly decreasing; push the bracket out until it changes sign
    for _ in range(60):
        if h(lo) > 0:
            break
        lo -= 10.0
    else:
        return None
    for _ in range(60):
        if h(hi) < 0:
            break
        hi += 10.0
    else:
        return None
    s = 0.5 * (lo + hi)
    for _ in range(200):
        f, df = _stationarity(s, a, r, c)
        if f > 0:
            lo = s
        else:
            hi = s
        step = -f / df if df != 0 else np.inf
        s_new = s + step
        if not (lo < s_new < hi):
            s_new = 0.5 * (lo + hi)
        if abs(s_new - s) <= _NEWTON_RTOL * max(1.0, abs(s_new)) or hi - lo < 1e-15:
            return s_new
        s = s_new
    return s


def update_theta_gengamma(A, hm: HyperModel, g=1, *, return_flag=False):
    """General ``r``: closed form when the log coefficient vanishes, else dispatch or root finding."""
    if A < 0:
        raise ValueError("A must be nonnegative")
    r = hm.r
    c = float(log_coefficient(hm, g))
    if r == 1:
        return update_theta_gamma(A, hm, g, return_flag=return_flag)
    if r == -1:
        return update_theta_invgamma(A, hm, g, return_flag=return_flag)
    if r < -1 and float(r).is_integer():
        return update_theta_higher_invgamma(A, int(-r), hm, g, return_flag=return_flag)
    if -1 < r < 0:
        raise ValueError("r in (-1, 0) is not supported")
    t0 = hm.theta0
    if abs(c) <= 1e-14 * max(1.0, abs(r * hm.beta)) and r > 0:
        theta = (t0**r * A / (2.0 * r)) ** (1.0 / (r + 1.0)) if A > 0 else 0.0
        theta, flag = _floor_or_root(theta, hm)
        return (theta, flag) if return_flag else theta
    a = 0.5 * A / t0
    if a == 0 and c <= 0:
        s = None
    else:
        s = _safeguarded_newton(a, r, c)
    theta, flag = _floor_or_root(t0 * math.exp(s) if s is not None else 0.0, hm)
    return (theta, flag) if return_flag else theta


def _companion_roots(coeffs):
    """Roots of ``coeffs[0] x^n + ... + coeffs[n]`` as eigenvalues of the companion matrix."""
    coeffs = np.asarray(coeffs, dtype=float)
    lead = coeffs[0]
    n = coeffs.size - 1
    C = np.zeros((n, n))
    C[0, :] = -coeffs[1:] / lead
    C[1:, :-1] = np.eye(n - 1)
    return np.linalg.eigvals(C)


def update_theta_higher_invgamma(A, q: int, hm: HyperModel, g=1, *, return_flag=False):
    """``r = -q``: positive root of ``c x^q + a x^(q-1) + q = 0``, ``x = theta/theta0``."""
    q = int(q)
    if q < 2:
        raise ValueError("q must be an integer >= 2")
    if hm.r != -q:
        hm = HyperModel(-q, hm.beta, hm.theta0, hm.paper_exact_planar)
    if A < 0:
        raise ValueError("A must be nonnegative")
    c = float(log_coefficient(hm, g))
    a = 0.5 * A / hm.theta0
    coeffs = np.zeros(q + 1)
    coeffs[0] = c
    coeffs[1] = a
    coeffs[-1] = q
    roots = _companion_roots(coeffs)
    tol = 1e-8 * np.maximum(1.0, np.abs(roots))
    cand = roots[(np.abs(roots.imag) <= tol) & (roots.real > 0)].real
    polished = []
    for x in cand:
        s = math.log(x)
        for _ in range(3):
            f, df = _stationarity(s, a, -q, c)
            if df == 0:
                break
            s -= f / df
        polished.append(math.exp(s))
    if not polished:
        theta, flag = _floor_or_root(0.0, hm)
    else:
        xs = np.array(polished)
        dens = conditional_log_density(xs * hm.theta0, A, hm, g)
        best = np.flatnonzero(dens >= dens.max() - 1e-12 * max(1.0, abs(dens.max())))
        theta, flag = _floor_or_root(float(xs[best].max() * hm.theta0), hm)
    return (theta, flag) if return_flag else theta


def update_theta(A, hm: HyperModel, g=1) -> ThetaUpdate:
    """Componentwise maximizer of the conditional log posterior in ``theta``.

    ``A`` and ``g`` are arrays over variance groups.  The gamma and inverse
    gamma families are evaluated in closed form over the whole vector.
    """
    A = np.asarray(A, dtype=float)
    g = np.broadcast_to(np.asarray(g, dtype=float), A.shape)
    if np.any(A < 0):
        raise ValueError("group amplitudes must be nonnegative")
    c = log_coefficient(hm, g)
    t0 = hm.theta0
    tmin = theta_floor(hm)
    if hm.r == 1:
        disc = np.sqrt(c * c + 2.0 * A / t0)
        with np.errstate(divide="ignore", invalid="ignore"):
            theta = np.where(c >= 0, 0.5 * t0 * (c + disc), A / (disc - c))
        theta = np.where((A == 0) & (c <= 0), 0.0, theta)
    elif hm.r == -1:
        theta = (0.5 * A + t0) / (-c)
    elif hm.r > 0 and np.all(np.abs(c) <= 1e-14 * max(1.0, abs(hm.r * hm.beta))):
        theta = (t0**hm.r * A / (2.0 * hm.r)) ** (1.0 / (hm.r + 1.0))
    else:
        out = [update_theta_gengamma(a_k, hm, g_k, return_flag=True) for a_k, g_k in zip(A, g)]
        theta = np.array([o[0] for o in out])
        flags = np.array([o[1] for o in out], dtype=bool)
        return ThetaUpdate(theta, flags)
    flags = ~(theta >= tmin)
    theta = np.where(flags, tmin, theta)
    return ThetaUpdate(theta, flags)


def equivalent_penalty_delta(hm: HyperModel, noise: NoiseModel) -> float:
    """Weight of the penalized least squares problem whose fixed point IAS iterates.

    Recognized regimes: ``r beta = 3/2`` with ``r > 0`` (minimum l^p, which
    at ``r = 1`` is the minimum current estimate) and ``r = -1`` (minimum
    support).
    """
    s2 = noise.sigma**2
    if hm.r == -1:
        # weight of sum alpha_k^2 / (alpha_k^2 + 2 theta0); the reweighted
        # iterate uses half of it per squared coefficient
        kappa = hm.beta + 1.5
        return 4.0 * kappa * s2
    if hm.r > 0 and abs(hm.r * hm.beta - 1.5) <= 1e-12:
        r = hm.r
        # weight of sum alpha_k^2 |alpha_k^prev|^(p-2); equals the MCE weight at r = 1
        return s2 * (2.0 * r / hm.theta0**r) ** (1.0 / (r + 1.0))
    raise ValueError(f"no equivalent penalty for r={hm.r}, beta={hm.beta}")


def _as_matrix(M):
    return getattr(M, "matrix", M)
