"""Electric and magnetic lead fields from the assembled block system.

With ``Y = B^{-1} C`` and ``S = C^T Y - G`` (negative definite),

    M_e = R S^{-1} Y^T F,
    M_m = W - Z^T F,   Z = (B - C G^{-1} C^T)^{-1} V^T = B^{-1} V^T - Y S^{-1} Y^T V^T,

so only one sparse factorization of ``B`` is needed.  ``W`` and ``V`` are the
Biot-Savart integrals of the RT sources and of the volume currents
``sigma grad psi_j``, with the ``mu0 / 4 pi`` factor included.
"""
from __future__ import annotations

import logging

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .assembly import TET_GAUSS4, FemSystem, assemble_system, tet_gradients
from .mesh import HeadMesh, MeshError

__all__ = [
    "FemForwardModel",
    "FactorizationError",
    "electric_lead_field",
    "magnetic_lead_field",
    "forward_solve",
    "primary_matrices",
    "dipole_to_rt",
    "locate_points",
]

log = logging.getLogger(__name__)

MU0_OVER_4PI = 1e-7
SINGULAR_DISTANCE = 1e-9


class FactorizationError(RuntimeError):
    pass


def locate_points(mesh: HeadMesh, points, tol=1e-12):
    """Index of a tet containing each point, ``-1`` if outside the mesh."""
    grads, _ = tet_gradients(mesh.nodes, mesh.tets)
    cent = mesh.nodes[mesh.tets].mean(axis=1)
    out = []
    for x in np.atleast_2d(points):
        lam = np.einsum("tkd,td->tk", grads, x - cent) + 0.25
        inside = np.flatnonzero(np.all(lam >= -tol, axis=1))
        out.append(int(inside[0]) if inside.size else -1)
    return np.array(out, dtype=np.intp)


def _kernel_moments(P, r):
    """Per-tet ``S0 = int K`` and ``S1 = int x cross K`` with ``K = (r - x)/|r - x|^3``.

    ``P`` has shape ``(T, 4, 3)``.  Four-point rule; tets with a quadrature
    node within ``SINGULAR_DISTANCE`` of ``r`` are split into eight once.
    """
    bary, wts = TET_GAUSS4
    vol = np.abs(np.einsum("ij,ij->i", P[:, 1] - P[:, 0], np.cross(P[:, 2] - P[:, 0], P[:, 3] - P[:, 0]))) / 6.0
    X = np.einsum("qa,tad->tqd", bary, P)  # (T, 4, 3)
    D = r - X
    dist = np.linalg.norm(D, axis=2)
    K = D / dist[..., None] ** 3
    w = vol[:, None] * wts[None, :]
    S0 = np.einsum("tq,tqd->td", w, K)
    S1 = np.einsum("tq,tqd->td", w, np.cross(X, K))
    near = np.flatnonzero(dist.min(axis=1) < SINGULAR_DISTANCE)
    if near.size:
        sub = _split8(P[near])
        s0, s1 = _kernel_moments_plain(sub, r)
        S0[near] = s0.reshape(near.size, 8, 3).sum(axis=1)
        S1[near] = s1.reshape(near.size, 8, 3).sum(axis=1)
    return S0, S1


def _kernel_moments_plain(P, r):
    bary, wts = TET_GAUSS4
    vol = np.abs(np.einsum("ij,ij->i", P[:, 1] - P[:, 0], np.cross(P[:, 2] - P[:, 0], P[:, 3] - P[:, 0]))) / 6.0
    X = np.einsum("qa,tad->tqd", bary, P)
    D = r - X
    dist = np.linalg.norm(D, axis=2)
    K = D / np.maximum(dist, SINGULAR_DISTANCE)[..., None] ** 3
    w = vol[:, None] * wts[None, :]
    return np.einsum("tq,tqd->td", w, K), np.einsum("tq,tqd->td", w, np.cross(X, K))


_SPLIT8 = [(0, 4, 5, 6), (4, 1, 7, 8), (5, 7, 2, 9), (6, 8, 9, 3),
           (4, 5, 6, 8), (4, 5, 7, 8), (5, 6, 8, 9), (5, 7, 8, 9)]


def _split8(P):
    """Red refinement of each tet into eight (vertices 0..3 then edge midpoints)."""
    mids = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    V = np.concatenate([P, np.stack([(P[:, a] + P[:, b]) / 2 for a, b in mids], axis=1)], axis=1)
    return np.stack([V[:, list(t)] for t in _SPLIT8], axis=1).reshape(-1, 4, 3)


def primary_matrices(mesh: HeadMesh, sys: FemSystem):
    """``W`` (sensors x sources) and ``V`` (sensors x nodes)."""
    if mesh.n_sensors == 0:
        raise MeshError("mesh has no magnetometers")
    inside = locate_points(mesh, mesh.sensor_positions)
    if np.any(inside >= 0):
        raise MeshError(f"sensor {int(np.flatnonzero(inside >= 0)[0])} lies inside the mesh")
    rt = sys.rt
    grads, vol = tet_gradients(mesh.nodes, mesh.tets)
    sig = mesh.tet_conductivity()
    P = mesh.nodes[mesh.tets]
    src_tets = np.unique(rt.tets)
    pos = {t: i for i, t in enumerate(src_tets)}
    tp = np.array([pos[t] for t in rt.tets[:, 0]], dtype=np.intp)
    tm = np.array([pos[t] for t in rt.tets[:, 1]], dtype=np.intp)
    Pp = mesh.nodes[rt.opposite[:, 0]]
    Pm = mesh.nodes[rt.opposite[:, 1]]
    S, N, J = mesh.n_sensors, mesh.n_nodes, rt.size
    W = np.empty((S, J))
    V = np.empty((S, N))
    for i in range(S):
        r = mesh.sensor_positions[i]
        n = mesh.sensor_orientations[i]
        S0, S1 = _kernel_moments(P, r)
        # W: n . int (x - p) x K / (3|T|), signed per tet
        s0, s1 = S0[src_tets], S1[src_tets]
        plus = (s1[tp] - np.cross(Pp, s0[tp])) @ n / (3.0 * rt.volumes[:, 0])
        minus = (s1[tm] - np.cross(Pm, s0[tm])) @ n / (3.0 * rt.volumes[:, 1])
        W[i] = MU0_OVER_4PI * (plus - minus)
        # V: n . (sigma grad psi_j x int K) = sigma grad psi_j . (int K x n)
        c = sig[:, None] * np.cross(S0, n)
        contrib = np.einsum("tad,td->ta", grads, c)
        V[i] = MU0_OVER_4PI * np.bincount(mesh.tets.ravel(), weights=contrib.ravel(), minlength=N)
    return W, V


class FemForwardModel:
    """Factorized block system for one mesh; lead fields and forward solves."""

    def __init__(self, mesh: HeadMesh, sys: FemSystem | None = None):
        self.mesh = mesh
        self.sys = sys if sys is not None else assemble_system(mesh)
        try:
            self._lu = spla.splu(self.sys.B.tocsc())
        except RuntimeError as exc:
            raise FactorizationError(f"factorization of B failed ({exc}); check electrodes and conductivities") from exc
        self.Y = self._lu.solve(self.sys.C)
        S = self.sys.C.T @ self.Y - self.sys.G
        try:
            self._negS = sla.cho_factor(-S)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"electrode Schur complement not definite: {exc}") from exc
        self._WV = None

    def _S_solve(self, rhs):
        return -sla.cho_solve(self._negS, rhs)

    def electric_lead_field(self):
        YtF = (self.sys.F.T @ self.Y).T
        return self.sys.R @ self._S_solve(YtF)

    @property
    def primary(self):
        if self._WV is None:
            self._WV = primary_matrices(self.mesh, self.sys)
        return self._WV

    def magnetic_lead_field(self):
        W, V = self.primary
        Vt = V.T
        Z = self._lu.solve(Vt) - self.Y @ self._S_solve(self.Y.T @ Vt)
        return W - (self.sys.F.T @ Z).T

    def solve_potential(self, alpha):
        """``(zeta, zeta~)`` for source coefficients ``alpha``."""
        rhs = self.sys.F @ np.asarray(alpha, dtype=float)
        y = self._lu.solve(rhs)
        zt = self._S_solve(self.Y.T @ rhs)
        zeta = y - self.Y @ zt
        return zeta, zt

    def forward_solve(self, alpha, magnetic=True):
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape != (self.sys.n_sources,):
            raise ValueError(f"alpha must have length {self.sys.n_sources}")
        zeta, zt = self.solve_potential(alpha)
        U = self.sys.R @ zt
        if not magnetic:
            return U, None
        W, V = self.primary
        return U, W @ alpha - V @ zeta


def electric_lead_field(sys: FemSystem, mesh: HeadMesh | None = None):
    return FemForwardModel(mesh, sys).electric_lead_field()


def magnetic_lead_field(sys: FemSystem, mesh: HeadMesh):
    return FemForwardModel(mesh, sys).magnetic_lead_field()


def forward_solve(sys: FemSystem, alpha, mesh: HeadMesh | None = None):
    """Electrode potentials and (when ``mesh`` has sensors) magnetometer values."""
    model = FemForwardModel(mesh, sys)
    return model.forward_solve(alpha, magnetic=mesh is not None and mesh.n_sensors > 0)


def _second_moments(mesh: HeadMesh, rt, idx, r0):
    """``int (x - r0) (x) w_k dx`` for basis functions ``idx``, shape ``(n, 3, 3)``."""
    out = np.zeros((idx.size, 3, 3))
    for side, sign in ((0, 1.0), (1, -1.0)):
        P = mesh.nodes[mesh.tets[rt.tets[idx, side]]]
        c = P.mean(axis=1)
        d = P - c[:, None]
        cov = np.einsum("tia,tib->tab", d, d) / 20.0
        p = mesh.nodes[rt.opposite[idx, side]]
        out += sign * (np.einsum("ta,tb->tab", c - r0, c - p) + cov) / 3.0
    return out


def dipole_to_rt(mesh: HeadMesh, rt, r0, q):
    """RT coefficients approximating a point dipole ``q`` at ``r0``.

    Minimum-norm combination of the basis functions touching the node
    neighbourhood of the tet containing ``r0`` whose total moment is ``q``
    and whose second moments about ``r0`` vanish.  Falls back to matching
    the moment only when the patch is too small.
    """
    r0 = np.asarray(r0, float)
    q = np.asarray(q, float)
    t = int(locate_points(mesh, r0)[0])
    if t < 0:
        raise MeshError("dipole position outside the mesh")
    if not mesh.source_tet_mask()[t]:
        raise MeshError("dipole position outside the source domain")
    nbr = np.flatnonzero(np.isin(mesh.tets, mesh.tets[t]).any(axis=1))
    active = np.flatnonzero(np.isin(rt.tets, nbr).any(axis=1))
    if active.size == 0:
        raise MeshError("no source elements around the dipole position")
    mom = rt.moments(mesh.nodes)[active]
    A = np.vstack([mom.T, _second_moments(mesh, rt, active, r0).reshape(active.size, 9).T])
    rhs = np.concatenate([q, np.zeros(9)])
    if np.linalg.matrix_rank(A) < 12:
        A, rhs = mom.T, q
        if np.linalg.matrix_rank(A) < 3:
            raise MeshError("source elements around the dipole position do not span three directions")
    coef = np.linalg.lstsq(A, rhs, rcond=None)[0]
    alpha = np.zeros(rt.size)
    alpha[active] = coef
    return alpha
