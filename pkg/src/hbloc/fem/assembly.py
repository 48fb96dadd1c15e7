"""Complete electrode model FEM matrices with lowest-order Raviart-Thomas sources.

Potential: linear Lagrange elements ``psi_i``.  Sources: RT0 functions on
interior faces of the source domain with unit flux through the face,

    w = +(x - p_plus) / (3 |T_plus|)   on T_plus,
    w = -(x - p_minus) / (3 |T_minus|) on T_minus,

where ``p_plus``/``p_minus`` are the vertices opposite the face.  Current
flows from ``T_plus`` into ``T_minus`` and the dipole moment of ``w`` is
``(p_minus - p_plus) / 4``.

Block system ``[B C; C^T G] [zeta; zeta~] = [F alpha; 0]`` with
``F_ik = -int (div w_k) psi_i``, so that ``zeta`` is the electric potential
itself, and electrode potentials ``U = R zeta~``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import HeadMesh, MeshError, interior_faces

__all__ = [
    "FemSystem",
    "RtSourceSpace",
    "assemble_system",
    "build_rt_space",
    "tet_gradients",
    "TET_GAUSS4",
    "reference_matrix",
    "stiffness_matrix",
]

# four-point Gauss rule on the tetrahedron (degree 2), barycentric coordinates
_A4 = 0.5854101966249685
_B4 = 0.1381966011250105
TET_GAUSS4 = (
    np.array([[_A4, _B4, _B4, _B4], [_B4, _A4, _B4, _B4], [_B4, _B4, _A4, _B4], [_B4, _B4, _B4, _A4]]),
    np.full(4, 0.25),
)


def tet_gradients(nodes, tets):
    """Gradients of the four barycentric functions per tet, ``(T, 4, 3)``, and volumes."""
    p = nodes[tets]
    E = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=1)  # (T, 3, 3) rows = edges
    vol = np.linalg.det(E) / 6.0
    Einv = np.linalg.inv(E)  # columns are gradients of lambda_1..3
    g123 = np.transpose(Einv, (0, 2, 1))
    g0 = -g123.sum(axis=1, keepdims=True)
    return np.concatenate([g0, g123], axis=1), vol


@dataclass
class RtSourceSpace:
    """Active RT0 basis: one function per interior face of the source domain."""

    faces: np.ndarray          # (N_J, 3) node triples
    tets: np.ndarray           # (N_J, 2): T_plus, T_minus
    opposite: np.ndarray       # (N_J, 2): global node opposite the face in each tet
    volumes: np.ndarray        # (N_J, 2)

    @property
    def size(self):
        return self.faces.shape[0]

    def moments(self, nodes):
        """Dipole moment ``int w dx`` of every basis function."""
        return (nodes[self.opposite[:, 1]] - nodes[self.opposite[:, 0]]) / 4.0

    def centers(self, nodes):
        return nodes[self.faces].mean(axis=1)

    def divergence(self):
        """Constant divergence on ``T_plus`` and ``T_minus``."""
        return np.column_stack([1.0 / self.volumes[:, 0], -1.0 / self.volumes[:, 1]])

    def evaluate(self, nodes, k, x, which):
        """Value of basis ``k`` at points ``x`` of its tet ``which`` (0 plus, 1 minus)."""
        sign = 1.0 if which == 0 else -1.0
        return sign * (np.atleast_2d(x) - nodes[self.opposite[k, which]]) / (3.0 * self.volumes[k, which])


def build_rt_space(mesh: HeadMesh) -> RtSourceSpace:
    faces, pairs, loc = interior_faces(mesh.tets, mesh.source_tet_mask())
    opp = mesh.tets[pairs, loc]
    vol = mesh.volumes()[pairs]
    return RtSourceSpace(faces, pairs, opp, vol)


@dataclass
class FemSystem:
    B: sp.csc_matrix
    C: np.ndarray
    G: np.ndarray
    F: sp.csc_matrix
    R: np.ndarray
    rt: RtSourceSpace
    electrode_areas: np.ndarray

    @property
    def n_nodes(self):
        return self.B.shape[0]

    @property
    def n_sources(self):
        return self.F.shape[1]

    @property
    def n_electrodes(self):
        return self.R.shape[0]

    def block_matrix(self):
        """The full symmetric system matrix (for small meshes and checks)."""
        return sp.bmat([[self.B, sp.csc_matrix(self.C)], [sp.csc_matrix(self.C.T), sp.csc_matrix(self.G)]]).tocsc()


def reference_matrix(L):
    """``R`` with ``R[0, j] = 1`` and ``R[j+1, j] = -1``."""
    R = np.zeros((L, L - 1))
    R[0, :] = 1.0
    R[np.arange(1, L), np.arange(L - 1)] = -1.0
    return R


def _triangle_areas(nodes, tris):
    p = nodes[tris]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def stiffness_matrix(mesh: HeadMesh) -> sp.csr_matrix:
    """``int sigma grad psi_i . grad psi_j`` over the mesh (no electrode terms)."""
    grads, vol = tet_gradients(mesh.nodes, mesh.tets)
    small = np.flatnonzero(np.abs(vol) < 1e-18)
    if small.size:
        raise MeshError(f"degenerate tetrahedron {small[0]} (volume {abs(vol[small[0]]):.3e} m^3)")
    Ke = np.einsum("t,tid,tjd->tij", mesh.tet_conductivity() * vol, grads, grads)
    rows = np.repeat(mesh.tets, 4, axis=1).ravel()
    cols = np.tile(mesh.tets, (1, 4)).ravel()
    N = mesh.n_nodes
    return sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(N, N)).tocsr()


def assemble_system(mesh: HeadMesh, rt: RtSourceSpace | None = None) -> FemSystem:
    """Assemble ``B, C, G, F, R`` for ``mesh``; requires at least two electrodes."""
    L = mesh.n_electrodes
    if L < 2:
        raise MeshError("the complete electrode model needs at least two electrodes")
    N = mesh.n_nodes
    B = stiffness_matrix(mesh)

    # electrode boundary terms
    loc_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    e_rows, e_cols, e_vals = [], [], []
    areas = np.zeros(L)
    load = np.zeros((N, L))  # int_{e_l} psi_i / z_l
    for l, el in enumerate(mesh.electrodes):
        a = _triangle_areas(mesh.nodes, el.triangles)
        areas[l] = a.sum()
        z = el.impedance
        e_rows.append(np.repeat(el.triangles, 3, axis=1).ravel())
        e_cols.append(np.tile(el.triangles, (1, 3)).ravel())
        e_vals.append((a[:, None, None] * loc_mass[None] / z).ravel())
        np.add.at(load[:, l], el.triangles.ravel(), np.repeat(a / (3.0 * z), 3))
    B = B + sp.coo_matrix((np.concatenate(e_vals), (np.concatenate(e_rows), np.concatenate(e_cols))),
                          shape=(N, N)).tocsr()
    B = B.tocsc()

    z = np.array([e.impedance for e in mesh.electrodes])
    C = -load[:, [0]] + load[:, 1:]
    G = np.full((L - 1, L - 1), areas[0] / z[0]) + np.diag(areas[1:] / z[1:])

    if rt is None:
        rt = build_rt_space(mesh)
    # F_ik = -int (div w_k) psi_i = -(+-1/|T|)(|T|/4) on the vertices of T_plus / T_minus
    J = rt.size
    tp = mesh.tets[rt.tets[:, 0]]
    tm = mesh.tets[rt.tets[:, 1]]
    f_rows = np.concatenate([tp.ravel(), tm.ravel()])
    f_cols = np.concatenate([np.repeat(np.arange(J), 4), np.repeat(np.arange(J), 4)])
    f_vals = np.concatenate([np.full(4 * J, -0.25), np.full(4 * J, 0.25)])
    F = sp.coo_matrix((f_vals, (f_rows, f_cols)), shape=(N, J)).tocsc()
    return FemSystem(B, C, G, F, reference_matrix(L), rt, areas)
