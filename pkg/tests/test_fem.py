import json

import numpy as np
import pytest
from scipy.spatial import cKDTree

from hbloc.fem import (
    FemForwardModel,
    HeadMesh,
    MeshError,
    TABLE1_CONDUCTIVITIES,
    assemble_system,
    dipole_to_rt,
    load_mesh,
    make_sphere_mesh,
    mesh_to_document,
)
from hbloc.fem.assembly import stiffness_matrix
from hbloc.fem.leadfield import _second_moments, primary_matrices
from hbloc.fem.mesh import Electrode, boundary_faces, interior_faces
from oracles import sphere_surface_potential, tet_quadrature

UNIT_TET = [[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1]]


def _tiny_two_domain_mesh():
    """48-tet ball split into two conductivities, with four electrodes and sensors."""
    m = make_sphere_mesh([0.09], [0.33], 1, n_electrodes=4, n_sensors=3)
    dom = (m.nodes[m.tets].mean(axis=1)[:, 0] > 0).astype(int)
    return HeadMesh(m.nodes, m.tets, dom, ["a", "b"], np.array([0.33, 0.1]), m.electrodes,
                    m.sensor_positions, m.sensor_orientations, ["a", "b"])


# mesh IO and generator


def test_single_tet_document():
    doc = {"nodes": UNIT_TET, "tets": [[0, 1, 2, 3, "brain"]], "domains": {"brain": 0.33}}
    m = load_mesh(doc)
    assert m.n_tets == 1
    assert m.volumes()[0] == pytest.approx(1 / 6, rel=1e-15)
    assert m.source_domains == ["brain"]


def test_orientation_is_fixed():
    doc = {"nodes": UNIT_TET, "tets": [[0, 2, 1, 3, "brain"]], "domains": {"brain": 1.0}}
    m = load_mesh(json.dumps(doc))
    assert m.volumes()[0] == pytest.approx(1 / 6)


def test_two_tets_share_a_face():
    nodes = UNIT_TET + [[1.0, 1, 1]]
    doc = {"nodes": nodes, "tets": [[0, 1, 2, 3, 0], [1, 2, 3, 4, 0]], "domains": {"0": 1.0}}
    m = load_mesh(doc)
    faces, pairs, loc = interior_faces(m.tets)
    assert faces.tolist() == [[1, 2, 3]]
    assert pairs.tolist() == [[0, 1]]
    assert m.tets[0, loc[0, 0]] == 0 and m.tets[1, loc[0, 1]] == 4
    assert boundary_faces(m.tets).shape == (6, 3)


def test_sphere_mesh_document_roundtrip(tmp_path):
    m = make_sphere_mesh([0.07, 0.08, 0.09], [0.33, 0.0042, 0.33], 3, n_electrodes=6, n_sensors=4)
    path = tmp_path / "mesh.json"
    path.write_text(json.dumps(mesh_to_document(m)))
    m2 = load_mesh(path)
    assert m2.domain_counts() == m.domain_counts()
    assert sum(m2.domain_counts().values()) == m.meta["n_tets"] == 48 * 27
    assert np.array_equal(m2.tets, m.tets)
    assert len(m2.electrodes) == 6 and m2.n_sensors == 8


@pytest.mark.parametrize("patch, match", [
    (lambda d: d["tets"].__setitem__(0, [0, 1, 2, 9, "brain"]), "outside"),
    (lambda d: d.__setitem__("domains", {"brain": 0.0}), "positive"),
    (lambda d: d.__setitem__("electrodes", [{"triangles": [[1, 2, 3]]}]), "boundary"),
    (lambda d: d.__setitem__("electrodes", [{"triangles": [[0, 1, 2]], "impedance": -1}]), "impedance"),
    (lambda d: d.__setitem__("nodes", d["nodes"][:2]), "nodes"),
    (lambda d: d["tets"].__setitem__(0, [0, 1, 2, 3, "skull"]), "undefined"),
])
def test_invalid_documents(patch, match):
    nodes = UNIT_TET + [[1.0, 1, 1]]
    doc = {"nodes": nodes, "tets": [[0, 1, 2, 3, "brain"], [1, 2, 3, 4, "brain"]], "domains": {"brain": 1.0}}
    patch(doc)
    with pytest.raises(MeshError, match=match):
        load_mesh(doc)


def test_degenerate_tet_rejected():
    nodes = [[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]]
    with pytest.raises(MeshError, match="degenerate tetrahedron 0"):
        load_mesh({"nodes": nodes, "tets": [[0, 1, 2, 3, "b"]], "domains": {"b": 1.0}})


def test_sphere_generator_accounting():
    m1 = make_sphere_mesh([0.09], [0.33], 2)
    assert np.all(m1.tet_domain == 0) and m1.domain_names == ["brain"]
    counts = [make_sphere_mesh([0.09], [0.33], n, n_electrodes=0, n_sensors=0).n_tets for n in (2, 4, 8)]
    assert counts[1] / counts[0] == 8 and counts[2] / counts[1] == 8
    vol = make_sphere_mesh([0.09], [0.33], 8, n_electrodes=0, n_sensors=0).volumes().sum()
    assert vol == pytest.approx(4 / 3 * np.pi * 0.09**3, rel=0.01)
    with pytest.raises(MeshError):
        make_sphere_mesh([0.09, 0.08], [1, 1], 4)
    with pytest.raises(MeshError, match="too coarse"):
        make_sphere_mesh([0.08, 0.082, 0.087, 0.092], [1, 1, 1, 1], 3)


def test_table1_conductivity_assignment():
    names = ["brain", "csf", "skull", "scalp"]
    m = make_sphere_mesh([0.08, 0.082, 0.087, 0.092], [TABLE1_CONDUCTIVITIES[n] for n in names], 8)
    assert m.domain_names == names
    assert dict(zip(m.domain_names, m.conductivity)) == {"brain": 0.33, "csf": 1.0, "skull": 0.0042, "scalp": 0.33}
    assert all(c > 0 for c in m.domain_counts().values())
    # the outermost tets belong to the scalp
    r = np.linalg.norm(m.nodes[m.tets].mean(axis=1), axis=1)
    assert np.all(m.tet_domain[r > 0.09] == 3)


# assembly


def test_single_tet_stiffness():
    m = load_mesh({"nodes": UNIT_TET, "tets": [[0, 1, 2, 3, "b"]], "domains": {"b": 1.0}})
    K = stiffness_matrix(m).toarray()
    ref = np.array([[3, -1, -1, -1], [-1, 1, 0, 0], [-1, 0, 1, 0], [-1, 0, 0, 1]]) / 6.0
    assert np.allclose(K, ref, rtol=0, atol=1e-15)


def test_system_structure():
    m = make_sphere_mesh([0.08, 0.09], [0.33, 0.1], 3, n_electrodes=8, impedance=0.5)
    sys = assemble_system(m)
    B = sys.B.toarray()
    assert np.abs(B - B.T).max() < 1e-12 * np.abs(B).max()
    np.linalg.cholesky(B)
    np.linalg.cholesky(sys.G)
    full = sys.block_matrix()
    assert abs(full - full.T).max() < 1e-12 * abs(full).max()
    assert np.array_equal(sys.R[0], np.ones(7)) and np.array_equal(np.diag(sys.R[1:]), -np.ones(7))
    # constant potential: only the electrode boundary mass survives
    expect = np.zeros(m.n_nodes)
    areas = []
    for e in m.electrodes:
        p = m.nodes[e.triangles]
        area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
        areas.append(area.sum())
        np.add.at(expect, e.triangles.ravel(), np.repeat(area / 3 / e.impedance, 3))
    assert np.allclose(sys.B @ np.ones(m.n_nodes), expect, rtol=1e-10, atol=1e-14)
    assert np.allclose(sys.electrode_areas, areas, rtol=1e-14)
    assert np.allclose(sys.G, areas[0] / 0.5 + np.diag(np.array(areas[1:]) / 0.5), rtol=1e-14)
    with pytest.raises(MeshError, match="two electrodes"):
        assemble_system(make_sphere_mesh([0.09], [1.0], 2, n_electrodes=1))


def test_rt_conformity_and_partition_of_unity():
    m = make_sphere_mesh([0.08, 0.09], [0.33, 1.0], 3, n_electrodes=4)
    sys = assemble_system(m)
    rt = sys.rt
    # only faces with both tets in the source domain
    src = m.source_tet_mask()
    assert np.all(src[rt.tets])
    for k in range(0, rt.size, 37):
        P = m.nodes[rt.faces[k]]
        normal = np.cross(P[1] - P[0], P[2] - P[0])
        area = 0.5 * np.linalg.norm(normal)
        normal /= 2 * area
        pts = np.array([[1 / 3, 1 / 3, 1 / 3], [0.6, 0.2, 0.2], [0.1, 0.1, 0.8]]) @ P
        fp = rt.evaluate(m.nodes, k, pts, 0) @ normal
        fm = rt.evaluate(m.nodes, k, pts, 1) @ normal
        assert np.allclose(fp, fm, rtol=0, atol=1e-12 * np.abs(fp).max())
        assert np.allclose(fp, fp[0], rtol=1e-12)
        assert abs(fp[0]) * area == pytest.approx(1.0, rel=1e-12)
        # flux leaves T_plus through the face
        cp = m.nodes[m.tets[rt.tets[k, 0]]].mean(axis=0)
        assert np.sign(fp[0]) == np.sign(normal @ (P[0] - cp))
    # per tet, sum_i -int (div w) psi_i = -(div w)|T| since sum_i psi_i = 1;
    # the face nodes collect both tets and cancel
    F = sys.F.toarray()
    div = rt.divergence()
    for k in range(0, rt.size, 53):
        col = np.zeros(m.n_nodes)
        for side in (0, 1):
            np.add.at(col, m.tets[rt.tets[k, side]], -div[k, side] * rt.volumes[k, side] / 4)
        assert np.allclose(F[:, k], col, rtol=0, atol=1e-15)
        assert F[rt.opposite[k, 0], k] == -0.25 and F[rt.opposite[k, 1], k] == 0.25
        assert np.count_nonzero(F[:, k]) == 2


# lead fields


def test_block_system_oracle_on_tiny_mesh():
    m = _tiny_two_domain_mesh()
    assert m.n_tets <= 200
    fm = FemForwardModel(m)
    sys = fm.sys
    Me, Mm = fm.electric_lead_field(), fm.magnetic_lead_field()
    N, J = sys.n_nodes, sys.n_sources
    A = sys.block_matrix().toarray()
    rhs = np.vstack([sys.F.toarray(), np.zeros((sys.n_electrodes - 1, J))])
    sol = np.linalg.solve(A, rhs)
    Me_ref = sys.R @ sol[N:]
    W, V = primary_matrices(m, sys)
    Mm_ref = W - V @ sol[:N]
    assert np.abs(Me - Me_ref).max() <= 1e-10 * np.abs(Me_ref).max()
    assert np.abs(Mm - Mm_ref).max() <= 1e-10 * np.abs(Mm_ref).max()
    assert np.abs(Me.sum(axis=0)).max() <= 1e-10 * np.abs(Me).max()


def test_forward_solve_consistency():
    m = make_sphere_mesh([0.08, 0.09], [0.33, 0.01], 3, n_electrodes=8, n_sensors=5)
    fm = FemForwardModel(m)
    Me, Mm = fm.electric_lead_field(), fm.magnetic_lead_field()
    U, Bf = fm.forward_solve(np.zeros(fm.sys.n_sources))
    assert np.all(U == 0) and np.all(Bf == 0)
    e = np.zeros(fm.sys.n_sources)
    e[7] = 1.0
    U, Bf = fm.forward_solve(e)
    assert np.allclose(U, Me[:, 7], rtol=0, atol=1e-10 * np.abs(Me).max())
    a = np.random.default_rng(0).standard_normal(fm.sys.n_sources)
    U, Bf = fm.forward_solve(a)
    assert np.abs(U - Me @ a).max() <= 1e-10 * np.abs(U).max()
    assert np.abs(Bf - Mm @ a).max() <= 1e-10 * np.abs(Bf).max()
    assert abs(U.sum()) <= 1e-10 * np.abs(U).max()
    with pytest.raises(ValueError):
        fm.forward_solve(np.zeros(3))


def test_inversion_symmetric_source_gives_antisymmetric_pairs():
    # the cube-lattice mesh is invariant under x -> -x (point inversion); with
    # electrode pairs at +-d, an inversion-even current has odd potentials
    base = make_sphere_mesh([0.09], [0.33], 3, n_electrodes=0, n_sensors=0)
    bf = boundary_faces(base.tets)
    cd = base.nodes[bf].mean(axis=1)
    cd /= np.linalg.norm(cd, axis=1)[:, None]
    electrodes = []
    for d in (np.array([0.3, 0.5, 0.8]), np.array([-0.7, 0.6, 0.1])):
        d /= np.linalg.norm(d)
        for s in (1, -1):
            electrodes.append(Electrode(bf[cd @ (s * d) > 0.93]))
    m = HeadMesh(base.nodes, base.tets, base.tet_domain, base.domain_names, base.conductivity, electrodes)
    fm = FemForwardModel(m)
    rt = fm.sys.rt
    tree = cKDTree(m.nodes)
    image = tree.query(-m.nodes)[1]
    keys = {tuple(f): k for k, f in enumerate(rt.faces)}
    mom = rt.moments(m.nodes)
    k = 11
    kp = keys[tuple(np.sort(image[rt.faces[k]]))]
    assert kp != k
    # -w_k(-x) = s w_k'(x); the moment of -w_k(-x) is -m_k
    s = -np.sign(mom[k] @ mom[kp])
    alpha = np.zeros(rt.size)
    alpha[k], alpha[kp] = 1.0, -s
    U, _ = fm.forward_solve(alpha, magnetic=False)
    scale = np.abs(U).max()
    assert scale > 0
    assert abs(U[0] + U[1]) < 1e-10 * scale and abs(U[2] + U[3]) < 1e-10 * scale


def test_sensor_inside_mesh_rejected():
    m = make_sphere_mesh([0.09], [0.33], 2, n_electrodes=4, sensor_radius=0.05, n_sensors=2)
    with pytest.raises(MeshError, match="inside the mesh"):
        FemForwardModel(m).magnetic_lead_field()


def test_primary_W_matches_dense_quadrature():
    nodes = np.array(UNIT_TET + [[0.4, 0.5, -0.8]]) * 0.01
    m = HeadMesh(nodes, np.array([[0, 1, 2, 3], [0, 1, 2, 4]]), np.zeros(2, int), ["b"], np.array([0.33]),
                 [], np.array([[0.06, 0.03, 0.05], [0.0, -0.08, 0.0]]), np.array([[0, 0, 1.0], [0.6, 0.8, 0]]))
    from hbloc.fem.assembly import build_rt_space
    rt = build_rt_space(m)
    assert rt.size == 1

    class _Sys:
        pass

    sys = _Sys()
    sys.rt = rt
    W, V = primary_matrices(m, sys)
    diam = 0.01 * np.sqrt(2)
    for i, (r, n) in enumerate(zip(m.sensor_positions, m.sensor_orientations)):
        assert np.linalg.norm(r - nodes.mean(0)) > 5 * diam
        ref = 0.0
        for side in (0, 1):
            P = nodes[m.tets[rt.tets[0, side]]]

            def f(x, side=side):
                w = rt.evaluate(nodes, 0, x, side)
                d = r - x
                return np.cross(w, d) @ n / np.linalg.norm(d, axis=1) ** 3

            ref += 1e-7 * tet_quadrature(P, f)
        assert W[i, 0] == pytest.approx(ref, rel=1e-3)


def test_far_field_decay():
    m0 = make_sphere_mesh([0.09], [0.33], 3, n_electrodes=6, n_sensors=0)
    d = np.array([0.3, 0.5, 0.81])
    d /= np.linalg.norm(d)
    vals = []
    for dist in (2.0, 4.0):
        m = HeadMesh(m0.nodes, m0.tets, m0.tet_domain, m0.domain_names, m0.conductivity, m0.electrodes,
                     [dist * d], [[0, 0, 1.0]])
        fm = FemForwardModel(m)
        a = dipole_to_rt(m, fm.sys.rt, [0.01, 0, 0.02], [0, 1.0, 0])
        W, _ = fm.primary
        vals.append((W @ a)[0])
    assert np.log(vals[0] / vals[1]) / np.log(2) == pytest.approx(2.0, abs=0.1)


def test_radial_field_of_sphere_is_primary():
    m = make_sphere_mesh([0.09], [0.33], 5, n_electrodes=8)
    fm = FemForwardModel(m)
    W, _ = fm.primary
    Mm = fm.magnetic_lead_field()
    assert np.linalg.norm(Mm - W) <= 0.1 * np.linalg.norm(W)


# dipole sources and the sphere oracle


def test_dipole_to_rt_moments():
    m = make_sphere_mesh([0.09], [0.33], 4, n_electrodes=4)
    rt = assemble_system(m).rt
    r0, q = np.array([0.012, -0.02, 0.03]), np.array([0.2, -1.0, 0.4])
    a = dipole_to_rt(m, rt, r0, q)
    nz = np.flatnonzero(a)
    assert np.allclose(rt.moments(m.nodes).T @ a, q, rtol=1e-10)
    assert np.abs(np.einsum("k,kab->ab", a[nz], _second_moments(m, rt, nz, r0))).max() < 1e-10 * 0.09
    with pytest.raises(MeshError, match="outside"):
        dipole_to_rt(m, rt, [0.2, 0, 0], q)


def test_sphere_oracle_centered_dipole():
    R, sigma = 0.09, 0.33
    q = np.array([0.0, 0.0, 1.0])
    dirs = np.random.default_rng(0).standard_normal((20, 3))
    x = R * dirs / np.linalg.norm(dirs, axis=1)[:, None]
    v = sphere_surface_potential(np.array([0, 0, 1e-12]), q, x, sigma, R)
    ref = 3 * x[:, 2] / R / (4 * np.pi * sigma * R**2)
    assert np.allclose(v, ref - ref.mean(), rtol=1e-8, atol=1e-10 * np.abs(ref).max())


def test_sphere_oracle_matches_infinite_medium_near_source():
    # close to the source the potential approaches the unbounded-medium dipole
    R, sigma = 0.09, 0.33
    x = np.array([[0.0, 0.0, R], [R, 0, 0], [0, R, 0], [0, 0, -R]])
    r0 = np.array([0, 0, R - 0.002])
    q = np.array([0, 0, 1.0])
    v = sphere_surface_potential(r0, q, x, sigma, R, n_terms=3000)
    d = x[0] - r0
    # a surface point sees twice the unbounded potential (image in the plane)
    assert (v[0] - v[3]) == pytest.approx(2 * q @ d / (4 * np.pi * sigma * np.linalg.norm(d) ** 3), rel=0.05)


def _sphere_potentials(n, r0, q):
    m = make_sphere_mesh([0.09], [0.33], n, n_electrodes=32)
    fm = FemForwardModel(m)
    U, _ = fm.forward_solve(dipole_to_rt(m, fm.sys.rt, r0, q), magnetic=False)
    cen = np.array([m.nodes[e.triangles].mean(axis=(0, 1)) for e in m.electrodes])
    return U, 0.09 * cen / np.linalg.norm(cen, axis=1)[:, None]


def test_sphere_potentials_match_oracle():
    r0 = np.array([0.01, 0.02, 0.04])
    q = np.cross(r0, [0.3, 1.0, 0.2])
    q /= np.linalg.norm(q)
    U, x = _sphere_potentials(8, r0, q)
    ref = sphere_surface_potential(r0, q, x, 0.33, 0.09)
    assert np.linalg.norm(U - ref) < 0.1 * np.linalg.norm(ref)


def test_refinement_consistency_for_deep_source():
    # one refinement level doubles the resolution (8x the tets)
    r0, q = np.array([0.0, 0.01, 0.02]), np.array([1.0, 0, 0])
    U5, _ = _sphere_potentials(5, r0, q)
    U10, _ = _sphere_potentials(10, r0, q)
    assert np.linalg.norm(U5 - U10) < 0.05 * np.linalg.norm(U10)
