import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbloc.planar import (
    DipoleGrid,
    SensorGrid,
    build_planar_leadfield,
    load_geometry,
    make_paper_planar_setup,
    save_geometry,
    simulate_data,
)


def naive_leadfield(sensors, dipoles):
    L, K = sensors.shape[0], dipoles.shape[0]
    e = [np.array([1.0, 0, 0]), np.array([0, 1.0, 0])]
    out = np.zeros((L, 2 * K))
    for l in range(L):
        for k in range(K):
            d = sensors[l] - dipoles[k]
            r3 = np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2) ** 3
            for j in range(2):
                c = [e[j][1] * d[2] - e[j][2] * d[1], e[j][2] * d[0] - e[j][0] * d[2], e[j][0] * d[1] - e[j][1] * d[0]]
                out[l, j * K + k] = 1e-7 * c[2] / r3
    return out


def test_paper_setup_counts():
    s = make_paper_planar_setup()
    M = build_planar_leadfield(s.sensors, s.dipoles)
    assert s.sensors.n_sensors == 100
    assert s.dipoles.n_dipoles == 900
    assert M.shape == (100, 1800)
    assert s.roi_groups.size == 324
    assert np.allclose(s.dipoles.depths, np.arange(0, 4.01, 0.5) * 1e-2)
    assert np.allclose(s.sensors.positions[:, 2], 0.02)
    # ROI: central 6x6 columns, |x|, |y| <= 2.5 cm, in every layer
    locs = s.dipoles.locations[s.roi_groups]
    assert np.all(np.abs(locs[:, :2]) <= 0.025 + 1e-12)
    assert np.array_equal(np.bincount(s.dipoles.layer_of[s.roi_groups]), np.full(9, 36))


def test_matches_naive_loop():
    s = make_paper_planar_setup()
    M = build_planar_leadfield(s.sensors, s.dipoles).matrix
    ref = naive_leadfield(s.sensors.positions, s.dipoles.locations)
    assert np.max(np.abs(M - ref)) <= 1e-14 * np.max(np.abs(ref))


def test_hand_examples():
    sens = SensorGrid(np.array([[0.0, 0, 0.02], [0.03, 0, 0]]))
    dip = DipoleGrid(np.array([[0.0, 0, -0.01], [0.0, 0, 0]]))
    M = build_planar_leadfield(sens, dip).matrix
    # dipole directly below the first sensor
    assert M[0, 0] == 0 and M[0, 2] == 0
    # sensor at (a, 0, 0), dipole at origin, e2 column: -1e-7 / a^2
    assert M[1, 3] == pytest.approx(-1e-7 / 0.03**2, rel=1e-15)


def test_coincident_sensor_rejected():
    with pytest.raises(ValueError, match="coincides"):
        build_planar_leadfield(SensorGrid(np.zeros((1, 3))), DipoleGrid(np.zeros((1, 3))))


def test_simulate_data():
    s = make_paper_planar_setup()
    M = build_planar_leadfield(s.sensors, s.dipoles)
    b, sig = simulate_data(M, np.zeros(1800), 0.0)
    assert sig == 0 and np.all(b == 0)
    with pytest.raises(ValueError):
        simulate_data(M, np.zeros(1800), 0.05)
    a = np.zeros(1800)
    a[123] = 1.0
    b, sig = simulate_data(M, a, 0.05)
    assert np.array_equal(b, M.matrix[:, 123])
    assert sig == pytest.approx(0.05 * np.abs(M.matrix[:, 123]).max())
    b1, _ = simulate_data(M, a, 0.05, add_noise=True, seed=3)
    b2, _ = simulate_data(M, a, 0.05, add_noise=True, seed=3)
    assert np.array_equal(b1, b2)


def test_noise_level_monte_carlo():
    M = np.eye(4)
    a = np.array([1.0, 2.0, -0.5, 0.0])
    dev = np.concatenate([simulate_data(M, a, 0.1, add_noise=True, seed=i)[0] - M @ a for i in range(2500)])
    assert dev.std() == pytest.approx(0.2, rel=0.02)


def test_linearity():
    s = make_paper_planar_setup()
    M = build_planar_leadfield(s.sensors, s.dipoles)
    rng = np.random.default_rng(0)
    a1, a2 = rng.standard_normal(1800), rng.standard_normal(1800)
    b12 = simulate_data(M, a1 + a2, 0.0)[0]
    b1, b2 = simulate_data(M, a1, 0.0)[0], simulate_data(M, a2, 0.0)[0]
    assert np.max(np.abs(b12 - b1 - b2)) <= 1e-14 * np.max(np.abs(b12)) * 10


def test_mirror_symmetry():
    # both grids are symmetric under y -> -y; with d = x - y the e1 entry is
    # d_y and the e2 entry is -d_x, so e1 columns flip sign and e2 columns do not
    s = make_paper_planar_setup()
    M = build_planar_leadfield(s.sensors, s.dipoles).matrix
    flip = np.array([1.0, -1.0, 1.0])

    def perm(a, b):
        idx = {tuple(np.round(p, 12)): i for i, p in enumerate(b)}
        return np.array([idx[tuple(np.round(p, 12))] for p in a])

    ps = perm(s.sensors.positions * flip, s.sensors.positions)
    pd = perm(s.dipoles.locations * flip, s.dipoles.locations)
    K = 900
    tol = 1e-14 * np.abs(M).max()
    assert np.allclose(M[ps][:, pd], -M[:, :K], rtol=0, atol=tol)
    assert np.allclose(M[ps][:, K + pd], M[:, K:], rtol=0, atol=tol)
    assert not np.array_equal(ps, np.arange(100))


@settings(max_examples=20, deadline=None)
@given(shift=st.tuples(*[st.floats(-0.5, 0.5)] * 3))
def test_translation_invariance(shift):
    rng = np.random.default_rng(1)
    sens = rng.uniform(-0.05, 0.05, (8, 3)) + [0, 0, 0.1]
    dip = rng.uniform(-0.05, 0.05, (5, 3))
    M1 = build_planar_leadfield(SensorGrid(sens), DipoleGrid(dip)).matrix
    M2 = build_planar_leadfield(SensorGrid(sens + shift), DipoleGrid(dip + shift)).matrix
    assert np.allclose(M1, M2, rtol=1e-12, atol=1e-14 * np.abs(M1).max())


def test_geometry_roundtrip(tmp_path):
    s = make_paper_planar_setup()
    save_geometry(s, tmp_path / "g.json")
    t = load_geometry(tmp_path / "g.json")
    assert np.array_equal(s.sensors.positions, t.sensors.positions)
    assert np.array_equal(s.dipoles.locations, t.dipoles.locations)
    assert np.array_equal(s.roi_groups, t.roi_groups)
    assert np.array_equal(s.source_position, t.source_position)
    assert np.array_equal(s.data()[0], t.data()[0])


def test_dipole_basis_validation():
    with pytest.raises(ValueError):
        DipoleGrid(np.zeros((1, 3)), e1=np.array([1.0, 0, 0]), e2=np.array([1.0, 0, 0]))
