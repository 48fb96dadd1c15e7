"""Magnetic forward model for dipole lattices below a planar magnetometer array.

Volume currents are ignored, so the field is the Biot-Savart field of the
primary dipoles alone.  All lengths are in meters and fields in tesla.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hypermodel import VarianceGrouping

__all__ = [
    "MU0_OVER_4PI",
    "CM",
    "DEFAULT_SOURCE_MOMENT",
    "DEFAULT_SOURCE_XY",
    "SensorGrid",
    "DipoleGrid",
    "PlanarLeadField",
    "PlanarSetup",
    "build_planar_leadfield",
    "simulate_data",
    "make_paper_planar_setup",
    "geometry_to_dict",
    "geometry_from_dict",
    "save_geometry",
    "load_geometry",
]

MU0_OVER_4PI = 1e-7
CM = 1e-2


@dataclass
class SensorGrid:
    """Point magnetometers sharing one orientation."""

    positions: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[1] != 3:
            raise ValueError("sensor positions must be (L, 3)")
        o = np.asarray(self.orientation, dtype=float)
        n = np.linalg.norm(o)
        if o.shape != (3,) or n == 0:
            raise ValueError("orientation must be a nonzero 3-vector")
        self.orientation = o / n

    @property
    def n_sensors(self):
        return self.positions.shape[0]

    @classmethod
    def rectangular(cls, nx, ny, spacing, height, center=(0.0, 0.0)):
        xs = center[0] + spacing * (np.arange(nx) - (nx - 1) / 2)
        ys = center[1] + spacing * (np.arange(ny) - (ny - 1) / 2)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pos = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, height)])
        return cls(pos)


@dataclass
class DipoleGrid:
    """Dipole locations with a shared horizontal tangent basis.

    ``layer_of`` gives the layer index of each location and ``depths`` the
    (positive) depth of each layer below ``z = 0``.
    """

    locations: np.ndarray
    e1: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    e2: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    layer_of: np.ndarray | None = None
    depths: np.ndarray | None = None

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if self.locations.shape[1] != 3:
            raise ValueError("dipole locations must be (K, 3)")
        self.e1 = np.asarray(self.e1, dtype=float)
        self.e2 = np.asarray(self.e2, dtype=float)
        basis = np.array([self.e1, self.e2])
        if not np.allclose(basis @ basis.T, np.eye(2), atol=1e-12) or not np.allclose(basis[:, 2], 0, atol=1e-12):
            raise ValueError("e1, e2 must be orthonormal and horizontal")
        if self.layer_of is None:
            z = self.locations[:, 2]
            self.depths, self.layer_of = np.unique(-z, return_inverse=True)
        self.layer_of = np.asarray(self.layer_of, dtype=np.intp)
        self.depths = np.asarray(self.depths, dtype=float)

    @property
    def n_dipoles(self):
        return self.locations.shape[0]

    @property
    def n_layers(self):
        return self.depths.size

    @classmethod
    def layered(cls, nx, ny, spacing, depths, center=(0.0, 0.0)):
        """``nx`` by ``ny`` lattices at each depth, layer-major then x then y."""
        xs = center[0] + spacing * (np.arange(nx) - (nx - 1) / 2)
        ys = center[1] + spacing * (np.arange(ny) - (ny - 1) / 2)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        depths = np.asarray(depths, dtype=float)
        locs = np.concatenate(
            [np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, -d)]) for d in depths]
        )
        layer_of = np.repeat(np.arange(depths.size), X.size)
        return cls(locs, layer_of=layer_of, depths=depths)

    def grouping(self) -> VarianceGrouping:
        """One variance per dipole shared by its two tangential coefficients."""
        return VarianceGrouping.blocks(self.n_dipoles, 2)

    def moments(self, alpha):
        """Dipole moment vectors ``alpha^1 e1 + alpha^2 e2`` as a ``(K, 3)`` array."""
        alpha = np.asarray(alpha, dtype=float)
        K = self.n_dipoles
        return np.outer(alpha[:K], self.e1) + np.outer(alpha[K:], self.e2)


@dataclass
class PlanarLeadField:
    """``b = [M1 M2] [alpha^1; alpha^2]`` for vertical magnetometers."""

    matrix: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    @property
    def T(self):
        return self.matrix.T


def build_planar_leadfield(sensors: SensorGrid, dipoles: DipoleGrid) -> PlanarLeadField:
    """Entries ``1e-7 * n . (e_j x (x - y)) / |x - y|^3`` with ``n`` the sensor orientation."""
    d = sensors.positions[:, None, :] - dipoles.locations[None, :, :]
    dist = np.linalg.norm(d, axis=2)
    if np.any(dist == 0.0):
        i, k = np.argwhere(dist == 0.0)[0]
        raise ValueError(f"sensor {i} coincides with dipole {k}")
    inv3 = MU0_OVER_4PI / dist**3
    n = sensors.orientation
    # n . (e x d) = d . (n x e)
    cols = [(d @ np.cross(n, e)) * inv3 for e in (dipoles.e1, dipoles.e2)]
    return PlanarLeadField(np.hstack(cols))


def simulate_data(Mf, alpha_true, noise_fraction: float, add_noise: bool = False, seed=None):
    """Noiseless or noisy data with ``sigma = noise_fraction * max |M alpha|``.

    Returns ``(b, sigma)``.
    """
    M = getattr(Mf, "matrix", Mf)
    alpha_true = np.asarray(alpha_true, dtype=float)
    if alpha_true.shape != (M.shape[1],):
        raise ValueError(f"alpha_true has shape {alpha_true.shape}, expected ({M.shape[1]},)")
    if noise_fraction < 0:
        raise ValueError("noise_fraction must be nonnegative")
    b = M @ alpha_true
    sigma = noise_fraction * float(np.max(np.abs(b))) if b.size else 0.0
    if noise_fraction > 0 and sigma == 0.0:
        raise ValueError("zero signal with positive noise_fraction gives sigma = 0")
    if add_noise and sigma > 0:
        b = b + sigma * np.random.default_rng(seed).standard_normal(b.size)
    return b, sigma


@dataclass
class PlanarSetup:
    sensors: SensorGrid
    dipoles: DipoleGrid
    source_position: np.ndarray
    source_moment: np.ndarray
    roi_groups: np.ndarray

    def source_dipoles(self):
        """Single-dipole truth as a separate grid (generally off the lattice)."""
        m = self.source_moment
        e1 = self.dipoles.e1
        e2 = self.dipoles.e2
        grid = DipoleGrid(self.source_position[None, :], e1, e2)
        return grid, np.array([m @ e1, m @ e2])

    def data(self, noise_fraction=0.05, add_noise=False, seed=None):
        """Data from the true dipole and the resulting ``sigma``."""
        grid, coeffs = self.source_dipoles()
        return simulate_data(build_planar_leadfield(self.sensors, grid), coeffs, noise_fraction, add_noise, seed)


# default true moment in A m; with noise tied to the signal only the ratio
# moment**2 / theta0 matters, and this value sets it for the presets
DEFAULT_SOURCE_MOMENT = 1.0
# lattice node nearest the array center (the lattice itself avoids x = 0)
DEFAULT_SOURCE_XY = (0.5 * CM, 0.5 * CM)


def make_paper_planar_setup(source_depth=3.5 * CM, moment=DEFAULT_SOURCE_MOMENT,
                            source_xy=DEFAULT_SOURCE_XY) -> PlanarSetup:
    """10x10 magnetometers 2 cm above nine 10x10 dipole layers at depths 0 to 4 cm.

    Both lattices have 1 cm spacing and are centered on the z axis.  The
    true dipole is oriented along ``e1`` at ``source_xy``, and the ROI
    is the central 6x6 columns of all nine layers.
    """
    sensors = SensorGrid.rectangular(10, 10, 1 * CM, 2 * CM)
    depths = np.arange(9) * 0.5 * CM
    dipoles = DipoleGrid.layered(10, 10, 1 * CM, depths)
    ix, iy = np.meshgrid(np.arange(10), np.arange(10), indexing="ij")
    central = ((ix >= 2) & (ix <= 7) & (iy >= 2) & (iy <= 7)).ravel()
    roi = np.concatenate([np.flatnonzero(central) + 100 * layer for layer in range(9)])
    pos = np.array([source_xy[0], source_xy[1], -source_depth], dtype=float)
    return PlanarSetup(sensors, dipoles, pos, moment * dipoles.e1, roi)


def geometry_to_dict(setup: PlanarSetup) -> dict:
    return {
        "sensors": {
            "positions": setup.sensors.positions.tolist(),
            "orientation": setup.sensors.orientation.tolist(),
        },
        "dipoles": {
            "locations": setup.dipoles.locations.tolist(),
            "e1": setup.dipoles.e1.tolist(),
            "e2": setup.dipoles.e2.tolist(),
            "layer_of": setup.dipoles.layer_of.tolist(),
            "depths": setup.dipoles.depths.tolist(),
        },
        "source": {
            "position": setup.source_position.tolist(),
            "moment": setup.source_moment.tolist(),
        },
        "roi_groups": setup.roi_groups.tolist(),
        "units": "m",
    }


def geometry_from_dict(doc: dict) -> PlanarSetup:
    s, d, src = doc["sensors"], doc["dipoles"], doc["source"]
    return PlanarSetup(
        SensorGrid(np.array(s["positions"]), np.array(s.get("orientation", [0, 0, 1]))),
        DipoleGrid(np.array(d["locations"]), np.array(d["e1"]), np.array(d["e2"]),
                   d.get("layer_of"), d.get("depths")),
        np.array(src["position"], dtype=float),
        np.array(src["moment"], dtype=float),
        np.array(doc.get("roi_groups", []), dtype=np.intp),
    )


def save_geometry(setup: PlanarSetup, path):
    Path(path).write_text(json.dumps(geometry_to_dict(setup), indent=1))


def load_geometry(path) -> PlanarSetup:
    return geometry_from_dict(json.loads(Path(path).read_text()))
