"""Tetrahedral head meshes: JSON loading, validation and a layered-sphere generator."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

__all__ = [
    "Electrode",
    "HeadMesh",
    "MeshError",
    "TABLE1_CONDUCTIVITIES",
    "MESH_SCHEMA",
    "load_mesh",
    "mesh_to_document",
    "make_sphere_mesh",
    "tet_volumes",
    "boundary_faces",
    "interior_faces",
]

MIN_TET_VOLUME = 1e-18

# S/m, innermost first
TABLE1_CONDUCTIVITIES = {"brain": 0.33, "csf": 1.0, "skull": 0.0042, "scalp": 0.33}
_LAYER_NAMES = ["brain", "csf", "skull", "scalp"]

MESH_SCHEMA = {
    "type": "object",
    "required": ["nodes", "tets", "domains"],
    "properties": {
        "nodes": {
            "type": "array",
            "minItems": 4,
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        },
        "tets": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "minItems": 5,
                "maxItems": 5,
                "prefixItems": [{"type": "integer"}] * 4 + [{"type": ["integer", "string"]}],
            },
        },
        "domains": {"type": "object", "additionalProperties": {"type": "number"}, "minProperties": 1},
        "source_domains": {"type": "array", "items": {"type": ["integer", "string"]}},
        "electrodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["triangles"],
                "properties": {
                    "triangles": {
                        "type": "array",
                        "minItems": 1,
                        "items": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3},
                    },
                    "impedance": {"type": "number"},
                },
            },
        },
        "sensors": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["position", "orientation"],
                "properties": {
                    "position": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                    "orientation": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                },
            },
        },
    },
}


class MeshError(ValueError):
    pass


@dataclass
class Electrode:
    triangles: np.ndarray
    impedance: float = 1.0

    def __post_init__(self):
        self.triangles = np.atleast_2d(np.asarray(self.triangles, dtype=np.intp))
        if not self.impedance > 0:
            raise MeshError(f"electrode impedance must be positive, got {self.impedance}")


@dataclass
class HeadMesh:
    """Tetrahedral conductor with electrodes and point magnetometers.

    ``tet_domain`` indexes ``domain_names``/``conductivity``.  Source
    currents live on interior faces of the ``source_domains`` tets.
    """

    nodes: np.ndarray
    tets: np.ndarray
    tet_domain: np.ndarray
    domain_names: list
    conductivity: np.ndarray
    electrodes: list = field(default_factory=list)
    sensor_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sensor_orientations: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    source_domains: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.tets = np.asarray(self.tets, dtype=np.intp)
        self.tet_domain = np.asarray(self.tet_domain, dtype=np.intp)
        self.conductivity = np.asarray(self.conductivity, dtype=float)
        self.sensor_positions = np.asarray(self.sensor_positions, dtype=float).reshape(-1, 3)
        self.sensor_orientations = np.asarray(self.sensor_orientations, dtype=float).reshape(-1, 3)
        self._validate()
        vol = tet_volumes(self.nodes, self.tets)
        neg = vol < 0
        if neg.any():
            self.tets[neg] = self.tets[neg][:, [0, 1, 3, 2]]
        small = np.flatnonzero(np.abs(vol) < MIN_TET_VOLUME)
        if small.size:
            raise MeshError(f"degenerate tetrahedron {small[0]} (volume {abs(vol[small[0]]):.3e} m^3)")

    def _validate(self):
        N = self.nodes.shape[0]
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise MeshError("nodes must be an (N, 3) array")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise MeshError("tets must be a (T, 4) array")
        if self.tets.min() < 0 or self.tets.max() >= N:
            raise MeshError(f"tet references a node outside [0, {N})")
        if self.tet_domain.shape != (self.tets.shape[0],):
            raise MeshError("one domain label per tet required")
        if self.tet_domain.min() < 0 or self.tet_domain.max() >= len(self.domain_names):
            raise MeshError("tet domain label without a conductivity")
        if np.any(~(self.conductivity > 0)):
            raise MeshError("conductivities must be positive")
        if self.sensor_positions.shape != self.sensor_orientations.shape:
            raise MeshError("one orientation per sensor required")
        norms = np.linalg.norm(self.sensor_orientations, axis=1)
        if np.any(norms == 0):
            raise MeshError("sensor orientation must be nonzero")
        self.sensor_orientations = self.sensor_orientations / norms[:, None] if norms.size else self.sensor_orientations
        if self.electrodes:
            bset = {tuple(f) for f in np.sort(boundary_faces(self.tets), axis=1)}
            for i, e in enumerate(self.electrodes):
                if e.triangles.min() < 0 or e.triangles.max() >= N:
                    raise MeshError(f"electrode {i} references a node outside [0, {N})")
                for tri in np.sort(e.triangles, axis=1):
                    if tuple(tri) not in bset:
                        raise MeshError(f"electrode {i} triangle {tuple(tri)} is not a boundary face")
        if self.source_domains is None:
            self.source_domains = ["brain"] if "brain" in self.domain_names else list(self.domain_names)
        for d in self.source_domains:
            if d not in self.domain_names:
                raise MeshError(f"unknown source domain {d!r}")

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_tets(self):
        return self.tets.shape[0]

    @property
    def n_electrodes(self):
        return len(self.electrodes)

    @property
    def n_sensors(self):
        return self.sensor_positions.shape[0]

    def volumes(self):
        return tet_volumes(self.nodes, self.tets)

    def tet_conductivity(self):
        return self.conductivity[self.tet_domain]

    def domain_counts(self):
        return {name: int(np.sum(self.tet_domain == i)) for i, name in enumerate(self.domain_names)}

    def source_tet_mask(self):
        idx = [self.domain_names.index(d) for d in self.source_domains]
        return np.isin(self.tet_domain, idx)


def tet_volumes(nodes, tets):
    p = nodes[tets]
    return np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0])) / 6.0


_LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])  # face i is opposite vertex i


def _all_faces(tets):
    faces = tets[:, _LOCAL_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return faces, uniq, inv.ravel(), counts


def boundary_faces(tets):
    """Faces belonging to exactly one tet, oriented as in that tet."""
    faces, _, inv, counts = _all_faces(np.asarray(tets))
    return faces[counts[inv] == 1]


def interior_faces(tets, mask=None):
    """Faces shared by two tets (both in ``mask`` when given).

    Returns ``(faces, tet_pairs, local_opposite)`` where ``faces`` holds the
    sorted node triples, ``tet_pairs[:, 0/1]`` the two tets (lower index
    first) and ``local_opposite`` the local index of the opposite vertex in
    each.
    """
    tets = np.asarray(tets)
    T = tets.shape[0]
    _, uniq, inv, counts = _all_faces(tets)
    owner = np.repeat(np.arange(T), 4)
    local = np.tile(np.arange(4), T)
    order = np.argsort(inv, kind="stable")
    inv_s = inv[order]
    shared = counts[inv_s] == 2
    idx = order[shared].reshape(-1, 2)
    pairs = owner[idx]
    loc = local[idx]
    fidx = inv[idx[:, 0]]
    if mask is not None:
        keep = mask[pairs[:, 0]] & mask[pairs[:, 1]]
        pairs, loc, fidx = pairs[keep], loc[keep], fidx[keep]
    return uniq[fidx], pairs, loc


# document IO


def load_mesh(document) -> HeadMesh:
    """Validated mesh from a JSON document (dict, JSON string or path)."""
    if isinstance(document, (str, Path)) and not str(document).lstrip().startswith("{"):
        document = json.loads(Path(document).read_text())
    elif isinstance(document, str):
        document = json.loads(document)
    try:
        jsonschema.validate(document, MESH_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise MeshError(f"mesh document invalid at '{path}': {exc.message}") from exc
    names = [str(k) for k in document["domains"]]
    cond = np.array([float(v) for v in document["domains"].values()])
    tets = np.array([t[:4] for t in document["tets"]], dtype=np.intp)
    labels = [str(t[4]) for t in document["tets"]]
    unknown = sorted(set(labels) - set(names))
    if unknown:
        raise MeshError(f"tets reference undefined domains {unknown}")
    dom = np.array([names.index(lab) for lab in labels], dtype=np.intp)
    electrodes = [Electrode(np.array(e["triangles"]), float(e.get("impedance", 1.0)))
                  for e in document.get("electrodes", [])]
    sensors = document.get("sensors", [])
    pos = np.array([s["position"] for s in sensors], dtype=float).reshape(-1, 3)
    ori = np.array([s["orientation"] for s in sensors], dtype=float).reshape(-1, 3)
    src = document.get("source_domains")
    return HeadMesh(
        np.array(document["nodes"], dtype=float), tets, dom, names, cond, electrodes, pos, ori,
        [str(s) for s in src] if src is not None else None, dict(document.get("meta", {})),
    )


def mesh_to_document(mesh: HeadMesh) -> dict:
    return {
        "nodes": mesh.nodes.tolist(),
        "tets": [list(map(int, t)) + [mesh.domain_names[d]] for t, d in zip(mesh.tets, mesh.tet_domain)],
        "domains": {n: float(c) for n, c in zip(mesh.domain_names, mesh.conductivity)},
        "source_domains": list(mesh.source_domains),
        "electrodes": [{"triangles": e.triangles.tolist(), "impedance": e.impedance} for e in mesh.electrodes],
        "sensors": [{"position": p.tolist(), "orientation": o.tolist()}
                    for p, o in zip(mesh.sensor_positions, mesh.sensor_orientations)],
        "meta": mesh.meta,
    }


# layered sphere generator

MAX_RESOLUTION = 10  # 48 n^3 tets


def _shell_counts(radii, n):
    radii = np.asarray(radii, float)
    R = radii[-1]
    counts = [max(1, int(round(n * (radii[j] - radii[j - 1]) / R))) for j in range(1, radii.size)]
    inner = n - sum(counts)
    if inner < 1:
        raise MeshError(f"resolution {n} too coarse for {radii.size} layers")
    return [inner] + counts


def _shell_radii(radii, counts):
    rho = [0.0]
    lo = 0.0
    for r, k in zip(radii, counts):
        rho.extend(lo + (r - lo) * np.arange(1, k + 1) / k)
        lo = r
    return np.array(rho)


def fibonacci_directions(n, z_min=-1.0):
    """Quasi-uniform unit vectors with ``z >= z_min``."""
    i = np.arange(n) + 0.5
    z = 1 - (1 - z_min) * i / n
    phi = i * np.pi * (3 - np.sqrt(5))
    s = np.sqrt(1 - z * z)
    return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])


def make_sphere_mesh(radii, conductivities, resolution=4, *, n_electrodes=16, electrode_angle=None,
                     electrode_zmin=-1.0, impedance=1.0, n_sensors=16, sensor_radius=None,
                     sensor_polar=(np.pi / 3, np.pi / 2), sensor_orientation="radial",
                     layer_names=None) -> HeadMesh:
    """Layered ball meshed by mapping a Kuhn-subdivided cube lattice radially.

    Cube shells ``max(|i|,|j|,|k|) = s`` go to spheres of radius ``rho(s)``
    with layer interfaces on shell levels.  ``48 resolution^3`` tets.
    Electrodes are boundary patches around quasi-uniform directions, and
    magnetometers sit on rings at the given polar angles.
    """
    radii = np.asarray(radii, float)
    conductivities = np.asarray(conductivities, float)
    if radii.ndim != 1 or radii.size == 0 or np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise MeshError("radii must be positive and strictly increasing")
    if conductivities.shape != radii.shape:
        raise MeshError("one conductivity per layer required")
    n = int(resolution)
    if not 1 <= n <= MAX_RESOLUTION:
        raise MeshError(f"resolution must lie in [1, {MAX_RESOLUTION}] (48 n^3 tets)")
    counts = _shell_counts(radii, n)
    rho = _shell_radii(radii, counts)
    layer_of_shell = np.repeat(np.arange(radii.size), counts)  # shell s (1..n) -> layer

    g = np.arange(-n, n + 1)
    I, J, K = np.meshgrid(g, g, g, indexing="ij")
    lat = np.column_stack([I.ravel(), J.ravel(), K.ravel()])
    s = np.abs(lat).max(axis=1)
    nrm = np.linalg.norm(lat, axis=1)
    nodes = np.zeros(lat.shape, dtype=float)
    nz = s > 0
    nodes[nz] = (rho[s[nz]] / nrm[nz])[:, None] * lat[nz]

    m = 2 * n + 1

    def idx(i, j, k):
        return (i * m + j) * m + k

    base = np.arange(2 * n)
    ci, cj, ck = np.meshgrid(base, base, base, indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    tets = []
    for perm in itertools.permutations(range(3)):
        path = [np.zeros(3, int)]
        for ax in perm:
            step = path[-1].copy()
            step[ax] = 1
            path.append(step)
        tets.append(np.column_stack([idx(ci + p[0], cj + p[1], ck + p[2]) for p in path]))
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    shell = s[tets].max(axis=1)
    tet_domain = layer_of_shell[shell - 1]

    names = list(layer_names) if layer_names is not None else (
        _LAYER_NAMES[: radii.size] if radii.size <= 4 else [f"layer{j}" for j in range(radii.size)])

    # electrodes on the outer surface
    bfaces = boundary_faces(tets)
    cen = nodes[bfaces].mean(axis=1)
    cdir = cen / np.linalg.norm(cen, axis=1)[:, None]
    electrodes = []
    if n_electrodes > 0:
        centers = fibonacci_directions(n_electrodes, electrode_zmin)
        cosang = cdir @ centers.T
        nearest = np.argmax(cosang, axis=1)
        if electrode_angle is None:
            # about two boundary triangles across
            electrode_angle = 2.0 * np.sqrt(4 * np.pi / bfaces.shape[0])
        for e in range(n_electrodes):
            sel = np.flatnonzero((nearest == e) & (cosang[:, e] >= np.cos(electrode_angle)))
            if sel.size == 0:
                sel = np.array([np.argmax(cosang[:, e])])
            electrodes.append(Electrode(bfaces[sel], impedance))

    R = radii[-1]
    sr = sensor_radius if sensor_radius is not None else 1.2 * R
    pos, ori = [], []
    for th in np.atleast_1d(sensor_polar):
        phi = 2 * np.pi * np.arange(n_sensors) / max(n_sensors, 1)
        d = np.column_stack([np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi), np.full(phi.size, np.cos(th))])
        pos.append(sr * d)
        ori.append(d if sensor_orientation == "radial" else np.tile([0.0, 0.0, 1.0], (phi.size, 1)))
    pos = np.concatenate(pos) if pos else np.zeros((0, 3))
    ori = np.concatenate(ori) if ori else np.zeros((0, 3))

    meta = {"generator": "sphere", "radii": radii.tolist(), "resolution": n, "shells": counts,
            "n_tets": int(tets.shape[0])}
    return HeadMesh(nodes, tets, tet_domain, names, conductivities, electrodes, pos, ori, [names[0]], meta)
