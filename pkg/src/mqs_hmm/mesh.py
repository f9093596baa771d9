"""Structured triangular meshes for the soft-magnetic-composite benchmark.

Three meshes are produced from one :class:`SmcGeometry`:

* the macro mesh, where the composite block is a single homogenized region;
* the periodic unit cell, one grain centred in one pitch of insulation;
* the fullscale reference mesh, with every grain resolved.

All meshes are tensor-product grids split into counter-clockwise triangles so
that grain, inductor and symmetry lines always coincide with element edges.
"""

from __future__ import annotations

import dataclasses
import math
import re
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .errors import GeometryError, MqsError, ProbeError

# region codes; grain k is GRAIN_BASE + k
AIR = 0
INSULATION = 1
INDUCTOR_POS = 2
INDUCTOR_NEG = 3
SMC = 4
GRAIN_BASE = 100

_REGION_NAMES = {
    AIR: "AIR",
    INSULATION: "INSULATION",
    INDUCTOR_POS: "INDUCTOR_POS",
    INDUCTOR_NEG: "INDUCTOR_NEG",
    SMC: "SMC",
}

GAMMA_INF = 1
GAMMA_H = 2
GAMMA_V = 3
CELL_LEFT = 4
CELL_RIGHT = 5
CELL_BOTTOM = 6
CELL_TOP = 7

_BOUNDARY_NAMES = {
    GAMMA_INF: "GAMMA_INF",
    GAMMA_H: "GAMMA_H",
    GAMMA_V: "GAMMA_V",
    CELL_LEFT: "CELL_LEFT",
    CELL_RIGHT: "CELL_RIGHT",
    CELL_BOTTOM: "CELL_BOTTOM",
    CELL_TOP: "CELL_TOP",
}

_GRAIN_RE = re.compile(r"GRAIN\((\d+)\)$")


def grain(k: int) -> int:
    return GRAIN_BASE + k


def is_grain(code: int | npt.NDArray[np.int64]) -> bool | npt.NDArray[np.bool_]:
    return np.asarray(code) >= GRAIN_BASE


def region_name(code: int) -> str:
    if code >= GRAIN_BASE:
        return f"GRAIN({code - GRAIN_BASE})"
    return _REGION_NAMES[code]


def parse_region(name: str) -> int:
    m = _GRAIN_RE.match(name)
    if m:
        return grain(int(m.group(1)))
    for code, n in _REGION_NAMES.items():
        if n == name:
            return code
    raise MqsError(f"unknown region tag {name!r}")


def boundary_name(code: int) -> str:
    return _BOUNDARY_NAMES[code]


def parse_boundary(name: str) -> int:
    for code, n in _BOUNDARY_NAMES.items():
        if n == name:
            return code
    raise MqsError(f"unknown boundary tag {name!r}")


@dataclasses.dataclass(frozen=True)
class SmcGeometry:
    """Dimensions of the composite benchmark, in metres.

    ``e_a`` is read as the diagonal of an axis-aligned square grain, so the grain
    side is ``e_a / sqrt(2)``. ``e_air`` is the air margin between the inductor or
    composite and the outer boundary.
    """

    L: float = 800e-6
    n_grains_side: int = 8
    e_a: float = 75e-6 * math.sqrt(2.0)
    e_i: float = 100e-6
    e_gap: float = 100e-6
    e_air: float = 200e-6
    grain_shape: str = "square"
    quarter_symmetry: bool = True

    def __post_init__(self) -> None:
        for name in ("L", "e_a", "e_i", "e_gap", "e_air"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise GeometryError(f"{name} must be a positive length, got {v!r}")
        if self.n_grains_side < 1:
            raise GeometryError("n_grains_side must be >= 1")
        if self.grain_shape != "square":
            raise GeometryError(f"unsupported grain shape {self.grain_shape!r}")
        if not self.pitch > self.grain_side:
            raise GeometryError(
                f"grain side {self.grain_side:.6g} m does not fit in pitch {self.pitch:.6g} m"
            )
        if self.quarter_symmetry and self.n_grains_side % 2:
            raise GeometryError("quarter symmetry needs an even number of grains per side")

    @property
    def pitch(self) -> float:
        return self.L / self.n_grains_side

    @property
    def grain_side(self) -> float:
        return self.e_a / math.sqrt(2.0)

    @property
    def fill_factor(self) -> float:
        return (self.grain_side / self.pitch) ** 2

    @property
    def extent(self) -> tuple[float, float]:
        """Half widths (X, Y) of the full domain; the quarter is [0, X] x [0, Y]."""
        half = self.L / 2
        return half + self.e_air, half + self.e_gap + self.e_i + self.e_air


@dataclasses.dataclass(eq=False)
class TriMesh:
    nodes: npt.NDArray[np.float64]
    triangles: npt.NDArray[np.int64]
    region: npt.NDArray[np.int64]
    bedges: npt.NDArray[np.int64]
    btag: npt.NDArray[np.int64]
    periodic: npt.NDArray[np.int64] = dataclasses.field(
        default_factory=lambda: np.zeros((0, 2), dtype=np.int64)
    )
    period: float | None = None

    def __post_init__(self) -> None:
        self.nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.region = np.ascontiguousarray(self.region, dtype=np.int64)
        self.bedges = np.asarray(self.bedges, dtype=np.int64).reshape(-1, 2)
        self.btag = np.asarray(self.btag, dtype=np.int64)
        self.periodic = np.asarray(self.periodic, dtype=np.int64).reshape(-1, 2)
        for arr in (self.nodes, self.triangles, self.region, self.bedges, self.btag, self.periodic):
            arr.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> npt.NDArray[np.float64]:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> npt.NDArray[np.float64]:
        return self.nodes[self.triangles].mean(axis=1)

    def grain_ids(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.region) if c >= GRAIN_BASE)

    def region_area(self, codes) -> float:
        mask = np.isin(self.region, np.atleast_1d(codes))
        return float(self.signed_areas()[mask].sum())

    def boundary_nodes(self, tag: int) -> npt.NDArray[np.int64]:
        return np.unique(self.bedges[self.btag == tag])

    def find_triangle(self, point) -> int:
        """Index of a triangle containing ``point`` (ties go to the lowest index)."""
        x = np.asarray(point, dtype=float)
        p = self.nodes[self.triangles]
        v0 = p[:, 1] - p[:, 0]
        v1 = p[:, 2] - p[:, 0]
        w = x - p[:, 0]
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        l1 = (w[:, 0] * v1[:, 1] - w[:, 1] * v1[:, 0]) / det
        l2 = (v0[:, 0] * w[:, 1] - v0[:, 1] * w[:, 0]) / det
        tol = 1e-9
        inside = (l1 >= -tol) & (l2 >= -tol) & (l1 + l2 <= 1 + tol)
        hits = np.flatnonzero(inside)
        if len(hits) == 0:
            raise ProbeError(f"point {tuple(x)} is outside the mesh")
        return int(hits[0])


def _axis(segments: list[tuple[float, int]], start: float = 0.0) -> npt.NDArray[np.float64]:
    """Concatenate uniformly split segments ``(length, count)`` into grid coordinates."""
    coords = [start]
    x = start
    for length, n in segments:
        step = length / n
        for i in range(1, n + 1):
            coords.append(x + i * step)
        x = x + length
        coords[-1] = x
    return np.asarray(coords)


def _count(length: float, h: float) -> int:
    return max(1, int(math.ceil(length / h - 1e-9)))


def _tensor_mesh(xs, ys):
    """Nodes and CCW triangles of the grid spanned by ``xs`` x ``ys``."""
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(nx * ny).reshape(ny, nx)
    n00 = idx[:-1, :-1].ravel()
    n10 = idx[:-1, 1:].ravel()
    n11 = idx[1:, 1:].ravel()
    n01 = idx[1:, :-1].ravel()
    tris = np.empty((2 * len(n00), 3), dtype=np.int64)
    tris[0::2] = np.column_stack([n00, n10, n11])
    tris[1::2] = np.column_stack([n00, n11, n01])
    # boundary edges: bottom, right, top, left (each CCW along the boundary)
    b = idx[0]
    r = idx[:, -1]
    t = idx[-1][::-1]
    l = idx[:, 0][::-1]
    edges = []
    for chain in (b, r, t, l):
        edges.append(np.column_stack([chain[:-1], chain[1:]]))
    return nodes, tris, np.vstack(edges), idx


def _in_box(c, x0, x1, y0, y1, tol=1e-15):
    return (c[:, 0] > x0 - tol) & (c[:, 0] < x1 + tol) & (c[:, 1] > y0 - tol) & (c[:, 1] < y1 + tol)


def _tag_outer_edges(nodes, bedges, x0, x1, y0, y1, quarter: bool):
    mid = nodes[bedges].mean(axis=1)
    scale = max(x1 - x0, y1 - y0)
    tol = 1e-9 * scale
    tag = np.full(len(bedges), GAMMA_INF, dtype=np.int64)
    if quarter:
        tag[np.abs(mid[:, 1] - y0) < tol] = GAMMA_H
        tag[np.abs(mid[:, 0] - x0) < tol] = GAMMA_V
    return tag


def rectangle_mesh(width: float, height: float, nx: int, ny: int, origin=(0.0, 0.0),
                   region: int = AIR) -> TriMesh:
    """Plain ``nx`` x ``ny`` rectangle split into ``2 nx ny`` triangles; boundary tagged GAMMA_INF."""
    if nx < 1 or ny < 1:
        raise GeometryError("rectangle_mesh needs at least one division per side")
    xs = _axis([(width, nx)], origin[0])
    ys = _axis([(height, ny)], origin[1])
    nodes, tris, bedges, _ = _tensor_mesh(xs, ys)
    return TriMesh(nodes, tris, np.full(len(tris), region), bedges,
                   np.full(len(bedges), GAMMA_INF))


def _outer_axes(geom: SmcGeometry, smc, h: float):
    """Extend a composite-block axis (ending at L/2) with gap, inductor and air strips.

    For the full domain the block axis must span [-L/2, L/2] and the strips are
    mirrored on the negative side.
    """
    X, Y = geom.extent
    half = geom.L / 2
    ax = _axis([(X - half, _count(X - half, h))], half)[1:]
    ay = _axis([(geom.e_gap, _count(geom.e_gap, h)),
                (geom.e_i, _count(geom.e_i, h)),
                (geom.e_air, _count(geom.e_air, h))], half)[1:]
    smc = np.asarray(smc)
    xs = np.concatenate([smc, ax])
    ys = np.concatenate([smc, ay])
    if not geom.quarter_symmetry:
        xs = np.concatenate([-ax[::-1], xs])
        ys = np.concatenate([-ay[::-1], ys])
    return xs, ys


def _tag_sources(geom: SmcGeometry, cen, region):
    half = geom.L / 2
    y0 = half + geom.e_gap
    y1 = y0 + geom.e_i
    region[_in_box(cen, -half, half, y0, y1)] = INDUCTOR_POS
    region[_in_box(cen, -half, half, -y1, -y0)] = INDUCTOR_NEG


def _finish(geom: SmcGeometry, nodes, tris, bedges, region) -> TriMesh:
    X, Y = geom.extent
    x0 = 0.0 if geom.quarter_symmetry else -X
    y0 = 0.0 if geom.quarter_symmetry else -Y
    btag = _tag_outer_edges(nodes, bedges, x0, X, y0, Y, geom.quarter_symmetry)
    return TriMesh(nodes, tris, region, bedges, btag)


def build_macro_mesh(geom: SmcGeometry, n_divisions: int) -> TriMesh:
    """Coarse mesh with the composite block as one ``SMC`` region.

    ``n_divisions`` is the number of element layers across the (quarter) block;
    the same element size is used for the gap, inductor and air strips.
    """
    if n_divisions < 1:
        raise GeometryError("n_divisions must be >= 1")
    half = geom.L / 2
    h = half / n_divisions
    if geom.quarter_symmetry:
        smc = _axis([(half, n_divisions)])
    else:
        smc = _axis([(geom.L, 2 * n_divisions)], -half)
    xs, ys = _outer_axes(geom, smc, h)
    nodes, tris, bedges, _ = _tensor_mesh(xs, ys)
    cen = nodes[tris].mean(axis=1)
    region = np.full(len(tris), AIR, dtype=np.int64)
    region[_in_box(cen, -half, half, -half, half)] = SMC
    _tag_sources(geom, cen, region)
    return _finish(geom, nodes, tris, bedges, region)


def _pitch_segments(geom: SmcGeometry, n_refine: int) -> list[tuple[float, int]]:
    w = (geom.pitch - geom.grain_side) / 2
    g = geom.grain_side
    h = min(w, g) / n_refine
    return [(w, _count(w, h)), (g, _count(g, h)), (w, _count(w, h))]


def build_cell_mesh(geom: SmcGeometry, n_refine: int) -> TriMesh:
    """Periodic unit cell centred at the origin with grain ``GRAIN(0)`` in the middle."""
    if n_refine < 1:
        raise GeometryError("n_refine must be >= 1")
    p = geom.pitch
    segs = _pitch_segments(geom, n_refine)
    ax = _axis(segs, -p / 2)
    nodes, tris, bedges, idx = _tensor_mesh(ax, ax)
    cen = nodes[tris].mean(axis=1)
    half_g = geom.grain_side / 2
    region = np.full(len(tris), INSULATION, dtype=np.int64)
    region[_in_box(cen, -half_g, half_g, -half_g, half_g)] = grain(0)
    return _periodic_cell(nodes, tris, region, bedges, idx, p)


def _periodic_cell(nodes, tris, region, bedges, idx, p: float) -> TriMesh:
    mid = nodes[bedges].mean(axis=1)
    tol = 1e-9 * p
    btag = np.empty(len(bedges), dtype=np.int64)
    btag[np.abs(mid[:, 1] + p / 2) < tol] = CELL_BOTTOM
    btag[np.abs(mid[:, 0] - p / 2) < tol] = CELL_RIGHT
    btag[np.abs(mid[:, 1] - p / 2) < tol] = CELL_TOP
    btag[np.abs(mid[:, 0] + p / 2) < tol] = CELL_LEFT
    ny, nx = idx.shape[0] - 1, idx.shape[1] - 1
    jj, ii = np.meshgrid(np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
    slave = (ii == nx) | (jj == ny)
    master = idx[jj % ny, ii % nx]
    pairs = np.column_stack([idx[slave], master[slave]])
    return TriMesh(nodes, tris, region, bedges, btag, pairs, period=p)


def build_laminate_cell_mesh(pitch: float, fraction: float, n_layer: int = 4) -> TriMesh:
    """Periodic cell with one horizontal conducting layer ``GRAIN(0)`` of the given volume fraction.

    The layer spans the full cell width and is centred on y = 0; the rest of
    the cell is ``INSULATION``.
    """
    if not 0 < fraction < 1:
        raise GeometryError("layer fraction must lie in (0, 1)")
    if n_layer < 1:
        raise GeometryError("n_layer must be >= 1")
    t = fraction * pitch
    w = (pitch - t) / 2
    h = min(t, w) / n_layer
    ys = _axis([(w, _count(w, h)), (t, _count(t, h)), (w, _count(w, h))], -pitch / 2)
    xs = _axis([(pitch, _count(pitch, h))], -pitch / 2)
    nodes, tris, bedges, idx = _tensor_mesh(xs, ys)
    cen = nodes[tris].mean(axis=1)
    region = np.full(len(tris), INSULATION, dtype=np.int64)
    region[np.abs(cen[:, 1]) < t / 2] = grain(0)
    return _periodic_cell(nodes, tris, region, bedges, idx, pitch)


def build_reference_mesh(geom: SmcGeometry, n_refine: int) -> TriMesh:
    """Fullscale mesh with every grain meshed and tagged ``GRAIN(k)``.

    Grains are numbered row by row starting from the lower-left grain of the
    meshed domain.
    """
    if n_refine < 1:
        raise GeometryError("n_refine must be >= 1")
    half = geom.L / 2
    n_side = geom.n_grains_side // 2 if geom.quarter_symmetry else geom.n_grains_side
    start = 0.0 if geom.quarter_symmetry else -half
    segs = _pitch_segments(geom, n_refine) * n_side
    smc = _axis(segs, start)
    h_out = geom.pitch / (2 * n_refine)
    xs, ys = _outer_axes(geom, smc, h_out)
    nodes, tris, bedges, _ = _tensor_mesh(xs, ys)
    cen = nodes[tris].mean(axis=1)
    region = np.full(len(tris), AIR, dtype=np.int64)
    inside = _in_box(cen, -half, half, -half, half)
    region[inside] = INSULATION
    p = geom.pitch
    w = (p - geom.grain_side) / 2
    rel = (cen - start) / p
    ix = np.floor(rel[:, 0]).astype(np.int64)
    iy = np.floor(rel[:, 1]).astype(np.int64)
    lx = cen[:, 0] - start - ix * p
    ly = cen[:, 1] - start - iy * p
    in_grain = inside & (lx > w) & (lx < p - w) & (ly > w) & (ly < p - w)
    region[in_grain] = grain(iy[in_grain] * n_side + ix[in_grain])
    _tag_sources(geom, cen, region)
    return _finish(geom, nodes, tris, bedges, region)


def grain_centers(geom: SmcGeometry) -> npt.NDArray[np.float64]:
    """Centres of the meshed grains in the numbering used by :func:`build_reference_mesh`."""
    half = geom.L / 2
    n_side = geom.n_grains_side // 2 if geom.quarter_symmetry else geom.n_grains_side
    start = 0.0 if geom.quarter_symmetry else -half
    c = start + (np.arange(n_side) + 0.5) * geom.pitch
    X, Y = np.meshgrid(c, c, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


# ---------------------------------------------------------------------------
# validation


def interior_edge_counts(mesh: TriMesh) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for t in mesh.triangles:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return counts


def validate_mesh(mesh: TriMesh) -> None:
    """Raise :class:`GeometryError` unless the mesh satisfies the structural invariants."""
    if np.any(mesh.signed_areas() <= 0):
        raise GeometryError("mesh has inverted or zero-area triangles")
    counts = interior_edge_counts(mesh)
    if any(c > 2 for c in counts.values()):
        raise GeometryError("an edge is shared by more than two triangles")
    boundary = {k for k, c in counts.items() if c == 1}
    tagged = {(min(a, b), max(a, b)) for a, b in mesh.bedges}
    if boundary != tagged:
        raise GeometryError("boundary edge tags do not match the mesh boundary")
    for g in mesh.grain_ids():
        if not _edge_connected(mesh, np.flatnonzero(mesh.region == g)):
            raise GeometryError(f"{region_name(g)} is not edge-connected")


def _edge_connected(mesh: TriMesh, tri_ids) -> bool:
    tri_ids = list(tri_ids)
    if not tri_ids:
        return True
    owner: dict[tuple[int, int], list[int]] = {}
    for t in tri_ids:
        a, b, c = mesh.triangles[t]
        for e in ((a, b), (b, c), (c, a)):
            owner.setdefault((min(e), max(e)), []).append(t)
    seen = {tri_ids[0]}
    stack = [tri_ids[0]]
    while stack:
        t = stack.pop()
        a, b, c = mesh.triangles[t]
        for e in ((a, b), (b, c), (c, a)):
            for u in owner[(min(e), max(e))]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
    return len(seen) == len(tri_ids)


# ---------------------------------------------------------------------------
# ASCII format


def write_mesh(mesh: TriMesh, path: str | Path) -> None:
    lines = ["tri-mesh v1", f"nodes {mesh.n_nodes}"]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.nodes.tolist())]
    lines.append(f"elements {mesh.n_triangles}")
    lines += [
        f"{i} {a} {b} {c} {region_name(r)}"
        for i, ((a, b, c), r) in enumerate(zip(mesh.triangles.tolist(), mesh.region.tolist()))
    ]
    lines.append(f"bedges {len(mesh.bedges)}")
    lines += [
        f"{i} {a} {b} {boundary_name(t)}"
        for i, ((a, b), t) in enumerate(zip(mesh.bedges.tolist(), mesh.btag.tolist()))
    ]
    if len(mesh.periodic):
        lines.append(f"periodic {len(mesh.periodic)}")
        if mesh.period is not None:
            lines.append(f"# period {mesh.period!r}")
        lines += [f"{s} {m}" for s, m in mesh.periodic.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path: str | Path) -> TriMesh:
    period = None
    rows: list[list[str]] = []
    for raw in Path(path).read_text().splitlines():
        if raw.startswith("# period"):
            period = float(raw.split()[2])
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    if not rows or rows[0] != ["tri-mesh", "v1"]:
        raise MqsError(f"{path}: missing 'tri-mesh v1' header")
    pos = 1
    sections: dict[str, list[list[str]]] = {}
    while pos < len(rows):
        name, count = rows[pos][0], int(rows[pos][1])
        sections[name] = rows[pos + 1: pos + 1 + count]
        pos += 1 + count
    nodes = np.array([[float(r[1]), float(r[2])] for r in sections["nodes"]])
    el = sections["elements"]
    tris = np.array([[int(r[1]), int(r[2]), int(r[3])] for r in el], dtype=np.int64)
    region = np.array([parse_region(r[4]) for r in el], dtype=np.int64)
    be = sections.get("bedges", [])
    bedges = np.array([[int(r[1]), int(r[2])] for r in be], dtype=np.int64).reshape(-1, 2)
    btag = np.array([parse_boundary(r[3]) for r in be], dtype=np.int64)
    per = sections.get("periodic", [])
    periodic = np.array([[int(r[0]), int(r[1])] for r in per], dtype=np.int64).reshape(-1, 2)
    return TriMesh(nodes, tris, region, bedges, btag, periodic, period=period)
