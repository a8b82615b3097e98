"""Triangle meshes: OBJ IO, watertightness, and parity voxelization.

Voxelization classifies voxel centers by +x ray parity. Rays are offset
from the voxel-center line by a small deterministic fraction of a voxel,
anisotropically (the y:z offset ratio is irrational), so they cannot run
along mesh vertices or the lattice-aligned and diagonal edges that
marching-cubes output is full of; any ray that still grazes a triangle
border (or yields an odd crossing count) is recast with an escalated
offset, keeping the result deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import MeshError
from ..volcore import LabelMap, binary_labelmap

# voxel-fraction ray offsets; irrational y:z ratio, escalated x3 per retry
_RAY_EPS_Y = 2.0 ** -10
_RAY_EPS_Z = 2.0 ** -10 * 0.6180339887498949
_BARY_TOL = 1e-9


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh in mm. Zero-area triangles are dropped at construction."""

    vertices: np.ndarray  # (n, 3) float64
    triangles: np.ndarray  # (m, 3) int32
    region: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError(f"triangle index out of range (0..{len(v) - 1})")
        if t.size:
            p = v[t]
            area2 = np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
            t = t[area2 > 0.0]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0


def mesh_area(mesh: TriMesh) -> float:
    if mesh.is_empty:
        return 0.0
    p = mesh.vertices[mesh.triangles]
    return float(np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum() / 2)


def mesh_volume(mesh: TriMesh) -> float:
    """Enclosed volume by the divergence theorem (orientation-independent)."""
    if mesh.is_empty:
        return 0.0
    p = mesh.vertices[mesh.triangles]
    det = np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2]))
    return abs(float(det.sum())) / 6.0


def is_watertight(mesh: TriMesh) -> bool:
    """True iff every undirected edge is shared by exactly two triangles."""
    if mesh.is_empty:
        return False
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool((counts == 2).all())


def obj_text(mesh: TriMesh) -> str:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    return "\n".join(lines) + ("\n" if lines else "")


def save_obj(mesh: TriMesh, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(obj_text(mesh))


def load_obj(path, region: int = 0) -> TriMesh:
    """Read vertex/face records; other record types are ignored. Polygons
    with more than 3 vertices are fan-triangulated."""
    verts: list = []
    tris: list = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"{path}:{ln}: malformed vertex record")
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            try:
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            except ValueError as e:
                raise MeshError(f"{path}:{ln}: malformed face record") from e
            if len(idx) < 3:
                raise MeshError(f"{path}:{ln}: face needs at least 3 vertices")
            for i in range(1, len(idx) - 1):
                tris.append([idx[0], idx[i], idx[i + 1]])
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32), region)
    return TriMesh(np.array(verts), np.array(tris, dtype=np.int32), region)


# ---------------------------------------------------------------------------
# Parity voxelization


def _ray_crossings(v0, v1, v2, ry: float, rz: float):
    """Crossing x-positions of a +x ray at (ry, rz) with all triangles.

    Returns (xs, degenerate): degenerate is True when the ray grazes a
    triangle border within the barycentric tolerance.
    """
    d = (v1[:, 1] - v0[:, 1]) * (v2[:, 2] - v0[:, 2]) \
        - (v1[:, 2] - v0[:, 2]) * (v2[:, 1] - v0[:, 1])
    live = d != 0.0  # edge-on triangles never cross transversally
    if not live.any():
        return np.empty(0), False
    a, b, c = v0[live], v1[live], v2[live]
    dd = d[live]
    w0 = (b[:, 1] - ry) * (c[:, 2] - rz) - (b[:, 2] - rz) * (c[:, 1] - ry)
    w1 = (c[:, 1] - ry) * (a[:, 2] - rz) - (c[:, 2] - rz) * (a[:, 1] - ry)
    w2 = (a[:, 1] - ry) * (b[:, 2] - rz) - (a[:, 2] - rz) * (b[:, 1] - ry)
    l0, l1, l2 = w0 / dd, w1 / dd, w2 / dd
    inside = (l0 > _BARY_TOL) & (l1 > _BARY_TOL) & (l2 > _BARY_TOL)
    near = ((l0 > -_BARY_TOL) & (l1 > -_BARY_TOL) & (l2 > -_BARY_TOL)) & ~inside
    xs = l0[inside] * a[inside, 0] + l1[inside] * b[inside, 0] + l2[inside] * c[inside, 0]
    return xs, bool(near.any())


def voxelize(mesh: TriMesh, geom) -> LabelMap:
    """Binary mask of voxel centers inside a watertight mesh, on ``geom``'s
    grid (anything with dims/spacing/origin)."""
    nx, ny, nz = geom.dims
    out = np.zeros((nx, ny, nz), dtype=bool)
    if mesh.is_empty:
        return binary_labelmap(geom, out)
    if not is_watertight(mesh):
        raise MeshError("voxelize requires a watertight mesh "
                        "(every edge shared by exactly two triangles)")

    sx, sy, sz = geom.spacing
    ox, oy, oz = geom.origin
    tri = mesh.vertices[mesh.triangles]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]

    # main pass: per triangle, test the rays inside its (y, z) bounding box
    d = (v1[:, 1] - v0[:, 1]) * (v2[:, 2] - v0[:, 2]) \
        - (v1[:, 2] - v0[:, 2]) * (v2[:, 1] - v0[:, 1])
    rows_acc: list = []
    xs_acc: list = []
    bad_rows: set = set()
    for t in range(len(tri)):
        if d[t] == 0.0:
            continue
        a, b, c = v0[t], v1[t], v2[t]
        ylo, yhi = min(a[1], b[1], c[1]), max(a[1], b[1], c[1])
        zlo, zhi = min(a[2], b[2], c[2]), max(a[2], b[2], c[2])
        iy0 = max(0, int(np.ceil((ylo - oy) / sy - _RAY_EPS_Y)))
        iy1 = min(ny - 1, int(np.floor((yhi - oy) / sy - _RAY_EPS_Y)))
        iz0 = max(0, int(np.ceil((zlo - oz) / sz - _RAY_EPS_Z)))
        iz1 = min(nz - 1, int(np.floor((zhi - oz) / sz - _RAY_EPS_Z)))
        if iy0 > iy1 or iz0 > iz1:
            continue
        iys = np.arange(iy0, iy1 + 1)
        izs = np.arange(iz0, iz1 + 1)
        ry = (oy + (iys + _RAY_EPS_Y) * sy)[:, None]
        rz = (oz + (izs + _RAY_EPS_Z) * sz)[None, :]
        w0 = (b[1] - ry) * (c[2] - rz) - (b[2] - rz) * (c[1] - ry)
        w1 = (c[1] - ry) * (a[2] - rz) - (c[2] - rz) * (a[1] - ry)
        w2 = (a[1] - ry) * (b[2] - rz) - (a[2] - rz) * (b[1] - ry)
        l0, l1, l2 = w0 / d[t], w1 / d[t], w2 / d[t]
        inside = (l0 > _BARY_TOL) & (l1 > _BARY_TOL) & (l2 > _BARY_TOL)
        near = ((l0 > -_BARY_TOL) & (l1 > -_BARY_TOL) & (l2 > -_BARY_TOL)) & ~inside
        row_grid = iys[:, None] * nz + izs[None, :]
        if near.any():
            bad_rows.update(int(r) for r in row_grid[near])
        if inside.any():
            xs = l0[inside] * a[0] + l1[inside] * b[0] + l2[inside] * c[0]
            rows_acc.append(row_grid[inside].ravel())
            xs_acc.append(xs.ravel())

    crossings: dict[int, np.ndarray] = {}
    if rows_acc:
        rows = np.concatenate(rows_acc)
        xs = np.concatenate(xs_acc)
        order = np.lexsort((xs, rows))
        rows, xs = rows[order], xs[order]
        starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
        bounds = np.r_[starts, len(rows)]
        for i, s in enumerate(starts):
            crossings[int(rows[s])] = xs[s:bounds[i + 1]]

    for row in sorted(set(crossings) | bad_rows):
        xs = crossings.get(row, np.empty(0))
        iy, iz = divmod(row, nz)
        eps_y, eps_z = _RAY_EPS_Y, _RAY_EPS_Z
        tries = 0
        while row in bad_rows or len(xs) % 2 == 1:
            tries += 1
            if tries > 4:
                raise MeshError(
                    f"parity failure on ray (iy={iy}, iz={iz}); mesh may be "
                    "self-intersecting or degenerate")
            eps_y, eps_z = eps_y * 3.0, eps_z * 3.0
            xs, bad = _ray_crossings(v0, v1, v2, oy + (iy + eps_y) * sy,
                                     oz + (iz + eps_z) * sz)
            xs = np.sort(xs)
            if not bad and len(xs) % 2 == 0:
                bad_rows.discard(row)
        for k in range(0, len(xs), 2):
            ix0 = max(0, int(np.floor((xs[k] - ox) / sx)) + 1)
            ix1 = min(nx - 1, int(np.ceil((xs[k + 1] - ox) / sx)) - 1)
            if ix0 <= ix1:
                out[ix0:ix1 + 1, iy, iz] = True
    return binary_labelmap(geom, out)


def point_in_mesh(mesh: TriMesh, points_mm, jitter_scale: float = 1e-7) -> np.ndarray:
    """+x ray parity test for arbitrary points (used to audit voxelize)."""
    pts = np.asarray(points_mm, dtype=float).reshape(-1, 3)
    if mesh.is_empty:
        return np.zeros(len(pts), dtype=bool)
    tri = mesh.vertices[mesh.triangles]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    extent = float(np.ptp(mesh.vertices, axis=0).max()) or 1.0
    out = np.zeros(len(pts), dtype=bool)
    for i, (px, py, pz) in enumerate(pts):
        delta = 0.0
        for _ in range(5):
            xs, bad = _ray_crossings(v0, v1, v2, py + delta,
                                     pz + delta * 0.6180339887498949)
            if not bad:
                out[i] = (xs > px).sum() % 2 == 1
                break
            delta = (delta or jitter_scale * extent) * 3.0
        else:
            raise MeshError(f"parity failure for point {(px, py, pz)}")
    return out
