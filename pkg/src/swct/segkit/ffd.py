"""Cage-based free-form deformation with per-cell trilinear interpolation.

A cage is an axis-aligned lattice of control points; mesh vertices are
bound once to their containing cell with 8 trilinear weights, then follow
any later displacement of the control points. Interpolation is local
(per cell) so edits behave like interactive vertex dragging: moving one
control point only affects the surrounding cells, and vertices on a
shared cell face get identical results from either side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CageError
from .mesh import TriMesh

# corner order within a cell: x-fastest, matching the node order of files
_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
                     [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]])


@dataclass(frozen=True)
class Cage:
    """Lattice of control points: rest and displaced positions in mm,
    node order row-major x-fastest."""

    dims: tuple[int, int, int]
    rest: np.ndarray       # (n, 3)
    displaced: np.ndarray  # (n, 3)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if any(d < 2 for d in dims):
            raise CageError(f"cage dims must all be >= 2, got {dims}")
        n = dims[0] * dims[1] * dims[2]
        rest = np.asarray(self.rest, dtype=float)
        disp = np.asarray(self.displaced, dtype=float)
        if rest.shape != (n, 3) or disp.shape != (n, 3):
            raise CageError(f"cage with dims {dims} needs {n} rest and displaced nodes")
        object.__setattr__(self, "rest", rest)
        object.__setattr__(self, "displaced", disp)
        object.__setattr__(self, "axes", self._extract_axes())

    def _extract_axes(self):
        cx, cy, cz = self.dims
        grid = self.rest.reshape(cz, cy, cx, 3)  # node index x-fastest
        ax = grid[0, 0, :, 0]
        ay = grid[0, :, 0, 1]
        az = grid[:, 0, 0, 2]
        for name, a in (("x", ax), ("y", ay), ("z", az)):
            if not np.all(np.diff(a) > 0):
                raise CageError(f"cage {name} coordinates must be strictly increasing")
        expected = np.stack(np.meshgrid(ax, ay, az, indexing="ij"), -1)
        expected = expected.transpose(2, 1, 0, 3)  # back to z-major storage
        if not np.allclose(grid, expected, atol=1e-9):
            raise CageError("cage rest lattice is not axis-aligned")
        return ax, ay, az

    def node_index(self, i: int, j: int, k: int) -> int:
        cx, cy, _ = self.dims
        return i + cx * (j + cy * k)

    def with_displaced(self, displaced) -> "Cage":
        return Cage(self.dims, self.rest, np.asarray(displaced, dtype=float))

    @classmethod
    def regular(cls, lo, hi, dims) -> "Cage":
        """Axis-aligned regular lattice spanning [lo, hi]; displaced = rest."""
        axes = [np.linspace(lo[i], hi[i], dims[i]) for i in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).transpose(2, 1, 0, 3)
        nodes = grid.reshape(-1, 3)
        return cls(tuple(dims), nodes, nodes.copy())

    def to_dict(self) -> dict:
        return {"dims": list(self.dims),
                "rest": self.rest.tolist(),
                "displaced": self.displaced.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Cage":
        try:
            return cls(tuple(d["dims"]), np.array(d["rest"], dtype=float),
                       np.array(d["displaced"], dtype=float))
        except KeyError as e:
            raise CageError(f"cage file missing key {e}") from e


def load_cage(path) -> Cage:
    return Cage.from_dict(json.loads(Path(path).read_text()))


def save_cage(cage: Cage, path):
    Path(path).write_text(json.dumps(cage.to_dict()) + "\n")


@dataclass(frozen=True)
class CageBinding:
    """Per-vertex cell assignment and trilinear weights against a rest lattice."""

    cage_dims: tuple[int, int, int]
    nodes: np.ndarray    # (n, 8) control-point indices per vertex
    weights: np.ndarray  # (n, 8) trilinear weights, >= 0, summing to 1
    triangles: np.ndarray
    region: int


def cage_bind(mesh: TriMesh, cage: Cage) -> CageBinding:
    """Bind every mesh vertex to its containing cage cell.

    Raises ``CageError`` if any vertex lies outside the rest lattice
    bounding box (beyond a 1e-9 tolerance).
    """
    ax, ay, az = cage.axes
    verts = mesh.vertices
    fracs = np.empty((len(verts), 3))
    cells = np.empty((len(verts), 3), dtype=int)
    for axis, a in enumerate((ax, ay, az)):
        x = verts[:, axis]
        tol = 1e-9 * max(1.0, abs(a[0]), abs(a[-1]))
        if ((x < a[0] - tol) | (x > a[-1] + tol)).any():
            bad = int(np.argmax((x < a[0] - tol) | (x > a[-1] + tol)))
            raise CageError(
                f"vertex {bad} at {tuple(verts[bad])} outside cage axis {axis} "
                f"range [{a[0]}, {a[-1]}]")
        cell = np.clip(np.searchsorted(a, x, side="right") - 1, 0, len(a) - 2)
        u = (x - a[cell]) / (a[cell + 1] - a[cell])
        cells[:, axis] = cell
        fracs[:, axis] = np.clip(u, 0.0, 1.0)

    u, v, w = fracs[:, 0], fracs[:, 1], fracs[:, 2]
    fu = np.stack([1 - u, u], axis=1)
    fv = np.stack([1 - v, v], axis=1)
    fw = np.stack([1 - w, w], axis=1)
    weights = np.empty((len(verts), 8))
    nodes = np.empty((len(verts), 8), dtype=int)
    cx, cy, _ = cage.dims
    for c, (di, dj, dk) in enumerate(_CORNERS):
        weights[:, c] = fu[:, di] * fv[:, dj] * fw[:, dk]
        nodes[:, c] = (cells[:, 0] + di) + cx * ((cells[:, 1] + dj) + cy * (cells[:, 2] + dk))
    return CageBinding(cage.dims, nodes, weights, mesh.triangles, mesh.region)


def cage_deform(binding: CageBinding, cage: Cage) -> TriMesh:
    """Evaluate the binding against the cage's displaced control points."""
    if tuple(cage.dims) != tuple(binding.cage_dims):
        raise CageError(
            f"cage dims {cage.dims} do not match binding dims {binding.cage_dims}")
    pts = cage.displaced[binding.nodes]              # (n, 8, 3)
    verts = (binding.weights[:, :, None] * pts).sum(axis=1)
    return TriMesh(verts, binding.triangles, binding.region)
