"""Rigid-body template tracking over a 4D-CT sequence.

The template is the set of voxels of a binary mask at frame 0. For every
later frame the tracker finds the rotation+translation minimizing the sum
of squared HU differences between the frame-0 intensities at the template
voxels and the target frame sampled (trilinear) at the transformed
positions. Optimization is a coarse integer-voxel translation search
(initialized at the previous frame's pose, so tracking chains through the
sequence) followed by coordinate descent over the 6 pose parameters with
a halving step schedule.

Rotations are XYZ Euler angles about the template centroid; the returned
``RigidPose`` is the equivalent canonical map ``y = R x + t`` in mm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from ..errors import DataError, TrackingError
from ..volcore import LabelMap, Sequence4D, binary_labelmap, require_same_geometry


@dataclass(frozen=True)
class RigidPose:
    """World-space rigid map ``y = rotation @ x + translation_mm``."""

    rotation: np.ndarray  # 3x3, orthonormal, det +1
    translation_mm: tuple[float, float, float]
    frame_index: int = 0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3):
            raise DataError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise DataError("rotation matrix is not orthonormal (RtR != I at 1e-9)")
        if np.linalg.det(r) < 0:
            raise DataError("rotation matrix must have det +1 (no reflections)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation_mm",
                           tuple(float(x) for x in self.translation_mm))

    @classmethod
    def identity(cls, frame_index: int = 0) -> "RigidPose":
        return cls(np.eye(3), (0.0, 0.0, 0.0), frame_index)

    def apply(self, points_mm) -> np.ndarray:
        p = np.asarray(points_mm, dtype=float)
        return p @ self.rotation.T + np.asarray(self.translation_mm)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        t = -rt @ np.asarray(self.translation_mm)
        return RigidPose(rt, tuple(t), self.frame_index)

    def to_dict(self) -> dict:
        return {
            "frame": self.frame_index,
            "rotation": [[float(x) for x in row] for row in self.rotation],
            "translation_mm": list(self.translation_mm),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidPose":
        return cls(np.array(d["rotation"], dtype=float),
                   tuple(d["translation_mm"]), int(d.get("frame", 0)))


@dataclass(frozen=True)
class TrackParams:
    coarse_radius_vox: int = 5
    coarse_step_vox: int = 1
    step_vox: float = 1.0
    step_deg: float = 2.0
    min_step_vox: float = 0.1
    min_step_deg: float = 0.25
    max_iters: int = 100
    tol: float = 1e-3
    metric: str = "ssd"
    # objective evaluated on an even-stride subsample of the template when it
    # exceeds this count; keeps cost flat for large (clinical-size) templates
    max_objective_voxels: int = 4000

    def __post_init__(self):
        if self.coarse_radius_vox < 0 or self.coarse_step_vox < 1:
            raise DataError("coarse search radius/step must be positive")
        if min(self.step_vox, self.step_deg, self.min_step_vox, self.min_step_deg) <= 0:
            raise DataError("step schedule values must be positive")
        if self.metric != "ssd":
            raise DataError(f"unknown similarity metric '{self.metric}'")
        if self.max_objective_voxels < 8:
            raise DataError("max_objective_voxels must be at least 8")


class TrackStep(NamedTuple):
    pose: RigidPose
    mask: LabelMap
    objectives: list  # objective value after each accepted refinement move


def euler_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation from XYZ Euler angles (radians): R = Rz @ Ry @ Rx."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rxm = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rym = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rzm = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rzm @ rym @ rxm


class _Objective:
    """SSD of template HU vs a target frame sampled at transformed points."""

    def __init__(self, template_points_mm, template_values, centroid_mm,
                 spacing, origin, out_value=-1000.0):
        self.pts_c = template_points_mm - centroid_mm  # centered template points
        self.values = template_values
        self.centroid = centroid_mm
        self.spacing = np.asarray(spacing)
        self.origin = np.asarray(origin)
        self.out_value = out_value
        self._volume = None
        self._dims = None

    def set_frame(self, volume_f64: np.ndarray):
        self._volume = volume_f64
        self._dims = np.array(volume_f64.shape)

    def __call__(self, params) -> float:
        rx, ry, rz, tx, ty, tz = params
        r = euler_xyz(rx, ry, rz)
        y = self.pts_c @ r.T + self.centroid + (tx, ty, tz)
        return self._ssd_at(y)

    def batch_translations(self, rotation, translations) -> np.ndarray:
        """SSD for many candidate translations under one rotation."""
        base = self.pts_c @ rotation.T + self.centroid
        out = np.empty(len(translations))
        chunk = max(1, 4_000_000 // max(len(base), 1))
        for s in range(0, len(translations), chunk):
            ts = translations[s:s + chunk]
            y = base[None, :, :] + ts[:, None, :]
            idx = (y - self.origin) / self.spacing
            sampled = ndimage.map_coordinates(
                self._volume, idx.reshape(-1, 3).T, order=1,
                mode="constant", cval=self.out_value)
            diff = sampled.reshape(len(ts), -1) - self.values
            out[s:s + chunk] = (diff * diff).sum(axis=1)
        return out

    def _ssd_at(self, points_mm) -> float:
        idx = ((points_mm - self.origin) / self.spacing).T
        inside = ((idx >= 0) & (idx <= (self._dims - 1)[:, None])).all(axis=0)
        if not inside.any():
            raise TrackingError("template sampled fully outside the volume")
        sampled = ndimage.map_coordinates(self._volume, idx, order=1,
                                          mode="constant", cval=self.out_value)
        diff = sampled - self.values
        return float(diff @ diff)


def _coordinate_descent(obj: _Objective, params, p: TrackParams, spacing):
    """Greedy per-parameter descent with halving steps; only improving moves
    are accepted, so the objective trace is non-increasing."""
    params = np.asarray(params, dtype=float)
    best = obj(params)
    trace = [best]
    # step levels: halve from the start steps, stop below the minimum steps
    levels = []
    sv, sd = p.step_vox, p.step_deg
    while sv >= p.min_step_vox or sd >= p.min_step_deg:
        levels.append((sv, sd))
        sv, sd = sv / 2, sd / 2
    sweeps = 0
    for step_vox, step_deg in levels:
        steps = np.array([math.radians(step_deg)] * 3 +
                         [step_vox * spacing[i] for i in range(3)])
        while sweeps < p.max_iters:
            sweeps += 1
            moved = False
            level_start = trace[-1]
            for j in range(6):
                for sign in (+1.0, -1.0):
                    cand = params.copy()
                    cand[j] += sign * steps[j]
                    val = obj(cand)
                    if val < best:
                        best, params, moved = val, cand, True
                        trace.append(best)
                        break
            if not moved:
                break
            if level_start > 0 and (level_start - best) / level_start < p.tol:
                break
    return params, best, trace


def track_rigid(seq: Sequence4D, template: LabelMap,
                params: TrackParams | None = None) -> list[TrackStep]:
    """Track the template through every frame; element 0 is the identity.

    Returns one ``TrackStep(pose, mask, objectives)`` per frame; ``mask``
    is the template resampled (nearest neighbor) at the estimated pose.
    """
    p = params or TrackParams()
    if len(seq) < 2:
        raise DataError("tracking needs a sequence of at least 2 frames")
    frame0 = seq.frames[0].volume
    require_same_geometry(template, frame0, "template and frame 0")
    idx = np.argwhere(template.as_bool())
    if idx.size == 0:
        raise DataError("template mask is empty")

    spacing = np.asarray(frame0.spacing)
    origin = np.asarray(frame0.origin)
    pts = idx * spacing + origin
    values = frame0.voxels[template.as_bool()].astype(np.float64)
    centroid = pts.mean(axis=0)
    if len(pts) > p.max_objective_voxels:
        stride = int(np.ceil(len(pts) / p.max_objective_voxels))
        pts_obj, values_obj = pts[::stride], values[::stride]
    else:
        pts_obj, values_obj = pts, values
    obj = _Objective(pts_obj, values_obj, centroid, spacing, origin)

    # coarse search offsets (integer voxels), always including zero
    r, s = p.coarse_radius_vox, p.coarse_step_vox
    ticks = np.arange(-r, r + 1, s)
    offsets = np.stack(np.meshgrid(ticks * spacing[0], ticks * spacing[1],
                                   ticks * spacing[2], indexing="ij"), -1).reshape(-1, 3)

    results = [TrackStep(RigidPose.identity(0), template, [])]
    cur = np.zeros(6)  # (rx, ry, rz, tx, ty, tz) about/after the centroid
    for t in range(1, len(seq)):
        vol = seq.frames[t].volume
        require_same_geometry(vol, frame0, f"frame {t} and frame 0")
        obj.set_frame(vol.voxels.astype(np.float64))

        rot = euler_xyz(*cur[:3])
        cand_t = cur[3:] + offsets
        ssd = obj.batch_translations(rot, cand_t)
        start = cur.copy()
        start[3:] = cand_t[int(np.argmin(ssd))]

        fitted, _, trace = _coordinate_descent(obj, start, p, spacing)
        cur = fitted
        rot = euler_xyz(*fitted[:3])
        # canonical pose: y = R (x - c) + c + T  ==  R x + (c + T - R c)
        tvec = centroid + fitted[3:] - rot @ centroid
        pose = RigidPose(rot, tuple(tvec), t)
        results.append(TrackStep(pose, apply_rigid(template, pose), trace))
    return results


def apply_rigid(mask: LabelMap, pose: RigidPose) -> LabelMap:
    """Resample a binary mask under a rigid pose (nearest neighbor, inverse
    mapping). The identity pose reproduces the mask exactly."""
    src = mask.as_bool()
    out = np.zeros_like(src)
    idx = np.argwhere(src)
    if idx.size == 0:
        return binary_labelmap(mask, out)
    spacing = np.asarray(mask.spacing)
    origin = np.asarray(mask.origin)

    # bounding box of the transformed template, padded, clipped to the grid
    box = np.array([(idx.min(0)[i], idx.max(0)[i]) for i in range(3)])
    corners = np.array([[box[0][a], box[1][b], box[2][c]]
                        for a in range(2) for b in range(2) for c in range(2)])
    tc = (pose.apply(corners * spacing + origin) - origin) / spacing
    lo = np.maximum(np.floor(tc.min(axis=0)).astype(int) - 1, 0)
    hi = np.minimum(np.ceil(tc.max(axis=0)).astype(int) + 1, np.array(src.shape) - 1)
    if (lo > hi).any():
        return binary_labelmap(mask, out)

    grids = np.meshgrid(*(np.arange(lo[i], hi[i] + 1) for i in range(3)), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1) * spacing + origin
    back = (pose.inverse().apply(pts) - origin) / spacing
    nn = np.rint(back).astype(int)
    ok = ((nn >= 0) & (nn < np.array(src.shape))).all(axis=1)
    val = np.zeros(len(nn), dtype=bool)
    val[ok] = src[nn[ok, 0], nn[ok, 1], nn[ok, 2]]
    out[grids[0].ravel()[val], grids[1].ravel()[val], grids[2].ravel()[val]] = True
    return binary_labelmap(mask, out)
