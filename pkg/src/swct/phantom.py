"""Deterministic synthetic swallowing 4D-CT with ground-truth labels.

The scene emulates the clinical geometry at toy fidelity: a soft-tissue
head block with a curved air channel (oral cavity to esophagus entry), a
static vertebral column and mandibular arch, a rigid bar-with-two-horns
hyoid following a superior-anterior excursion, a deformable tongue, and a
high-HU bolus translating along the air channel. Everything is resolved
from analytic signed distances, so every label, pose and centroid has an
exact oracle. Given the same config and seed the output is bit-identical.

Axes: +x left, +y anterior, +z superior. Body sizes scale with the volume
extent so any dims >= 32 produce a proportionate scene.

Intensity rendering: soft bodies (head, air channel, tongue) get 2x2x2
supersampled partial-volume edges; bone bodies and the bolus are rendered
hard-edged so that thresholding the image reproduces their labels exactly
(the label/intensity consistency the downstream tests rely on). Labels are
taken at each frame's mid-exposure instant. Motion blur averages the scene
at sample instants across the exposure window; the noise field is Gaussian
and frozen across frames so that a motionless configuration yields
bit-identical frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .segkit.rigid import RigidPose
from .volcore import Frame, LabelMap, RegionCode, Sequence4D, Volume3, save_case


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (128, 128, 128)
    spacing_mm: tuple[float, float, float] = (0.5, 0.5, 0.5)
    n_frames: int = 25
    frame_interval_s: float = 0.1
    exposure_s: float = 0.2
    rng_seed: int = 0

    # per-organ motion
    hyoid_amplitude_vox: tuple[float, float, float] = (2.0, 6.0, 8.0)
    hyoid_rise_frames: tuple[float, float] = (5.0, 12.0)
    hyoid_return_frames: tuple[float, float] = (15.0, 20.0)
    hyoid_peak_rotation_deg: float = 0.0
    hyoid_radius_scale: float = 1.0  # < 1 gives the slender, blur-prone hyoid
    horn_imbalance: float = 0.0  # extra left-horn z amplitude, fraction of base
    tongue_amplitude_mm: float = 1.5
    bolus_travel: float = 1.0  # fraction of the swallow path covered

    # artifacts
    motion_blur: bool = False
    blur_samples: int = 5
    metal_artifact: bool = False
    metal_site_mm: tuple[float, float, float] | None = None
    metal_amplitude_hu: float = 300.0
    metal_spokes: int = 24
    metal_slab_halfwidth_mm: float = 1.0

    # HU palette
    noise_sigma_hu: float = 15.0
    hu_air: float = -1000.0
    hu_soft: float = 40.0
    hu_bone: float = 800.0
    hu_cartilage: float = 200.0
    hu_bolus: float = 1500.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if any(d < 32 for d in self.dims):
            raise DataError(f"phantom dims must all be >= 32, got {self.dims}")
        if any(s <= 0 for s in self.spacing_mm):
            raise DataError("spacing must be positive")
        if self.n_frames < 2:
            raise DataError("phantom needs at least 2 frames")
        if not self.frame_interval_s > 0:
            raise DataError("frame_interval_s must be positive")
        if not 0 < self.exposure_s <= 2 * self.frame_interval_s:
            raise DataError("exposure_s must be in (0, 2 * frame_interval_s]")
        if self.blur_samples < 1:
            raise DataError("blur_samples must be >= 1")
        if self.noise_sigma_hu < 0:
            raise DataError("noise_sigma_hu must be >= 0")
        r0, r1 = self.hyoid_rise_frames
        h0, h1 = self.hyoid_return_frames
        if not (r0 < r1 <= h0 < h1):
            raise DataError("hyoid schedule must satisfy rise0 < rise1 <= ret0 < ret1")
        if not 0.0 <= self.bolus_travel <= 1.0:
            raise DataError("bolus_travel must be in [0, 1]")
        if not self.hyoid_radius_scale > 0:
            raise DataError("hyoid_radius_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metal_site_mm"] = list(self.metal_site_mm) if self.metal_site_mm else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown phantom config key(s): {sorted(unknown)}")
        kw = dict(d)
        for key in ("dims", "spacing_mm", "hyoid_amplitude_vox",
                    "hyoid_rise_frames", "hyoid_return_frames"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(kw[key])
        if kw.get("metal_site_mm") is not None:
            kw["metal_site_mm"] = tuple(kw["metal_site_mm"])
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "PhantomConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON: {e}") from e


@dataclass(frozen=True)
class PhantomTruth:
    """Analytic ground truth: rigid hyoid poses, bolus centroids, landmark
    trajectories and the scene parameters the oracle tests compare against."""

    poses: list[RigidPose]
    bolus_centroid_mm: list[tuple[float, float, float]]
    landmarks_mm: list[dict[str, tuple[float, float, float]]]
    hyoid_center_mm: tuple[float, float, float]
    params: dict

    def to_dict(self) -> dict:
        return {
            "hyoid_poses": [p.to_dict() for p in self.poses],
            "bolus_centroid_mm": [list(c) for c in self.bolus_centroid_mm],
            "landmarks_mm": [{k: list(v) for k, v in lm.items()}
                             for lm in self.landmarks_mm],
            "hyoid_center_mm": list(self.hyoid_center_mm),
            "params": self.params,
        }


# ---------------------------------------------------------------------------
# Schedules and signed-distance primitives


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _sd_sphere(p, c, r):
    return np.linalg.norm(p - c, axis=-1) - r


def _sd_capsule(p, a, b, r):
    pa = p - a
    ba = np.asarray(b, dtype=float) - a
    h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - r


def _sd_round_box(p, c, half, rad):
    q = np.abs(p - c) - (np.asarray(half) - rad)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside - rad


def _sd_superellipsoid(p, c, semi, n):
    """Approximate SDF; the sign (inside/outside) is exact."""
    u = np.abs(p - c) / semi
    f = (u ** n).sum(axis=-1) ** (1.0 / n)
    return (f - 1.0) * min(semi)


def _sd_arc_tube(p, c, ring_r, tube_r):
    """Tube swept along the anterior (y >= cy) half-ring in the plane z=cz,
    capped with spheres at the ring endpoints (a mandible-like arch)."""
    dx = p[..., 0] - c[0]
    dy = p[..., 1] - c[1]
    dz = p[..., 2] - c[2]
    ring = np.hypot(np.hypot(dx, dy) - ring_r, dz)
    e1 = np.sqrt((dx - ring_r) ** 2 + dy ** 2 + dz ** 2)
    e2 = np.sqrt((dx + ring_r) ** 2 + dy ** 2 + dz ** 2)
    return np.where(dy >= 0, ring, np.minimum(e1, e2)) - tube_r


def _sd_polyline_tube(p, pts, r):
    d = np.full(p.shape[:-1], np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        d = np.minimum(d, _sd_capsule(p, a, b, 0.0))
    return d - r


def _bezier(u, p0, p1, p2):
    u = np.asarray(u, dtype=float)[..., None]
    return (1 - u) ** 2 * p0 + 2 * u * (1 - u) * p1 + u ** 2 * p2


def _rot_x(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


# ---------------------------------------------------------------------------
# Scene


class _Scene:
    def __init__(self, cfg: PhantomConfig):
        self.cfg = cfg
        self.extent = np.array(cfg.dims) * np.array(cfg.spacing_mm)
        e = self.extent
        emin = float(e.min())
        self.emin = emin

        self.head_c = np.array([0.5, 0.5, 0.5]) * e
        self.head_semi = np.array([0.42, 0.42, 0.47]) * e

        self.path_p0 = np.array([0.5, 0.66, 0.76]) * e
        self.path_p1 = np.array([0.5, 0.30, 0.72]) * e
        self.path_p2 = np.array([0.5, 0.34, 0.18]) * e
        self.cavity_r = 0.086 * emin
        self.cavity_pts = _bezier(np.linspace(0, 1, 65), self.path_p0,
                                  self.path_p1, self.path_p2)

        self.tongue_c = np.array([0.5, 0.62, 0.56]) * e
        self.tongue_semi = np.array([0.20, 0.15, 0.12]) * e
        self.tongue_n = 2.5
        self.tongue_zbase = self.tongue_c[2] - self.tongue_semi[2]

        self.vert_c = np.array([0.5, 0.18, 0.5]) * e
        self.vert_half = np.array([0.09, 0.055, 0.40]) * e
        self.vert_round = 0.01 * emin

        self.mand_c = np.array([0.5, 0.52, 0.42]) * e
        self.mand_ring_r = 0.26 * emin
        self.mand_tube_r = 0.035 * emin

        self.hyoid_c = np.array([0.5, 0.56, 0.28]) * e
        self.bar_half = 0.085 * emin
        self.bar_r = 0.072 * emin * cfg.hyoid_radius_scale
        self.horn_tip = np.array([0.0, -0.11, 0.055]) * emin  # from each bar end
        self.horn_r = 0.068 * emin * cfg.hyoid_radius_scale
        self.hyoid_amp_mm = (np.array(cfg.hyoid_amplitude_vox)
                             * np.array(cfg.spacing_mm))

        self.bolus_r = 0.0625 * emin

        self.metal_site = (np.array(cfg.metal_site_mm) if cfg.metal_site_mm
                           else np.array([0.5, 0.78, 0.42]) * e)
        self.metal_phase = float(
            np.random.default_rng([cfg.rng_seed, 77]).uniform(0.0, 2 * math.pi))

    # schedules (continuous frame coordinate f = t / frame_interval)
    def hyoid_s(self, f: float) -> float:
        r0, r1 = self.cfg.hyoid_rise_frames
        h0, h1 = self.cfg.hyoid_return_frames
        if f <= r0:
            return 0.0
        if f < r1:
            return float(_smoothstep((f - r0) / (r1 - r0)))
        if f <= h0:
            return 1.0
        if f < h1:
            return float(1.0 - _smoothstep((f - h0) / (h1 - h0)))
        return 0.0

    def tongue_scale(self, f: float) -> float:
        g = math.sin(math.pi * min(max(f / (self.cfg.n_frames - 1), 0.0), 1.0)) ** 2
        return 1.0 + self.cfg.tongue_amplitude_mm * g / (2 * self.tongue_semi[2])

    def bolus_u(self, f: float) -> float:
        start = 2.0
        dur = max(self.cfg.n_frames - 5.0, 1.0)
        u = float(_smoothstep((f - start) / dur))
        return u * self.cfg.bolus_travel

    def hyoid_disp(self, f: float) -> np.ndarray:
        return self.hyoid_s(f) * self.hyoid_amp_mm

    def hyoid_rot(self, f: float) -> np.ndarray:
        return _rot_x(math.radians(self.cfg.hyoid_peak_rotation_deg) * self.hyoid_s(f))

    def left_horn_extra(self, f: float) -> np.ndarray:
        dz = self.cfg.horn_imbalance * self.hyoid_amp_mm[2] * self.hyoid_s(f)
        return np.array([0.0, 0.0, dz])

    def bolus_center(self, f: float) -> np.ndarray:
        return _bezier(self.bolus_u(f), self.path_p0, self.path_p1, self.path_p2)

    # bodies at continuous frame f: (sdf, hu, hard, bbox lo/hi in mm)
    def _hyoid_parts(self, f: float):
        cfg = self.cfg
        d = self.hyoid_disp(f)
        rot = self.hyoid_rot(f)
        center = self.hyoid_c + d

        def part(a_local, b_local, r, extra):
            a = rot @ a_local + center + extra
            b = rot @ b_local + center + extra

            def sdf(p, a=a, b=b, r=r):
                return _sd_capsule(p, a, b, r)

            lo = np.minimum(a, b) - r
            hi = np.maximum(a, b) + r
            return sdf, lo, hi

        w = self.bar_half
        parts = [part(np.array([-w, 0, 0]), np.array([w, 0, 0]), self.bar_r,
                      np.zeros(3))]
        extra_l = self.left_horn_extra(f)
        parts.append(part(np.array([w, 0, 0]), np.array([w, 0, 0]) + self.horn_tip,
                          self.horn_r, extra_l))
        parts.append(part(np.array([-w, 0, 0]), np.array([-w, 0, 0]) + self.horn_tip,
                          self.horn_r, np.zeros(3)))
        return [(sdf, cfg.hu_bone, True, lo, hi) for sdf, lo, hi in parts]

    def moving_bodies(self, f: float):
        """Bodies re-rendered per instant, in paint order."""
        cfg = self.cfg
        lam = self.tongue_scale(f)
        zb = self.tongue_zbase

        def tongue_sdf(p, lam=lam):
            q = p.copy()
            q[..., 2] = zb + (q[..., 2] - zb) / lam
            return _sd_superellipsoid(q, self.tongue_c, self.tongue_semi, self.tongue_n)

        t_lo = self.tongue_c - self.tongue_semi
        t_hi = self.tongue_c + self.tongue_semi
        t_hi = t_hi.copy()
        t_hi[2] = zb + 2 * self.tongue_semi[2] * lam
        bodies = [(tongue_sdf, cfg.hu_soft, False, t_lo, t_hi)]
        bodies += self._hyoid_parts(f)
        bc = self.bolus_center(f)

        def bolus_sdf(p, bc=bc):
            return _sd_sphere(p, bc, self.bolus_r)

        bodies.append((bolus_sdf, cfg.hu_bolus, True,
                       bc - self.bolus_r, bc + self.bolus_r))
        return bodies

    def static_bodies(self):
        cfg = self.cfg
        e = self.extent

        def head(p):
            return _sd_superellipsoid(p, self.head_c, self.head_semi, 4.0)

        def cavity(p):
            return _sd_polyline_tube(p, self.cavity_pts, self.cavity_r)

        def vert(p):
            return _sd_round_box(p, self.vert_c, self.vert_half, self.vert_round)

        def mand(p):
            return _sd_arc_tube(p, self.mand_c, self.mand_ring_r, self.mand_tube_r)

        c_lo = self.cavity_pts.min(axis=0) - self.cavity_r
        c_hi = self.cavity_pts.max(axis=0) + self.cavity_r
        m_lo = self.mand_c - np.array([self.mand_ring_r, 0, 0]) \
            - np.array([1, 0, 1]) * self.mand_tube_r
        m_lo[1] = self.mand_c[1] - self.mand_tube_r
        m_hi = self.mand_c + np.array([self.mand_ring_r + self.mand_tube_r,
                                       self.mand_ring_r + self.mand_tube_r,
                                       self.mand_tube_r])
        return [
            (head, cfg.hu_soft, False, self.head_c - self.head_semi,
             self.head_c + self.head_semi),
            (cavity, cfg.hu_air, False, c_lo, c_hi),
            (vert, cfg.hu_bone, True, self.vert_c - self.vert_half,
             self.vert_c + self.vert_half),
            (mand, cfg.hu_bone, True, m_lo, m_hi),
        ]

    def landmarks(self, f: float) -> dict[str, tuple]:
        d = self.hyoid_disp(f)
        rot = self.hyoid_rot(f)
        center = self.hyoid_c + d
        w = self.bar_half
        pts = {
            "bar_left": np.array([w, 0, 0]),
            "bar_right": np.array([-w, 0, 0]),
            "horn_left_tip": np.array([w, 0, 0]) + self.horn_tip,
            "horn_right_tip": np.array([-w, 0, 0]) + self.horn_tip,
        }
        extra_l = self.left_horn_extra(f)
        out = {}
        for name, local in pts.items():
            world = rot @ local + center
            if name.endswith("left_tip"):
                world = world + extra_l
            out[name] = tuple(float(x) for x in world)
        return out

    def hyoid_pose(self, f: float) -> RigidPose:
        rot = self.hyoid_rot(f)
        t = self.hyoid_c + self.hyoid_disp(f) - rot @ self.hyoid_c
        return RigidPose(rot, tuple(t), int(round(f)))


# ---------------------------------------------------------------------------
# Rendering

_SUB_OFFSETS = np.array([[dx, dy, dz] for dx in (-0.25, 0.25)
                        for dy in (-0.25, 0.25) for dz in (-0.25, 0.25)])


def _subgrid(cfg, lo_mm, hi_mm, pad_mm):
    spacing = np.array(cfg.spacing_mm)
    lo = np.floor((lo_mm - pad_mm) / spacing).astype(int)
    hi = np.ceil((hi_mm + pad_mm) / spacing).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(cfg.dims) - 1)
    if (lo > hi).any():
        return None, None
    axes = [np.arange(lo[i], hi[i] + 1) for i in range(3)]
    grids = np.meshgrid(*(a * spacing[i] for i, a in enumerate(axes)), indexing="ij")
    pts = np.stack(grids, axis=-1)
    slc = tuple(slice(lo[i], hi[i] + 1) for i in range(3))
    return slc, pts


def _occupancy(cfg, sdf, pts, hard: bool) -> np.ndarray:
    d = sdf(pts)
    if hard:
        return (d < 0).astype(np.float64)
    occ = (d < 0).astype(np.float64)
    band_mm = 1.5 * max(cfg.spacing_mm) * math.sqrt(3) / 2
    band = np.abs(d) <= band_mm
    if band.any():
        centers = pts[band]
        sub = centers[:, None, :] + _SUB_OFFSETS * np.array(cfg.spacing_mm)
        dsub = sdf(sub.reshape(-1, 3)).reshape(len(centers), 8)
        occ[band] = (dsub < 0).mean(axis=1)
    return occ


def _paint_hu(cfg, canvas, body):
    sdf, hu, hard, lo, hi = body
    slc, pts = _subgrid(cfg, lo, hi, pad_mm=2.0 * max(cfg.spacing_mm))
    if slc is None:
        return
    occ = _occupancy(cfg, sdf, pts, hard)
    canvas[slc] = canvas[slc] * (1.0 - occ) + hu * occ


def _body_mask(cfg, body) -> tuple[tuple, np.ndarray] | tuple[None, None]:
    sdf, _hu, hard, lo, hi = body
    slc, pts = _subgrid(cfg, lo, hi, pad_mm=2.0 * max(cfg.spacing_mm))
    if slc is None:
        return None, None
    occ = _occupancy(cfg, sdf, pts, hard)
    return slc, occ >= 0.5 if not hard else occ > 0.0


class _Renderer:
    def __init__(self, cfg: PhantomConfig):
        self.cfg = cfg
        self.scene = _Scene(cfg)
        canvas = np.full(cfg.dims, cfg.hu_air, dtype=np.float64)
        statics = self.scene.static_bodies()
        for body in statics:
            _paint_hu(cfg, canvas, body)
        self.static_canvas = canvas
        # static bone label masks (vertebrae then mandible, paint order)
        self.static_label_parts = []
        for body, code in ((statics[2], RegionCode.cervical_vertebrae),
                           (statics[3], RegionCode.mandible)):
            slc, mask = _body_mask(cfg, body)
            self.static_label_parts.append((slc, mask, int(code)))
        if cfg.metal_artifact:
            self.metal_field = metal_streak_field(
                cfg.dims, cfg.spacing_mm, (0.0, 0.0, 0.0), self.scene.metal_site,
                cfg.metal_amplitude_hu, cfg.metal_spokes, self.scene.metal_phase,
                slab_halfwidth_mm=cfg.metal_slab_halfwidth_mm)
        else:
            self.metal_field = None

    def render_instant(self, f: float) -> np.ndarray:
        canvas = self.static_canvas.copy()
        for body in self.scene.moving_bodies(f):
            _paint_hu(self.cfg, canvas, body)
        return canvas

    def frame_hu(self, frame: int) -> np.ndarray:
        cfg = self.cfg
        if cfg.motion_blur and cfg.blur_samples > 1:
            k = cfg.blur_samples
            offsets = ((np.arange(k) + 0.5) / k - 0.5) * cfg.exposure_s
            acc = np.zeros(cfg.dims, dtype=np.float64)
            for off in offsets:
                acc += self.render_instant(frame + off / cfg.frame_interval_s)
            canvas = acc / k
        else:
            canvas = self.render_instant(float(frame))
        if self.metal_field is not None:
            canvas = canvas + self.metal_field
        return canvas

    def frame_labels(self, frame: int) -> np.ndarray:
        cfg = self.cfg
        labels = np.zeros(cfg.dims, dtype=np.uint8)
        bodies = self.scene.moving_bodies(float(frame))
        tongue, bolus = bodies[0], bodies[-1]
        hyoid_parts = bodies[1:-1]
        order = [(tongue, int(RegionCode.tongue))]
        paint = []
        for body, code in order:
            slc, mask = _body_mask(cfg, body)
            paint.append((slc, mask, code))
        paint.extend(self.static_label_parts)
        for body in hyoid_parts:
            slc, mask = _body_mask(cfg, body)
            paint.append((slc, mask, int(RegionCode.hyoid)))
        slc, mask = _body_mask(cfg, bolus)
        paint.append((slc, mask, int(RegionCode.bolus)))
        for slc, mask, code in paint:
            if slc is not None:
                labels[slc][mask] = code
        return labels


def metal_streak_field(dims, spacing, origin, site_mm, amplitude_hu,
                       n_spokes=24, phase_rad=0.0, decay_mm=10.0,
                       slab_halfwidth_mm=1.0) -> np.ndarray:
    """Alternating +/- radial streaks in the axial plane through ``site_mm``,
    amplitude decaying as 1/(1 + d/decay_mm), fading linearly over the slab."""
    dims = tuple(dims)
    spacing = np.asarray(spacing, dtype=float)
    origin = np.asarray(origin, dtype=float)
    site = np.asarray(site_mm, dtype=float)
    field = np.zeros(dims, dtype=np.float64)
    zs = origin[2] + np.arange(dims[2]) * spacing[2]
    wz = 1.0 - np.abs(zs - site[2]) / slab_halfwidth_mm
    live = np.flatnonzero(wz > 0)
    if live.size == 0:
        return field
    xs = origin[0] + np.arange(dims[0]) * spacing[0]
    ys = origin[1] + np.arange(dims[1]) * spacing[1]
    dx = (xs - site[0])[:, None]
    dy = (ys - site[1])[None, :]
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    pattern = np.sign(np.sin(n_spokes * theta + phase_rad))
    pattern[pattern == 0] = 1.0
    plane = amplitude_hu * pattern / (1.0 + r / decay_mm)
    for k in live:
        field[:, :, k] = plane * wz[k]
    return field


def add_metal_artifact(v: Volume3, site_mm, amplitude_hu=300.0, n_spokes=24,
                       phase_rad=0.0, decay_mm=10.0,
                       slab_halfwidth_mm=1.0) -> Volume3:
    """Return a copy of ``v`` with dental-crown-style streaks added around
    ``site_mm``. Amplitude 0 is the identity. Labels are never touched:
    the artifact corrupts intensities, not anatomy."""
    site = np.asarray(site_mm, dtype=float)
    idx = (site - np.asarray(v.origin)) / np.asarray(v.spacing)
    if ((idx < 0) | (idx > np.array(v.dims) - 1)).any():
        raise DataError(f"metal site {tuple(site)} mm lies outside the volume")
    field = metal_streak_field(v.dims, v.spacing, v.origin, site, amplitude_hu,
                               n_spokes, phase_rad, decay_mm, slab_halfwidth_mm)
    return Volume3(v.spacing, v.origin, v.voxels.astype(np.float64) + field)


# ---------------------------------------------------------------------------
# Generation


def render_frame(cfg: PhantomConfig, frame: int, with_noise: bool = True) -> Volume3:
    """Render one frame (convenience wrapper; rebuilds the static scene)."""
    if not 0 <= frame < cfg.n_frames:
        raise DataError(f"frame {frame} out of range 0..{cfg.n_frames - 1}")
    r = _Renderer(cfg)
    hu = r.frame_hu(frame)
    if with_noise and cfg.noise_sigma_hu > 0:
        hu = hu + _noise_field(cfg)
    return Volume3(cfg.spacing_mm, (0.0, 0.0, 0.0), hu)


def _noise_field(cfg: PhantomConfig) -> np.ndarray:
    # frozen across frames so zero-motion configs yield identical frames
    rng = np.random.default_rng([cfg.rng_seed, 7])
    return rng.normal(0.0, cfg.noise_sigma_hu, cfg.dims)


def generate(cfg: PhantomConfig, seed: int | None = None,
             case_id: str | None = None) -> tuple[Sequence4D, PhantomTruth]:
    """Render the full labeled sequence plus its analytic truth."""
    if seed is not None:
        cfg = replace(cfg, rng_seed=int(seed))
    if case_id is None:
        case_id = f"phantom-s{cfg.rng_seed}"
    renderer = _Renderer(cfg)
    scene = renderer.scene
    noise = _noise_field(cfg) if cfg.noise_sigma_hu > 0 else None

    frames = []
    poses = []
    centroids = []
    landmarks = []
    for f in range(cfg.n_frames):
        hu = renderer.frame_hu(f)
        if noise is not None:
            hu = hu + noise
        volume = Volume3(cfg.spacing_mm, (0.0, 0.0, 0.0), hu)
        labels = LabelMap(cfg.spacing_mm, (0.0, 0.0, 0.0), renderer.frame_labels(f))
        frames.append(Frame(volume, labels))
        poses.append(scene.hyoid_pose(float(f)))
        centroids.append(tuple(float(x) for x in scene.bolus_center(float(f))))
        landmarks.append(scene.landmarks(float(f)))

    seq = Sequence4D(frames, cfg.frame_interval_s, case_id)
    params = {
        "config": cfg.to_dict(),
        "hyoid_amplitude_mm": [float(x) for x in scene.hyoid_amp_mm],
        "bolus_path_mm": [list(map(float, p)) for p in
                          (scene.path_p0, scene.path_p1, scene.path_p2)],
        "tongue_center_mm": [float(x) for x in scene.tongue_c],
        "tongue_semi_mm": [float(x) for x in scene.tongue_semi],
        "regions_present": [int(RegionCode.tongue), int(RegionCode.mandible),
                            int(RegionCode.cervical_vertebrae),
                            int(RegionCode.hyoid), int(RegionCode.bolus)],
    }
    truth = PhantomTruth(poses, centroids, landmarks,
                         tuple(float(x) for x in scene.hyoid_c), params)
    return seq, truth


def write_phantom_case(cfg: PhantomConfig, out_dir, seed: int | None = None,
                       case_id: str | None = None, encoding: str = "gzip") -> Path:
    """Generate and persist a case directory (volcore manifest + truth.json)."""
    seq, truth = generate(cfg, seed=seed, case_id=case_id)
    out_dir = Path(out_dir)
    save_case(seq, out_dir, encoding=encoding)
    (out_dir / "truth.json").write_text(json.dumps(truth.to_dict(), indent=2) + "\n")
    return out_dir
