import numpy as np
import pytest

from conftest import sphere_mask
from swct.errors import DataError, TrackingError
from swct.evalkit import dice
from swct.phantom import PhantomConfig, generate
from swct.segkit import RigidPose, TrackParams, apply_rigid, track_rigid
from swct.segkit.rigid import _Objective, _coordinate_descent, euler_xyz
from swct.volcore import Frame, Sequence4D, Volume3, binary_labelmap


def blob_sequence(shifts, shape=(40, 40, 40), radius=6):
    """Frames with a soft-edged bright blob translated by integer shifts."""
    frames = []
    center0 = np.array([14.0, 14.0, 14.0])
    grids = np.mgrid[0:shape[0], 0:shape[1], 0:shape[2]].astype(float)
    for s in shifts:
        c = center0 + np.asarray(s, dtype=float)
        d = np.sqrt(((grids - c[:, None, None, None]) ** 2).sum(axis=0))
        hu = np.where(d <= radius, 800.0, 40.0) - np.clip(d - radius, 0, 1) * 0
        ramp = np.clip(radius + 1 - d, 0, 1)
        hu = 40.0 + 760.0 * ramp
        frames.append(Frame(Volume3((1, 1, 1), (0, 0, 0), hu), None))
    return Sequence4D(frames, 0.1, "blob")


class TestRigidPose:
    def test_identity(self):
        p = RigidPose.identity()
        pts = np.array([[1.0, 2.0, 3.0]])
        assert np.allclose(p.apply(pts), pts)

    def test_orthonormality_enforced(self):
        with pytest.raises(DataError, match="orthonormal"):
            RigidPose(np.eye(3) * 1.001, (0, 0, 0))

    def test_reflection_rejected(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(DataError, match="det"):
            RigidPose(r, (0, 0, 0))

    def test_inverse_round_trip(self):
        r = euler_xyz(0.1, -0.2, 0.3)
        p = RigidPose(r, (4.0, -2.0, 1.0))
        pts = np.random.default_rng(0).uniform(-5, 5, (50, 3))
        assert np.allclose(p.inverse().apply(p.apply(pts)), pts, atol=1e-12)

    def test_dict_round_trip(self):
        p = RigidPose(euler_xyz(0.05, 0.02, -0.04), (1.5, 0.25, -3.0), 7)
        q = RigidPose.from_dict(p.to_dict())
        assert np.allclose(p.rotation, q.rotation)
        assert p.translation_mm == q.translation_mm
        assert q.frame_index == 7


class TestApplyRigid:
    def test_identity_exact(self, unit_geom):
        mask = binary_labelmap(unit_geom, sphere_mask((64, 64, 64), (20, 20, 20), 5))
        out = apply_rigid(mask, RigidPose.identity())
        assert np.array_equal(out.codes, mask.codes)

    def test_integer_shift_preserves_count(self, unit_geom):
        mask = binary_labelmap(unit_geom, sphere_mask((64, 64, 64), (20, 20, 20), 5))
        out = apply_rigid(mask, RigidPose(np.eye(3), (1.0, 0.0, 0.0)))
        assert int(out.codes.sum()) == int(mask.codes.sum())
        assert np.array_equal(out.codes[1:], mask.codes[:-1])

    def test_round_trip_dice(self, unit_geom):
        # 10^3-voxel blob rotated and shifted, then inverted: only NN
        # resampling loss remains
        blob = np.zeros((64, 64, 64), dtype=bool)
        blob[24:34, 24:34, 24:34] = True
        mask = binary_labelmap(unit_geom, blob)
        pose = RigidPose(euler_xyz(np.radians(8), np.radians(-5), np.radians(11)),
                         (3.3, -1.7, 2.9))
        there = apply_rigid(mask, pose)
        back = apply_rigid(there, pose.inverse())
        assert dice(back.as_bool(), blob).value >= 0.95


class TestObjectiveDescent:
    def _objective(self):
        seq = blob_sequence([(0, 0, 0), (2.4, -1.2, 0.8)])
        mask = sphere_mask((40, 40, 40), (14, 14, 14), 6)
        pts = np.argwhere(mask).astype(float)
        vals = seq.frames[0].volume.voxels[mask].astype(float)
        obj = _Objective(pts, vals, pts.mean(axis=0),
                         np.ones(3), np.zeros(3))
        obj.set_frame(seq.frames[1].volume.voxels.astype(float))
        return obj

    def test_descent_monotone_trace(self):
        obj = self._objective()
        _, _, trace = _coordinate_descent(obj, np.zeros(6), TrackParams(),
                                          np.ones(3))
        assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_fully_outside_raises(self):
        obj = self._objective()
        with pytest.raises(TrackingError, match="outside"):
            obj([0, 0, 0, 500.0, 500.0, 500.0])


class TestTrackRigid:
    def test_static_sequence_identity(self, unit_geom):
        arr = np.full((64, 64, 64), 40.0)
        arr[20:30, 20:30, 20:30] = 800.0
        v = Volume3((1, 1, 1), (0, 0, 0), arr)
        seq = Sequence4D([Frame(v, None)] * 4, 0.1, "static")
        template = binary_labelmap(v, arr > 400)
        for step in track_rigid(seq, template):
            assert np.allclose(step.pose.rotation, np.eye(3), atol=1e-9)
            assert np.allclose(step.pose.translation_mm, 0.0, atol=1e-6)
            assert np.array_equal(step.mask.codes, template.codes)

    def test_pure_translation_recovery(self):
        shifts = [(0, 0, 0), (0, 2, 3), (0, 4, 6), (0, 6, 9)]
        seq = blob_sequence(shifts)
        mask = sphere_mask((40, 40, 40), (14, 14, 14), 6)
        template = binary_labelmap(seq.frames[0].volume, mask)
        steps = track_rigid(seq, template)
        for step, s in zip(steps, shifts):
            err = np.abs(np.asarray(step.pose.translation_mm) - np.asarray(s, float))
            assert np.all(err < 0.5), (step.pose.frame_index, err)
            assert dice(step.mask.as_bool(),
                        sphere_mask((40, 40, 40),
                                    np.array([14, 14, 14]) + np.array(s), 6)
                        ).value >= 0.95

    def test_rotation_recovery(self):
        # bright L-shaped rigid body rotated about its centroid by 6 degrees
        shape = (48, 48, 48)
        body = np.zeros(shape, dtype=bool)
        body[14:34, 22:27, 22:27] = True
        body[29:34, 22:27, 22:38] = True
        idx = np.argwhere(body).astype(float)
        centroid = idx.mean(axis=0)
        frames = []
        angle_deg = 6.0
        for ang in (0.0, angle_deg):
            r = euler_xyz(0.0, 0.0, np.radians(ang))
            grids = np.mgrid[0:shape[0], 0:shape[1], 0:shape[2]].astype(float)
            pts = grids.reshape(3, -1).T
            back = (pts - centroid) @ r + centroid  # inverse rotation
            nn = np.rint(back).astype(int)
            ok = ((nn >= 0) & (nn < np.array(shape))).all(axis=1)
            rot_body = np.zeros(shape, dtype=bool)
            vals = np.zeros(len(pts), dtype=bool)
            vals[ok] = body[nn[ok, 0], nn[ok, 1], nn[ok, 2]]
            rot_body = vals.reshape(shape)
            hu = np.where(rot_body, 800.0, 40.0)
            frames.append(Frame(Volume3((1, 1, 1), (0, 0, 0), hu), None))
        seq = Sequence4D(frames, 0.1, "rot")
        template = binary_labelmap(frames[0].volume, body)
        steps = track_rigid(seq, template)
        rot = steps[1].pose.rotation
        est_deg = np.degrees(np.arctan2(rot[1, 0], rot[0, 0]))
        assert abs(est_deg - angle_deg) < 1.0
        # orthonormality of the returned rotations
        assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-9)

    def test_objective_trace_non_increasing(self):
        seq = blob_sequence([(0, 0, 0), (1.7, -0.6, 2.2), (3.1, -1.0, 3.9)])
        template = binary_labelmap(seq.frames[0].volume,
                                   sphere_mask((40, 40, 40), (14, 14, 14), 6))
        for step in track_rigid(seq, template)[1:]:
            trace = step.objectives
            assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_empty_template_rejected(self, unit_geom):
        v = Volume3(unit_geom.spacing, unit_geom.origin,
                    np.zeros((64, 64, 64), dtype=np.int32))
        seq = Sequence4D([Frame(v, None)] * 2, 0.1, "x")
        empty = binary_labelmap(v, np.zeros((64, 64, 64), dtype=bool))
        with pytest.raises(DataError, match="empty"):
            track_rigid(seq, empty)

    def test_single_frame_rejected(self, unit_geom):
        v = Volume3(unit_geom.spacing, unit_geom.origin,
                    np.zeros((64, 64, 64), dtype=np.int32))
        seq = Sequence4D([Frame(v, None)], 0.1, "x")
        mask = binary_labelmap(v, sphere_mask((64, 64, 64), (10, 10, 10), 3))
        with pytest.raises(DataError, match="2 frames"):
            track_rigid(seq, mask)


class TestPhantomTracking:
    def test_blur_degrades_fast_frame(self):
        # slender hyoid, excursion inside one exposure: the blurred frame's
        # Dice must drop strictly below its blur-off counterpart
        from dataclasses import replace
        cfg = PhantomConfig(dims=(96, 96, 96), hyoid_rise_frames=(5.8, 6.2),
                            hyoid_return_frames=(15.0, 20.0),
                            hyoid_amplitude_vox=(2.0, 6.0, 10.0),
                            hyoid_radius_scale=0.45, n_frames=10)
        seq_off, _ = generate(cfg, seed=42)
        seq_on, _ = generate(replace(cfg, motion_blur=True), seed=42)
        tpl = binary_labelmap(seq_off.frames[0].labels,
                              seq_off.frames[0].labels.codes == 6)
        st_off = track_rigid(seq_off, tpl)
        st_on = track_rigid(seq_on, tpl)
        drops = []
        for f in range(5, 9):
            d_off = dice(st_off[f].mask.as_bool(),
                         seq_off.frames[f].labels.codes == 6).value
            d_on = dice(st_on[f].mask.as_bool(),
                        seq_on.frames[f].labels.codes == 6).value
            drops.append(d_on < d_off)
        assert any(drops)
