"""End-to-end tests for the offline calibration driver and the tracker."""

import numpy as np
import pytest

from markercal.dataset import Dataset, save_calibration
from markercal.errors import DisconnectedGraph, ValidationError
from markercal.pipeline import (
    CalibrationConfig,
    TrackSession,
    calibrate,
    detection_candidates,
    track_sequence,
)
from markercal.synthetic import SceneSpec, evaluate, generate


def _dataset(**kwargs):
    # radius 0.7 keeps the markers large enough in view that a 3-camera
    # noisy scene initializes in the right basin for every seed
    defaults = dict(
        n_cameras=3, circle_radius=0.7, object="cube", n_frames=16,
        trajectory="orbit", seed=2,
    )
    defaults.update(kwargs)
    spec = SceneSpec(**defaults)
    gt, dets, intr = generate(spec)
    return gt, Dataset(dets, intr, spec.marker_side, spec.n_frames)


class TestCalibrationConfig:
    def test_defaults(self):
        c = CalibrationConfig()
        assert c.tau_ratio == 2.0
        assert c.tau_n == 10.0
        assert c.ambiguity_handling is True
        assert c.solver.max_iters == 10000

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"tau_ratio": 0.5},
            {"tau_n": 0.0},
            {"probe_scale": -1.0},
            {"max_samples_per_pair": 0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            CalibrationConfig(**kwargs)


class TestDetectionCandidates:
    def test_every_detection_gets_a_set(self):
        _, ds = _dataset(noise_sigma=0.2)
        sets = detection_candidates(ds)
        assert set(sets) == {d.key for d in ds.detections}
        assert all(len(s.transforms) >= 1 for s in sets.values())

    def test_ablation_keeps_single_pose(self):
        _, ds = _dataset(noise_sigma=0.5)
        sets = detection_candidates(ds, CalibrationConfig(ambiguity_handling=False))
        assert all(len(s.transforms) == 1 for s in sets.values())
        both = detection_candidates(ds, CalibrationConfig())
        assert any(len(s.transforms) == 2 for s in both.values())


class TestCalibrate:
    def test_zero_noise_recovery(self):
        gt, ds = _dataset()
        result, artifacts = calibrate(ds)
        assert result.report.final_rms < 1e-8
        rep = evaluate(result, gt)
        # evaluate reports mm and degrees; 1e-3 mm = 1e-6 m
        assert rep.obj_trans_err < 1e-3
        assert rep.obj_rot_err < np.degrees(1e-6)
        assert rep.cam_trans_err < 1e-3
        assert rep.marker_config_err < 1e-3
        assert np.allclose(
            result.cams.poses[result.cams.reference].as_matrix(), np.eye(4)
        )
        assert np.allclose(
            result.markers.poses[result.markers.reference].as_matrix(), np.eye(4)
        )

    def test_all_frames_tracked(self):
        _, ds = _dataset(noise_sigma=0.3)
        result, _ = calibrate(ds)
        assert all(st.pose is not None for st in result.traj.frames.values())
        assert set(result.traj.frames) == set(range(ds.n_frames))

    def test_artifacts_cover_all_detections(self):
        _, ds = _dataset()
        _, artifacts = calibrate(ds)
        assert set(artifacts.candidate_sets) == {d.key for d in ds.detections}
        assert len(artifacts.camera_tree) == len(artifacts.camera_graph.vertices) - 1
        assert len(artifacts.marker_tree) == len(artifacts.marker_graph.vertices) - 1

    def test_deterministic_output(self, tmp_path):
        _, ds = _dataset(noise_sigma=0.3)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_calibration(calibrate(ds)[0], p1)
        save_calibration(calibrate(ds)[0], p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_dataset_rejected(self):
        _, ds = _dataset()
        empty = Dataset([], ds.intrinsics, ds.marker_side, ds.n_frames)
        with pytest.raises(ValidationError, match="no detections"):
            calibrate(empty)

    def test_disconnected_cameras(self):
        # keep camera c only in frames with t % 3 == c: no two cameras
        # ever co-observe anything, so no camera pair exists
        _, ds = _dataset(n_frames=18)
        dets = [d for d in ds.detections if d.t % 3 == d.cam]
        sliced = Dataset(dets, ds.intrinsics, ds.marker_side, ds.n_frames)
        with pytest.raises(DisconnectedGraph) as e:
            calibrate(sliced)
        assert e.value.kind == "camera"
        assert len(e.value.components) > 1

    def test_explicit_references(self):
        gt, ds = _dataset()
        config = CalibrationConfig(ref_camera=2, ref_marker=1)
        result, _ = calibrate(ds, config)
        assert result.cams.reference == 2
        assert result.markers.reference == 1
        assert np.allclose(result.cams.poses[2].as_matrix(), np.eye(4))

    def test_unknown_reference_rejected(self):
        _, ds = _dataset()
        with pytest.raises(ValidationError, match="reference camera 99"):
            calibrate(ds, CalibrationConfig(ref_camera=99))

    def test_intrinsics_only_camera_ignored(self):
        from markercal.geometry import CameraIntrinsics

        gt, ds = _dataset()
        intr = dict(ds.intrinsics)
        intr[77] = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0)
        widened = Dataset(ds.detections, intr, ds.marker_side, ds.n_frames)
        result, _ = calibrate(widened)
        assert 77 not in result.cams.poses

    def test_ablation_still_runs(self):
        _, ds = _dataset(noise_sigma=0.3)
        result, _ = calibrate(ds, CalibrationConfig(ambiguity_handling=False))
        assert np.isfinite(result.report.final_rms)

    def test_subsampled_pairs_still_recover(self):
        gt, ds = _dataset()
        config = CalibrationConfig(max_samples_per_pair=5)
        result, _ = calibrate(ds, config)
        assert result.report.final_rms < 1e-8


class TestTrackSequence:
    def test_matches_calibration_trajectory(self):
        _, ds = _dataset(noise_sigma=0.2)
        result, _ = calibrate(ds)
        traj, rms, times = track_sequence(
            result, ds.detections, ds.intrinsics, ds.n_frames
        )
        assert len(times) == ds.n_frames
        for t, st in result.traj.frames.items():
            got = traj.frames[t].pose
            assert np.abs(got.as_matrix() - st.pose.as_matrix()).max() < 1e-6

    def test_empty_frame_untracked(self):
        _, ds = _dataset()
        result, _ = calibrate(ds)
        dets = [d for d in ds.detections if d.t != 3]
        traj, rms, _ = track_sequence(result, dets, ds.intrinsics, ds.n_frames)
        assert traj.frames[3].pose is None
        assert 3 not in rms
        assert traj.frames[4].pose is not None

    def test_infers_frame_count(self):
        _, ds = _dataset()
        result, _ = calibrate(ds)
        traj, _, _ = track_sequence(result, ds.detections, ds.intrinsics)
        assert len(traj.frames) == ds.n_frames


class TestTrackSession:
    def test_warm_state_survives_gap(self):
        _, ds = _dataset(noise_sigma=0.2)
        result, _ = calibrate(ds)
        by_frame = {}
        for d in ds.detections:
            by_frame.setdefault(d.t, []).append(d)
        session = TrackSession(result, ds.intrinsics)
        p0 = session.feed(by_frame[0])
        assert p0 is not None
        assert session.feed([]) is None
        assert session.warm is p0  # gap does not clear the warm start
        p2 = session.feed(by_frame[1])
        assert p2 is not None
