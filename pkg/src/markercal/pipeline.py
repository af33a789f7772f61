"""End-to-end drivers: offline calibration and online tracking.

calibrate() runs the full offline chain on a validated dataset: per-detection
pose candidates, pairwise relative-pose voting, spanning-tree initialization
of both camera and marker structures, per-frame object poses, and the joint
sparse refinement. track_sequence() replays a detection stream against a
finished calibration with warm starts between consecutive frames.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .errors import DegenerateQuad, NoValidPose, ValidationError
from .frame_init import (
    SOURCE_TRACKED,
    FrameState,
    Trajectory,
    build_trajectory,
    frame_candidates,
)
from .geometry import CameraIntrinsics, MarkerTemplate, RigidTransform
from .optimizer import (
    CalibrationResult,
    FrameTracker,
    SolverOptions,
    refine_all,
)
from .pairwise import (
    collect_camera_pairs,
    collect_marker_pairs,
    probe_points,
    select_optimal,
)
from .planar_pose import CandidateSet, Detection, candidate_set, estimate_two_poses
from .structure_init import (
    DEFAULT_TAU_N,
    PoseGraph,
    StructureEstimate,
    build_graph,
    chain_poses,
    minimum_spanning_tree,
)


@dataclass(frozen=True)
class CalibrationConfig:
    """Knobs for the offline calibration chain.

    tau_ratio gates the two-pose ambiguity test (a detection whose
    second-best reprojection error is less than tau_ratio times the best
    keeps both poses). tau_n inflates graph edge weights for pairs seen
    in fewer than tau_n samples. References default to the lowest id
    present. ambiguity_handling=False is an ablation switch: every
    detection then contributes only its best pose.
    """

    tau_ratio: float = 2.0
    tau_n: float = DEFAULT_TAU_N
    ref_camera: int | None = None
    ref_marker: int | None = None
    probe_scale: float = 1.0
    max_samples_per_pair: int | None = None
    sample_seed: int = 0
    ambiguity_handling: bool = True
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.tau_ratio < 1.0:
            raise ValidationError(f"tau_ratio must be >= 1, got {self.tau_ratio}")
        if self.tau_n < 1.0:
            raise ValidationError(f"tau_n must be >= 1, got {self.tau_n}")
        if self.probe_scale <= 0:
            raise ValidationError(f"probe_scale must be positive, got {self.probe_scale}")
        if self.max_samples_per_pair is not None and self.max_samples_per_pair < 1:
            raise ValidationError("max_samples_per_pair must be >= 1")


@dataclass
class CalibrationArtifacts:
    """Intermediate products kept for diagnostics and graph export."""

    candidate_sets: dict[tuple[int, int, int], CandidateSet]
    camera_graph: PoseGraph
    marker_graph: PoseGraph
    camera_tree: list
    marker_tree: list


def detection_candidates(
    dataset, config: CalibrationConfig = CalibrationConfig()
) -> dict[tuple[int, int, int], CandidateSet]:
    """Candidate marker-to-camera poses for every detection.

    Detections whose corners are degenerate or whose solutions all fall
    behind the camera get an empty set and drop out of later stages.
    """
    template = MarkerTemplate(dataset.marker_side)
    out = {}
    for d in dataset.detections:
        try:
            h = estimate_two_poses(d, dataset.intrinsics[d.cam], template)
        except (DegenerateQuad, NoValidPose):
            out[d.key] = candidate_set(None, config.tau_ratio)
            continue
        if config.ambiguity_handling:
            out[d.key] = candidate_set(h, config.tau_ratio)
        else:
            out[d.key] = CandidateSet((h.best,), h.ratio)
    return out


def _pick_reference(requested: int | None, vertices, kind: str) -> int:
    if requested is None:
        return min(vertices)
    if requested not in vertices:
        raise ValidationError(
            f"reference {kind} {requested} has no usable detections"
        )
    return requested


def _structure_side(
    accumulators: dict, config: CalibrationConfig, vertices, reference: int
) -> tuple[StructureEstimate, PoseGraph, list]:
    probe = probe_points(config.probe_scale)
    for acc in accumulators.values():
        select_optimal(acc, probe)
    graph = build_graph(list(accumulators.values()), config.tau_n, vertices=vertices)
    tree = minimum_spanning_tree(graph)
    return chain_poses(graph, tree, reference), graph, tree


def calibrate(
    dataset, config: CalibrationConfig = CalibrationConfig()
) -> tuple[CalibrationResult, CalibrationArtifacts]:
    """Full offline calibration from detections alone.

    Returns the refined result plus the intermediate artifacts (candidate
    sets, co-observation graphs, spanning trees). Cameras that appear in
    the intrinsics file but never detect anything are left out of the
    estimate; raises DisconnectedGraph when the observed cameras (or
    markers) do not form one connected component.
    """
    if not dataset.detections:
        raise ValidationError("dataset contains no detections")

    candidate_sets = detection_candidates(dataset, config)

    cam_vertices = sorted({d.cam for d in dataset.detections})
    marker_vertices = sorted({d.marker for d in dataset.detections})
    ref_cam = _pick_reference(config.ref_camera, cam_vertices, "camera")
    ref_marker = _pick_reference(config.ref_marker, marker_vertices, "marker")

    cam_pairs = collect_camera_pairs(
        candidate_sets,
        max_samples_per_pair=config.max_samples_per_pair,
        seed=config.sample_seed,
    )
    marker_pairs = collect_marker_pairs(
        candidate_sets,
        max_samples_per_pair=config.max_samples_per_pair,
        seed=config.sample_seed,
    )
    cams, cam_graph, cam_tree = _structure_side(cam_pairs, config, cam_vertices, ref_cam)
    markers, marker_graph, marker_tree = _structure_side(
        marker_pairs, config, marker_vertices, ref_marker
    )

    # Per-frame grouping first: frame_candidates scans the whole mapping it
    # is handed, so feeding it one frame's slice keeps this stage linear.
    per_frame: dict[int, dict] = {}
    for key, cset in candidate_sets.items():
        per_frame.setdefault(key[0], {})[key] = cset
    probe = probe_points(config.probe_scale)
    frame_sets = [
        frame_candidates(t, per_frame.get(t, {}), cams, markers)
        for t in range(dataset.n_frames)
    ]
    traj = build_trajectory(frame_sets, probe)

    init = CalibrationResult(
        cams=cams, markers=markers, traj=traj, marker_side=dataset.marker_side
    )
    result = refine_all(
        init,
        dataset.detections,
        dataset.intrinsics,
        opts=config.solver,
        template=MarkerTemplate(dataset.marker_side),
    )
    artifacts = CalibrationArtifacts(
        candidate_sets=candidate_sets,
        camera_graph=cam_graph,
        marker_graph=marker_graph,
        camera_tree=cam_tree,
        marker_tree=marker_tree,
    )
    return result, artifacts


class TrackSession:
    """Stateful frame-by-frame tracking against a fixed calibration.

    Feeds each frame's detections to the pose solver, warm-starting from
    the previous successful frame. Frames with no detections produce None
    and clear nothing: the next frame still warm-starts from the last
    success.
    """

    def __init__(
        self,
        result: CalibrationResult,
        intrinsics: dict[int, CameraIntrinsics],
        opts: SolverOptions = SolverOptions(),
    ):
        self.tracker = FrameTracker(
            result.cams.poses,
            result.markers.poses,
            intrinsics,
            MarkerTemplate(result.marker_side),
        )
        self.opts = opts
        self.warm: RigidTransform | None = None
        self.last_rms: float | None = None

    def feed(self, dets: list[Detection]) -> RigidTransform | None:
        pose, rms = self.tracker.solve(dets, warm=self.warm, opts=self.opts)
        if pose is not None:
            self.warm = pose
        self.last_rms = rms
        return pose


def track_sequence(
    result: CalibrationResult,
    detections: list[Detection],
    intrinsics: dict[int, CameraIntrinsics],
    n_frames: int | None = None,
    opts: SolverOptions = SolverOptions(),
) -> tuple[Trajectory, dict[int, float], list[float]]:
    """Track every frame of a recorded sequence.

    Returns the trajectory (frames without detections get a None pose),
    per-frame rms for the solved frames, and per-frame wall-clock seconds
    (timing is reported to the caller, never written into result files).
    """
    if n_frames is None:
        n_frames = 1 + max((d.t for d in detections), default=-1)
    by_frame: dict[int, list[Detection]] = {}
    for d in detections:
        by_frame.setdefault(d.t, []).append(d)

    session = TrackSession(result, intrinsics, opts)
    traj = Trajectory()
    rms_by_frame: dict[int, float] = {}
    times = []
    for t in range(n_frames):
        t0 = time.perf_counter()
        pose = session.feed(by_frame.get(t, []))
        times.append(time.perf_counter() - t0)
        traj.frames[t] = FrameState(pose, SOURCE_TRACKED)
        if pose is not None:
            rms_by_frame[t] = session.last_rms
    return traj, rms_by_frame, times
