"""Sparse Levenberg-Marquardt refinement and the per-frame tracking solver.

The refinement minimizes the squared reprojection error of every observed
corner over all camera poses, marker poses and frame poses at once. Each
transform is parameterized by a 6-vector (Rodrigues rotation plus
translation); the reference camera and reference marker are pinned to the
identity so the problem has no free gauge directions. The Jacobian is
analytic and sparse: a residual row only touches the parameter blocks of its
own camera, marker and frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import DegenerateQuad, NoValidPose, NumericalFailure
from .frame_init import SOURCE_REFINED, FrameState, Trajectory
from .geometry import (
    CameraIntrinsics,
    MarkerTemplate,
    RigidTransform,
    TwistParams,
    compose,
    from_twist,
    invert,
    project_arrays,
    rotation_from_rvec,
    rotation_jacobian_factor,
    skew_many,
    to_twist,
)
from .planar_pose import Detection, estimate_two_poses
from .structure_init import StructureEstimate

BEHIND_RESIDUAL = 1e6  # px, replaces residuals of points behind the camera

# below this mean absolute residual (px) the fit counts as numerically exact
_ZERO_RESIDUAL_FLOOR = 1e-12

REASON_MAX_ITERS = "max_iters"
REASON_MIN_IMPROVE = "min_improve"
REASON_LAMBDA_LIMIT = "lambda_limit"
REASON_ZERO_RESIDUAL = "zero_residual"


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 10000
    min_improve: float = 1e-4  # px, mean absolute residual improvement
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    max_lambda: float = 1e10

    def __post_init__(self):
        for name in ("max_iters", "min_improve", "lambda_init", "lambda_up",
                     "lambda_down", "max_lambda"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LmReport:
    iterations: int  # linear-solve attempts
    accepted_steps: int
    initial_rms: float  # px, per corner
    final_rms: float
    reason: str
    cost_history: tuple[float, ...]  # sse after each accepted step


@dataclass(frozen=True)
class FitReport:
    initial_rms: float
    final_rms: float
    iterations: int
    per_frame_rms: dict[int, float]
    reason: str = ""


@dataclass(frozen=True)
class CalibrationResult:
    """Estimated camera set, marker structure and object trajectory."""

    cams: StructureEstimate
    markers: StructureEstimate
    traj: Trajectory
    marker_side: float
    report: FitReport | None = None


@dataclass(frozen=True)
class ParamLayout:
    """Offsets of the 6-parameter blocks; reference entities own none."""

    ref_camera: int
    ref_marker: int
    camera_ids: tuple[int, ...]  # non-reference, sorted
    marker_ids: tuple[int, ...]
    frame_ids: tuple[int, ...]
    camera_offsets: dict[int, int]
    marker_offsets: dict[int, int]
    frame_offsets: dict[int, int]
    total: int

    @staticmethod
    def build(cameras, markers, frames, ref_camera: int, ref_marker: int) -> ParamLayout:
        cam_set, marker_set = set(cameras), set(markers)
        if ref_camera not in cam_set:
            raise ValueError(f"reference camera {ref_camera} not in {sorted(cam_set)}")
        if ref_marker not in marker_set:
            raise ValueError(f"reference marker {ref_marker} not in {sorted(marker_set)}")
        cam_ids = tuple(sorted(cam_set - {ref_camera}))
        marker_ids = tuple(sorted(marker_set - {ref_marker}))
        frame_ids = tuple(sorted(frames))
        cam_off = {c: 6 * i for i, c in enumerate(cam_ids)}
        base = 6 * len(cam_ids)
        marker_off = {m: base + 6 * i for i, m in enumerate(marker_ids)}
        base += 6 * len(marker_ids)
        frame_off = {t: base + 6 * i for i, t in enumerate(frame_ids)}
        total = base + 6 * len(frame_ids)
        return ParamLayout(
            ref_camera, ref_marker, cam_ids, marker_ids, frame_ids,
            cam_off, marker_off, frame_off, total,
        )


def _put_twist(x: np.ndarray, offset: int, pose: RigidTransform) -> None:
    tw = to_twist(pose)
    x[offset : offset + 3] = tw.rvec
    x[offset + 3 : offset + 6] = tw.tvec


def _get_twist(x: np.ndarray, offset: int) -> RigidTransform:
    return from_twist(TwistParams(x[offset : offset + 3], x[offset + 3 : offset + 6]))


def pack_params(
    cams: dict[int, RigidTransform],
    markers: dict[int, RigidTransform],
    frames: dict[int, RigidTransform],
    layout: ParamLayout,
) -> np.ndarray:
    x = np.zeros(layout.total)
    for c, off in layout.camera_offsets.items():
        _put_twist(x, off, cams[c])
    for m, off in layout.marker_offsets.items():
        _put_twist(x, off, markers[m])
    for t, off in layout.frame_offsets.items():
        _put_twist(x, off, frames[t])
    return x


def unpack_params(x: np.ndarray, layout: ParamLayout):
    """Pose dicts (references included as exact identity) from a flat vector."""
    cams = {layout.ref_camera: RigidTransform.identity()}
    for c, off in layout.camera_offsets.items():
        cams[c] = _get_twist(x, off)
    markers = {layout.ref_marker: RigidTransform.identity()}
    for m, off in layout.marker_offsets.items():
        markers[m] = _get_twist(x, off)
    frames = {t: _get_twist(x, off) for t, off in layout.frame_offsets.items()}
    return cams, markers, frames


@dataclass(frozen=True)
class ResidualSystem:
    residuals: np.ndarray  # (8 * n_obs,) predicted - observed, px
    jacobian: sparse.csr_matrix  # rows align with residuals


class ResidualBuilder:
    """Vectorized residual and sparse-Jacobian assembly over all detections.

    Observation order is fixed to sorted (t, cam, marker); each observation
    contributes 8 consecutive residual scalars (x and y of 4 corners).
    """

    def __init__(
        self,
        detections: list[Detection],
        intrinsics: dict[int, CameraIntrinsics],
        template: MarkerTemplate,
        layout: ParamLayout | None = None,
    ):
        dets = sorted(detections, key=lambda d: d.key)
        self.layout = layout
        self.template = template
        if layout is None:
            self.cam_ids = sorted({d.cam for d in dets})
            self.marker_ids = sorted({d.marker for d in dets})
            self.frame_ids = sorted({d.t for d in dets})
        else:
            known_cams = {layout.ref_camera, *layout.camera_ids}
            known_markers = {layout.ref_marker, *layout.marker_ids}
            frame_set = set(layout.frame_ids)
            for d in dets:
                if d.cam not in known_cams:
                    raise ValueError(f"detection for camera {d.cam} outside the layout")
                if d.marker not in known_markers:
                    raise ValueError(f"detection for marker {d.marker} outside the layout")
                if d.t not in frame_set:
                    raise ValueError(f"detection at frame {d.t} outside the layout")
            self.cam_ids = sorted(known_cams)
            self.marker_ids = sorted(known_markers)
            self.frame_ids = sorted(layout.frame_ids)
        cam_pos = {c: i for i, c in enumerate(self.cam_ids)}
        marker_pos = {m: i for i, m in enumerate(self.marker_ids)}
        frame_pos = {t: i for i, t in enumerate(self.frame_ids)}

        self.n_obs = len(dets)
        self.obs_t = np.array([d.t for d in dets], dtype=np.int64)
        self.i_cam = np.array([cam_pos[d.cam] for d in dets], dtype=np.int64)
        self.i_marker = np.array([marker_pos[d.marker] for d in dets], dtype=np.int64)
        self.i_frame = np.array([frame_pos[d.t] for d in dets], dtype=np.int64)
        self.obs_pix = np.array([d.corners for d in dets])  # (N,4,2)

        for d in dets:
            if d.cam not in intrinsics:
                raise ValueError(f"no intrinsics for camera {d.cam}")
        fx = np.array([intrinsics[d.cam].fx for d in dets])
        fy = np.array([intrinsics[d.cam].fy for d in dets])
        cx = np.array([intrinsics[d.cam].cx for d in dets])
        cy = np.array([intrinsics[d.cam].cy for d in dets])
        dist = np.array([intrinsics[d.cam].dist for d in dets])  # (N,5)
        self._fx4 = np.repeat(fx, 4)
        self._fy4 = np.repeat(fy, 4)
        self._cx4 = np.repeat(cx, 4)
        self._cy4 = np.repeat(cy, 4)
        self._dist4 = np.repeat(dist, 4, axis=0)
        self._sk_u = skew_many(template.corners)  # (4,3,3)

        if layout is not None:
            self.cam_cols = np.array(
                [layout.camera_offsets.get(d.cam, -1) for d in dets], dtype=np.int64
            )
            self.marker_cols = np.array(
                [layout.marker_offsets.get(d.marker, -1) for d in dets], dtype=np.int64
            )
            self.frame_cols = np.array(
                [layout.frame_offsets[d.t] for d in dets], dtype=np.int64
            )

    # -- pose table helpers -------------------------------------------------

    def _tables(self, poses: dict[int, RigidTransform], ids: list[int]):
        n = len(ids)
        rot = np.empty((n, 3, 3))
        trans = np.empty((n, 3))
        for k, i in enumerate(ids):
            p = poses[i]
            rot[k] = p.rotation
            trans[k] = p.translation
        return rot, trans

    def residuals_from_poses(
        self,
        cams: dict[int, RigidTransform],
        markers: dict[int, RigidTransform],
        frames: dict[int, RigidTransform],
    ) -> np.ndarray:
        r, *_ = self._assemble_core(cams, markers, frames, want_jacobian=False)
        return r

    def residuals(self, x: np.ndarray) -> np.ndarray:
        cams, markers, frames = unpack_params(x, self._require_layout())
        return self.residuals_from_poses(cams, markers, frames)

    def _require_layout(self) -> ParamLayout:
        if self.layout is None:
            raise ValueError("builder constructed without a parameter layout")
        return self.layout

    def canonicalize(self, x: np.ndarray) -> np.ndarray:
        """Re-map any rotation block that drifted past pi back to [0, pi]."""
        layout = self._require_layout()
        out = x.copy()
        for off in range(0, layout.total, 6):
            rvec = out[off : off + 3]
            if float(rvec @ rvec) > math.pi ** 2:
                tw = to_twist(from_twist(TwistParams(rvec, out[off + 3 : off + 6])))
                out[off : off + 3] = tw.rvec
        return out

    # -- assembly -----------------------------------------------------------

    def _assemble_core(self, cams, markers, frames, want_jacobian: bool):
        rc_all, tc_all = self._tables(cams, self.cam_ids)
        rm_all, tm_all = self._tables(markers, self.marker_ids)
        rg_all, tg_all = self._tables(frames, self.frame_ids)

        rc = rc_all[self.i_cam]  # (N,3,3)
        tc = tc_all[self.i_cam]
        rm = rm_all[self.i_marker]
        tm = tm_all[self.i_marker]
        rg = rg_all[self.i_frame]
        tg = tg_all[self.i_frame]

        u = self.template.corners  # (4,3)
        y = np.einsum("nij,lj->nli", rm, u) + tm[:, None, :]  # (N,4,3) marker pts in ref-marker frame
        w = np.einsum("nij,nlj->nli", rg, y) + tg[:, None, :]  # in ref-camera frame
        a = w - tc[:, None, :]
        p_cam = np.einsum("nji,nlj->nli", rc, a)  # R_c^T (w - t_c)

        pix, pixjac, front = project_arrays(
            p_cam.reshape(-1, 3),
            self._fx4, self._fy4, self._cx4, self._cy4, self._dist4,
            want_jacobian=want_jacobian,
        )
        res = pix - self.obs_pix.reshape(-1, 2)
        res[~front] = BEHIND_RESIDUAL
        return res.reshape(-1), (rc, rg, rm, y, a, pixjac, front)

    def system(self, x: np.ndarray) -> ResidualSystem:
        layout = self._require_layout()
        cams, markers, frames = unpack_params(x, layout)
        r, (rc, rg, rm, y, a, pixjac, front) = self._assemble_core(
            cams, markers, frames, want_jacobian=True
        )
        n = self.n_obs
        pj = pixjac.reshape(n, 4, 2, 3)
        pj = np.where(front.reshape(n, 4, 1, 1), pj, 0.0)

        # per-entity Rodrigues derivative factors, gathered per observation
        s_cam = self._factor_table(x, layout.camera_offsets, self.cam_ids, self.i_cam, negate=True)
        s_marker = self._factor_table(x, layout.marker_offsets, self.marker_ids, self.i_marker, negate=False)
        s_frame = self._factor_table(x, layout.frame_offsets, self.frame_ids, self.i_frame, negate=False)

        rct = rc.transpose(0, 2, 1)
        rct_rg = np.matmul(rct, rg)
        rct_rg_rm = np.matmul(rct_rg, rm)

        sk_a = skew_many(a)  # (N,4,3,3)
        sk_y = skew_many(y)

        # d p_cam / d (rvec, tvec) per block, then chain with the pixel jacobian
        rows, cols, data = [], [], []

        def emit(obs_mask, col_base, rot_part, trans_part):
            block = np.concatenate(
                [np.matmul(pj, rot_part), np.matmul(pj, trans_part)], axis=-1
            )  # (N,4,2,6)
            idx = np.nonzero(obs_mask)[0]
            if idx.size == 0:
                return
            k = idx.size
            row_idx = (
                (8 * idx)[:, None, None, None]
                + (2 * np.arange(4))[None, :, None, None]
                + np.arange(2)[None, None, :, None]
                + np.zeros((1, 1, 1, 6), dtype=np.int64)
            )
            col_idx = (
                col_base[idx][:, None, None, None]
                + np.arange(6)[None, None, None, :]
                + np.zeros((1, 4, 2, 1), dtype=np.int64)
            )
            rows.append(np.broadcast_to(row_idx, (k, 4, 2, 6)).reshape(-1))
            cols.append(np.broadcast_to(col_idx, (k, 4, 2, 6)).reshape(-1))
            data.append(block[idx].reshape(-1))

        # camera block: p_cam = R(-r_c) a, so the sign works out positive
        cam_rot = np.matmul(np.matmul(rct[:, None], sk_a), s_cam[:, None])
        cam_trans = np.broadcast_to(-rct[:, None], sk_a.shape)
        emit(self.cam_cols >= 0, self.cam_cols, cam_rot, cam_trans)

        frame_rot = -np.matmul(np.matmul(rct_rg[:, None], sk_y), s_frame[:, None])
        frame_trans = np.broadcast_to(rct[:, None], sk_y.shape)
        emit(self.frame_cols >= 0, self.frame_cols, frame_rot, frame_trans)

        marker_rot = -np.matmul(
            np.matmul(rct_rg_rm[:, None], self._sk_u[None]), s_marker[:, None]
        )
        marker_trans = np.broadcast_to(rct_rg[:, None], (n, 4, 3, 3))
        emit(self.marker_cols >= 0, self.marker_cols, marker_rot, marker_trans)

        if data:
            jac = sparse.coo_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                shape=(8 * n, layout.total),
            ).tocsr()
        else:
            jac = sparse.csr_matrix((8 * n, layout.total))
        return ResidualSystem(r, jac)

    def _factor_table(self, x, offsets, ids, idx, negate: bool):
        """(N,3,3) gathered S factors; zero rows for reference entities.

        Zero reference rows only ever multiply blocks that the column mask
        discards, so they never reach the Jacobian.
        """
        table = np.zeros((len(ids), 3, 3))
        pos = {i: k for k, i in enumerate(ids)}
        for i, off in offsets.items():
            rvec = -x[off : off + 3] if negate else x[off : off + 3]
            table[pos[i]] = rotation_jacobian_factor(rvec)
        return table[idx]

    def per_frame_rms(self, residuals: np.ndarray) -> dict[int, float]:
        sq = (residuals.reshape(self.n_obs, 8) ** 2).sum(axis=1)
        out: dict[int, float] = {}
        for t in self.frame_ids:
            mask = self.obs_t == t
            count = int(mask.sum())
            if count:
                out[t] = float(np.sqrt(sq[mask].sum() / (4 * count)))
        return out


def build_residual_system(
    params: np.ndarray,
    layout: ParamLayout,
    detections: list[Detection],
    intrinsics: dict[int, CameraIntrinsics],
    template: MarkerTemplate,
) -> ResidualSystem:
    """One-shot residual/Jacobian evaluation (see ResidualBuilder to reuse)."""
    return ResidualBuilder(detections, intrinsics, template, layout).system(params)


def global_cost(
    cams: dict[int, RigidTransform],
    markers: dict[int, RigidTransform],
    traj: Trajectory | dict[int, RigidTransform],
    detections: list[Detection],
    intrinsics: dict[int, CameraIntrinsics],
    template: MarkerTemplate,
) -> tuple[float, float]:
    """(sse px^2, per-corner rms px) of the reprojection error over all detections."""
    if isinstance(traj, Trajectory):
        frames = {t: pose for t, pose in traj.tracked_items()}
    else:
        frames = dict(traj)
    builder = ResidualBuilder(detections, intrinsics, template)
    r = builder.residuals_from_poses(cams, markers, frames)
    sse = float(r @ r)
    return sse, math.sqrt(sse / (4 * builder.n_obs))


def _rms(cost: float, n_residuals: int) -> float:
    return math.sqrt(cost / (n_residuals / 2.0)) if n_residuals else 0.0


def lm_minimize(
    initial: np.ndarray, builder, opts: SolverOptions = SolverOptions()
) -> tuple[np.ndarray, LmReport]:
    """Damped normal-equation iteration with strict cost-decrease acceptance.

    `builder` provides system(x) -> ResidualSystem and residuals(x); an
    optional canonicalize(x) hook runs after every accepted step. A step is
    accepted only if the cost strictly decreases; lambda shrinks on accept
    and grows on reject. Terminates on the iteration budget, on mean
    absolute improvement below opts.min_improve, on lambda passing
    opts.max_lambda, or on a numerically zero residual.
    """
    x = np.array(initial, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("non-finite initial parameters")
    sys0 = builder.system(x)
    r, jac = sys0.residuals, sys0.jacobian
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise NumericalFailure("non-finite initial cost")
    n_res = r.size
    mean_abs = float(np.abs(r).mean()) if n_res else 0.0
    initial_rms = _rms(cost, n_res)
    history = [cost]
    lam = opts.lambda_init
    iters = 0
    accepted = 0
    reason = REASON_MAX_ITERS

    if mean_abs < _ZERO_RESIDUAL_FLOOR:
        reason = REASON_ZERO_RESIDUAL
    else:
        eye = sparse.identity(x.size, format="csc")
        done = False
        while not done and iters < opts.max_iters:
            jtj = (jac.T @ jac).tocsc()
            jtr = jac.T @ r
            stepped = False
            while iters < opts.max_iters:
                iters += 1
                step = _solve_damped(jtj, eye, jtr, lam)
                if step is None:
                    if lam >= opts.max_lambda:
                        raise NumericalFailure(
                            "singular normal equations at maximum damping"
                        )
                    lam *= opts.lambda_up
                    continue
                x_try = x + step
                r_try = builder.residuals(x_try)
                cost_try = float(r_try @ r_try)
                if math.isfinite(cost_try) and cost_try < cost:
                    x, r, cost = x_try, r_try, cost_try
                    if hasattr(builder, "canonicalize"):
                        x = builder.canonicalize(x)
                    new_mean = float(np.abs(r).mean())
                    improvement = mean_abs - new_mean
                    mean_abs = new_mean
                    history.append(cost)
                    accepted += 1
                    lam *= opts.lambda_down
                    stepped = True
                    if mean_abs < _ZERO_RESIDUAL_FLOOR:
                        reason, done = REASON_ZERO_RESIDUAL, True
                    elif improvement < opts.min_improve:
                        reason, done = REASON_MIN_IMPROVE, True
                    break
                lam *= opts.lambda_up
                if lam > opts.max_lambda:
                    reason, done = REASON_LAMBDA_LIMIT, True
                    break
            if done:
                break
            if not stepped:
                break  # iteration budget exhausted mid-climb
            jac = builder.system(x).jacobian

    report = LmReport(
        iterations=iters,
        accepted_steps=accepted,
        initial_rms=initial_rms,
        final_rms=_rms(cost, n_res),
        reason=reason,
        cost_history=tuple(history),
    )
    return x, report


def _solve_damped(jtj, eye, jtr, lam):
    try:
        step = spsolve(jtj + lam * eye, -jtr)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(step)):
        return None
    return step


def refine_all(
    init: CalibrationResult,
    detections: list[Detection],
    intrinsics: dict[int, CameraIntrinsics],
    opts: SolverOptions = SolverOptions(),
    template: MarkerTemplate | None = None,
) -> CalibrationResult:
    """Jointly refine cameras, markers and all tracked frame poses.

    Reference camera and reference marker stay exactly identity. Untracked
    frames pass through unchanged.
    """
    tpl = template if template is not None else MarkerTemplate(init.marker_side)
    tracked = {t: pose for t, pose in init.traj.tracked_items()}
    layout = ParamLayout.build(
        init.cams.poses, init.markers.poses, tracked,
        init.cams.reference, init.markers.reference,
    )
    builder = ResidualBuilder(detections, intrinsics, tpl, layout)
    x0 = pack_params(init.cams.poses, init.markers.poses, tracked, layout)
    x_opt, lm = lm_minimize(x0, builder, opts)
    cams, markers, frames = unpack_params(x_opt, layout)

    traj = Trajectory()
    for t, state in init.traj.frames.items():
        if state.pose is None:
            traj.frames[t] = state
        else:
            traj.frames[t] = FrameState(frames[t], SOURCE_REFINED)
    report = FitReport(
        initial_rms=lm.initial_rms,
        final_rms=lm.final_rms,
        iterations=lm.iterations,
        per_frame_rms=builder.per_frame_rms(builder.residuals(x_opt)),
        reason=lm.reason,
    )
    return CalibrationResult(
        cams=StructureEstimate(init.cams.reference, cams, init.cams.tree_edges),
        markers=StructureEstimate(init.markers.reference, markers, init.markers.tree_edges),
        traj=traj,
        marker_side=init.marker_side,
        report=report,
    )


# ---------------------------------------------------------------------------
# Per-frame tracking
# ---------------------------------------------------------------------------


class FrameTracker:
    """Six-parameter pose solver over a fixed calibration.

    Splitting construction from solving keeps the per-frame cost low: all
    camera- and marker-dependent quantities are precomputed once.
    """

    def __init__(
        self,
        cams: dict[int, RigidTransform],
        markers: dict[int, RigidTransform],
        intrinsics: dict[int, CameraIntrinsics],
        template: MarkerTemplate,
    ):
        self.cams = cams
        self.markers = markers
        self.intrinsics = intrinsics
        self.template = template
        # per camera: R_c^T and R_c^T t_c; per marker: template corners in the
        # reference-marker frame
        self._rct = {c: p.rotation.T.copy() for c, p in cams.items()}
        self._rct_tc = {c: self._rct[c] @ p.translation for c, p in cams.items()}
        self._y = {m: p.apply(template.corners) for m, p in markers.items()}
        self.last_iterations = 0

    def _frame_arrays(self, dets: list[Detection]):
        rct = np.stack([self._rct[d.cam] for d in dets])  # (K,3,3)
        rct_tc = np.stack([self._rct_tc[d.cam] for d in dets])  # (K,3)
        ypts = np.stack([self._y[d.marker] for d in dets])  # (K,4,3)
        obs = np.stack([d.corners for d in dets]).reshape(-1, 2)
        fx = np.repeat([self.intrinsics[d.cam].fx for d in dets], 4)
        fy = np.repeat([self.intrinsics[d.cam].fy for d in dets], 4)
        cx = np.repeat([self.intrinsics[d.cam].cx for d in dets], 4)
        cy = np.repeat([self.intrinsics[d.cam].cy for d in dets], 4)
        dist = np.repeat([self.intrinsics[d.cam].dist for d in dets], 4, axis=0)
        sk_y = skew_many(ypts)  # (K,4,3,3)
        return rct, rct_tc, ypts, obs, fx, fy, cx, cy, dist, sk_y

    def _assemble(self, arrays, rv, tv, want_jac):
        rct, rct_tc, ypts, obs, fx, fy, cx, cy, dist, sk_y = arrays
        k = rct.shape[0]
        rot = rotation_from_rvec(rv)
        w = np.einsum("ij,klj->kli", rot, ypts) + tv
        p_cam = np.einsum("kij,klj->kli", rct, w) - rct_tc[:, None, :]
        pix, pixjac, front = project_arrays(
            p_cam.reshape(-1, 3), fx, fy, cx, cy, dist, want_jacobian=want_jac
        )
        r = pix - obs
        r[~front] = BEHIND_RESIDUAL
        if not want_jac:
            return r.reshape(-1), None
        pj = np.where(front[:, None, None], pixjac, 0.0).reshape(k, 4, 2, 3)
        s_g = rotation_jacobian_factor(rv, rot)
        rct_rg = np.matmul(rct, rot)
        dp_rot = -np.matmul(np.matmul(rct_rg[:, None], sk_y), s_g)
        block = np.concatenate(
            [
                np.matmul(pj, dp_rot),
                np.matmul(pj, np.broadcast_to(rct[:, None], sk_y.shape)),
            ],
            axis=-1,
        )
        return r.reshape(-1), block.reshape(-1, 6)

    def cold_start(self, dets: list[Detection]) -> RigidTransform:
        """Initial pose chosen by whole-frame cost.

        Both planar solutions of every detection are mapped into the gauge
        and scored by total reprojection cost over all of the frame's
        detections; the cheapest wins. Scoring both solutions keeps an
        ambiguous first view from starting the track in the flipped basin.
        """
        arrays = self._frame_arrays(dets)
        best = None
        for d in sorted(dets, key=lambda d: d.key):
            try:
                h = estimate_two_poses(d, self.intrinsics[d.cam], self.template)
            except (DegenerateQuad, NoValidPose):
                continue
            inv_marker = invert(self.markers[d.marker])
            for t_mc in (h.best, h.alt):
                g = compose(compose(self.cams[d.cam], t_mc), inv_marker)
                tw = to_twist(g)
                r, _ = self._assemble(arrays, tw.rvec, tw.tvec, False)
                cost = float(r @ r)
                if math.isfinite(cost) and (best is None or cost < best[0]):
                    best = (cost, g)
        if best is None:
            raise NoValidPose("no usable cold-start candidate in frame")
        return best[1]

    def solve(
        self,
        dets: list[Detection],
        warm: RigidTransform | None = None,
        opts: SolverOptions = SolverOptions(),
    ) -> tuple[RigidTransform | None, float | None]:
        """(pose, per-corner rms) for one frame; (None, None) when empty."""
        if not dets:
            return None, None
        for d in dets:
            if d.cam not in self.cams or d.marker not in self.markers:
                raise ValueError(
                    f"detection (cam={d.cam}, marker={d.marker}) outside calibration"
                )
        k = len(dets)
        arrays = self._frame_arrays(dets)

        pose = warm if warm is not None else self.cold_start(dets)
        tw = to_twist(pose)
        rvec, tvec = tw.rvec.copy(), tw.tvec.copy()

        def assemble(rv, tv, want_jac):
            return self._assemble(arrays, rv, tv, want_jac)

        r, jac = assemble(rvec, tvec, True)
        cost = float(r @ r)
        if not math.isfinite(cost):
            raise NumericalFailure("non-finite tracking cost")
        mean_abs = float(np.abs(r).mean())
        lam = opts.lambda_init
        iters = 0
        while iters < opts.max_iters and mean_abs >= _ZERO_RESIDUAL_FLOOR:
            jtj = jac.T @ jac
            jtr = jac.T @ r
            stepped = False
            while iters < opts.max_iters:
                iters += 1
                try:
                    step = np.linalg.solve(jtj + lam * np.eye(6), -jtr)
                except np.linalg.LinAlgError:
                    step = None
                if step is None or not np.all(np.isfinite(step)):
                    if lam >= opts.max_lambda:
                        raise NumericalFailure("singular tracking system")
                    lam *= opts.lambda_up
                    continue
                rv_try = rvec + step[:3]
                tv_try = tvec + step[3:]
                r_try, _ = assemble(rv_try, tv_try, False)
                cost_try = float(r_try @ r_try)
                if math.isfinite(cost_try) and cost_try < cost:
                    rvec, tvec, r, cost = rv_try, tv_try, r_try, cost_try
                    if float(rvec @ rvec) > math.pi ** 2:
                        tw = to_twist(from_twist(TwistParams(rvec, tvec)))
                        rvec = tw.rvec.copy()
                    new_mean = float(np.abs(r).mean())
                    improvement = mean_abs - new_mean
                    mean_abs = new_mean
                    lam *= opts.lambda_down
                    stepped = True
                    if improvement < opts.min_improve:
                        stepped = False  # converged; leave the outer loop
                    break
                lam *= opts.lambda_up
                if lam > opts.max_lambda:
                    stepped = False
                    break
            if not stepped:
                break
            r, jac = assemble(rvec, tvec, True)
        self.last_iterations = iters
        rms = math.sqrt(cost / (4 * k))
        return from_twist(TwistParams(rvec, tvec)), rms


def track_frame(
    dets_t: list[Detection],
    cams: dict[int, RigidTransform],
    markers: dict[int, RigidTransform],
    intrinsics: dict[int, CameraIntrinsics],
    template: MarkerTemplate,
    warm: RigidTransform | None = None,
    opts: SolverOptions = SolverOptions(),
) -> tuple[RigidTransform | None, float | None]:
    """One-shot frame solve; see FrameTracker for the reusable fast path."""
    tracker = FrameTracker(cams, markers, intrinsics, template)
    return tracker.solve(dets_t, warm, opts)
