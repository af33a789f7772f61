"""Two-solution planar pose estimation for square markers.

A plane seen under perspective admits up to two physically plausible poses
(the second is a reflection about the plane orthogonal to the viewing ray of
the marker center). This module recovers both, scores each by its RMS corner
reprojection error, and exposes the error ratio as an ambiguity measure: a
ratio near 1 means the detection alone cannot tell the two poses apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateQuad, NoValidPose, PointBehindCamera
from .geometry import (
    CameraIntrinsics,
    MarkerTemplate,
    RigidTransform,
    project,
    undistort_to_normalized,
)

# ratio reported when only one decomposition places the marker in front of
# the camera; large enough to clear any plausible acceptance threshold
SINGLE_SOLUTION_RATIO = 1e12

_ERR_FLOOR = 1e-12  # px; denominator clamp for the ratio


@dataclass(frozen=True)
class Detection:
    """One marker seen by one camera in one frame."""

    t: int
    cam: int
    marker: int
    corners: np.ndarray  # (4,2) pixels, ordered like MarkerTemplate.corners

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64).reshape(4, 2)
        c.flags.writeable = False
        object.__setattr__(self, "corners", c)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.t, self.cam, self.marker)


@dataclass(frozen=True)
class PoseHypothesis:
    """The two candidate marker-to-camera poses with their reprojection errors.

    err_best <= err_alt always; ratio = err_alt / max(err_best, 1e-12),
    clamped to >= 1. When only one pose survives the in-front check, alt
    duplicates best and ratio is the SINGLE_SOLUTION_RATIO sentinel.
    """

    best: RigidTransform
    alt: RigidTransform
    err_best: float
    err_alt: float
    ratio: float


@dataclass(frozen=True)
class CandidateSet:
    """Zero, one or two marker-to-camera transforms kept for a detection."""

    transforms: tuple[RigidTransform, ...]
    ratio: float | None = None

    def __post_init__(self):
        if len(self.transforms) > 2:
            raise ValueError("at most two candidate transforms")

    def __len__(self) -> int:
        return len(self.transforms)


def _check_quad(corners: np.ndarray) -> None:
    x, y = corners[:, 0], corners[:, 1]
    area = 0.5 * abs(
        float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    )
    if area <= 1.0:
        raise DegenerateQuad(f"quad area {area:.3g} px^2 <= 1")
    for i in range(4):
        for j in range(i + 1, 4):
            if np.linalg.norm(corners[i] - corners[j]) < 1e-9:
                raise DegenerateQuad(f"corners {i} and {j} coincide")
    for i in range(4):
        a, b, c = corners[i], corners[(i + 1) % 4], corners[(i + 2) % 4]
        u, w = b - a, c - a
        tri = abs(float(u[0] * w[1] - u[1] * w[0]))
        if tri < 1e-9:
            raise DegenerateQuad(f"corners {i},{i+1},{i+2} are collinear")


def _normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity matrix moving the centroid to the origin, mean radius sqrt(2)."""
    centroid = pts.mean(axis=0)
    mean_dist = float(np.linalg.norm(pts - centroid, axis=1).mean())
    scale = math.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    return np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )


def _dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact homography from 4 correspondences (normalized DLT)."""
    ts, td = _normalization(src), _normalization(dst)
    s = src @ ts[:2, :2].T + ts[:2, 2]
    d = dst @ td[:2, :2].T + td[:2, 2]
    a = np.zeros((8, 9))
    for k in range(4):
        x, y = s[k]
        u, v = d[k]
        a[2 * k] = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]
        a[2 * k + 1] = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] < 1e-12:
        raise DegenerateQuad("homography system rank-deficient")
    h = vt[-1].reshape(3, 3)
    return np.linalg.inv(td) @ h @ ts


def _project_to_so3(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def _two_rotations(h: np.ndarray) -> list[np.ndarray]:
    """Two-fold rotation decomposition of a plane homography.

    Works in the frame rotated so the marker-center viewing ray becomes the
    z axis; there the top-left 2x2 block of the rotation is a scaled copy of
    the homography Jacobian at the template origin, and the missing row is
    determined up to the sign flip that produces the second solution.
    """
    v = h[:2, 2]
    jac = np.array(
        [
            [h[0, 0] - h[2, 0] * v[0], h[0, 1] - h[2, 1] * v[0]],
            [h[1, 0] - h[2, 0] * v[1], h[1, 1] - h[2, 1] * v[1]],
        ]
    )
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        rv = np.eye(3)
    else:
        t = math.sqrt(s * s + 1.0)
        k = np.array(
            [[0.0, 0.0, v[0]], [0.0, 0.0, v[1]], [-v[0], -v[1], 0.0]]
        ) / s
        sin_t = s / t
        cos_t = 1.0 / t
        rv = np.eye(3) + sin_t * k + (1.0 - cos_t) * (k @ k)

    b_mat = rv[:2, :2] - np.outer(v, rv[2, :2])
    det = b_mat[0, 0] * b_mat[1, 1] - b_mat[0, 1] * b_mat[1, 0]
    if abs(det) < 1e-12:
        raise NoValidPose("degenerate viewing geometry")
    a_mat = np.linalg.solve(b_mat, jac)

    aat = a_mat @ a_mat.T
    disc = math.sqrt((aat[0, 0] - aat[1, 1]) ** 2 + 4.0 * aat[0, 1] ** 2)
    gamma = math.sqrt(0.5 * (aat[0, 0] + aat[1, 1] + disc))
    if gamma < 1e-12:
        raise DegenerateQuad("vanishing homography Jacobian")
    r22 = a_mat / gamma

    gram = np.eye(2) - r22.T @ r22
    b0 = math.sqrt(max(gram[0, 0], 0.0))
    b1 = math.copysign(math.sqrt(max(gram[1, 1], 0.0)), gram[0, 1])
    rotations = []
    for sign in (1.0, -1.0):
        col1 = np.array([r22[0, 0], r22[1, 0], sign * b0])
        col2 = np.array([r22[0, 1], r22[1, 1], sign * b1])
        col3 = np.cross(col1, col2)
        rotations.append(_project_to_so3(rv @ np.column_stack([col1, col2, col3])))
    return rotations


def _translation_for(rot: np.ndarray, template_xy: np.ndarray, norm_xy: np.ndarray) -> np.ndarray:
    """Least-squares translation given a rotation and normalized observations."""
    w = np.column_stack([template_xy, np.zeros(4)]) @ rot.T  # (4,3) rotated corners
    lhs = np.zeros((8, 3))
    rhs = np.zeros(8)
    a, b = norm_xy[:, 0], norm_xy[:, 1]
    lhs[0::2, 0] = 1.0
    lhs[0::2, 2] = -a
    rhs[0::2] = a * w[:, 2] - w[:, 0]
    lhs[1::2, 1] = 1.0
    lhs[1::2, 2] = -b
    rhs[1::2] = b * w[:, 2] - w[:, 1]
    t, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return t


def _rms_error(
    pose: RigidTransform,
    template: MarkerTemplate,
    corners: np.ndarray,
    intr: CameraIntrinsics,
) -> float:
    pix = project(pose.apply(template.corners), intr)
    return float(np.sqrt(np.sum((pix - corners) ** 2) / 4.0))


def ambiguity_ratio(err_best: float, err_alt: float) -> float:
    """err_alt / err_best with the denominator clamped at 1e-12 px, >= 1."""
    return max(1.0, err_alt / max(err_best, _ERR_FLOOR))


def estimate_two_poses(
    d: Detection, intr: CameraIntrinsics, template: MarkerTemplate
) -> PoseHypothesis:
    """Both marker-to-camera pose candidates for one detection.

    Pipeline: undistort corners to normalized coordinates, fit the exact
    template-to-image homography, split it into the two plane-pose rotations,
    recover each translation by least squares, then score both solutions by
    RMS corner reprojection error (through the full distortion model, against
    the raw pixel corners).

    Raises DegenerateQuad for collinear or coincident corners and NoValidPose
    when neither solution places the marker in front of the camera.
    """
    _check_quad(d.corners)
    norm_xy = undistort_to_normalized(d.corners, intr)
    template_xy = template.corners[:, :2]
    h = _dlt_homography(template_xy, norm_xy)
    if abs(h[2, 2]) < 1e-12:
        raise NoValidPose("marker center projects to infinity")
    h = h / h[2, 2]

    scored: list[tuple[float, RigidTransform]] = []
    for rot in _two_rotations(h):
        tvec = _translation_for(rot, template_xy, norm_xy)
        if tvec[2] <= 0.0:
            continue
        pose = RigidTransform(rot, tvec)
        try:
            scored.append((_rms_error(pose, template, d.corners, intr), pose))
        except PointBehindCamera:
            continue
    if not scored:
        raise NoValidPose(
            f"both pose candidates behind camera for (t={d.t}, cam={d.cam}, marker={d.marker})"
        )
    scored.sort(key=lambda item: item[0])
    if len(scored) == 1:
        err, pose = scored[0]
        return PoseHypothesis(pose, pose, err, err, SINGLE_SOLUTION_RATIO)
    (err_best, best), (err_alt, alt) = scored
    return PoseHypothesis(best, alt, err_best, err_alt, ambiguity_ratio(err_best, err_alt))


def candidate_set(h: PoseHypothesis | None, tau_e: float) -> CandidateSet:
    """The transforms kept for downstream use: none, the best, or both.

    No detection gives the empty set; an unambiguous detection (ratio >=
    tau_e) keeps only the best pose; an ambiguous one keeps both.
    """
    if tau_e < 1.0:
        raise ValueError(f"tau_e must be >= 1, got {tau_e}")
    if h is None:
        return CandidateSet(())
    if h.ratio >= tau_e:
        return CandidateSet((h.best,), h.ratio)
    return CandidateSet((h.best, h.alt), h.ratio)
