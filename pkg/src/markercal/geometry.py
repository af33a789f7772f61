"""Rigid transforms, Rodrigues rotation parameterization and the pinhole camera model.

Conventions: a transform maps points from its "source" frame to its "target"
frame, p_target = R @ p_source + t. Camera frames are right-handed with +z
along the optical axis (into the scene), +x right, +y down in the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PointBehindCamera

MIN_DEPTH = 1e-9  # meters; points at or below this depth cannot be projected
_ORTHO_DRIFT = 1e-9


def _as_array(x, shape) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(shape)
    a.flags.writeable = False
    return a


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ p == cross(v, p)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_many(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for a (..., 3) batch of vectors."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape + (3,))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


@dataclass(frozen=True)
class RigidTransform:
    """An element of SE(3): rotation (3,3) and translation (3,) in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_array(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _as_array(self.translation, (3,)))

    @staticmethod
    def identity() -> RigidTransform:
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N,3) batch."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def orthonormality_drift(self) -> float:
        r = self.rotation
        return float(np.abs(r.T @ r - np.eye(3)).max())


@dataclass(frozen=True)
class TwistParams:
    """Six-parameter transform: Rodrigues rotation vector plus translation."""

    rvec: np.ndarray  # (3,) radians * unit axis, angle canonicalized to [0, pi]
    tvec: np.ndarray  # (3,) meters

    def __post_init__(self):
        object.__setattr__(self, "rvec", _as_array(self.rvec, (3,)))
        object.__setattr__(self, "tvec", _as_array(self.tvec, (3,)))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters with Brown-Conrady distortion (k1,k2,p1,p2,k3)."""

    fx: float
    fy: float
    cx: float
    cy: float
    dist: np.ndarray = field(default_factory=lambda: np.zeros(5))
    width: int = 640
    height: int = 480
    pre_undistorted: bool = False

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        dist = np.zeros(5) if self.pre_undistorted else self.dist
        object.__setattr__(self, "dist", _as_array(dist, (5,)))

    @property
    def has_distortion(self) -> bool:
        return bool(np.any(self.dist != 0.0))


@dataclass(frozen=True)
class MarkerTemplate:
    """The four corners of a square marker of side `side`, in its own frame.

    Corner order is (s/2,-s/2,0), (s/2,s/2,0), (-s/2,s/2,0), (-s/2,-s/2,0);
    all corners lie in z = 0 and the centroid is the origin. Input detections
    must list their pixel corners in this same order.
    """

    side: float
    corners: np.ndarray = field(init=False)  # (4,3)

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("marker side must be positive")
        h = self.side / 2.0
        corners = np.array(
            [[h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0], [-h, -h, 0.0]]
        )
        corners.flags.writeable = False
        object.__setattr__(self, "corners", corners)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition applying b first, then a: result @ p == a @ (b @ p)."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    out = RigidTransform(r, t)
    if out.orthonormality_drift() > _ORTHO_DRIFT:
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        if np.linalg.det(r) < 0:
            r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
        out = RigidTransform(r, t)
    return out


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def rotation_from_rvec(rvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula, exact for any angle; series below 1e-8 rad."""
    v = np.asarray(rvec, dtype=np.float64)
    theta = math.sqrt(float(v @ v))
    k = skew(v)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    k /= theta
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w,x,y,z) with w >= 0, via Shepperd's method."""
    m = np.asarray(r, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
             (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
             (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rvec_from_rotation(r: np.ndarray) -> np.ndarray:
    """Rotation vector with angle in [0, pi].

    At angle exactly pi the axis sign is ambiguous; it is canonicalized so
    the first nonzero component is positive.
    """
    q = rotation_to_quaternion(r)
    w = min(q[0], 1.0)
    vec = q[1:]
    sin_half = np.linalg.norm(vec)
    angle = 2.0 * math.atan2(sin_half, w)
    if sin_half < 1e-12:
        return 2.0 * vec  # angle ~ 0: rvec ~ 2*q_vec
    rvec = vec * (angle / sin_half)
    if angle > math.pi - 1e-9:
        nz = np.nonzero(np.abs(rvec) > 1e-12)[0]
        if nz.size and rvec[nz[0]] < 0:
            rvec = -rvec
    return rvec


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians in [0, pi]."""
    q = rotation_to_quaternion(r)
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), min(float(q[0]), 1.0))


def to_twist(t: RigidTransform) -> TwistParams:
    return TwistParams(rvec_from_rotation(t.rotation), t.translation)


def from_twist(p: TwistParams) -> RigidTransform:
    return RigidTransform(rotation_from_rvec(p.rvec), p.tvec)


def rotation_jacobian_factor(rvec: np.ndarray, rot: np.ndarray | None = None) -> np.ndarray:
    """Factor S(v) such that d(R(v) @ p)/dv = -R(v) @ skew(p) @ S(v).

    Closed form for theta >= 1e-3, third-order series below (both accurate
    to well under 1e-8 relative at the crossover).
    """
    v = np.asarray(rvec, dtype=np.float64)
    theta_sq = float(v @ v)
    k = skew(v)
    if theta_sq < 1e-6:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    if rot is None:
        rot = rotation_from_rvec(v)
    return (np.outer(v, v) + (rot.T - np.eye(3)) @ k) / theta_sq


def _distort_normalized(a: np.ndarray, b: np.ndarray, dist: np.ndarray):
    k1, k2, p1, p2, k3 = dist
    r2 = a * a + b * b
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = a * radial + 2.0 * p1 * a * b + p2 * (r2 + 2.0 * a * a)
    yd = b * radial + p1 * (r2 + 2.0 * b * b) + 2.0 * p2 * a * b
    return xd, yd


def project(points_in_camera: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points to pixels: pinhole plus Brown-Conrady.

    Accepts a single (3,) point or an (N,3) batch; raises PointBehindCamera
    if any depth is <= 1e-9 m.
    """
    p = np.asarray(points_in_camera, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    z = p[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise PointBehindCamera(f"depth {z.min():.3g} m <= {MIN_DEPTH}")
    a = p[:, 0] / z
    b = p[:, 1] / z
    xd, yd = _distort_normalized(a, b, intr.dist)
    pix = np.stack([intr.fx * xd + intr.cx, intr.fy * yd + intr.cy], axis=-1)
    return pix[0] if single else pix


def project_arrays(points, fx, fy, cx, cy, dist, want_jacobian: bool = True):
    """Projection with per-point intrinsics arrays; never raises.

    `points` is (N,3); fx, fy, cx, cy broadcast against N and dist is (N,5)
    or (5,). Returns (pix (N,2), jac (N,2,3) or None, front (N,) bool); pixel
    and Jacobian values at non-front points are unspecified.
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[:, 2]
    front = z > MIN_DEPTH
    inv_z = 1.0 / np.where(front, z, 1.0)
    a = p[:, 0] * inv_z
    b = p[:, 1] * inv_z
    d = np.broadcast_to(np.asarray(dist, dtype=np.float64), (p.shape[0], 5))
    k1, k2, p1, p2, k3 = (d[:, i] for i in range(5))
    r2 = a * a + b * b
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = a * radial + 2.0 * p1 * a * b + p2 * (r2 + 2.0 * a * a)
    yd = b * radial + p1 * (r2 + 2.0 * b * b) + 2.0 * p2 * a * b
    pix = np.stack([fx * xd + cx, fy * yd + cy], axis=-1)
    if not want_jacobian:
        return pix, None, front

    dradial_dr2 = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)
    # d(xd,yd)/d(a,b)
    dxd_da = radial + a * dradial_dr2 * 2.0 * a + 2.0 * p1 * b + 6.0 * p2 * a
    dxd_db = a * dradial_dr2 * 2.0 * b + 2.0 * p1 * a + 2.0 * p2 * b
    dyd_da = b * dradial_dr2 * 2.0 * a + 2.0 * p2 * b + 2.0 * p1 * a
    dyd_db = radial + b * dradial_dr2 * 2.0 * b + 6.0 * p1 * b + 2.0 * p2 * a

    # chain with d(a,b)/d(x,y,z)
    jac = np.empty((p.shape[0], 2, 3))
    jac[:, 0, 0] = fx * dxd_da * inv_z
    jac[:, 0, 1] = fx * dxd_db * inv_z
    jac[:, 0, 2] = -fx * (dxd_da * a + dxd_db * b) * inv_z
    jac[:, 1, 0] = fy * dyd_da * inv_z
    jac[:, 1, 1] = fy * dyd_db * inv_z
    jac[:, 1, 2] = -fy * (dyd_da * a + dyd_db * b) * inv_z
    return pix, jac, front


def project_points_jacobian(points: np.ndarray, intr: CameraIntrinsics):
    """Pixels and d(pixel)/d(camera point) for an (N,3) batch of points.

    Assumes all depths are positive (the caller masks behind-camera points).
    Returns (pix (N,2), jac (N,2,3)).
    """
    pix, jac, _ = project_arrays(
        points, intr.fx, intr.fy, intr.cx, intr.cy, intr.dist
    )
    return pix, jac


def undistort_to_normalized(pixels: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Map (N,2) pixels to normalized camera coordinates, removing distortion.

    Fixed-point iteration; exact inverse of the projection model to ~1e-12
    for moderate distortion.
    """
    pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    xd = (pix[:, 0] - intr.cx) / intr.fx
    yd = (pix[:, 1] - intr.cy) / intr.fy
    if not intr.has_distortion:
        return np.stack([xd, yd], axis=-1)
    k1, k2, p1, p2, k3 = intr.dist
    a, b = xd.copy(), yd.copy()
    for _ in range(30):
        r2 = a * a + b * b
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        da = 2.0 * p1 * a * b + p2 * (r2 + 2.0 * a * a)
        db = p1 * (r2 + 2.0 * b * b) + 2.0 * p2 * a * b
        a_new = (xd - da) / radial
        b_new = (yd - db) / radial
        if max(np.abs(a_new - a).max(), np.abs(b_new - b).max()) < 1e-14:
            a, b = a_new, b_new
            break
        a, b = a_new, b_new
    return np.stack([a, b], axis=-1)


def project_marker_corner(
    cam_from_obj: RigidTransform,
    marker_from_objref: RigidTransform,
    template: MarkerTemplate,
    corner_index: int,
    intr: CameraIntrinsics,
) -> np.ndarray:
    """Project one template corner through camera <- object <- marker chain.

    `corner_index` is 1-based (1..4) matching the template corner order.
    """
    if not 1 <= corner_index <= 4:
        raise ValueError(f"corner index {corner_index} not in 1..4")
    point = compose(cam_from_obj, marker_from_objref).apply(
        template.corners[corner_index - 1]
    )
    return project(point, intr)
