"""Pose representation, pose-update algebra, camera projection and pose errors.

Conventions (fixed here, used everywhere else):

- Camera frame: +z forward, +x right, +y down (pixel v grows with y).
  The camera "up" direction is therefore (0, -1, 0).
- Translation is stored in polar form T = d * (sin(theta)cos(phi),
  sin(theta)sin(phi), cos(theta)) with d > 0, theta in [0, pi],
  phi in [-pi, pi).
- Rotation is a unit quaternion (w, x, y, z), canonicalized to w >= 0.
- Scale is a per-axis positive factor applied in the canonical model frame,
  i.e. points transform as  X = R @ (s * p) + T  (scale, then rotate,
  then translate).
- The canonical model frame has +z up; rotations about the canonical z axis
  are the object's vertical (symmetry) rotations and compose on the right.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9


class InvalidRotationError(ValueError):
    """Raised for quaternions that cannot represent a rotation."""


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive depth."""


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z convention)
# ---------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise InvalidRotationError("zero-norm quaternion")
    if abs(n - 1.0) < 1e-13:  # keep identity compositions bit-exact
        return q.copy()
    return q / n

def quat_canonical(q) -> np.ndarray:
    """Normalize and resolve the sign ambiguity by making w >= 0."""
    q = quat_normalize(q)
    if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero_sign(q) < 0.0):
        q = -q
    return q

def _first_nonzero_sign(q: np.ndarray) -> float:
    for v in q:
        if v != 0.0:
            return math.copysign(1.0, v)
    return 1.0

def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b (apply b first when rotating column vectors)."""
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])

def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])

def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate(([math.cos(half)], math.sin(half) * axis))

def quat_to_matrix(q) -> np.ndarray:
    """Convert a unit quaternion (w, x, y, z) to a 3x3 rotation matrix.

    The input is renormalized internally; a zero-norm quaternion raises
    InvalidRotationError.
    """
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])

def matrix_to_quat(R) -> np.ndarray:
    """Convert a rotation matrix to a canonical (w >= 0) unit quaternion."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_canonical(q)

def rotation_angle_deg(q_a, q_b) -> float:
    """Geodesic angle in degrees between two unit quaternions."""
    rel = quat_multiply(quat_conjugate(quat_normalize(q_a)), quat_normalize(q_b))
    # atan2 form stays accurate near 0 where acos(dot) loses digits
    return math.degrees(2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0]))))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

class SymmetryTag(enum.Enum):
    """Rotational symmetry of an object about its canonical vertical axis."""

    NONE = "none"
    TWO_FOLD = "two_fold"
    FOUR_FOLD = "four_fold"
    INFINITE = "infinite"


@dataclass
class Camera:
    """Pinhole camera: u = fx*x/z + cx, v = fy*y/z + cy."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        return cls(**obj)


@dataclass
class Pose:
    """9-DoF pose: polar translation (d, phi, theta), quaternion q, scale s."""

    d: float
    phi: float
    theta: float
    q: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError(f"distance must be positive, got {self.d}")
        self.q = quat_canonical(self.q)
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.s.shape != (3,) or np.any(self.s <= 0):
            raise ValueError("scale must be 3 positive factors")
        self.phi, self.theta = canonicalize_angles(self.phi, self.theta)

    def copy(self) -> "Pose":
        return Pose(self.d, self.phi, self.theta, self.q.copy(), self.s.copy())

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def to_json(self) -> dict:
        return {"d": self.d, "phi": self.phi, "theta": self.theta,
                "quat": [float(v) for v in self.q],
                "scale": [float(v) for v in self.s]}

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        return cls(d=obj["d"], phi=obj["phi"], theta=obj["theta"],
                   q=np.array(obj["quat"]), s=np.array(obj["scale"]))


@dataclass
class PoseDelta:
    """Multiplicative/additive pose update plus a classification score.

    Flattens to exactly 11 numbers: [dd, dphi, dtheta, dq(4), ds(3), sigma].
    """

    dd: float
    dphi: float
    dtheta: float
    dq: np.ndarray
    ds: np.ndarray
    sigma: float = 0.5

    def __post_init__(self):
        if self.dd <= 0:
            raise ValueError("distance factor must be positive")
        self.dq = quat_canonical(self.dq)
        self.ds = np.asarray(self.ds, dtype=np.float64)
        if self.ds.shape != (3,) or np.any(self.ds <= 0):
            raise ValueError("scale factors must be 3 positive values")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")

    @classmethod
    def identity(cls, sigma: float = 0.5) -> "PoseDelta":
        return cls(1.0, 0.0, 0.0, np.array([1.0, 0, 0, 0]), np.ones(3), sigma)

    def inverse(self) -> "PoseDelta":
        return PoseDelta(1.0 / self.dd, -self.dphi, -self.dtheta,
                         quat_conjugate(self.dq), 1.0 / self.ds, self.sigma)

    def flatten(self) -> np.ndarray:
        return np.concatenate(([self.dd, self.dphi, self.dtheta],
                               self.dq, self.ds, [self.sigma]))


def canonicalize_angles(phi: float, theta: float) -> tuple[float, float]:
    """Fold (phi, theta) back into phi in [-pi, pi), theta in [0, pi]."""
    theta = math.remainder(theta, 2.0 * math.pi)  # [-pi, pi]
    if theta < 0:
        theta = -theta
        phi = phi + math.pi
    phi = math.remainder(phi, 2.0 * math.pi)
    if phi >= math.pi:  # remainder may return exactly pi
        phi -= 2.0 * math.pi
    return phi, theta


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def translation_vector(pose: Pose) -> np.ndarray:
    """Cartesian translation d * (sin t cos p, sin t sin p, cos t) in meters."""
    st = math.sin(pose.theta)
    return pose.d * np.array([st * math.cos(pose.phi),
                              st * math.sin(pose.phi),
                              math.cos(pose.theta)])

def pose_from_translation(t_vec, q, s) -> Pose:
    """Build a Pose from a Cartesian translation (inverse of translation_vector)."""
    t = np.asarray(t_vec, dtype=np.float64)
    d = float(np.linalg.norm(t))
    if d <= 0:
        raise ValueError("translation must be non-zero")
    theta = math.acos(max(-1.0, min(1.0, t[2] / d)))
    phi = math.atan2(t[1], t[0]) if (t[0] != 0 or t[1] != 0) else 0.0
    return Pose(d=d, phi=phi, theta=theta, q=q, s=s)

def apply_pose(pose: Pose, points) -> np.ndarray:
    """Transform canonical points: X = R @ (s * p) + T. Accepts (n,3) arrays."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    R = quat_to_matrix(pose.q)
    return (pose.s * pts) @ R.T + translation_vector(pose)

def update_pose(pose: Pose, delta: PoseDelta) -> Pose:
    """Apply a PoseDelta: d' = d*dd, angles additive, q' = q*dq, s' = s*ds."""
    return Pose(d=pose.d * delta.dd,
                phi=pose.phi + delta.dphi,
                theta=pose.theta + delta.dtheta,
                q=quat_multiply(pose.q, delta.dq),
                s=pose.s * delta.ds)

def delta_between(pose: Pose, target: Pose) -> PoseDelta:
    """Closed-form delta with update_pose(pose, delta) == target (exactly).

    Used as the oracle predictor in refinement tests.
    """
    dphi = math.remainder(target.phi - pose.phi, 2.0 * math.pi)
    return PoseDelta(dd=target.d / pose.d,
                     dphi=dphi,
                     dtheta=target.theta - pose.theta,
                     dq=quat_multiply(quat_conjugate(pose.q), target.q),
                     ds=target.s / pose.s)

def project(camera: Camera, point) -> tuple[float, float, float]:
    """Project a camera-frame point to (u, v, depth). Raises behind the camera."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= 0:
        raise BehindCameraError(f"point depth {z} <= 0")
    return (camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, z)

def project_many(camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (n,2) pixels and (n,) depths.

    Points behind the camera get depth <= 0 and pixel NaN; callers filter.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pts[:, 0] / z + camera.cx
        v = camera.fy * pts[:, 1] / z + camera.cy
    uv = np.stack([u, v], axis=1)
    uv[z <= 0] = np.nan
    return uv, z

def pixel_bearing(camera: Camera, u: float, v: float) -> np.ndarray:
    """Unit ray direction through pixel (u, v)."""
    b = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    return b / np.linalg.norm(b)

def pixel_bearing_many(camera: Camera, uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    b = np.stack([(uv[:, 0] - camera.cx) / camera.fx,
                  (uv[:, 1] - camera.cy) / camera.fy,
                  np.ones(len(uv))], axis=1)
    return b / np.linalg.norm(b, axis=1, keepdims=True)


# camera up is -y; this base rotation stands objects upright (canonical +z up)
UPRIGHT_QUAT = quat_from_axis_angle([1.0, 0.0, 0.0], math.pi / 2)


def object_offset_quat(tilt_rad: float, azim_rad: float, elev_rad: float) -> np.ndarray:
    """Object-local rotation offset composed as x(tilt) * z(azim) * y(elev).

    Offsets compose on the right of an object rotation; azimuth is the
    rotation about the canonical vertical axis.
    """
    return quat_multiply(
        quat_multiply(quat_from_axis_angle([1.0, 0.0, 0.0], tilt_rad),
                      quat_from_axis_angle([0.0, 0.0, 1.0], azim_rad)),
        quat_from_axis_angle([0.0, 1.0, 0.0], elev_rad))


# vertical-axis rotations that the discrete symmetry groups sweep over
_SYM_ANGLES = {
    SymmetryTag.NONE: (0.0,),
    SymmetryTag.TWO_FOLD: (0.0, 180.0),
    SymmetryTag.FOUR_FOLD: (0.0, 90.0, 180.0, 270.0),
}

CANONICAL_UP = np.array([0.0, 0.0, 1.0])  # vertical axis of the model frame


def rotation_error_deg(q_pred, q_gt, sym: SymmetryTag = SymmetryTag.NONE) -> float:
    """Symmetry-aware rotation error in degrees, in [0, 180].

    Discrete groups take the minimum geodesic angle over the group's vertical
    rotations composed on the right of the GT rotation. Infinite symmetry
    compares only the rotations' action on the canonical vertical axis.
    """
    q_pred = quat_normalize(q_pred)
    q_gt = quat_normalize(q_gt)
    if sym is SymmetryTag.INFINITE:
        a = quat_to_matrix(q_pred) @ CANONICAL_UP
        b = quat_to_matrix(q_gt) @ CANONICAL_UP
        return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, b))),
                                       float(np.dot(a, b))))
    best = 180.0
    for alpha in _SYM_ANGLES[sym]:
        q_sym = quat_multiply(q_gt, quat_from_axis_angle(CANONICAL_UP, math.radians(alpha)))
        best = min(best, rotation_angle_deg(q_pred, q_sym))
    return best

def scale_error(s_pred, s_gt) -> float:
    """Max per-axis relative scale deviation |s_pred/s_gt - 1|."""
    return float(np.max(np.abs(np.asarray(s_pred) / np.asarray(s_gt) - 1.0)))

def pose_is_correct(pred: Pose, gt: Pose, sym: SymmetryTag = SymmetryTag.NONE,
                    t_max: float = 0.20, r_max: float = 20.0,
                    s_max: float = 0.20) -> bool:
    """Strict 20 cm / 20 deg / 20 % correctness test (all three must hold)."""
    t_err = float(np.linalg.norm(translation_vector(pred) - translation_vector(gt)))
    if t_err >= t_max:
        return False
    if rotation_error_deg(pred.q, gt.q, sym) >= r_max:
        return False
    return scale_error(pred.s, gt.s) < s_max


def pose_errors(pred: Pose, gt: Pose, sym: SymmetryTag = SymmetryTag.NONE) -> dict:
    """Translation (m), rotation (deg) and scale errors as a dict."""
    return {
        "translation": float(np.linalg.norm(translation_vector(pred) - translation_vector(gt))),
        "rotation_deg": rotation_error_deg(pred.q, gt.q, sym),
        "scale": scale_error(pred.s, gt.s),
    }
