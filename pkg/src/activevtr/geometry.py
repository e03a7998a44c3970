"""Rigid transforms with frame labels and the stereo pinhole camera.

A ``Pose`` labelled ``frame_to <- frame_from`` maps point coordinates expressed
in ``frame_from`` into ``frame_to``.  So ``T_MB`` (map from body) has
``frame_to="M"`` and ``frame_from="B"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

Z_MIN = 0.05


class FrameMismatchError(ValueError):
    pass


class DisparityError(ValueError):
    pass


def skew(w):
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-10:
        return np.eye(3) + W + 0.5 * W @ W
    return (np.eye(3) + np.sin(theta) / theta * W
            + (1.0 - np.cos(theta)) / theta**2 * W @ W)


def so3_log(R):
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-10:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        i = int(np.argmax(axis))
        axis = B[i] / axis[i]
        axis /= np.linalg.norm(axis)
        if vee @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def so3_left_jacobian_inv(phi):
    """Inverse left Jacobian of SO(3): d Log(Exp(d) Exp(phi)) / dd at d=0."""
    theta = np.linalg.norm(phi)
    P = skew(phi)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * P + P @ P / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    return np.eye(3) - 0.5 * P + coef * P @ P


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    # Shepperd's method, branch on the largest diagonal term
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``frame_to <- frame_from`` stored as unit quaternion (w, x, y, z) + translation."""

    q: np.ndarray
    t: np.ndarray
    frame_to: str = "M"
    frame_from: str = "B"

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("degenerate quaternion")
        # leave already-unit quaternions bit-exact so serialisation round-trips
        object.__setattr__(self, "q", q / n if abs(n - 1.0) > 1e-12 else q.copy())
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @classmethod
    def identity(cls, frame_to="M", frame_from="B"):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), frame_to, frame_from)

    @classmethod
    def from_rt(cls, R, t, frame_to="M", frame_from="B"):
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t, frame_to, frame_from)

    @classmethod
    def from_rotvec(cls, rotvec, t, frame_to="M", frame_from="B"):
        return cls.from_rt(so3_exp(rotvec), t, frame_to, frame_from)

    @classmethod
    def from_xyz_rpy(cls, x, y, z, roll=0.0, pitch=0.0, yaw=0.0, frame_to="M", frame_from="B"):
        R = (so3_exp([0.0, 0.0, yaw]) @ so3_exp([0.0, pitch, 0.0]) @ so3_exp([roll, 0.0, 0.0]))
        return cls.from_rt(R, [x, y, z], frame_to, frame_from)

    @classmethod
    def from_list(cls, values: Sequence[float], frame_to="M", frame_from="B"):
        v = list(values)
        if len(v) != 7:
            raise ValueError(f"pose needs 7 numbers (qw qx qy qz tx ty tz), got {len(v)}")
        return cls(np.array(v[:4]), np.array(v[4:]), frame_to, frame_from)

    def to_list(self):
        return [float(x) for x in self.q] + [float(x) for x in self.t]

    @cached_property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @property
    def yaw(self):
        return float(np.arctan2(self.R[1, 0], self.R[0, 0]))

    def relabel(self, frame_to=None, frame_from=None):
        return Pose(self.q, self.t, frame_to or self.frame_to, frame_from or self.frame_from)

    def inverse(self) -> "Pose":
        q = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q, -self.R.T @ self.t, self.frame_from, self.frame_to)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return compose(self, other)
        pts = np.asarray(other, dtype=float)
        return pts @ self.R.T + self.t

    def transform(self, points):
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def allclose(self, other: "Pose", atol=1e-9):
        return (np.allclose(self.R, other.R, atol=atol, rtol=0)
                and np.allclose(self.t, other.t, atol=atol, rtol=0))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (self.frame_to == other.frame_to and self.frame_from == other.frame_from
                and np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t))

    def __repr__(self):
        return (f"Pose({self.frame_to}<-{self.frame_from}, q={np.round(self.q, 6).tolist()}, "
                f"t={np.round(self.t, 6).tolist()})")


def compose(a: Pose, b: Pose) -> Pose:
    if a.frame_from != b.frame_to:
        raise FrameMismatchError(
            f"cannot compose {a.frame_to}<-{a.frame_from} with {b.frame_to}<-{b.frame_from}")
    q = quat_multiply(a.q, b.q)
    if q[0] < 0:
        q = -q
    return Pose(q, a.R @ b.t + a.t, a.frame_to, b.frame_from)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def between(a: Pose, b: Pose) -> Pose:
    """Relative transform ``a^-1 b`` for two poses sharing ``frame_to``."""
    if a.frame_to != b.frame_to:
        raise FrameMismatchError(f"poses live in {a.frame_to} and {b.frame_to}")
    return compose(a.inverse(), b)


def translation_distance(a: Pose, b: Pose) -> float:
    if a.frame_to != b.frame_to:
        raise FrameMismatchError(f"poses live in {a.frame_to} and {b.frame_to}")
    return float(np.linalg.norm(a.t - b.t))


def rotation_angle(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(so3_log(a.R.T @ b.R)))


@dataclass(frozen=True, eq=False)
class StereoCameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int
    T_BC: Pose = field(default_factory=lambda: Pose.identity("B", "C"))
    tag: str = "front"

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline <= 0:
            raise ValueError("fx, fy and baseline must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    def to_dict(self):
        return {"tag": self.tag, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "baseline": self.baseline, "width": self.width, "height": self.height,
                "T_BC": self.T_BC.to_list()}

    @classmethod
    def from_dict(cls, d):
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   baseline=float(d["baseline"]), width=int(d["width"]), height=int(d["height"]),
                   T_BC=Pose.from_list(d["T_BC"], "B", "C"), tag=d.get("tag", "front"))

    def __eq__(self, other):
        if not isinstance(other, StereoCameraModel):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def project_points(model: StereoCameraModel, points: np.ndarray):
    """Vectorised stereo projection. Returns (pixels[N,3], valid[N])."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    z = p[:, 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, 1.0)
    uL = model.fx * p[:, 0] / zs + model.cx
    vL = model.fy * p[:, 1] / zs + model.cy
    uR = uL - model.fx * model.baseline / zs
    valid &= (uL >= 0) & (uL < model.width) & (vL >= 0) & (vL < model.height)
    valid &= (uR >= 0) & (uR < model.width)
    return np.stack([uL, vL, uR], axis=1), valid


def project_stereo(model: StereoCameraModel, point_in_camera) -> Optional[np.ndarray]:
    pix, valid = project_points(model, np.asarray(point_in_camera, dtype=float)[None, :])
    return pix[0] if valid[0] else None


def triangulate_points(model: StereoCameraModel, pixels: np.ndarray):
    pix = np.atleast_2d(np.asarray(pixels, dtype=float))
    disparity = pix[:, 0] - pix[:, 2]
    if np.any(disparity <= 0):
        raise DisparityError("non-positive disparity")
    z = model.fx * model.baseline / disparity
    x = (pix[:, 0] - model.cx) * z / model.fx
    y = (pix[:, 1] - model.cy) * z / model.fy
    return np.stack([x, y, z], axis=1)


def triangulate(model: StereoCameraModel, obs) -> np.ndarray:
    return triangulate_points(model, np.asarray(obs, dtype=float)[None, :])[0]
