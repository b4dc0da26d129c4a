"""Rigid transforms, yaw-only 3D boxes and volumetric overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "Pose",
    "Box3",
    "compose",
    "invert",
    "frobenius_deviation",
    "intersection_volume",
    "iou3d",
    "giou3d",
    "ngiou",
    "wrap_angle",
    "rot_z",
    "so3_exp",
    "so3_log",
    "skew",
]


def wrap_angle(a):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


class Pose:
    """Rigid transform ``x -> R x + t``.

    Poses are treated as values: operations return new instances and never
    mutate their operands.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None):
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float).reshape(3, 3)
        self.translation = np.zeros(3) if translation is None else np.asarray(translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_translation(cls, x, y=None, z=None) -> "Pose":
        if y is None:
            return cls(None, np.asarray(x, dtype=float))
        return cls(None, [x, y, z])

    @classmethod
    def from_xyz_yaw(cls, xyz, yaw: float) -> "Pose":
        return cls(rot_z(yaw), xyz)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "Pose":
        return cls(Rotation.from_quat(quat_xyzw).as_matrix(), translation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a single 3-vector or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def retract(self, delta) -> "Pose":
        """Right perturbation by a 6-vector (rotation vector, translation)."""
        delta = np.asarray(delta, dtype=float)
        return Pose(self.rotation @ so3_exp(delta[:3]), self.translation + self.rotation @ delta[3:])

    def normalized(self) -> "Pose":
        return Pose(_orthonormalize(self.rotation), self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))

    def __repr__(self) -> str:
        return f"Pose(t={np.round(self.translation, 4).tolist()}, yaw={self.yaw:.4f})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def invert(p: Pose) -> Pose:
    return p.inverse()


def frobenius_deviation(t: Pose) -> float:
    """Frobenius norm of ``H(t) - I`` for the 4x4 homogeneous matrix H(t)."""
    dr = t.rotation - np.eye(3)
    return math.sqrt(float(np.sum(dr * dr) + t.translation @ t.translation))


@dataclass(frozen=True)
class Box3:
    """Gravity-aligned box: center (m), dims (length, width, height) and yaw."""

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0
    _corners: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        dims = np.asarray(self.dims, dtype=float).reshape(3)
        if np.any(~(dims > 0)):
            raise ValueError(f"box dims must be positive, got {dims.tolist()}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def from_pose(cls, pose: Pose, dims) -> "Box3":
        return cls(pose.translation, dims, pose.yaw)

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    @property
    def pose(self) -> Pose:
        return Pose.from_xyz_yaw(self.center, self.yaw)

    def transformed(self, pose: Pose) -> "Box3":
        """Box expressed through ``pose`` (yaw is re-extracted from the composed rotation)."""
        return Box3.from_pose(pose.compose(self.pose), self.dims)

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise footprint corners, shape (4, 2)."""
        l, w = self.dims[0] / 2.0, self.dims[1] / 2.0
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners(self) -> np.ndarray:
        """All 8 corners, shape (8, 3)."""
        if self._corners is None:
            bev = self.bev_corners()
            h = self.dims[2] / 2.0
            lo = np.column_stack([bev, np.full(4, self.center[2] - h)])
            hi = np.column_stack([bev, np.full(4, self.center[2] + h)])
            object.__setattr__(self, "_corners", np.vstack([lo, hi]))
        return self._corners

    def contains(self, points, scale: float = 1.0, margin: float = 0.0) -> np.ndarray:
        local = self.pose.inverse().apply(np.asarray(points, dtype=float).reshape(-1, 3))
        half = self.dims * scale / 2.0 + margin
        return np.all(np.abs(local) <= half, axis=1)


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    out = []
    if not subject:
        return out
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    prev = subject[-1]
    sp = side(prev)
    for cur in subject:
        sc = side(cur)
        if sc >= 0:
            if sp < 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            out.append(cur)
        elif sp >= 0:
            t = sp / (sp - sc)
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        prev, sp = cur, sc
    return out


def _polygon_area(poly: list) -> float:
    if len(poly) < 3:
        return 0.0
    s = 0.0
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        s += x0 * y1 - x1 * y0
    return abs(s) / 2.0


def bev_intersection_area(a: Box3, b: Box3) -> float:
    """Footprint overlap area via Sutherland-Hodgman clipping."""
    ca, cb = a.bev_corners(), b.bev_corners()
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.dims[0], a.dims[1])
    rb = 0.5 * math.hypot(b.dims[0], b.dims[1])
    if math.hypot(*(a.center[:2] - b.center[:2])) > ra + rb:
        return 0.0
    poly = [tuple(p) for p in ca]
    for i in range(4):
        poly = _clip(poly, cb[i], cb[(i + 1) % 4])
        if not poly:
            return 0.0
    return _polygon_area(poly)


def _z_overlap(a: Box3, b: Box3) -> float:
    lo = max(a.center[2] - a.dims[2] / 2.0, b.center[2] - b.dims[2] / 2.0)
    hi = min(a.center[2] + a.dims[2] / 2.0, b.center[2] + b.dims[2] / 2.0)
    return max(0.0, hi - lo)


def intersection_volume(a: Box3, b: Box3) -> float:
    dz = _z_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    return bev_intersection_area(a, b) * dz


def iou3d(a: Box3, b: Box3) -> float:
    inter = intersection_volume(a, b)
    return min(1.0, inter / (a.volume + b.volume - inter))


def giou3d(a: Box3, b: Box3, mode: str = "enclosing") -> float:
    """Generalized IoU of two boxes.

    ``mode="enclosing"`` penalizes by the empty part of the smaller of the
    two boxes that enclose all 16 corners while aligned with either input's
    heading (symmetric, and exactly the union for identical boxes).
    ``mode="literal"`` uses the union itself as the enclosing region, which
    reduces to ``2 * IoU - 1``.
    """
    inter = intersection_volume(a, b)
    union = a.volume + b.volume - inter
    iou = inter / union
    if mode == "literal":
        return min(1.0, iou - (union - inter) / union)
    if mode != "enclosing":
        raise ValueError(f"unknown giou mode {mode!r}")
    hull = min(_enclosing_volume(a, b, a.yaw), _enclosing_volume(a, b, b.yaw))
    # rounding can push identical boxes a hair above one
    return min(1.0, iou - max(0.0, hull - union) / hull)


def _enclosing_volume(a: Box3, b: Box3, yaw: float) -> float:
    """Volume of the box with heading ``yaw`` that encloses all 16 corners."""
    pts = np.vstack([a.corners(), b.corners()])
    c, s = math.cos(yaw), math.sin(yaw)
    u = pts[:, 0] * c + pts[:, 1] * s
    v = -pts[:, 0] * s + pts[:, 1] * c
    z = pts[:, 2]
    return float((u.max() - u.min()) * (v.max() - v.min()) * (z.max() - z.min()))


def ngiou(a: Box3, b: Box3, mode: str = "enclosing") -> float:
    return (giou3d(a, b, mode) + 1.0) / 2.0
