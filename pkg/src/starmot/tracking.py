"""Constant-velocity Kalman tracklets and their lifecycle."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import check_float, check_int
from .geometry import Box3, Pose, wrap_angle

__all__ = ["Status", "KalmanConfig", "Tracklet", "TrackManager", "predict", "update", "new_tracklet"]

# state: x y z yaw l w h vx vy vz vyaw
N_STATE = 11
N_MEAS = 7
_POS = slice(0, 3)
_YAW = 3
_DIMS = slice(4, 7)
_VEL = slice(7, 10)
_VYAW = 10

H = np.zeros((N_MEAS, N_STATE))
H[:, :N_MEAS] = np.eye(N_MEAS)


class Status(str, enum.Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DEAD = "dead"


@dataclass(frozen=True)
class KalmanConfig:
    # process noise std per step
    q_pos: float = 0.05
    q_yaw: float = 0.02
    q_dim: float = 0.01
    q_vel: float = 0.5
    q_vyaw: float = 0.1
    # measurement noise std
    r_pos: float = 0.3
    r_yaw: float = 0.1
    r_dim: float = 0.1
    # birth covariance std
    p0_vel: float = 10.0
    p0_vyaw: float = 1.0
    confirm_hits: int = 2
    max_age: int = 3

    def __post_init__(self):
        for name in ("q_pos", "q_yaw", "q_dim", "q_vel", "q_vyaw", "r_pos", "r_yaw", "r_dim", "p0_vel", "p0_vyaw"):
            check_float(name, getattr(self, name), min_value=0.0)
        check_int("confirm_hits", self.confirm_hits, min_value=1)
        check_int("max_age", self.max_age, min_value=1)

    @property
    def Q(self) -> np.ndarray:
        return np.diag(np.square([self.q_pos] * 3 + [self.q_yaw] + [self.q_dim] * 3 + [self.q_vel] * 3 + [self.q_vyaw]))

    @property
    def R(self) -> np.ndarray:
        return np.diag(np.square([self.r_pos] * 3 + [self.r_yaw] + [self.r_dim] * 3))


@dataclass
class Tracklet:
    id: int
    state: np.ndarray
    covariance: np.ndarray
    hits: int = 1
    misses: int = 0
    status: Status = Status.TENTATIVE
    last_seen: int = 0
    history: dict = field(default_factory=dict)  # frame -> Pose
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    points_pose: Pose = field(default_factory=Pose)

    @property
    def pose(self) -> Pose:
        return Pose.from_xyz_yaw(self.state[_POS], self.state[_YAW])

    @property
    def box(self) -> Box3:
        return Box3(self.state[_POS], np.maximum(self.state[_DIMS], 1e-3), self.state[_YAW])

    @property
    def velocity(self) -> np.ndarray:
        return self.state[_VEL]

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.state[7:9]))

    def world_points(self, pose: Pose | None = None) -> np.ndarray:
        """Latest point cloud carried rigidly with the box to ``pose`` (default: current state)."""
        if len(self.points) == 0:
            return self.points
        pose = self.pose if pose is None else pose
        return pose.compose(self.points_pose.inverse()).apply(self.points)


def _measurement(box: Box3) -> np.ndarray:
    return np.concatenate([box.center, [box.yaw], box.dims])


def new_tracklet(track_id: int, box: Box3, points, frame: int, cfg: KalmanConfig = KalmanConfig()) -> Tracklet:
    x = np.zeros(N_STATE)
    x[:N_MEAS] = _measurement(box)
    p0 = np.concatenate([np.square([cfg.r_pos] * 3 + [cfg.r_yaw] + [cfg.r_dim] * 3),
                         np.square([cfg.p0_vel] * 3 + [cfg.p0_vyaw])])
    # keep the birth covariance non-singular even with an exact measurement model
    P = np.diag(np.maximum(p0, 1e-12))
    status = Status.CONFIRMED if cfg.confirm_hits <= 1 else Status.TENTATIVE
    pts = np.zeros((0, 3)) if points is None else np.asarray(points, dtype=float).reshape(-1, 3)
    return Tracklet(track_id, x, P, 1, 0, status, frame, {frame: box.pose}, pts, box.pose)


def _transition(dt: float) -> np.ndarray:
    F = np.eye(N_STATE)
    F[0, 7] = F[1, 8] = F[2, 9] = dt
    F[_YAW, _VYAW] = dt
    return F


def predict(t: Tracklet, dt: float, cfg: KalmanConfig = KalmanConfig()) -> Tracklet:
    dt = check_float("dt", dt, min_value=0.0, strict=True)
    F = _transition(dt)
    x = F @ t.state
    x[_YAW] = wrap_angle(x[_YAW])
    P = F @ t.covariance @ F.T + cfg.Q
    return replace(t, state=x, covariance=0.5 * (P + P.T))


def update(t: Tracklet, box: Box3, cfg: KalmanConfig = KalmanConfig(), points=None, frame: int | None = None) -> Tracklet:
    """Kalman correction with a world-frame box; bumps hits and may confirm."""
    z = _measurement(box)
    y = z - H @ t.state
    y[_YAW] = wrap_angle(y[_YAW])
    P = t.covariance
    S = H @ P @ H.T + cfg.R
    PHt = P @ H.T
    try:
        K = np.linalg.solve(S, PHt.T).T
    except np.linalg.LinAlgError:
        K = PHt @ np.linalg.pinv(S)
    x = t.state + K @ y
    x[_YAW] = wrap_angle(x[_YAW])
    IKH = np.eye(N_STATE) - K @ H
    # Joseph form keeps P symmetric PSD
    P = IKH @ P @ IKH.T + K @ cfg.R @ K.T
    P = 0.5 * (P + P.T)
    hits = t.hits + 1
    status = t.status
    if status is Status.TENTATIVE and hits >= cfg.confirm_hits:
        status = Status.CONFIRMED
    out = replace(t, state=x, covariance=P, hits=hits, misses=0, status=status)
    if frame is not None:
        out.last_seen = frame
        out.history = {**t.history, frame: out.pose}
    if points is not None:
        out.points = np.asarray(points, dtype=float).reshape(-1, 3)
        # carry points with the filtered pose so later predictions move them by motion only
        out.points_pose = out.pose
    return out


class TrackManager:
    """Owns the tracklet store: ids, prediction, lifecycle transitions."""

    def __init__(self, cfg: KalmanConfig = KalmanConfig()):
        self.cfg = cfg
        self.tracks: dict = {}
        self.next_id = 0
        self.births_total = 0

    def alive(self) -> list:
        return [t for t in self.tracks.values() if t.status is not Status.DEAD]

    def active(self, frame: int, w: int) -> list:
        """Non-dead tracklets observed within the last ``w`` frames."""
        return [t for t in self.alive() if frame - t.last_seen <= w]

    def predict_all(self, dt: float) -> None:
        for tid, t in list(self.tracks.items()):
            if t.status is not Status.DEAD:
                self.tracks[tid] = predict(t, dt, self.cfg)

    def spawn(self, box: Box3, points, frame: int) -> Tracklet:
        t = new_tracklet(self.next_id, box, points, frame, self.cfg)
        self.tracks[t.id] = t
        self.next_id += 1
        self.births_total += 1
        return t

    def step_lifecycle(self, match, measurements: dict, points: dict, frame: int) -> dict:
        """Apply one association result.

        ``measurements`` maps detection id -> world box; ``points`` maps
        detection id -> world point cloud. Returns detection id -> tracklet id
        for every matched or newly born detection.
        """
        assigned = {}
        matched = set()
        for det_id, trk_id in match.pairs:
            t = self.tracks[trk_id]
            self.tracks[trk_id] = update(t, measurements[det_id], self.cfg, points.get(det_id), frame)
            assigned[det_id] = trk_id
            matched.add(trk_id)
        for t in self.alive():
            if t.id in matched:
                continue
            t.misses += 1
            if t.misses >= self.cfg.max_age:
                t.status = Status.DEAD
        for det_id in match.births:
            assigned[det_id] = self.spawn(measurements[det_id], points.get(det_id, np.zeros((0, 3))), frame).id
        return assigned
