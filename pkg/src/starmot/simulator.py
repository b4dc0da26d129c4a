"""Deterministic synthetic driving scenes.

Stands in for the LiDAR detector and the visual-odometry front-end: an ego
vehicle drives through multi-lane traffic, observing point landmarks and
noisy vehicle boxes with surface point samples. Everything is drawn from a
single ``numpy`` generator seeded by the caller, so a (config, seed) pair
fully determines the scenario.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ._validation import ConfigError, check_float, check_int
from .geometry import Box3, Pose, rot_z, so3_exp

__all__ = [
    "SimConfig",
    "NoiseSpec",
    "Detection",
    "Frame",
    "AgentTrack",
    "Scenario",
    "generate",
    "inject_noise",
    "validate_scenario",
    "save_scenario",
    "load_scenario",
    "congested_config",
]


@dataclass(frozen=True)
class SimConfig:
    n_agents: int = 20
    n_frames: int = 50
    dt: float = 0.1
    # traffic layout
    n_lanes: int = 4
    lane_width: float = 3.5
    gap_min: float = 1.5
    gap_max: float = 4.0
    lane_speed_max: float = 8.0
    p_static_lane: float = 0.25
    speed_change_rate: float = 0.2
    yaw_rate_sigma: float = 0.0
    dims_mean: tuple = (4.5, 1.9, 1.6)
    dims_sigma: tuple = (0.5, 0.15, 0.15)
    # ego and sensing
    ego_speed: float = 6.0
    ego_yaw_rate: float = 0.0
    sensor_height: float = 1.8
    sensor_range: float = 40.0
    fov_deg: float = 360.0
    n_points: int = 128
    # static map
    n_landmarks: int = 200
    landmark_range: float = 40.0
    landmark_margin: float = 30.0
    # noise
    sigma_pos: float = 0.0
    sigma_yaw: float = 0.0
    sigma_dim: float = 0.0
    sigma_pt: float = 0.0
    sigma_lm: float = 0.0
    sigma_odom_t: float = 0.0
    sigma_odom_r: float = 0.0
    p_miss: float = 0.0
    p_fp: float = 0.0

    def validate(self) -> "SimConfig":
        check_int("n_agents", self.n_agents, min_value=0)
        check_int("n_frames", self.n_frames, min_value=1)
        check_float("dt", self.dt, min_value=0.0, strict=True)
        check_int("n_lanes", self.n_lanes, min_value=1)
        check_float("lane_width", self.lane_width, min_value=0.0, strict=True)
        check_float("gap_min", self.gap_min, min_value=0.0)
        check_float("gap_max", self.gap_max, min_value=self.gap_min)
        check_float("lane_speed_max", self.lane_speed_max, min_value=0.0)
        check_float("p_static_lane", self.p_static_lane, min_value=0.0, max_value=1.0)
        check_float("speed_change_rate", self.speed_change_rate, min_value=0.0)
        check_float("yaw_rate_sigma", self.yaw_rate_sigma, min_value=0.0)
        check_float("ego_speed", self.ego_speed, min_value=0.0)
        check_float("ego_yaw_rate", self.ego_yaw_rate)
        check_float("sensor_height", self.sensor_height)
        check_float("sensor_range", self.sensor_range, min_value=0.0, strict=True)
        check_float("fov_deg", self.fov_deg, min_value=0.0, strict=True, max_value=360.0)
        check_int("n_points", self.n_points, min_value=0)
        check_int("n_landmarks", self.n_landmarks, min_value=0)
        check_float("landmark_range", self.landmark_range, min_value=0.0)
        check_float("landmark_margin", self.landmark_margin, min_value=0.0)
        for name in ("sigma_pos", "sigma_yaw", "sigma_dim", "sigma_pt", "sigma_lm",
                     "sigma_odom_t", "sigma_odom_r", "p_fp"):
            check_float(name, getattr(self, name), min_value=0.0)
        check_float("p_miss", self.p_miss, min_value=0.0, max_value=1.0)
        for name in ("dims_mean", "dims_sigma"):
            v = getattr(self, name)
            if len(v) != 3:
                raise ConfigError(name, "expected three values")
            for x in v:
                check_float(name, x, min_value=0.0)
        if min(self.dims_mean) <= 0:
            raise ConfigError("dims_mean", "dimensions must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown simulator parameter")
        d = dict(d)
        for k in ("dims_mean", "dims_sigma"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims_mean"] = list(self.dims_mean)
        d["dims_sigma"] = list(self.dims_sigma)
        return d


def congested_config(**overrides) -> SimConfig:
    """Dense traffic family: 40 agents, bumper gaps keep centre spacing well under 10 m."""
    base = dict(
        n_agents=40, n_frames=30, n_lanes=4, lane_width=3.5, gap_min=1.0, gap_max=3.0,
        lane_speed_max=6.0, p_static_lane=0.3, ego_speed=5.0, sensor_range=35.0,
        n_landmarks=120, landmark_range=35.0, sigma_pos=0.15, sigma_yaw=0.03, sigma_dim=0.05,
        sigma_pt=0.03, sigma_lm=0.08, sigma_odom_t=0.03, sigma_odom_r=0.004,
        p_miss=0.05, p_fp=1.0,
    )
    base.update(overrides)
    return SimConfig(**base)


@dataclass(frozen=True)
class NoiseSpec:
    """Extra zero-mean Gaussian perturbation applied on top of a scenario."""

    sigma_pos: float = 0.0
    sigma_yaw: float = 0.0
    sigma_dim: float = 0.0
    sigma_odom_t: float = 0.0
    sigma_odom_r: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            check_float(f.name, getattr(self, f.name), min_value=0.0)

    @property
    def touches_detections(self) -> bool:
        return self.sigma_pos > 0 or self.sigma_yaw > 0 or self.sigma_dim > 0

    @property
    def touches_ego(self) -> bool:
        return self.sigma_odom_t > 0 or self.sigma_odom_r > 0

    @classmethod
    def parse(cls, spec: str) -> "NoiseSpec":
        """Parse ``"0.4"`` (position only) or ``"pos=0.4,yaw=0.02,odom_t=0.01"``."""
        spec = spec.strip()
        if not spec:
            return cls()
        try:
            return cls(sigma_pos=float(spec))
        except ValueError:
            pass
        kw = {}
        for part in spec.split(","):
            key, _, val = part.partition("=")
            key = key.strip()
            name = key if key.startswith("sigma_") else f"sigma_{key}"
            if name not in {f.name for f in fields(cls)}:
                raise ConfigError("noise_sigma", f"unknown noise component {key!r}")
            try:
                kw[name] = float(val)
            except ValueError:
                raise ConfigError("noise_sigma", f"bad value for {key!r}: {val!r}") from None
        return cls(**kw)


@dataclass
class Detection:
    box: Box3
    points: np.ndarray
    gt_agent_id: int | None = None
    clutter: bool = False


@dataclass
class Frame:
    index: int
    timestamp: float
    ego_gt: Pose
    ego_odom: Pose
    detections: list
    landmark_ids: np.ndarray
    landmark_obs: np.ndarray
    gt_visible: list = field(default_factory=list)


@dataclass
class AgentTrack:
    id: int
    dims: np.ndarray
    poses: list
    static: bool = False

    def box(self, frame: int) -> Box3:
        return Box3.from_pose(self.poses[frame], self.dims)


@dataclass
class Scenario:
    config: SimConfig
    seed: int
    frames: list
    landmarks_gt: np.ndarray
    agents: list

    @property
    def dt(self) -> float:
        return self.config.dt

    def gt_boxes(self, frame: int) -> list:
        """(agent id, world box) for every agent visible at ``frame``."""
        by_id = {a.id: a for a in self.agents}
        return [(i, by_id[i].box(frame)) for i in self.frames[frame].gt_visible]

    def to_jsonl(self) -> str:
        return _dump(self)

    @classmethod
    def from_jsonl(cls, text: str) -> "Scenario":
        return _load(text)


def _lane_offsets(n_lanes: int, width: float) -> list:
    out = []
    for k in range(n_lanes):
        side = 1.0 if k % 2 == 0 else -1.0
        out.append(side * width * (k // 2 + 1))
    return out


def _sample_dims(rng, cfg: SimConfig, n: int) -> np.ndarray:
    mean = np.asarray(cfg.dims_mean, dtype=float)
    sig = np.asarray(cfg.dims_sigma, dtype=float)
    d = mean + rng.standard_normal((n, 3)) * sig
    return np.maximum(d, 0.5 * mean)


def _speed_profile(rng, cfg: SimConfig, static: bool) -> np.ndarray:
    v = np.zeros(cfg.n_frames)
    if static:
        return v
    cur = rng.uniform(0.0, cfg.lane_speed_max)
    p_change = 1.0 - math.exp(-cfg.speed_change_rate * cfg.dt)
    for t in range(cfg.n_frames):
        if t > 0 and rng.random() < p_change:
            cur = rng.uniform(0.0, cfg.lane_speed_max)
        v[t] = cur
    return v


def _visible(cfg: SimConfig, p_sensor: np.ndarray, limit: float) -> bool:
    if np.hypot(p_sensor[0], p_sensor[1]) > limit:
        return False
    if cfg.fov_deg >= 360.0:
        return True
    bearing = math.degrees(math.atan2(p_sensor[1], p_sensor[0]))
    return abs(bearing) <= cfg.fov_deg / 2.0


def sample_surface(rng, box: Box3, n: int, sigma: float) -> np.ndarray:
    """Uniform samples on the box faces that face the origin of ``box``'s frame."""
    if n == 0:
        return np.zeros((0, 3))
    pose = box.pose
    eye = pose.inverse().apply(np.zeros(3))
    half = box.dims / 2.0
    faces, areas = [], []
    for axis in range(3):
        if abs(eye[axis]) > half[axis]:
            others = [a for a in range(3) if a != axis]
            faces.append((axis, math.copysign(1.0, eye[axis]), others))
            areas.append(4.0 * half[others[0]] * half[others[1]])
    if not faces:
        return np.zeros((0, 3))
    areas = np.asarray(areas)
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    local = np.empty((n, 3))
    for k, (axis, sign, others) in enumerate(faces):
        m = which == k
        local[m, axis] = sign * half[axis]
        local[m, others[0]] = uv[m, 0] * half[others[0]]
        local[m, others[1]] = uv[m, 1] * half[others[1]]
    pts = pose.apply(local)
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, size=pts.shape)
    return pts


def _noisy_box(rng, box: Box3, cfg) -> Box3:
    c = box.center + rng.normal(0.0, 1.0, 3) * cfg.sigma_pos
    yaw = box.yaw + rng.normal() * cfg.sigma_yaw
    dims = np.maximum(box.dims + rng.normal(0.0, 1.0, 3) * cfg.sigma_dim, 0.1)
    return Box3(c, dims, yaw)


def _odom_noise(rng, sigma_t: float, sigma_r: float) -> Pose:
    w = rng.normal(0.0, 1.0, 3) * sigma_r
    v = rng.normal(0.0, 1.0, 3) * sigma_t
    return Pose(so3_exp(w), v)


def generate(config: SimConfig, seed: int) -> Scenario:
    """Synthesize a scenario; identical (config, seed) give identical output."""
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    T = cfg.n_frames

    # ego: planar constant speed / yaw-rate
    ego_gt = []
    x = y = yaw = 0.0
    for t in range(T):
        ego_gt.append(Pose.from_xyz_yaw([x, y, cfg.sensor_height], yaw))
        x += cfg.ego_speed * math.cos(yaw) * cfg.dt
        y += cfg.ego_speed * math.sin(yaw) * cfg.dt
        yaw += cfg.ego_yaw_rate * cfg.dt
    ego_span = cfg.ego_speed * cfg.dt * T

    # traffic: platoons per lane sharing a speed profile
    offsets = _lane_offsets(cfg.n_lanes, cfg.lane_width)
    lane_static = rng.random(cfg.n_lanes) < cfg.p_static_lane
    lane_dir = np.where(np.arange(cfg.n_lanes) % 2 == 0, -1.0, 1.0)
    lane_speed = [_speed_profile(rng, cfg, bool(s)) for s in lane_static]
    dims = _sample_dims(rng, cfg, cfg.n_agents)
    lane_of = np.arange(cfg.n_agents) % cfg.n_lanes
    agents = []
    for lane in range(cfg.n_lanes):
        members = np.flatnonzero(lane_of == lane)
        if members.size == 0:
            continue
        lengths = dims[members, 0]
        gaps = rng.uniform(cfg.gap_min, cfg.gap_max, members.size)
        rel = np.concatenate([[0.0], np.cumsum(lengths[:-1] / 2 + lengths[1:] / 2 + gaps[1:])])
        # platoon centred near the middle of the ego path, shifted against its motion
        travel = lane_dir[lane] * float(np.sum(lane_speed[lane])) * cfg.dt
        centre = ego_span / 2.0 - travel / 2.0 + rng.uniform(-5.0, 5.0)
        xs0 = centre + rel - rel[-1] / 2.0
        heading = 0.0 if lane_dir[lane] > 0 else math.pi
        for k, a_id in enumerate(members):
            omega = rng.normal() * cfg.yaw_rate_sigma if cfg.yaw_rate_sigma > 0 else 0.0
            px, py, ph = xs0[k], offsets[lane], heading
            poses = []
            for t in range(T):
                poses.append(Pose.from_xyz_yaw([px, py, dims[a_id, 2] / 2.0], ph))
                v = lane_speed[lane][t]
                px += v * math.cos(ph) * cfg.dt
                py += v * math.sin(ph) * cfg.dt
                if v > 0:
                    ph += omega * cfg.dt
            agents.append(AgentTrack(int(a_id), dims[a_id].copy(), poses, bool(lane_static[lane])))
    agents.sort(key=lambda a: a.id)

    # static map points, kept off the carriageway
    road_half = (cfg.n_lanes // 2 + 1) * cfg.lane_width + 1.0
    n = cfg.n_landmarks
    lx = rng.uniform(-cfg.landmark_margin, ego_span + cfg.landmark_margin, n)
    ly = rng.uniform(road_half, road_half + cfg.landmark_margin, n) * np.where(rng.random(n) < 0.5, -1.0, 1.0)
    lz = rng.uniform(0.0, 8.0, n)
    landmarks = np.column_stack([lx, ly, lz]) if n else np.zeros((0, 3))

    # odometry: integrate noisy relative motion
    ego_odom = [ego_gt[0]]
    for t in range(1, T):
        rel = ego_gt[t - 1].inverse().compose(ego_gt[t])
        ego_odom.append(ego_odom[-1].compose(rel).compose(_odom_noise(rng, cfg.sigma_odom_t, cfg.sigma_odom_r)))

    frames = []
    for t in range(T):
        to_sensor = ego_gt[t].inverse()
        dets, visible = [], []
        for a in agents:
            box_s = a.box(t).transformed(to_sensor)
            if not _visible(cfg, box_s.center, cfg.sensor_range):
                continue
            visible.append(a.id)
            if rng.random() < cfg.p_miss:
                continue
            pts = sample_surface(rng, box_s, cfg.n_points, cfg.sigma_pt)
            dets.append(Detection(_noisy_box(rng, box_s, cfg), pts, a.id, False))
        n_fp = rng.poisson(cfg.p_fp) if cfg.p_fp > 0 else 0
        for _ in range(n_fp):
            r = cfg.sensor_range * math.sqrt(rng.random())
            half_fov = math.radians(min(cfg.fov_deg, 360.0)) / 2.0
            th = rng.uniform(-half_fov, half_fov)
            d = _sample_dims(rng, cfg, 1)[0]
            c = np.array([r * math.cos(th), r * math.sin(th), d[2] / 2.0 - cfg.sensor_height])
            box_s = Box3(c, d, rng.uniform(-math.pi, math.pi))
            dets.append(Detection(box_s, sample_surface(rng, box_s, cfg.n_points, cfg.sigma_pt), None, True))
        order = rng.permutation(len(dets))
        dets = [dets[i] for i in order]

        if n:
            local = to_sensor.apply(landmarks)
            seen = np.flatnonzero(np.hypot(local[:, 0], local[:, 1]) <= cfg.landmark_range)
            obs = local[seen] + rng.normal(0.0, 1.0, (seen.size, 3)) * cfg.sigma_lm
        else:
            seen, obs = np.zeros(0, dtype=int), np.zeros((0, 3))
        frames.append(Frame(t, t * cfg.dt, ego_gt[t], ego_odom[t], dets, seen.astype(int), obs, visible))

    return Scenario(cfg, int(seed), frames, landmarks, agents)


def inject_noise(s: Scenario, sigma: NoiseSpec, seed: int) -> Scenario:
    """Return a copy of ``s`` with extra Gaussian noise on detections and/or odometry."""
    if not (sigma.touches_detections or sigma.touches_ego):
        return copy.deepcopy(s)
    rng_det = np.random.default_rng([seed, 0])
    rng_ego = np.random.default_rng([seed, 1])
    frames = []
    prev_old = prev_new = None
    for f in s.frames:
        dets = f.detections
        if sigma.touches_detections:
            dets = [replace(d, box=_noisy_box(rng_det, d.box, sigma)) for d in f.detections]
        odom = f.ego_odom
        if sigma.touches_ego and prev_old is not None:
            rel = prev_old.inverse().compose(f.ego_odom)
            odom = prev_new.compose(rel).compose(_odom_noise(rng_ego, sigma.sigma_odom_t, sigma.sigma_odom_r))
        prev_old, prev_new = f.ego_odom, odom
        frames.append(replace(f, detections=dets, ego_odom=odom))
    return replace(s, frames=frames)


def validate_scenario(s: Scenario) -> list:
    """Check scenario invariants; returns a list of human-readable problems."""
    problems = []
    cfg = s.config
    ids = [a.id for a in s.agents]
    if len(set(ids)) != len(ids):
        problems.append("agent ids are not unique")
    if len(s.frames) != cfg.n_frames:
        problems.append(f"{len(s.frames)} frames, config declares {cfg.n_frames}")
    n_lm = len(s.landmarks_gt)
    for a in s.agents:
        if len(a.poses) != len(s.frames):
            problems.append(f"agent {a.id}: {len(a.poses)} poses for {len(s.frames)} frames")
    margin = 3.0 * (cfg.sigma_pos + cfg.sigma_pt + cfg.sigma_dim)
    prev_ts = None
    for k, f in enumerate(s.frames):
        if f.index != k:
            problems.append(f"frame {k}: index {f.index}")
        if prev_ts is not None and not math.isclose(f.timestamp - prev_ts, cfg.dt, rel_tol=1e-9, abs_tol=1e-12):
            problems.append(f"frame {k}: timestamp step {f.timestamp - prev_ts} != dt {cfg.dt}")
        prev_ts = f.timestamp
        for name, p in (("ego_gt", f.ego_gt), ("ego_odom", f.ego_odom)):
            if not p.is_valid(1e-6):
                problems.append(f"frame {k}: {name} is not a rigid transform")
        for j, d in enumerate(f.detections):
            if np.any(d.box.dims <= 0):
                problems.append(f"frame {k} detection {j}: non-positive dims")
            if len(d.points) and not np.all(d.box.contains(d.points, scale=1.5, margin=margin)):
                problems.append(f"frame {k} detection {j}: points outside 1.5x box extent")
            if d.gt_agent_id is not None and d.gt_agent_id not in ids:
                problems.append(f"frame {k} detection {j}: unknown agent {d.gt_agent_id}")
        if len(f.landmark_ids) and (f.landmark_ids.min() < 0 or f.landmark_ids.max() >= n_lm):
            problems.append(f"frame {k}: landmark observation with unknown id")
        if len(f.landmark_ids) != len(f.landmark_obs):
            problems.append(f"frame {k}: landmark ids and observations differ in length")
    return problems


# -- JSON-lines serialization -------------------------------------------------

def _pose_json(p: Pose) -> dict:
    return {"translation": p.translation.tolist(), "quaternion": p.quaternion().tolist()}


def _pose_from(d: dict) -> Pose:
    return Pose.from_quaternion(d["translation"], d["quaternion"])


def _box_json(b: Box3) -> dict:
    return {"center": b.center.tolist(), "dims": b.dims.tolist(), "yaw": b.yaw}


def _box_from(d: dict) -> Box3:
    return Box3(d["center"], d["dims"], d["yaw"])


def _dump(s: Scenario) -> str:
    header = {
        "type": "header",
        "seed": s.seed,
        "config": s.config.to_dict(),
        "landmarks_gt": np.asarray(s.landmarks_gt).tolist(),
        "agents": [{"id": a.id, "dims": a.dims.tolist(), "static": a.static} for a in s.agents],
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    for t, f in enumerate(s.frames):
        rec = {
            "type": "frame",
            "index": f.index,
            "timestamp": f.timestamp,
            "ego_gt": _pose_json(f.ego_gt),
            "ego_odom": _pose_json(f.ego_odom),
            "detections": [
                {"box": _box_json(d.box), "points": np.asarray(d.points).tolist(),
                 "gt_agent_id": d.gt_agent_id, "clutter": d.clutter}
                for d in f.detections
            ],
            "landmark_obs": [{"id": int(i), "obs": o.tolist()} for i, o in zip(f.landmark_ids, f.landmark_obs)],
            "gt_visible": list(f.gt_visible),
            "agents_gt": [{"id": a.id, **_pose_json(a.poses[t])} for a in s.agents],
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def _load(text: str) -> Scenario:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty scenario file")
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise ValueError("first line must be the scenario header")
    cfg = SimConfig.from_dict(header["config"])
    agent_meta = header["agents"]
    poses = {a["id"]: [] for a in agent_meta}
    frames = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        dets = [
            Detection(_box_from(d["box"]), np.asarray(d["points"], dtype=float).reshape(-1, 3),
                      d.get("gt_agent_id"), bool(d.get("clutter", False)))
            for d in rec["detections"]
        ]
        obs = rec["landmark_obs"]
        frames.append(Frame(
            rec["index"], rec["timestamp"], _pose_from(rec["ego_gt"]), _pose_from(rec["ego_odom"]), dets,
            np.asarray([o["id"] for o in obs], dtype=int),
            np.asarray([o["obs"] for o in obs], dtype=float).reshape(-1, 3),
            list(rec.get("gt_visible", [])),
        ))
        for a in rec.get("agents_gt", []):
            poses[a["id"]].append(_pose_from(a))
    agents = [AgentTrack(a["id"], np.asarray(a["dims"], dtype=float), poses[a["id"]], bool(a.get("static", False)))
              for a in agent_meta]
    lm = np.asarray(header["landmarks_gt"], dtype=float).reshape(-1, 3)
    return Scenario(cfg, int(header["seed"]), frames, lm, agents)


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(s.to_jsonl(), encoding="utf-8")


def load_scenario(path) -> Scenario:
    return Scenario.from_jsonl(Path(path).read_text(encoding="utf-8"))
