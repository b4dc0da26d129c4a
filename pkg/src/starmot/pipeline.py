"""Per-frame tracking and optimization loop.

For every keyframe: propagate the ego estimate with odometry, predict the
tracklets, build the detection and tracklet graphs, associate, refine the
ego and the object poses in the object-centric window, update the
tracklets, promote mature frames and (in the background) solve the fusion
window. A fusion solve submitted at the end of frame ``t`` is published at
the end of frame ``t + 1`` whether or not it ran on another thread, so the
schedule never shows in the results.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import ConfigError, check_float, check_int, check_weights
from .geometry import Box3, Pose
from .graph import build_frame_graph, node_from_box
from .metrics import clear_mot, trajectory_errors
from .msga import DEFAULT_WEIGHTS, MatchResult, associate
from .ogo import LMConfig, MapFactor, ObjectCentricOptimizer, ObjectFactor, VariableStore, solve, solve_ego_centric
from .registration import IcpConfig
from .tracking import KalmanConfig, Status, TrackManager

__all__ = ["ABLATIONS", "RunConfig", "FrameRecord", "RunRecord", "run", "GraphTracker", "residual_curves"]

ABLATIONS = ("spatial", "neighborhood", "shape", "ocow", "oefw")
_CUE_INDEX = {"neighborhood": 0, "spatial": 1, "shape": 2}


# settings that affect wall-clock only, never results
_SCHEDULE_FIELDS = ("concurrency", "workers")


@dataclass(frozen=True)
class RunConfig:
    K: int = 3
    L: float = 5.0
    tau: float = 0.5
    weights: tuple = DEFAULT_WEIGHTS
    giou_mode: str = "enclosing"
    icp_max_correspondence_distance: float = 0.3
    icp_max_iterations: int = 30
    icp_yaw_seeds: int = 4
    keyframe_stride: int = 1
    window_w: int = 4
    window_size: int = 8
    ablate: tuple = ()
    optimize: bool = True
    promote_moving: bool = False
    static_speed: float = 0.2
    robust: bool = True
    huber_delta: float = 1.0
    min_hits: int = 1
    concurrency: bool = False
    workers: int = 1
    kalman: KalmanConfig = field(default_factory=KalmanConfig)

    def __post_init__(self):
        check_int("K", self.K, min_value=1)
        check_float("L", self.L, min_value=0.0, strict=True)
        check_float("tau", self.tau, min_value=0.0, max_value=1.0)
        try:
            check_weights(self.weights, "lambda")
        except ValueError as exc:
            raise ConfigError("lambda", str(exc)) from None
        if self.giou_mode not in ("enclosing", "literal"):
            raise ConfigError("giou_mode", f"expected 'enclosing' or 'literal', got {self.giou_mode!r}")
        check_int("keyframe_stride", self.keyframe_stride, min_value=1)
        check_int("window_w", self.window_w, min_value=0)
        check_int("window_size", self.window_size, min_value=2)
        check_int("min_hits", self.min_hits, min_value=1)
        check_int("workers", self.workers, min_value=1)
        for a in self.ablate:
            if a not in ABLATIONS:
                raise ConfigError("ablate", f"unknown ablation {a!r}; choose from {', '.join(ABLATIONS)}")
        if "ocow" in self.ablate and "oefw" in self.ablate:
            raise ConfigError("ablate", "cannot ablate both optimization windows; use optimize=false")
        self.effective_weights  # raises when every cue is ablated

    @property
    def effective_weights(self) -> tuple:
        w = list(check_weights(self.weights, "lambda"))
        for a in self.ablate:
            if a in _CUE_INDEX:
                w[_CUE_INDEX[a]] = 0.0
        s = sum(w)
        if s <= 0:
            raise ConfigError("lambda", "all association cues are zero after ablation")
        w = [x / s for x in w]
        # keep the sum exactly one for the validator
        w[int(np.argmax(w))] += 1.0 - sum(w)
        return tuple(w)

    @property
    def window_mode(self) -> str:
        if "ocow" in self.ablate:
            return "oefw"
        if "oefw" in self.ablate:
            return "ocow"
        return "both"

    @property
    def icp(self) -> IcpConfig:
        return IcpConfig(self.icp_max_correspondence_distance, self.icp_max_iterations, 1e-6, self.icp_yaw_seeds)

    @property
    def lm(self) -> LMConfig:
        return LMConfig(robust=self.robust, huber_delta=self.huber_delta)

    def to_dict(self, schedule: bool = True) -> dict:
        """Plain-dict view; ``schedule=False`` drops settings that only change how work is scheduled."""
        skip = {"kalman"} if schedule else {"kalman", *_SCHEDULE_FIELDS}
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}
        d["weights"] = list(self.weights)
        d["ablate"] = list(self.ablate)
        d["kalman"] = {f.name: getattr(self.kalman, f.name) for f in fields(self.kalman)}
        return d


@dataclass(frozen=True)
class FrameRecord:
    index: int
    keyframe: bool
    ego_pre: Pose
    ego_post: Pose
    tracks: tuple  # ((track id, Box3, status), ...)
    matches: tuple  # ((detection index, track id), ...)
    births: tuple  # detection indices


@dataclass
class RunRecord:
    frames: list
    ego_final: list
    traces: list  # (frame, stage, costs tuple)
    diagnostics: list
    births_total: int
    config: dict
    timings: dict = field(default_factory=dict)  # stage -> seconds per frame; not serialized

    def est_tracks(self) -> list:
        return [[(tid, box) for tid, box, _ in f.tracks] for f in self.frames]

    @property
    def final_oefw_cost(self) -> float:
        costs = [c[-1] for _, stage, c in self.traces if stage == "oefw" and c]
        return costs[-1] if costs else 0.0

    def to_dict(self, include_timings: bool = False) -> dict:
        def pose(p):
            return {"translation": p.translation.tolist(), "rotation": p.rotation.tolist()}

        d = {
            "config": self.config,
            "births_total": self.births_total,
            "frames": [
                {
                    "index": f.index,
                    "keyframe": f.keyframe,
                    "ego_pre": pose(f.ego_pre),
                    "ego_post": pose(f.ego_post),
                    "tracks": [{"id": tid, "center": b.center.tolist(), "dims": b.dims.tolist(), "yaw": b.yaw,
                                "status": st} for tid, b, st in f.tracks],
                    "matches": [list(m) for m in f.matches],
                    "births": list(f.births),
                }
                for f in self.frames
            ],
            "ego_final": [pose(p) for p in self.ego_final],
            "traces": [{"frame": fr, "stage": st, "costs": list(c)} for fr, st, c in self.traces],
            "diagnostics": list(self.diagnostics),
        }
        if include_timings:
            d["timings"] = self.timings
        return d

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), sort_keys=True, separators=(",", ":"))

    def residuals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "iteration", "stage", "total_cost"])
        for fr, stage, costs in self.traces:
            for it, c in enumerate(costs):
                w.writerow([fr, it, stage, repr(float(c))])
        return buf.getvalue()

    def timing_summary(self) -> dict:
        return {k: {"mean_ms": 1e3 * float(np.mean(v)), "total_s": float(np.sum(v))} for k, v in self.timings.items()}


@dataclass(frozen=True)
class _FrameInput:
    """Immutable per-frame view of the sensor data."""

    index: int
    odom: Pose
    det_poses: tuple
    det_dims: tuple
    det_points: tuple
    lm_ids: np.ndarray
    lm_obs: np.ndarray


def _ingest(frame) -> _FrameInput:
    return _FrameInput(
        frame.index, frame.ego_odom,
        tuple(d.box.pose for d in frame.detections),
        tuple(np.asarray(d.box.dims, dtype=float) for d in frame.detections),
        tuple(np.asarray(d.points, dtype=float).reshape(-1, 3) for d in frame.detections),
        np.asarray(frame.landmark_ids, dtype=int), np.asarray(frame.landmark_obs, dtype=float).reshape(-1, 3),
    )


def _frames_in(scenario, pool):
    if pool is None:
        for f in scenario.frames:
            yield _ingest(f)
        return
    # one frame of lookahead: ingest of t+1 overlaps processing of t
    frames = scenario.frames
    pending = pool.submit(_ingest, frames[0]) if frames else None
    for k in range(len(frames)):
        cur = pending.result()
        pending = pool.submit(_ingest, frames[k + 1]) if k + 1 < len(frames) else None
        yield cur


class _Runner:
    def __init__(self, scenario, cfg: RunConfig):
        self.s = scenario
        self.cfg = cfg
        self.dt = scenario.dt
        self.weights = cfg.effective_weights
        self.icp = cfg.icp
        self.tm = TrackManager(cfg.kalman)
        self.opt = ObjectCentricOptimizer(cfg.window_size, cfg.window_w, cfg.window_mode, cfg.lm,
                                          promote_moving=cfg.promote_moving)
        self.timings = {k: [] for k in ("ingest", "predict", "graphs", "association", "ocow", "update", "oefw")}
        self.frames = []
        self.diagnostics = []
        self.pending = None  # (frame submitted, future or outcome)

    def _tick(self, stage, t0):
        t1 = time.perf_counter()
        self.timings[stage].append(t1 - t0)
        return t1

    def static_tracks(self) -> set:
        return {t.id for t in self.tm.alive() if t.hits >= 2 and t.speed < self.cfg.static_speed}

    def run(self) -> RunRecord:
        cfg = self.cfg
        bg = ThreadPoolExecutor(max_workers=1) if cfg.concurrency else None
        ingest_pool = ThreadPoolExecutor(max_workers=1) if cfg.concurrency else None
        pair_pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
        try:
            prev_in = None
            last_key = None
            t0 = time.perf_counter()
            for fin in _frames_in(self.s, ingest_pool):
                t0 = self._tick("ingest", t0)
                self._step(fin, prev_in, last_key, bg, pair_pool)
                if fin.index % cfg.keyframe_stride == 0:
                    last_key = fin.index
                prev_in = fin
                t0 = time.perf_counter()
            self._flush()
        finally:
            for p in (bg, ingest_pool, pair_pool):
                if p is not None:
                    p.shutdown(wait=True)
        ego_final = [self.opt.store.ego.get(f.index, f.ego_post) for f in self.frames]
        traces = [(fr, r.stage, tuple(r.trace)) for fr, r in self.opt.results]
        return RunRecord(self.frames, ego_final, traces, self.diagnostics, self.tm.births_total,
                         self.cfg.to_dict(schedule=False), self.timings)

    def _ego_init(self, fin, prev_in) -> Pose:
        if prev_in is None:
            return fin.odom
        prev_est = self.opt.store.ego.get(prev_in.index)
        if prev_est is None:
            prev_est = self.frames[-1].ego_post
        return prev_est.compose(prev_in.odom.inverse().compose(fin.odom))

    def _step(self, fin, prev_in, last_key, bg, pair_pool):
        cfg = self.cfg
        t = fin.index
        ego = self._ego_init(fin, prev_in)
        t0 = time.perf_counter()
        if prev_in is not None:
            self.tm.predict_all(self.dt)
        t0 = self._tick("predict", t0)
        if t % cfg.keyframe_stride != 0:
            # between keyframes: odometry only, report the predicted tracks
            self.opt.store.ego[t] = ego
            tracks = tuple((tr.id, tr.box, tr.status.value) for tr in self.tm.alive()
                           if tr.last_seen == last_key and tr.hits >= cfg.min_hits)
            self.frames.append(FrameRecord(t, False, ego, ego, tracks, (), ()))
            return

        det_world = [Box3.from_pose(ego.compose(p), d) for p, d in zip(fin.det_poses, fin.det_dims)]
        q_nodes = [node_from_box(i, b, ego.apply(pts)) for i, (b, pts) in enumerate(zip(det_world, fin.det_points))]
        active = self.tm.active(t, cfg.window_w)
        t_nodes = [node_from_box(tr.id, tr.box, tr.world_points()) for tr in active]
        qg = build_frame_graph(q_nodes, cfg.K, cfg.L)
        tg = build_frame_graph(t_nodes, cfg.K, cfg.L)
        t0 = self._tick("graphs", t0)
        match = associate(qg, tg, self.weights, cfg.tau, self.icp, cfg.L, cfg.giou_mode, pair_pool)
        t0 = self._tick("association", t0)

        det_track = dict(match.pairs)
        for k, det in enumerate(match.births):
            det_track[det] = self.tm.next_id + k
        static = self.static_tracks()
        if cfg.optimize:
            objects = [(det_track[i], fin.det_poses[i]) for i in range(len(fin.det_poses))]
            self.opt.add_frame(t, ego, fin.lm_ids, fin.lm_obs, objects)
            if cfg.window_mode == "oefw":
                res = self.opt.run_oefw_now(t, static)
                self._diagnose(t, [res])
            else:
                self._diagnose(t, self.opt.run_ocow(t, static))
        else:
            self.opt.store.ego[t] = ego
        ego_post = self.opt.store.ego[t]
        t0 = self._tick("ocow", t0)

        meas, pts = {}, {}
        for i in range(len(fin.det_poses)):
            obj = self.opt.store.objects.get((det_track[i], t)) if cfg.optimize else None
            pose = obj if obj is not None else ego_post.compose(fin.det_poses[i])
            meas[i] = Box3.from_pose(pose, fin.det_dims[i])
            pts[i] = ego_post.apply(fin.det_points[i])
        assigned = self.tm.step_lifecycle(match, meas, pts, t)
        if any(assigned[d] != det_track[d] for d in match.births):
            raise RuntimeError(f"frame {t}: tracklet id reservation out of sync")
        tracks = []
        for det in sorted(assigned):
            tr = self.tm.tracks[assigned[det]]
            if tr.hits >= cfg.min_hits:
                tracks.append((tr.id, tr.box, tr.status.value))
        tracks.sort(key=lambda x: x[0])
        t0 = self._tick("update", t0)

        if cfg.optimize and cfg.window_mode == "both":
            self._publish_pending()
            objs, moved = self.opt.run_promotion(self.static_tracks())
            if (objs or moved) and self.opt.window.oefw:
                job = self.opt.oefw_job(self.static_tracks())
                self.pending = (t, bg.submit(job) if bg is not None else job())
        self._tick("oefw", t0)
        self.frames.append(FrameRecord(t, True, ego, ego_post, tuple(tracks), tuple(sorted(match.pairs)),
                                       tuple(match.births)))

    def _publish_pending(self):
        if self.pending is None:
            return
        frame, job = self.pending
        outcome = job.result() if hasattr(job, "result") else job
        self.opt.publish_oefw(frame, outcome)
        self._diagnose(frame, [outcome[1]])
        self.pending = None

    def _flush(self):
        self._publish_pending()

    def _diagnose(self, frame, results):
        for r in results:
            if r.aborted:
                self.diagnostics.append(f"frame {frame} {r.stage}: {r.diagnostic}")


def run(scenario, cfg: RunConfig = RunConfig()) -> RunRecord:
    """Track and localize through ``scenario``; deterministic in (scenario, cfg)."""
    if not scenario.frames:
        raise ConfigError("scenario", "scenario has no frames")
    return _Runner(scenario, cfg).run()


def evaluate(record: RunRecord, scenario, match_thresh: float = 2.0, align: bool = True) -> dict:
    mot = clear_mot(record.est_tracks(), scenario, match_thresh)
    traj = trajectory_errors(record.ego_final, [f.ego_gt for f in scenario.frames], align)
    odom = trajectory_errors([f.ego_odom for f in scenario.frames], [f.ego_gt for f in scenario.frames], align)
    return {
        "mota": mot.mota, "motp": mot.motp, "ids": mot.ids, "recall": mot.recall, "precision": mot.precision,
        "ape_rmse": traj.ape_rmse, "rpe_rmse": traj.rpe_rmse, "odom_ape_rmse": odom.ape_rmse,
        "final_oefw_cost": record.final_oefw_cost, "births_total": record.births_total,
    }


class GraphTracker(BaseEstimator):
    """Estimator facade over :func:`run`: ``fit(scenario)`` runs the tracker.

    ``predict`` returns per-frame ``(track id, Box3)`` lists of the fitted
    run, ``score`` the MOTA (percent) against the scenario's ground truth.
    """

    def __init__(self, K=3, L=5.0, tau=0.5, weights=DEFAULT_WEIGHTS, keyframe_stride=1, window_w=4,
                 window_size=8, ablate=(), optimize=True, concurrency=False):
        self.K = K
        self.L = L
        self.tau = tau
        self.weights = weights
        self.keyframe_stride = keyframe_stride
        self.window_w = window_w
        self.window_size = window_size
        self.ablate = ablate
        self.optimize = optimize
        self.concurrency = concurrency

    def _config(self) -> RunConfig:
        p = self.get_params()
        p["weights"] = tuple(p["weights"])
        p["ablate"] = tuple(p["ablate"])
        return RunConfig(**p)

    def fit(self, scenario, y=None):
        self.record_ = run(scenario, self._config())
        self.n_frames_ = len(self.record_.frames)
        return self

    def predict(self, scenario=None):
        if scenario is not None:
            self.fit(scenario)
        if not hasattr(self, "record_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("GraphTracker is not fitted; call fit(scenario) first")
        return self.record_.est_tracks()

    def score(self, scenario, y=None) -> float:
        if not hasattr(self, "record_") or self.n_frames_ != len(scenario.frames):
            self.fit(scenario)
        return clear_mot(self.record_.est_tracks(), scenario).mota


# -- object-centric vs ego-centric initialization ---------------------------

def window_problem(scenario, frames, static_speed: float = 0.2):
    """Factor graph over ``frames`` with ground-truth association (clutter dropped).

    Returns ``(store, map_factors, object_factors, tied)``: egos start at the
    odometry, landmarks and objects at their first odometry-based sighting,
    ``tied`` holds the agents slower than ``static_speed``.
    """
    frames = sorted(frames)
    store = VariableStore()
    mf, of = [], []
    for t in frames:
        fr = scenario.frames[t]
        ego = fr.ego_odom
        store.ego[t] = ego
        for lid, z in zip(fr.landmark_ids, fr.landmark_obs):
            lid = int(lid)
            if lid not in store.landmarks:
                store.landmarks[lid] = ego.apply(z)
            mf.append(MapFactor(t, lid, np.asarray(z, dtype=float)))
        for d in fr.detections:
            if d.gt_agent_id is None:
                continue
            of.append(ObjectFactor(t, int(d.gt_agent_id), d.box.pose))
            store.objects[(int(d.gt_agent_id), t)] = ego.compose(d.box.pose)
    dt = scenario.dt
    tied = set()
    for a in scenario.agents:
        v = np.linalg.norm(a.poses[-1].translation - a.poses[0].translation) / max(dt * (len(a.poses) - 1), dt)
        if v < static_speed:
            tied.add(a.id)
    return store, mf, of, tied


def residual_curves(scenario, frames, cfg: LMConfig = LMConfig()) -> dict:
    """Joint objective reached from odometry directly vs after the two-stage object-centric solve.

    Both runs fix the first frame and finish with the same joint solve; the
    returned traces are the per-iteration joint costs.
    """
    store, mf, of, tied = window_problem(scenario, frames)
    frames = sorted(frames)
    _, base = solve_ego_centric(store, mf, of, frames, cfg, tied)
    oc = store.copy()
    s1 = solve(oc, mf, [], set(frames[1:]), {f.landmark for f in mf}, False, (), cfg, "ocow-1")
    for f in of:
        if f.track not in tied:
            oc.objects[(f.track, f.frame)] = oc.ego[f.frame].compose(f.det)
    s2 = solve(oc, [], [f for f in of if f.track in tied], (), (), True, tied, cfg, "ocow-2")
    _, joint = solve_ego_centric(oc, mf, of, frames, cfg, tied)
    return {"ego_centric": base, "object_centric": [s1, s2, joint]}
