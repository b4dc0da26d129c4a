"""CLEAR-MOT tracking scores and ego trajectory errors."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import EvaluationError, check_float
from .geometry import Pose, iou3d
from .registration import kabsch

__all__ = ["FrameCounts", "MotReport", "TrajReport", "clear_mot", "trajectory_errors"]


@dataclass
class FrameCounts:
    frame: int
    gt: int
    tp: int
    fp: int
    fn: int
    switches: int


@dataclass
class MotReport:
    mota: float  # percent
    motp: float  # mean 3D IoU of true positives, percent
    ids: int
    recall: float
    precision: float
    n_gt: int
    tp: int
    fp: int
    fn: int
    per_frame: list = field(default_factory=list)

    def to_dict(self, per_frame: bool = True) -> dict:
        d = asdict(self)
        if not per_frame:
            d.pop("per_frame")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def per_frame_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "gt", "tp", "fp", "fn", "switches"])
        for c in self.per_frame:
            w.writerow([c.frame, c.gt, c.tp, c.fp, c.fn, c.switches])
        return buf.getvalue()


@dataclass
class TrajReport:
    ape_rmse: float
    rpe_rmse: float
    aligned: bool
    ape_per_frame: list = field(default_factory=list)
    rpe_per_step: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def per_frame_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "ape", "rpe"])
        for k, a in enumerate(self.ape_per_frame):
            w.writerow([k, a, self.rpe_per_step[k - 1] if k >= 1 else ""])
        return buf.getvalue()


def _as_frames(est, n_frames: int) -> list:
    if isinstance(est, dict):
        bad = [k for k in est if not 0 <= int(k) < n_frames]
        if bad:
            raise EvaluationError(f"estimate frame {bad[0]} outside the scenario's {n_frames} frames")
        return [list(est.get(k, [])) for k in range(n_frames)]
    est = list(est)
    if len(est) != n_frames:
        raise EvaluationError(f"estimates cover {len(est)} frames, ground truth has {n_frames}")
    return [list(e) for e in est]


def clear_mot(est, gt, match_thresh: float = 2.0) -> MotReport:
    """CLEAR-MOT scores of estimated tracks against ground truth.

    ``est`` holds, per frame, a list of ``(track id, Box3)``. ``gt`` is a
    :class:`~starmot.simulator.Scenario` or a per-frame list of
    ``(object id, Box3)``. A pair counts when the centre distance is strictly
    below ``match_thresh``; last frame's pairings are kept while still valid,
    remaining pairs are formed greedily by increasing distance.
    """
    match_thresh = check_float("match_thresh", match_thresh, min_value=0.0)
    if hasattr(gt, "gt_boxes"):
        gt_frames = [gt.gt_boxes(k) for k in range(len(gt.frames))]
    else:
        gt_frames = [list(g) for g in gt]
    est_frames = _as_frames(est, len(gt_frames))

    prev = {}  # gt id -> est id, previous frame
    last = {}  # gt id -> est id, last frame it was matched
    tp = fp = fn = ids = n_gt = 0
    ious = []
    per_frame = []
    for k, (g, e) in enumerate(zip(gt_frames, est_frames)):
        gid = [i for i, _ in g]
        eid = [i for i, _ in e]
        if len(set(eid)) != len(eid):
            raise EvaluationError(f"frame {k}: duplicate estimate ids")
        gc = np.array([b.center for _, b in g]).reshape(-1, 3)
        ec = np.array([b.center for _, b in e]).reshape(-1, 3)
        d = np.linalg.norm(gc[:, None, :] - ec[None, :, :], axis=2) if len(g) and len(e) else np.zeros((len(g), len(e)))
        gi = {x: i for i, x in enumerate(gid)}
        ei = {x: j for j, x in enumerate(eid)}
        pairs = {}
        used_e = set()
        for gx, ex in prev.items():
            if gx in gi and ex in ei and d[gi[gx], ei[ex]] < match_thresh:
                pairs[gx] = ex
                used_e.add(ex)
        cand = [(d[i, j], i, j) for i in range(len(g)) for j in range(len(e))
                if d[i, j] < match_thresh and gid[i] not in pairs and eid[j] not in used_e]
        cand.sort()
        for _, i, j in cand:
            if gid[i] in pairs or eid[j] in used_e:
                continue
            pairs[gid[i]] = eid[j]
            used_e.add(eid[j])
        sw = sum(1 for gx, ex in pairs.items() if gx in last and last[gx] != ex)
        for gx, ex in pairs.items():
            ious.append(iou3d(g[gi[gx]][1], e[ei[ex]][1]))
            last[gx] = ex
        n_tp = len(pairs)
        c = FrameCounts(k, len(g), n_tp, len(e) - n_tp, len(g) - n_tp, sw)
        per_frame.append(c)
        tp += c.tp
        fp += c.fp
        fn += c.fn
        ids += sw
        n_gt += c.gt
        prev = pairs
    mota = 100.0 * (1.0 - (fn + fp + ids) / n_gt) if n_gt else (100.0 if fp == 0 else -math.inf)
    motp = 100.0 * float(np.mean(ious)) if ious else 0.0
    return MotReport(
        mota=mota, motp=motp, ids=ids,
        recall=tp / n_gt if n_gt else 0.0,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        n_gt=n_gt, tp=tp, fp=fp, fn=fn, per_frame=per_frame,
    )


def _translations(poses) -> np.ndarray:
    return np.array([p.translation for p in poses], dtype=float).reshape(-1, 3)


def trajectory_errors(est, gt, align: bool = True) -> TrajReport:
    """APE (translation RMSE, optionally after rigid alignment) and RPE (one-step translation RMSE)."""
    est, gt = list(est), list(gt)
    if len(est) != len(gt):
        raise EvaluationError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise EvaluationError("trajectories need at least two poses")
    pe, pg = _translations(est), _translations(gt)
    if align:
        pe = kabsch(pe, pg).apply(pe)
    ape = np.linalg.norm(pe - pg, axis=1)
    rpe = []
    for k in range(len(est) - 1):
        de = est[k].inverse().compose(est[k + 1])
        dg = gt[k].inverse().compose(gt[k + 1])
        rpe.append(float(np.linalg.norm(dg.inverse().compose(de).translation)))
    rpe = np.asarray(rpe)
    return TrajReport(
        ape_rmse=float(np.sqrt(np.mean(ape**2))),
        rpe_rmse=float(np.sqrt(np.mean(rpe**2))),
        aligned=bool(align),
        ape_per_frame=ape.tolist(),
        rpe_per_step=rpe.tolist(),
    )
