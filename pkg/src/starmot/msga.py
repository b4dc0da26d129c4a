"""Multi-criteria star-graph association.

A detection star and a tracklet star are compared on three cues:

* neighborhood: how well the relative transforms to neighbours agree,
  with leaf correspondence picked greedily per query edge;
* spatial: normalized GIoU of the two centre boxes;
* shape: ICP fitness of the two centre point clouds.

The weighted sum is gated by ``tau`` and a one-to-one assignment maximizing
the total score is solved over the allowed pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_float, check_score_matrix, check_weights
from .geometry import Pose, frobenius_deviation, ngiou
from .graph import FrameGraph, StarGraph, build_frame_graph
from .registration import IcpConfig, shape_score

__all__ = [
    "DEFAULT_WEIGHTS",
    "ConsistencyScore",
    "MatchResult",
    "edge_consistency",
    "greedy_edge_match",
    "neighborhood_score",
    "pair_score",
    "km_assign",
    "associate",
    "StarGraphAssociator",
]

DEFAULT_WEIGHTS = (0.3, 0.4, 0.3)


@dataclass(frozen=True)
class ConsistencyScore:
    neighborhood: float
    spatial: float
    shape: float
    weights: tuple = DEFAULT_WEIGHTS

    @property
    def combined(self) -> float:
        l1, l2, l3 = self.weights
        return l1 * self.neighborhood + l2 * self.spatial + l3 * self.shape


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # [(detection id, tracklet id)]
    births: list = field(default_factory=list)
    unmatched_tracklets: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)  # (det, trk) -> ConsistencyScore | float

    def total(self) -> float:
        vals = []
        for k in self.pairs:
            s = self.scores[k]
            vals.append(s.combined if isinstance(s, ConsistencyScore) else float(s))
        return math.fsum(vals)

    def as_dict(self) -> dict:
        return dict(self.pairs)


def edge_consistency(e_q: Pose, e_t: Pose) -> float:
    return math.exp(-frobenius_deviation(e_q.compose(e_t.inverse())))


def _edge_arrays(edges):
    R = np.array([e.rotation for e in edges])
    t = np.array([e.translation for e in edges])
    return R, t


def _consistency_matrix(q_edges, t_edges) -> np.ndarray:
    Rq, tq = _edge_arrays(q_edges)
    Rt, tt = _edge_arrays(t_edges)
    # R = Rq Rt^T ; t = tq - R tt
    R = np.einsum("aij,bkj->abik", Rq, Rt)
    t = tq[:, None, :] - np.einsum("abij,bj->abi", R, tt)
    dR = R - np.eye(3)
    dev = np.sqrt(np.einsum("abij,abij->ab", dR, dR) + np.einsum("abi,abi->ab", t, t))
    return np.exp(-dev)


def greedy_edge_match(g_q: StarGraph, g_t: StarGraph) -> list:
    """For every query edge, the most consistent tracklet edge (lowest index on ties)."""
    if not g_q.neighbors or not g_t.neighbors:
        return []
    lmat = _consistency_matrix(g_q.edges, g_t.edges)
    best = np.argmax(lmat, axis=1)  # first maximum wins
    return [(a, int(b), float(lmat[a, b])) for a, b in enumerate(best)]


def neighborhood_score(g_q: StarGraph, g_t: StarGraph) -> float:
    nq, nt = len(g_q.neighbors), len(g_t.neighbors)
    if nq == 0 and nt == 0:
        return 1.0
    if nq == 0 or nt == 0:
        return 0.0
    matches = greedy_edge_match(g_q, g_t)
    return math.fsum(l for _, _, l in matches) / len(matches)


def _shape(g_q: StarGraph, g_t: StarGraph, icp: IcpConfig, tree=None) -> float:
    cq, ct = g_q.center, g_t.center
    init = ct.pose.compose(cq.pose.inverse())
    return shape_score(cq.points, ct.points, icp, init=init, pivot=ct.pose.translation, tree=tree)


def pair_score(g_q: StarGraph, g_t: StarGraph, weights=DEFAULT_WEIGHTS, icp: IcpConfig = IcpConfig(),
               giou_mode: str = "enclosing", skip_zero_weight: bool = True, tree=None,
               gate: float | None = None) -> ConsistencyScore:
    """Score one detection star against one tracklet star.

    With ``skip_zero_weight`` a criterion whose weight is 0 is not evaluated
    and reported as 0.0 (it cannot influence ``combined``). ``tree`` may hold a
    prebuilt k-d tree of the tracklet centre's points. With ``gate`` set, ICP
    is skipped (shape reported as 0.0) when even a perfect shape score could
    not lift ``combined`` to the gate, so the pair is rejected either way.
    """
    w = check_weights(weights)
    skip = [skip_zero_weight and x == 0.0 for x in w]
    nb = 0.0 if skip[0] else neighborhood_score(g_q, g_t)
    sp = 0.0 if skip[1] else ngiou(g_q.center.box, g_t.center.box, giou_mode)
    if gate is not None and w[0] * nb + w[1] * sp + w[2] < gate - 1e-12:
        skip[2] = True
    sh = 0.0 if skip[2] else _shape(g_q, g_t, icp, tree)
    return ConsistencyScore(nb, sp, sh, w)


def km_assign(scores, tau: float = 0.5, allowed=None) -> MatchResult:
    """Maximum-total one-to-one assignment over entries that are allowed and >= tau.

    Rows are detections and columns tracklets (both by index). Every row
    left unassigned is reported as a birth.
    """
    s = check_score_matrix(scores)
    n, m = s.shape
    ok = np.isfinite(s) & (s >= tau)
    if allowed is not None:
        ok &= np.asarray(allowed, dtype=bool)
    pairs = []
    if n and m and ok.any():
        rows = np.flatnonzero(ok.any(axis=1))
        cols = np.flatnonzero(ok.any(axis=0))
        sub_ok = ok[np.ix_(rows, cols)]
        sub = np.where(sub_ok, 1.0 - np.where(sub_ok, s[np.ix_(rows, cols)], 0.0), np.inf)
        # one private "stay unmatched" column per row, priced as a zero score
        dummy = np.full((rows.size, rows.size), np.inf)
        np.fill_diagonal(dummy, 1.0)
        r, c = linear_sum_assignment(np.hstack([sub, dummy]))
        for i, j in zip(r, c):
            if j < cols.size:
                pairs.append((int(rows[i]), int(cols[j])))
    pairs.sort()
    matched_r = {i for i, _ in pairs}
    matched_c = {j for _, j in pairs}
    return MatchResult(
        pairs=pairs,
        births=[i for i in range(n) if i not in matched_r],
        unmatched_tracklets=[j for j in range(m) if j not in matched_c],
        scores={(i, j): float(s[i, j]) for i, j in pairs},
    )


def candidate_mask(qg: FrameGraph, tg: FrameGraph, L: float) -> np.ndarray:
    if not len(qg) or not len(tg):
        return np.zeros((len(qg), len(tg)), dtype=bool)
    d = np.linalg.norm(qg.centers()[:, None, :] - tg.centers()[None, :, :], axis=2)
    return d <= L


def associate(qg: FrameGraph, tg: FrameGraph, weights=DEFAULT_WEIGHTS, tau: float = 0.5,
              icp: IcpConfig = IcpConfig(), L: float | None = None, giou_mode: str = "enclosing",
              executor=None) -> MatchResult:
    """Match detection stars to tracklet stars; ids in the result are node ids.

    Only tracklets whose centre lies within ``L`` of a detection are scored;
    all other entries are forbidden. ``executor`` (a ``concurrent.futures``
    executor) may be supplied to score candidate pairs concurrently.
    """
    w = check_weights(weights)
    tau = check_float("tau", tau)
    L = qg.L if L is None else L
    nq, nt = len(qg), len(tg)
    cand = candidate_mask(qg, tg, L)
    idx = list(zip(*np.nonzero(cand)))
    trees = {}
    if w[2] > 0:
        for j in sorted({int(j) for _, j in idx}):
            pts = tg.stars[j].center.points
            if len(pts):
                trees[j] = cKDTree(pts)

    def score(ij):
        i, j = ij
        return pair_score(qg.stars[i], tg.stars[j], w, icp, giou_mode, tree=trees.get(int(j)), gate=tau)

    results = list(executor.map(score, idx)) if executor is not None else [score(ij) for ij in idx]
    S = np.full((nq, nt), np.nan)
    per_pair = {}
    for (i, j), cs in zip(idx, results):
        S[i, j] = cs.combined
        per_pair[(int(i), int(j))] = cs
    raw = km_assign(np.nan_to_num(S, nan=0.0), tau, allowed=cand)
    q_ids = [s.center.id for s in qg.stars]
    t_ids = [s.center.id for s in tg.stars]
    return MatchResult(
        pairs=[(q_ids[i], t_ids[j]) for i, j in raw.pairs],
        births=[q_ids[i] for i in raw.births],
        unmatched_tracklets=[t_ids[j] for j in raw.unmatched_tracklets],
        scores={(q_ids[i], t_ids[j]): per_pair[(i, j)] for i, j in raw.pairs},
    )


class StarGraphAssociator(BaseEstimator):
    """Estimator wrapper: ``fit`` on tracklet nodes, ``predict`` on detection nodes.

    Parameters mirror the association settings so that the associator can be
    cloned and grid-searched like any scikit-learn estimator.
    """

    def __init__(self, K=3, L=5.0, tau=0.5, weights=DEFAULT_WEIGHTS, giou_mode="enclosing",
                 icp_max_correspondence_distance=0.3, icp_max_iterations=30, icp_yaw_seeds=4):
        self.K = K
        self.L = L
        self.tau = tau
        self.weights = weights
        self.giou_mode = giou_mode
        self.icp_max_correspondence_distance = icp_max_correspondence_distance
        self.icp_max_iterations = icp_max_iterations
        self.icp_yaw_seeds = icp_yaw_seeds

    def _icp(self) -> IcpConfig:
        return IcpConfig(self.icp_max_correspondence_distance, self.icp_max_iterations, 1e-6, self.icp_yaw_seeds)

    def fit(self, tracklet_nodes, y=None):
        check_weights(self.weights)
        if self.giou_mode not in ("enclosing", "literal"):
            raise ValueError(f"giou_mode must be 'enclosing' or 'literal', got {self.giou_mode!r}")
        self.tracklet_graph_ = build_frame_graph(tracklet_nodes, self.K, self.L)
        return self

    def predict(self, detection_nodes) -> MatchResult:
        check_is_fitted(self, "tracklet_graph_")
        qg = build_frame_graph(detection_nodes, self.K, self.L)
        return associate(qg, self.tracklet_graph_, self.weights, self.tau, self._icp(), self.L, self.giou_mode)

    def score_matrix(self, detection_nodes) -> np.ndarray:
        """Combined scores for every (detection, tracklet) pair; NaN outside the candidate radius."""
        check_is_fitted(self, "tracklet_graph_")
        qg = build_frame_graph(detection_nodes, self.K, self.L)
        tg = self.tracklet_graph_
        cand = candidate_mask(qg, tg, self.L)
        out = np.full(cand.shape, np.nan)
        for i, j in zip(*np.nonzero(cand)):
            out[i, j] = pair_score(qg.stars[i], tg.stars[j], self.weights, self._icp(), self.giou_mode).combined
        return out
