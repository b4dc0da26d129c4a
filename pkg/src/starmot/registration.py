"""Point-to-point ICP with yaw-hypothesis pre-alignment, and the fitness score."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_float, check_int
from .geometry import Pose, rot_z

__all__ = ["IcpConfig", "IcpResult", "icp", "fitness", "shape_score", "kabsch"]


@dataclass(frozen=True)
class IcpConfig:
    max_correspondence_distance: float = 0.3
    max_iterations: int = 30
    tolerance: float = 1e-6
    yaw_seeds: int = 4
    # largest centroid correction tried on top of the initial guess; partial
    # views shift centroids by at most about half a box length
    max_centroid_shift: float = 2.0

    def __post_init__(self):
        check_float("max_correspondence_distance", self.max_correspondence_distance, min_value=0.0, strict=True)
        check_int("max_iterations", self.max_iterations, min_value=1)
        check_float("tolerance", self.tolerance, min_value=0.0)
        check_int("yaw_seeds", self.yaw_seeds, min_value=1)
        check_float("max_centroid_shift", self.max_centroid_shift, min_value=0.0)


@dataclass
class IcpResult:
    transform: Pose
    n_correspondences: int
    iterations: int
    converged: bool


def _kabsch(src: np.ndarray, dst: np.ndarray):
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt = Vt.copy()
        Vt[2] *= -1.0
        R = Vt.T @ U.T
    return R, cd - R @ cs


def kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (paired rows)."""
    R, t = _kabsch(np.asarray(src, dtype=float), np.asarray(dst, dtype=float))
    return Pose(R, t)


def _inliers(src: np.ndarray, tree: cKDTree, R: np.ndarray, t: np.ndarray, max_dist: float) -> int:
    d, _ = tree.query(src @ R.T + t, k=1, distance_upper_bound=max_dist)
    return int(np.count_nonzero(np.isfinite(d)))


def fitness(src: np.ndarray, tree: cKDTree, T: Pose, max_dist: float) -> int:
    return _inliers(src, tree, T.rotation, T.translation, max_dist)


def _icp(src, dst, tree, R, t, cfg: IcpConfig):
    thr = cfg.max_correspondence_distance
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        moved = src @ R.T + t
        d, j = tree.query(moved, k=1, distance_upper_bound=thr)
        ok = np.isfinite(d)
        if np.count_nonzero(ok) < 3:
            break
        Rs, ts = _kabsch(moved[ok], dst[j[ok]])
        R, t = Rs @ R, Rs @ t + ts
        dR = Rs - np.eye(3)
        if math.sqrt(float(np.sum(dR * dR) + ts @ ts)) < cfg.tolerance:
            converged = True
            break
    return R, t, it, converged


def icp(src: np.ndarray, dst: np.ndarray, cfg: IcpConfig = IcpConfig(), init: Pose | None = None,
        tree: cKDTree | None = None) -> IcpResult:
    """Align ``src`` to ``dst`` starting from ``init``."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    T = Pose() if init is None else init
    tree = cKDTree(dst) if tree is None else tree
    R, t, it, conv = _icp(src, dst, tree, T.rotation, T.translation, cfg)
    n = _inliers(src, tree, R, t, cfg.max_correspondence_distance)
    return IcpResult(Pose(R, t), n, it, conv)


def shape_score(p, q, icp_cfg: IcpConfig = IcpConfig(), init: Pose | None = None, pivot=None,
                tree: cKDTree | None = None) -> float:
    """Registration fitness ``n_c / max(|p|, |q|)`` in [0, 1].

    ``init`` maps ``p`` into the frame of ``q``. Two starting translations are
    tried, ``init`` itself and ``init`` shifted so the centroids coincide (only
    when that shift is at most ``max_centroid_shift``), each
    with yaw hypotheses spaced by ``2*pi / yaw_seeds`` about ``pivot``
    (default: centroid of ``q``). The hypothesis with the most inliers is
    refined by ICP. ``tree`` may carry a prebuilt k-d tree of ``q``.
    """
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        return 0.0
    T0 = Pose() if init is None else init
    tree = cKDTree(q) if tree is None else tree
    thr = icp_cfg.max_correspondence_distance
    cq = q.mean(axis=0)
    c = cq if pivot is None else np.asarray(pivot, dtype=float)
    R0, t0 = T0.rotation, T0.translation
    starts = [t0]
    shift = cq - (p @ R0.T + t0).mean(axis=0)
    if 0.0 < np.linalg.norm(shift) <= icp_cfg.max_centroid_shift:
        starts.append(t0 + shift)
    best, best_n = (R0, t0), -1
    for ts in starts:
        for k in range(icp_cfg.yaw_seeds):
            Rz = rot_z(2.0 * math.pi * k / icp_cfg.yaw_seeds)
            # yaw about the pivot applied after the start transform
            R, t = Rz @ R0, Rz @ (ts - c) + c
            n = _inliers(p, tree, R, t, thr)
            if n > best_n:
                best, best_n = (R, t), n
    R, t, _, _ = _icp(p, q, tree, best[0], best[1], icp_cfg)
    return _inliers(p, tree, R, t, thr) / max(len(p), len(q))
