"""Object-centric windowed pose-graph optimization.

Variables are ego poses (world <- sensor), landmark positions and object
poses (world <- object). Two factor kinds tie them together:

* map factors: a landmark observed in the sensor frame,
  ``r = inv(ego) * landmark - obs``;
* object factors: a detection pose ``D`` (sensor <- object) of a tracked
  object ``X``, ``r = vec(X - ego @ D)`` on the top 3x4 block. Its norm is
  ``|| inv(D) inv(ego) X - I ||_F``, zero exactly when the object seen from the
  ego matches the detection.

The sliding window is split in two. Recent frames form the object-centric
window (ego + landmarks from map factors first, then objects with the ego
frozen); frames whose objects are all mature move to the fusion window, which
is solved jointly. A Levenberg-Marquardt solver with right-perturbation
retraction ``R <- R Exp(w), t <- t + R v`` handles every stage.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_float, check_int
from .geometry import Pose, frobenius_deviation, skew, so3_exp

__all__ = [
    "MapFactor",
    "ObjectFactor",
    "LMConfig",
    "VariableStore",
    "SolveResult",
    "WindowState",
    "residual_map",
    "residual_object",
    "solve",
    "solve_ocow",
    "solve_oefw",
    "solve_ego_centric",
    "promote",
    "chordal_mean",
    "ObjectCentricOptimizer",
]


def residual_map(ego: Pose, landmark, obs) -> np.ndarray:
    return ego.inverse().apply(np.asarray(landmark, dtype=float)) - np.asarray(obs, dtype=float)


def residual_object(ego: Pose, obj: Pose, det: Pose) -> float:
    """``|| inv(det) @ inv(ego) @ obj - I ||_F``; zero iff ``obj == ego @ det``."""
    return frobenius_deviation(det.inverse().compose(ego.inverse()).compose(obj))


def chordal_mean(poses) -> Pose:
    """SVD-projected mean of rigid transforms (minimizes summed squared Frobenius distance)."""
    R = np.mean([p.rotation for p in poses], axis=0)
    t = np.mean([p.translation for p in poses], axis=0)
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return Pose(U @ D @ Vt, t)


@dataclass(frozen=True)
class MapFactor:
    frame: int
    landmark: int
    obs: np.ndarray
    weight: float = 1.0


@dataclass(frozen=True)
class ObjectFactor:
    frame: int
    track: int
    det: Pose
    weight: float = 1.0


@dataclass(frozen=True)
class LMConfig:
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    max_iterations: int = 50
    rel_tol: float = 1e-9
    robust: bool = True
    huber_delta: float = 1.0
    cost_floor: float = 1e-24

    def __post_init__(self):
        check_float("initial_damping", self.initial_damping, min_value=0.0, strict=True)
        check_float("damping_up", self.damping_up, min_value=1.0, strict=True)
        check_float("damping_down", self.damping_down, min_value=0.0, strict=True, max_value=1.0)
        check_int("max_iterations", self.max_iterations, min_value=1)
        check_float("rel_tol", self.rel_tol, min_value=0.0)
        check_float("huber_delta", self.huber_delta, min_value=0.0, strict=True)


class VariableStore:
    """Current estimates. Poses are immutable values, so copies are shallow."""

    def __init__(self):
        self.ego: dict = {}
        self.landmarks: dict = {}
        self.objects: dict = {}  # (track, frame) -> Pose

    def copy(self) -> "VariableStore":
        out = VariableStore()
        out.ego = dict(self.ego)
        out.landmarks = dict(self.landmarks)
        out.objects = dict(self.objects)
        return out


@dataclass
class SolveResult:
    stage: str
    trace: list = field(default_factory=list)  # cost before the first / after each accepted step
    iterations: int = 0
    converged: bool = False
    aborted: bool = False
    diagnostic: str | None = None

    @property
    def initial_cost(self) -> float:
        return self.trace[0] if self.trace else 0.0

    @property
    def final_cost(self) -> float:
        return self.trace[-1] if self.trace else 0.0


# generators of so(3): _GEN[k] = skew(e_k)
_GEN = np.array([skew(e) for e in np.eye(3)])


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _exp_batch(w: np.ndarray) -> np.ndarray:
    """Rodrigues for an (N, 3) array of rotation vectors."""
    th = np.linalg.norm(w, axis=1)
    K = _skew_batch(w)
    small = th < 1e-8
    ths = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th**2 / 6.0, np.sin(ths) / ths)
    b = np.where(small, 0.5 - th**2 / 24.0, (1.0 - np.cos(ths)) / ths**2)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


class _Problem:
    """Vectorized least-squares problem over a subset of the store."""

    def __init__(self, store, map_factors, obj_factors, free_ego, free_lm, free_obj, tied, cfg, tied_init="mean"):
        self.cfg = cfg
        ego_keys = sorted({f.frame for f in map_factors} | {f.frame for f in obj_factors})
        lm_keys = sorted({f.landmark for f in map_factors})
        obj_key = [(("tied", f.track) if f.track in tied else (f.track, f.frame)) for f in obj_factors]
        obj_keys = sorted(set(obj_key), key=lambda k: (str(k[0]), k[1]))
        self.ego_keys, self.lm_keys, self.obj_keys = ego_keys, lm_keys, obj_keys
        ei = {k: i for i, k in enumerate(ego_keys)}
        li = {k: i for i, k in enumerate(lm_keys)}
        oi = {k: i for i, k in enumerate(obj_keys)}

        self.eR = np.array([store.ego[k].rotation for k in ego_keys]).reshape(-1, 3, 3)
        self.et = np.array([store.ego[k].translation for k in ego_keys]).reshape(-1, 3)
        self.lp = np.array([store.landmarks[k] for k in lm_keys], dtype=float).reshape(-1, 3)
        oR, ot = [], []
        for k in obj_keys:
            if k[0] == "tied":
                members = [store.objects[(f.track, f.frame)] for f, kk in zip(obj_factors, obj_key) if kk == k]
                p = chordal_mean(members) if tied_init == "mean" else members[0]
            else:
                p = store.objects[k]
            oR.append(p.rotation)
            ot.append(p.translation)
        self.oR = np.array(oR).reshape(-1, 3, 3)
        self.ot = np.array(ot).reshape(-1, 3)

        # parameter layout
        off = 0
        self.e_off = np.full(len(ego_keys), -1)
        for i, k in enumerate(ego_keys):
            if k in free_ego:
                self.e_off[i] = off
                off += 6
        self.l_off = np.full(len(lm_keys), -1)
        for i, k in enumerate(lm_keys):
            if k in free_lm:
                self.l_off[i] = off
                off += 3
        self.o_off = np.full(len(obj_keys), -1)
        if free_obj:
            for i in range(len(obj_keys)):
                self.o_off[i] = off
                off += 6
        self.n_params = off

        self.m_e = np.array([ei[f.frame] for f in map_factors], dtype=int)
        self.m_l = np.array([li[f.landmark] for f in map_factors], dtype=int)
        self.m_z = np.array([f.obs for f in map_factors], dtype=float).reshape(-1, 3)
        self.m_sw = np.sqrt(np.array([f.weight for f in map_factors], dtype=float))
        self.o_e = np.array([ei[f.frame] for f in obj_factors], dtype=int)
        self.o_x = np.array([oi[k] for k in obj_key], dtype=int)
        self.o_DR = np.array([f.det.rotation for f in obj_factors]).reshape(-1, 3, 3)
        self.o_Dt = np.array([f.det.translation for f in obj_factors]).reshape(-1, 3)
        self.o_sw = np.sqrt(np.array([f.weight for f in obj_factors], dtype=float))

    # -- residuals --------------------------------------------------------
    def _map_res(self, eR, et, lp):
        R, t = eR[self.m_e], et[self.m_e]
        q = np.einsum("fji,fj->fi", R, lp[self.m_l] - t)
        return q, (q - self.m_z) * self.m_sw[:, None]

    def _obj_res(self, eR, et, oR, ot):
        Re, te = eR[self.o_e], et[self.o_e]
        Rx, tx = oR[self.o_x], ot[self.o_x]
        rR = Rx - Re @ self.o_DR
        rt = tx - np.einsum("gij,gj->gi", Re, self.o_Dt) - te
        r = np.concatenate([rR.reshape(-1, 9), rt], axis=1) * self.o_sw[:, None]
        return r

    def _huber(self, r_obj):
        s = np.linalg.norm(r_obj, axis=1)
        if not self.cfg.robust:
            return s**2, np.ones_like(s)
        d = self.cfg.huber_delta
        inl = s <= d
        cost = np.where(inl, s**2, 2.0 * d * s - d * d)
        wt = np.where(inl, 1.0, d / np.maximum(s, 1e-300))
        return cost, wt

    def cost(self, state=None) -> float:
        eR, et, lp, oR, ot = state if state is not None else (self.eR, self.et, self.lp, self.oR, self.ot)
        c = 0.0
        if len(self.m_e):
            _, r = self._map_res(eR, et, lp)
            c += float(np.sum(r * r))
        if len(self.o_e):
            oc, _ = self._huber(self._obj_res(eR, et, oR, ot))
            c += float(np.sum(oc))
        return c

    # -- linearization ----------------------------------------------------
    def linearize(self):
        rows, cols, vals, res = [], [], [], []
        row0 = 0
        nm = len(self.m_e)
        if nm:
            q, r = self._map_res(self.eR, self.et, self.lp)
            sw = self.m_sw[:, None, None]
            base = row0 + 3 * np.arange(nm)
            eo = self.e_off[self.m_e]
            fe = eo >= 0
            if fe.any():
                J = np.concatenate([_skew_batch(q), np.broadcast_to(-np.eye(3), (nm, 3, 3))], axis=2) * sw
                self._add_block(rows, cols, vals, base[fe], eo[fe], J[fe])
            lo = self.l_off[self.m_l]
            fl = lo >= 0
            if fl.any():
                J = np.transpose(self.eR[self.m_e], (0, 2, 1)) * sw
                self._add_block(rows, cols, vals, base[fl], lo[fl], J[fl])
            res.append(r.reshape(-1))
            row0 += 3 * nm
        no = len(self.o_e)
        if no:
            r = self._obj_res(self.eR, self.et, self.oR, self.ot)
            _, wt = self._huber(r)
            sw = (self.o_sw * np.sqrt(wt))[:, None, None]
            base = row0 + 12 * np.arange(no)
            Re = self.eR[self.o_e]
            Rx = self.oR[self.o_x]
            eo = self.e_off[self.o_e]
            fe = eo >= 0
            if fe.any():
                J = np.zeros((no, 12, 6))
                # d(-Re Exp(w) Rd)/dw_k = -Re G_k Rd
                J[:, :9, :3] = -np.einsum("gij,kjl,glm->gimk", Re, _GEN, self.o_DR).reshape(no, 9, 3)
                J[:, 9:, :3] = Re @ _skew_batch(self.o_Dt)
                J[:, 9:, 3:] = -Re
                J *= sw
                self._add_block(rows, cols, vals, base[fe], eo[fe], J[fe])
            xo = self.o_off[self.o_x]
            fx = xo >= 0
            if fx.any():
                J = np.zeros((no, 12, 6))
                J[:, :9, :3] = np.einsum("gij,kjl->gilk", Rx, _GEN).reshape(no, 9, 3)
                J[:, 9:, 3:] = Rx
                J *= sw
                self._add_block(rows, cols, vals, base[fx], xo[fx], J[fx])
            res.append((r * np.sqrt(wt)[:, None]).reshape(-1))
            row0 += 12 * no
        r = np.concatenate(res) if res else np.zeros(0)
        if rows:
            J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(row0, self.n_params))
        else:
            J = sp.csr_matrix((row0, self.n_params))
        return J, r

    @staticmethod
    def _add_block(rows, cols, vals, row_base, col_base, blocks):
        n, h, w = blocks.shape
        rr = row_base[:, None, None] + np.arange(h)[None, :, None]
        cc = col_base[:, None, None] + np.arange(w)[None, None, :]
        rows.append(np.broadcast_to(rr, (n, h, w)).reshape(-1))
        cols.append(np.broadcast_to(cc, (n, h, w)).reshape(-1))
        vals.append(blocks.reshape(-1))

    def stepped(self, delta):
        eR, et, lp = self.eR.copy(), self.et.copy(), self.lp.copy()
        oR, ot = self.oR.copy(), self.ot.copy()
        fe = self.e_off >= 0
        if fe.any():
            d = delta[self.e_off[fe][:, None] + np.arange(6)]
            eR[fe] = eR[fe] @ _exp_batch(d[:, :3])
            et[fe] = et[fe] + np.einsum("nij,nj->ni", self.eR[fe], d[:, 3:])
        fl = self.l_off >= 0
        if fl.any():
            lp[fl] = lp[fl] + delta[self.l_off[fl][:, None] + np.arange(3)]
        fx = self.o_off >= 0
        if fx.any():
            d = delta[self.o_off[fx][:, None] + np.arange(6)]
            oR[fx] = oR[fx] @ _exp_batch(d[:, :3])
            ot[fx] = ot[fx] + np.einsum("nij,nj->ni", self.oR[fx], d[:, 3:])
        return eR, et, lp, oR, ot

    def accept(self, state):
        self.eR, self.et, self.lp, self.oR, self.ot = state

    def write_back(self, store, obj_factors, tied):
        for i, k in enumerate(self.ego_keys):
            if self.e_off[i] >= 0:
                store.ego[k] = Pose(self.eR[i], self.et[i])
        for i, k in enumerate(self.lm_keys):
            if self.l_off[i] >= 0:
                store.landmarks[k] = self.lp[i].copy()
        if (self.o_off >= 0).any():
            oi = {k: i for i, k in enumerate(self.obj_keys)}
            for f in obj_factors:
                k = ("tied", f.track) if f.track in tied else (f.track, f.frame)
                i = oi[k]
                store.objects[(f.track, f.frame)] = Pose(self.oR[i], self.ot[i])


def solve(store: VariableStore, map_factors, obj_factors, free_ego=(), free_landmarks=(), free_objects=False,
          tied=(), cfg: LMConfig = LMConfig(), stage: str = "joint", tied_init: str = "mean") -> SolveResult:
    """Levenberg-Marquardt over the selected variables; updates ``store`` in place.

    Object factors of tracks in ``tied`` share one pose per track, started at
    the chordal mean of the member poses (``tied_init="first"``: the first
    member); all other object factors own a private per-frame pose.
    """
    free_ego, free_landmarks, tied = set(free_ego), set(free_landmarks), set(tied)
    prob = _Problem(store, list(map_factors), list(obj_factors), free_ego, free_landmarks, free_objects, tied, cfg,
                    tied_init)
    result = SolveResult(stage)
    cost = prob.cost()
    result.trace.append(cost)
    if prob.n_params == 0:
        result.converged = True
        return result
    lam = cfg.initial_damping
    for _ in range(cfg.max_iterations):
        if cost <= cfg.cost_floor:
            result.converged = True
            break
        result.iterations += 1
        J, r = prob.linearize()
        A = (J.T @ J).tocsc()
        g = J.T @ r
        diag = A.diagonal()
        if not np.all(diag > 0.0):
            # a free variable no factor informs: the normal equations are singular
            result.aborted = True
            result.diagnostic = f"singular normal equations: {int(np.sum(diag <= 0.0))} unconstrained parameters"
            return result
        accepted = False
        while lam < 1e12:
            M = A + sp.diags(lam * np.maximum(diag, 1e-9))
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                try:
                    delta = -spla.spsolve(M.tocsc(), g)
                except (spla.MatrixRankWarning, RuntimeError, np.linalg.LinAlgError) as exc:
                    result.aborted = True
                    result.diagnostic = f"singular normal equations: {exc}"
                    return result
            if not np.all(np.isfinite(delta)):
                result.aborted = True
                result.diagnostic = "non-finite step"
                return result
            cand = prob.stepped(delta)
            new_cost = prob.cost(cand)
            if new_cost < cost:
                prob.accept(cand)
                rel = (cost - new_cost) / cost
                cost = new_cost
                result.trace.append(cost)
                lam = max(lam * cfg.damping_down, 1e-15)
                accepted = True
                break
            lam *= cfg.damping_up
        if not accepted or rel < cfg.rel_tol:
            result.converged = True
            break
    prob.write_back(store, list(obj_factors), tied)
    return result


# -- windows ----------------------------------------------------------------

@dataclass
class WindowState:
    ocow: list = field(default_factory=list)
    oefw: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)  # track -> frames observed
    promoted: set = field(default_factory=set)
    frame_tracks: dict = field(default_factory=dict)  # frame -> track ids detected
    w: int = 4

    @property
    def frames(self) -> list:
        return sorted(self.ocow + self.oefw)

    def add_frame(self, frame: int, tracks, to_oefw: bool = False) -> None:
        tracks = list(tracks)
        self.frame_tracks[frame] = tracks
        for t in tracks:
            self.counts[t] = self.counts.get(t, 0) + 1
        (self.oefw if to_oefw else self.ocow).append(frame)

    def drop_before(self, first: int) -> list:
        gone = [f for f in self.frames if f < first]
        self.ocow = [f for f in self.ocow if f >= first]
        self.oefw = [f for f in self.oefw if f >= first]
        for f in gone:
            self.frame_tracks.pop(f, None)
        return gone


def promote(window: WindowState, static_tracks=None) -> tuple:
    """Move mature objects, then frames whose detections all belong to them.

    An object migrates once it has been observed in more than ``w`` frames
    (and, when ``static_tracks`` is given, is in that set). Returns
    ``(new_window, moved_objects, moved_frames)``.
    """
    promoted = set(window.promoted)
    moved_objects = []
    for t, n in sorted(window.counts.items()):
        if t in promoted or n <= window.w:
            continue
        if static_tracks is not None and t not in static_tracks:
            continue
        promoted.add(t)
        moved_objects.append(t)
    moved_frames = [f for f in window.ocow if all(t in promoted for t in window.frame_tracks.get(f, []))]
    new = WindowState(
        ocow=[f for f in window.ocow if f not in moved_frames],
        oefw=sorted(window.oefw + moved_frames),
        counts=dict(window.counts),
        promoted=promoted,
        frame_tracks=dict(window.frame_tracks),
        w=window.w,
    )
    return new, moved_objects, moved_frames


def _eliminate_private(store, obj_factors, tied) -> None:
    """Untied object poses own a single factor: their optimum is ``ego @ det``."""
    for f in obj_factors:
        if f.track not in tied:
            store.objects[(f.track, f.frame)] = store.ego[f.frame].compose(f.det)


def _free_landmarks(map_factors, frames, first_seen, window_start) -> set:
    """Landmarks first seen inside the window (all observed ones when ``first_seen`` is None)."""
    frames = set(frames)
    if first_seen is None:
        return {f.landmark for f in map_factors if f.frame in frames}
    return {f.landmark for f in map_factors if f.frame in frames and first_seen.get(f.landmark, -1) >= window_start}


def solve_ocow(window: WindowState, store: VariableStore, map_factors, obj_factors, cfg: LMConfig = LMConfig(),
               tied=(), first_seen=None, anchor: int | None = None):
    """Two-stage solve of the object-centric window.

    Stage 1 refines ego poses and landmarks from map factors only (fusion-window
    egos and the anchor frame stay fixed); stage 2 freezes them and refines
    object poses from object factors. Returns ``(store, [stage1, stage2])``.
    """
    out = store.copy()
    ocow = set(window.ocow)
    frames = set(window.frames)
    start = min(frames) if frames else 0
    anchor = start if anchor is None else anchor
    free_lm = _free_landmarks(map_factors, ocow, first_seen, start)
    mf = [f for f in map_factors if f.frame in frames and (f.frame in ocow or f.landmark in free_lm)]
    free_ego = {f for f in ocow if f != anchor}
    r1 = solve(out, mf, [], free_ego, free_lm, False, (), cfg, "ocow-1")
    if r1.aborted:
        return store.copy(), [r1]
    of = [f for f in obj_factors if f.frame in ocow]
    tied = set(tied) & {f.track for f in of}
    _eliminate_private(out, of, tied)
    r2 = solve(out, [], [f for f in of if f.track in tied], (), (), True, tied, cfg, "ocow-2")
    if r2.aborted:
        return store.copy(), [r1, r2]
    return out, [r1, r2]


def solve_oefw(window: WindowState, store: VariableStore, map_factors, obj_factors, cfg: LMConfig = LMConfig(),
               tied=(), first_seen=None, fix_first: bool = True):
    """Joint solve of the fusion window; the first ego pose is the gauge."""
    out = store.copy()
    oefw = sorted(window.oefw)
    if not oefw:
        return out, SolveResult("oefw", converged=True)
    frames = set(oefw)
    start = min(window.frames)
    free_lm = _free_landmarks(map_factors, frames, first_seen, start)
    mf = [f for f in map_factors if f.frame in frames]
    of = [f for f in obj_factors if f.frame in frames]
    tied = set(tied) & {f.track for f in of}
    free_ego = set(oefw[1:]) if fix_first else set(oefw)
    if min(window.frames) in free_ego:
        free_ego.discard(min(window.frames))
    res = solve(out, mf, [f for f in of if f.track in tied], free_ego, free_lm, True, tied, cfg, "oefw")
    if res.aborted:
        return store.copy(), res
    _eliminate_private(out, of, tied)
    return out, res


def solve_ego_centric(store: VariableStore, map_factors, obj_factors, frames, cfg: LMConfig = LMConfig(),
                      tied=(), first_seen=None, window_start: int | None = None):
    """Baseline: a single joint solve over ``frames`` straight from the given initialization."""
    out = store.copy()
    frames = sorted(frames)
    start = frames[0] if window_start is None else window_start
    free_lm = _free_landmarks(map_factors, frames, first_seen, start)
    fs = set(frames)
    of = [f for f in obj_factors if f.frame in fs]
    tied = set(tied) & {f.track for f in of}
    res = solve(out, [f for f in map_factors if f.frame in fs], [f for f in of if f.track in tied],
                set(frames[1:]), free_lm, True, tied, cfg, "ego-centric")
    _eliminate_private(out, of, tied)
    return out, res


def joint_cost(store: VariableStore, map_factors, obj_factors, frames, cfg: LMConfig = LMConfig(), tied=()) -> float:
    """Value of the joint objective over ``frames`` (tied tracks evaluated at their chordal mean)."""
    fs = set(frames)
    mf = [f for f in map_factors if f.frame in fs]
    of = [f for f in obj_factors if f.frame in fs and f.track in set(tied)]
    prob = _Problem(store, mf, of, set(), set(), False, set(tied), cfg)
    return prob.cost()


class ObjectCentricOptimizer:
    """Keeps the factor graph, the two windows and the estimates for a run.

    ``mode`` selects the ablation: ``"both"`` (default), ``"ocow"`` (never
    promote) or ``"oefw"`` (every frame solved jointly on arrival).
    """

    def __init__(self, window_size: int = 8, w: int = 4, mode: str = "both", cfg: LMConfig = LMConfig(),
                 map_weight: float = 1.0, object_weight: float = 1.0, promote_moving: bool = False):
        if mode not in ("both", "ocow", "oefw"):
            raise ValueError(f"unknown optimization mode {mode!r}")
        self.window_size = check_int("window_size", window_size, min_value=1)
        self.mode = mode
        self.cfg = cfg
        self.map_weight = map_weight
        self.object_weight = object_weight
        self.promote_moving = promote_moving
        self.store = VariableStore()
        self.window = WindowState(w=check_int("w", w, min_value=0))
        self.map_factors: dict = {}
        self.obj_factors: dict = {}
        self.first_seen: dict = {}
        self.results: list = []  # (frame, SolveResult)

    # -- bookkeeping -------------------------------------------------------
    def add_frame(self, frame: int, ego_init: Pose, landmark_ids, landmark_obs, objects) -> None:
        """Register a frame; ``objects`` is a list of (track id, detection Pose)."""
        self.store.ego[frame] = ego_init
        mf = []
        for lid, z in zip(np.asarray(landmark_ids, dtype=int), np.asarray(landmark_obs, dtype=float).reshape(-1, 3)):
            lid = int(lid)
            if lid not in self.store.landmarks:
                self.store.landmarks[lid] = ego_init.apply(z)
                self.first_seen[lid] = frame
            mf.append(MapFactor(frame, lid, z, self.map_weight))
        of = []
        for tid, det in objects:
            of.append(ObjectFactor(frame, int(tid), det, self.object_weight))
            self.store.objects[(int(tid), frame)] = ego_init.compose(det)
        self.map_factors[frame] = mf
        self.obj_factors[frame] = of
        self.window.add_frame(frame, [t for t, _ in objects], to_oefw=(self.mode == "oefw"))
        self.window.drop_before(frame - self.window_size + 1)

    def window_factors(self):
        frames = self.window.frames
        mf = [f for fr in frames for f in self.map_factors.get(fr, [])]
        of = [f for fr in frames for f in self.obj_factors.get(fr, [])]
        return mf, of

    # -- stages --------------------------------------------------------------
    def run_ocow(self, frame: int, static_tracks) -> list:
        mf, of = self.window_factors()
        store, res = solve_ocow(self.window, self.store, mf, of, self.cfg, static_tracks, self.first_seen)
        self.store = store
        self.results.extend((frame, r) for r in res)
        return res

    def run_promotion(self, static_tracks):
        if self.mode != "both":
            return [], []
        new, objs, frames = promote(self.window, None if self.promote_moving else set(static_tracks))
        self.window = new
        return objs, frames

    def oefw_job(self, static_tracks):
        """Snapshot the fusion-window problem; the returned callable solves it off-thread."""
        window = WindowState(list(self.window.ocow), list(self.window.oefw), dict(self.window.counts),
                             set(self.window.promoted), dict(self.window.frame_tracks), self.window.w)
        store = self.store.copy()
        mf, of = self.window_factors()
        first_seen = dict(self.first_seen)
        tied = set(static_tracks)
        cfg = self.cfg

        def job():
            out, res = solve_oefw(window, store, mf, of, cfg, tied, first_seen)
            return out, res, store

        return job

    def publish_oefw(self, frame: int, outcome) -> None:
        """Merge a finished fusion solve: entries it changed relative to its snapshot win."""
        out, res, snap = outcome
        self.results.append((frame, res))
        if res.aborted:
            return
        for name in ("ego", "landmarks", "objects"):
            mine, theirs, base = getattr(self.store, name), getattr(out, name), getattr(snap, name)
            for k, v in theirs.items():
                if base.get(k) is not v:
                    mine[k] = v

    def run_oefw_now(self, frame: int, static_tracks) -> SolveResult:
        outcome = self.oefw_job(static_tracks)()
        self.publish_oefw(frame, outcome)
        return outcome[1]
