import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from starmot.geometry import Box3, Pose, so3_exp
from starmot.graph import StarGraph, build_frame_graph, node_from_box
from starmot.msga import (ConsistencyScore, StarGraphAssociator, associate, edge_consistency, greedy_edge_match,
                          km_assign, neighborhood_score, pair_score)
from starmot.registration import IcpConfig, icp, kabsch, shape_score
from starmot.simulator import sample_surface


def star_with_edges(edges, center=None):
    center = center or node_from_box(0, Box3([0, 0, 0], [4, 2, 1.5], 0.0))
    nbrs = [(node_from_box(i + 1, Box3.from_pose(center.pose.compose(e), [4, 2, 1.5])), e)
            for i, e in enumerate(edges)]
    return StarGraph(center, nbrs)


def brute_force_best(scores, tau):
    """Best total over all partial one-to-one assignments using allowed entries."""
    n, m = scores.shape
    best = 0.0
    for k in range(min(n, m) + 1):
        for rows in itertools.combinations(range(n), k):
            for cols in itertools.permutations(range(m), k):
                vals = [scores[r, c] for r, c in zip(rows, cols)]
                if all(v >= tau for v in vals):
                    best = max(best, math.fsum(vals))
    return best


# -- edge and neighborhood ---------------------------------------------------

def test_edge_consistency_examples():
    assert edge_consistency(Pose(), Pose()) == 1.0
    assert edge_consistency(Pose.from_translation(1, 0, 0), Pose()) == pytest.approx(math.exp(-1), abs=1e-12)
    yaw_pi = Pose.from_xyz_yaw([0, 0, 0], math.pi)
    assert edge_consistency(yaw_pi, Pose()) == pytest.approx(math.exp(-math.sqrt(8)), abs=1e-12)
    assert math.exp(-math.sqrt(8)) == pytest.approx(0.0591, abs=1e-4)


def test_greedy_match_examples():
    e2 = Pose.from_translation(2, 0, 0)
    assert greedy_edge_match(star_with_edges([e2]), star_with_edges([])) == []
    m = greedy_edge_match(star_with_edges([e2]), star_with_edges([e2, Pose.from_translation(0, 2, 0)]))
    assert m == [(0, 0, 1.0)]
    edges = [Pose.from_xyz_yaw([3, 1, 0], 0.2), Pose.from_xyz_yaw([-2, 3, 0], 1.0), Pose.from_translation(0, -4, 0)]
    m = greedy_edge_match(star_with_edges(edges), star_with_edges(edges))
    assert [(a, b) for a, b, _ in m] == [(0, 0), (1, 1), (2, 2)]
    assert all(l == pytest.approx(1.0) for _, _, l in m)


def test_greedy_match_tie_goes_to_lower_index():
    e = Pose.from_translation(2, 0, 0)
    m = greedy_edge_match(star_with_edges([e]), star_with_edges([e, e]))
    assert m[0][1] == 0


def test_neighborhood_score_cases():
    e = [Pose.from_translation(2, 0, 0), Pose.from_translation(0, 3, 0)]
    assert neighborhood_score(star_with_edges(e), star_with_edges(e)) == pytest.approx(1.0)
    assert neighborhood_score(star_with_edges([]), star_with_edges([])) == 1.0
    assert neighborhood_score(star_with_edges([]), star_with_edges(e)) == 0.0
    assert neighborhood_score(star_with_edges(e), star_with_edges([])) == 0.0


# -- shape -------------------------------------------------------------------

def test_shape_score_examples(rng):
    box = Box3([10, 0, 0], [4.5, 1.9, 1.6], 0.3)
    p = sample_surface(rng, box, 200, 0.0)
    assert shape_score(p, p) == pytest.approx(1.0)
    assert shape_score(p, p + [100, 0, 0], IcpConfig(max_correspondence_distance=0.5, yaw_seeds=1)) == 0.0
    assert shape_score(p, np.zeros((0, 3))) == 0.0
    assert shape_score(np.zeros((0, 3)), p) == 0.0


def test_shape_score_recovers_small_rotation(rng):
    box = Box3([12, 4, 0], [4.5, 1.9, 1.6], 0.0)
    p = sample_surface(rng, box, 200, 0.0)
    c = p.mean(axis=0)
    R = so3_exp([0, 0, math.radians(10)])
    q = (p - c) @ R.T + c
    cfg = IcpConfig(max_correspondence_distance=0.1)
    assert shape_score(p, q, cfg) >= 0.95
    # oracle: the known rotation about the centroid
    res = icp(p, q, cfg)
    truth = Pose(R, c - R @ c)
    err = res.transform.compose(truth.inverse())
    assert abs(math.degrees(math.atan2(err.rotation[1, 0], err.rotation[0, 0]))) < 1.0


def test_kabsch_recovers_transform(rng):
    src = rng.normal(size=(50, 3))
    T = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    est = kabsch(src, T.apply(src))
    np.testing.assert_allclose(est.matrix(), T.matrix(), atol=1e-10)


# -- pair score --------------------------------------------------------------

def _star_pair(rng, n_points=64):
    # sensor sits at the origin, keep every box clear of it
    boxes = [Box3([15, 5, 0], [4.5, 1.9, 1.6], 0.1), Box3([18, 6, 0], [4, 1.8, 1.5], 0.0),
             Box3([13, 2, 0], [4.2, 2.0, 1.6], 0.4)]
    nodes = [node_from_box(i, b, sample_surface(rng, b, n_points, 0.0)) for i, b in enumerate(boxes)]
    return build_frame_graph(nodes, 3, 5.0)


def test_identical_star_pair_scores_one(rng):
    g = _star_pair(rng)
    for w in [(0.3, 0.4, 0.3), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0.2, 0.2, 0.6)]:
        cs = pair_score(g.stars[0], g.stars[0], w)
        assert cs.combined == pytest.approx(1.0, abs=1e-12)


def test_weight_projection(rng):
    g = _star_pair(rng)
    a, b = g.stars[0], g.stars[1]
    cs = pair_score(a, b, (1, 0, 0))
    assert cs.combined == neighborhood_score(a, b)


def test_combined_is_weighted_sum():
    cs = ConsistencyScore(0.2, 0.7, 0.9, (0.3, 0.4, 0.3))
    assert cs.combined == pytest.approx(0.3 * 0.2 + 0.4 * 0.7 + 0.3 * 0.9, abs=1e-12)


def test_pair_score_bounded_random(rng):
    for _ in range(20):
        nodes = []
        for i in range(6):
            b = Box3(rng.uniform(-5, 5, 3) * [1, 1, 0] + [20, 0, 0], rng.uniform(1, 5, 3), rng.uniform(-3, 3))
            nodes.append(node_from_box(i, b, sample_surface(rng, b, 32, 0.05)))
        g = build_frame_graph(nodes, 3, 5.0)
        for s, t in itertools.product(g.stars[:3], g.stars[3:]):
            cs = pair_score(s, t)
            for v in (cs.neighborhood, cs.spatial, cs.shape, cs.combined):
                assert 0.0 <= v <= 1.0


def test_translation_invariance_of_scores(rng):
    g = _star_pair(rng)
    T = Pose.from_translation(37.0, -12.0, 0.5)
    moved = build_frame_graph([node_from_box(n.id, n.box.transformed(T), T.apply(n.points)) for n in g.nodes], 3, 5.0)
    for i in range(3):
        for j in range(3):
            a = pair_score(g.stars[i], g.stars[j])
            b = pair_score(moved.stars[i], moved.stars[j])
            assert a.neighborhood == pytest.approx(b.neighborhood, abs=1e-9)
            assert a.combined == pytest.approx(b.combined, abs=1e-6)


# -- assignment ---------------------------------------------------------------

def test_km_examples():
    r = km_assign(np.array([[0.9, 0.2], [0.3, 0.8]]), 0.5)
    assert r.pairs == [(0, 0), (1, 1)] and r.total() == pytest.approx(1.7)
    r = km_assign(np.array([[0.4]]), 0.5)
    assert r.pairs == [] and r.births == [0]
    r = km_assign(np.array([[0.9, 0.8], [0.85, 0.1]]), 0.5)
    assert r.pairs == [(0, 1), (1, 0)] and r.total() == pytest.approx(1.65)


def test_km_matches_brute_force(rng):
    for _ in range(300):
        n, m = rng.integers(1, 7, size=2)
        s = rng.random((n, m))
        r = km_assign(s, 0.5)
        assert r.total() == brute_force_best(s, 0.5)


def test_km_result_is_partial_bijection(rng):
    s = rng.random((6, 4))
    r = km_assign(s, 0.3)
    dets = [d for d, _ in r.pairs]
    trks = [t for _, t in r.pairs]
    assert len(set(dets)) == len(dets) and len(set(trks)) == len(trks)
    assert not set(r.births) & set(dets)
    assert sorted(r.births + dets) == list(range(6))


@given(st.integers(0, 100_000), st.floats(0.0, 0.9), st.floats(0.0, 0.1))
def test_raising_gate_never_adds_pairs(seed, tau, step):
    s = np.random.default_rng(seed).random((5, 5))
    assert len(km_assign(s, tau + step).pairs) <= len(km_assign(s, tau).pairs)


def test_km_empty_shapes():
    assert km_assign(np.zeros((0, 3)), 0.5).pairs == []
    r = km_assign(np.zeros((2, 0)), 0.5)
    assert r.births == [0, 1]


# -- associate --------------------------------------------------------------

def _platoon(rng, n=5, noise=0.0):
    nodes = []
    for i in range(n):
        b = Box3([10 + i * 4.0, 5 + (i % 2) * 3.0, 0.8], [3.8, 1.8, 1.5], 0.0)
        pts = sample_surface(rng, b, 48, 0.0)
        if noise:
            b = Box3(b.center + rng.normal(0, noise, 3), b.dims, b.yaw)
        nodes.append(node_from_box(i, b, pts))
    return nodes


def test_associate_empty_tracklets_births_all(rng):
    q = build_frame_graph(_platoon(rng), 3, 5.0)
    r = associate(q, build_frame_graph([], 3, 5.0))
    assert r.pairs == [] and r.births == [0, 1, 2, 3, 4]


def test_associate_self_is_identity(rng):
    nodes = _platoon(rng)
    g = build_frame_graph(nodes, 3, 5.0)
    r = associate(g, g)
    assert r.pairs == [(i, i) for i in range(5)]
    assert all(s.combined == pytest.approx(1.0) for s in r.scores.values())


def test_associate_ambiguous_pair_follows_neighbors_and_oracle(rng):
    # two detections equidistant from two tracklets; neighbour geometry differs
    def nodes(centers, ids):
        out = []
        for i, c in zip(ids, centers):
            b = Box3(np.add(c, [20, 10, 0]), [4.0, 1.8, 1.5], 0.0)
            out.append(node_from_box(i, b, sample_surface(rng, b, 48, 0.0)))
        return out

    trk = nodes([[0, 0, 0], [0, 2.6, 0], [-4.5, 0.0, 0], [3.0, 6.5, 0]], [10, 11, 12, 13])
    # detections sit halfway, shifted the same way as their tracklet's neighbours
    det = nodes([[0, 1.3, 0], [0, 1.3 + 0.0, 0], [-4.5, 1.3, 0], [3.0, 7.8, 0]], [0, 1, 2, 3])
    det[1] = node_from_box(1, Box3([20, 13.9, 0], [4.0, 1.8, 1.5], 0.0), det[1].points + [0, 2.6, 0])
    qg, tg = build_frame_graph(det, 3, 5.0), build_frame_graph(trk, 3, 5.0)
    r = associate(qg, tg)
    S = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            d = np.linalg.norm(qg.stars[i].center.pose.translation - tg.stars[j].center.pose.translation)
            if d <= 5.0:
                S[i, j] = pair_score(qg.stars[i], tg.stars[j]).combined
    assert r.total() == pytest.approx(brute_force_best(S, 0.5), abs=1e-12)
    assert dict(r.pairs)[0] == 10 and dict(r.pairs)[1] == 11


def test_estimator_api(rng):
    nodes = _platoon(rng)
    est = StarGraphAssociator(tau=0.5)
    assert clone(est).get_params()["tau"] == 0.5
    r = est.fit(nodes).predict(nodes)
    assert r.pairs == [(i, i) for i in range(5)]
    S = est.score_matrix(nodes)
    assert np.allclose(np.diag(S), 1.0)
    with pytest.raises(ValueError):
        StarGraphAssociator(weights=(0.5, 0.5, 0.5)).fit(nodes)
