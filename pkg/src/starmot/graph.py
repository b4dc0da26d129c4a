"""Query / tracklet star graphs.

Every node is connected to its ``K`` nearest peers within ``L`` metres; the
edge carries the relative transform ``inv(center.pose) @ neighbor.pose``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_float, check_int
from .geometry import Box3, Pose

__all__ = ["Node", "StarGraph", "FrameGraph", "build_frame_graph", "node_from_box"]


@dataclass
class Node:
    id: int
    pose: Pose
    box: Box3
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


def node_from_box(node_id: int, box: Box3, points=None) -> Node:
    pts = np.zeros((0, 3)) if points is None else np.asarray(points, dtype=float).reshape(-1, 3)
    return Node(int(node_id), box.pose, box, pts)


@dataclass
class StarGraph:
    center: Node
    neighbors: list  # [(Node, edge Pose)]

    @property
    def edges(self) -> list:
        return [e for _, e in self.neighbors]


@dataclass
class FrameGraph:
    stars: list
    K: int = 3
    L: float = 5.0

    def __len__(self) -> int:
        return len(self.stars)

    @property
    def nodes(self) -> list:
        return [s.center for s in self.stars]

    def centers(self) -> np.ndarray:
        if not self.stars:
            return np.zeros((0, 3))
        return np.array([s.center.pose.translation for s in self.stars])


def build_frame_graph(nodes, K: int = 3, L: float = 5.0) -> FrameGraph:
    K = check_int("K", K, min_value=1)
    L = check_float("L", L, min_value=0.0, strict=True)
    nodes = list(nodes)
    if not nodes:
        return FrameGraph([], K, L)
    xyz = np.array([n.pose.translation for n in nodes])
    ids = np.array([n.id for n in nodes])
    dist = np.linalg.norm(xyz[:, None, :] - xyz[None, :, :], axis=2)
    stars = []
    for i, center in enumerate(nodes):
        inv_c = center.pose.inverse()
        cand = [j for j in range(len(nodes)) if j != i and dist[i, j] <= L]
        cand.sort(key=lambda j: (dist[i, j], ids[j]))
        nbrs = [(nodes[j], inv_c.compose(nodes[j].pose)) for j in cand[:K]]
        stars.append(StarGraph(center, nbrs))
    return FrameGraph(stars, K, L)
