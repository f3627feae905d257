"""Skeletal graphs and partition-normalized adjacency matrices.

A skeleton is an undirected connected graph over ``V`` joints.  For graph
convolution the adjacency (with self-loops) is row-normalized by inverse
degree and then split into subsets.  The ``spatial`` strategy partitions
every entry by comparing hop distance to a designated center joint:

* subset 0 — self-loops,
* subset 1 — centripetal neighbors (source closer to the center than the
  destination; ties, which cannot occur on trees, land here too),
* subset 2 — centrifugal neighbors (source farther from the center).

The subsets tile the normalized adjacency exactly: summed elementwise they
reproduce it, and each row of that sum is 1.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SkeletonGraph",
    "build_graph",
    "hop_distances",
    "toy_skeleton",
    "load_graph_file",
    "save_graph_file",
    "TOY_JOINT_NAMES",
]

# 9-joint desk-scale skeleton: a trunk (head, chest, pelvis), two 2-joint
# arms hanging off the chest, and one knee joint per leg off the pelvis.
TOY_JOINT_NAMES = (
    "head",
    "chest",
    "pelvis",
    "l_elbow",
    "l_hand",
    "r_elbow",
    "r_hand",
    "l_knee",
    "r_knee",
)
_TOY_EDGES = ((0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (2, 7), (2, 8))
_TOY_CENTER = 1


@dataclass(frozen=True)
class SkeletonGraph:
    """Immutable joint graph with its partitioned adjacency stack.

    ``adjacency`` is a ``(K, V, V)`` array; ``adjacency[k, u, v]`` weights the
    message from source joint ``u`` into destination joint ``v``.
    """

    num_joints: int
    edges: tuple
    center: int
    strategy: str
    adjacency: np.ndarray = field(repr=False)

    @property
    def num_subsets(self) -> int:
        return self.adjacency.shape[0]


def build_graph(
    num_joints: int, edges, center: int = 0, strategy: str = "spatial"
) -> SkeletonGraph:
    """Construct a skeleton graph and its normalized adjacency subsets.

    ``spatial`` yields three subsets (self / centripetal / centrifugal);
    ``uniform`` yields a single subset holding the whole normalized
    adjacency-with-self-loops.
    """
    if strategy not in ("spatial", "uniform"):
        raise ValueError(f"unknown partition strategy {strategy!r}")
    edges = tuple((int(i), int(j)) for i, j in edges)
    for i, j in edges:
        if not (0 <= i < num_joints and 0 <= j < num_joints):
            raise ValueError(f"edge ({i}, {j}) references a joint outside 0..{num_joints - 1}")
    if not 0 <= center < num_joints:
        raise ValueError(f"center joint {center} outside 0..{num_joints - 1}")

    full = np.eye(num_joints)
    for i, j in edges:
        full[i, j] = 1.0
        full[j, i] = 1.0

    dist = _bfs(num_joints, edges, center)
    if np.any(np.isinf(dist)):
        missing = np.nonzero(np.isinf(dist))[0].tolist()
        raise ValueError(f"graph is disconnected: joints {missing} unreachable from {center}")

    normalized = full / full.sum(axis=1, keepdims=True)

    if strategy == "uniform":
        adjacency = normalized[None, :, :].copy()
    else:
        src = dist[:, None]
        dst = dist[None, :]
        self_mask = np.eye(num_joints, dtype=bool)
        centripetal = (~self_mask) & (src <= dst)
        centrifugal = (~self_mask) & (src > dst)
        adjacency = np.stack(
            [
                np.where(mask, normalized, 0.0)
                for mask in (self_mask, centripetal, centrifugal)
            ]
        )

    return SkeletonGraph(num_joints, edges, center, strategy, adjacency)


def _bfs(num_joints: int, edges, source: int) -> np.ndarray:
    neighbors: list[list[int]] = [[] for _ in range(num_joints)]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    dist = np.full(num_joints, np.inf)
    dist[source] = 0.0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in neighbors[u]:
            if np.isinf(dist[w]):
                dist[w] = dist[u] + 1.0
                queue.append(w)
    return dist


def hop_distances(graph: SkeletonGraph, source: int) -> np.ndarray:
    """Shortest-path hop counts from ``source`` to every joint (BFS)."""
    if not 0 <= source < graph.num_joints:
        raise ValueError(f"source joint {source} outside 0..{graph.num_joints - 1}")
    return _bfs(graph.num_joints, graph.edges, source).astype(int)


def toy_skeleton(strategy: str = "spatial") -> SkeletonGraph:
    """The 9-joint skeleton shared by the synthetic data and the tests."""
    return build_graph(len(TOY_JOINT_NAMES), _TOY_EDGES, _TOY_CENTER, strategy)


def load_graph_file(path, strategy: str = "spatial") -> SkeletonGraph:
    """Parse the plain-text graph format.

    Lines: ``V=<n>``, ``center=<i>``, then one ``edge i j`` per edge.  Blank
    lines and ``#`` comments are ignored.
    """
    num_joints = None
    center = None
    edges = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("V="):
                num_joints = int(line[2:])
            elif line.startswith("center="):
                center = int(line[7:])
            elif line.startswith("edge"):
                parts = line.split()
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: malformed edge line {raw!r}")
                edges.append((int(parts[1]), int(parts[2])))
            else:
                raise ValueError(f"{path}:{lineno}: unrecognized line {raw!r}")
    if num_joints is None or center is None:
        raise ValueError(f"{path}: graph file must declare V= and center=")
    return build_graph(num_joints, edges, center, strategy)


def save_graph_file(path, graph: SkeletonGraph) -> None:
    with open(path, "w") as f:
        f.write(f"V={graph.num_joints}\n")
        f.write(f"center={graph.center}\n")
        for i, j in graph.edges:
            f.write(f"edge {i} {j}\n")
