"""Camera visibility graph and multilevel graph partitioning.

Cameras are nodes; an edge connects two cameras sharing at least one
active 3D point, weighted by the number of shared points.  Each node is
weighted by the cubic root of the total observation count of all points
the camera sees, a proxy for its adjustment cost.

The partitioner is a self-contained deterministic multilevel scheme:
heavy-edge matching coarsening, greedy weighted bisection of the coarsest
graph, and boundary Kernighan-Lin style refinement while uncoarsening,
applied recursively until the requested number of sub-blocks is reached.
An externally computed assignment can be replayed through the exchange
file format (one ``camera_index sub_block_id`` pair per line).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import Block

_COARSEST_SIZE = 32
_REFINE_PASSES = 8


@dataclass
class VisibilityGraph:
    """Undirected camera adjacency with node and edge weights."""

    node_weight: np.ndarray          # (M,)
    adjacency: list[dict[int, float]]

    @property
    def n_nodes(self) -> int:
        return len(self.node_weight)

    def edge_weight(self, i: int, j: int) -> float:
        return self.adjacency[i].get(j, 0.0)

    @property
    def n_edges(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2


@dataclass
class Partition:
    """Camera -> sub-block assignment."""

    assignment: np.ndarray           # (M,) int
    n_subblocks: int
    balance: float                   # max / mean sub-block node weight

    def subblock_cameras(self, ell: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == ell)


def build_visibility_graph(block: Block) -> VisibilityGraph:
    """Node weights cbrt(sum of observation counts of seen points); edges
    weighted by the number of shared active points."""
    m = block.n_cameras
    live = np.flatnonzero(block.active_obs_mask())
    cam = block.obs_cam[live].astype(np.int64)
    pt = block.obs_pt[live].astype(np.int64)

    pt_obs_count = np.bincount(pt, minlength=block.n_points)
    weight_sum = np.bincount(cam, weights=pt_obs_count[pt].astype(np.float64),
                             minlength=m)
    node_weight = np.cbrt(weight_sum)

    adjacency: list[dict[int, float]] = [dict() for _ in range(m)]
    order = np.argsort(pt, kind="stable")
    pt_sorted = pt[order]
    cam_sorted = cam[order]
    _, starts, counts = np.unique(pt_sorted, return_index=True, return_counts=True)
    pair_i = []
    pair_j = []
    for s, c in zip(starts, counts):
        if c < 2:
            continue
        members = np.sort(cam_sorted[s:s + c])
        ii, jj = np.triu_indices(c, k=1)
        pair_i.append(members[ii])
        pair_j.append(members[jj])
    if pair_i:
        pi = np.concatenate(pair_i)
        pj = np.concatenate(pair_j)
        keys, shared = np.unique(pi * m + pj, return_counts=True)
        for key, w in zip(keys, shared):
            i, j = int(key // m), int(key % m)
            if i == j:
                continue
            adjacency[i][j] = float(w)
            adjacency[j][i] = float(w)
    return VisibilityGraph(node_weight, adjacency)


# ---------------------------------------------------------------------------
# Multilevel bisection
# ---------------------------------------------------------------------------

def _coarsen_once(weights, counts, adj):
    """Heavy-edge matching; returns coarse arrays plus the fine->coarse map."""
    n = len(weights)
    mate = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if mate[i] >= 0:
            continue
        best, best_w = -1, 0.0
        for j in sorted(adj[i]):
            if mate[j] < 0 and j != i and adj[i][j] > best_w:
                best, best_w = j, adj[i][j]
        if best >= 0:
            mate[i], mate[best] = best, i
        else:
            mate[i] = i
    group = np.full(n, -1, dtype=np.int64)
    n_coarse = 0
    for i in range(n):
        if group[i] >= 0:
            continue
        group[i] = n_coarse
        group[mate[i]] = n_coarse
        n_coarse += 1
    c_weights = np.zeros(n_coarse)
    c_counts = np.zeros(n_coarse, dtype=np.int64)
    np.add.at(c_weights, group, weights)
    np.add.at(c_counts, group, counts)
    c_adj: list[dict[int, float]] = [dict() for _ in range(n_coarse)]
    for i in range(n):
        gi = group[i]
        for j, w in adj[i].items():
            gj = group[j]
            if gi == gj:
                continue
            c_adj[gi][gj] = c_adj[gi].get(gj, 0.0) + w
    return c_weights, c_counts, c_adj, group


def _grow_bisection(weights, counts, adj, target_w, min_cnt, max_cnt):
    """Greedy frontier growth of side A until its weight target is met."""
    n = len(weights)
    in_a = np.zeros(n, dtype=bool)
    attached = np.zeros(n)      # connectivity of each outside node to A
    w_a, cnt_a = 0.0, 0

    def next_seed():
        outside = np.flatnonzero(~in_a)
        return int(outside[np.argmax(weights[outside])])

    while (w_a < target_w and cnt_a < max_cnt) or cnt_a < min_cnt:
        if cnt_a >= n:
            break
        candidates = np.flatnonzero(~in_a & (attached > 0.0))
        pick = (int(candidates[np.argmax(attached[candidates])])
                if candidates.size else next_seed())
        in_a[pick] = True
        w_a += weights[pick]
        cnt_a += 1
        attached[pick] = 0.0
        for j, w in adj[pick].items():
            if not in_a[j]:
                attached[j] += w
    return in_a


def _refine(weights, counts, adj, in_a, target_w, min_cnt, max_cnt):
    """Boundary moves that shrink the cut while keeping the balance."""
    total_w = float(weights.sum())
    tol = max(0.05 * total_w, float(weights.max()) if len(weights) else 0.0)
    w_a = float(weights[in_a].sum())
    cnt_a = int(in_a.sum())
    n = len(weights)
    for _ in range(_REFINE_PASSES):
        moved = False
        for i in range(n):
            internal = external = 0.0
            side = in_a[i]
            for j, w in adj[i].items():
                if in_a[j] == side:
                    internal += w
                else:
                    external += w
            gain = external - internal
            if gain <= 0.0:
                continue
            if side:    # A -> B
                new_w, new_cnt = w_a - weights[i], cnt_a - 1
            else:       # B -> A
                new_w, new_cnt = w_a + weights[i], cnt_a + 1
            if not (min_cnt <= new_cnt <= max_cnt):
                continue
            if abs(new_w - target_w) > max(abs(w_a - target_w), tol):
                continue
            in_a[i] = not side
            w_a, cnt_a = new_w, new_cnt
            moved = True
        if not moved:
            break
    return in_a


def _bisect(weights, counts, adj, target_w, min_cnt, max_cnt):
    """Multilevel two-way split; returns a boolean side-A mask."""
    levels = []
    cur = (weights, counts, adj)
    while len(cur[0]) > _COARSEST_SIZE:
        c_weights, c_counts, c_adj, group = _coarsen_once(*cur)
        if len(c_weights) >= len(cur[0]):
            break
        levels.append((cur, group))
        cur = (c_weights, c_counts, c_adj)

    c_weights, c_counts, c_adj = cur
    scale = len(c_weights) / max(len(weights), 1)
    in_a = _grow_bisection(c_weights, c_counts, c_adj, target_w,
                           max(0, math.ceil(min_cnt * scale) - 1), len(c_weights))
    in_a = _refine(c_weights, c_counts, c_adj, in_a, target_w,
                   0, len(c_weights))

    for (fine, group) in reversed(levels):
        f_weights, f_counts, f_adj = fine
        in_a = in_a[group]
        bounds = (min_cnt, max_cnt) if fine is levels[0][0] else (0, len(f_weights))
        in_a = _refine(f_weights, f_counts, f_adj, in_a.copy(), target_w, *bounds)
    if not levels:
        in_a = _refine(weights, counts, adj, in_a.copy(), target_w, min_cnt, max_cnt)

    # Enforce the camera-count window exactly (weight refinement may not).
    cnt_a = int(in_a.sum())
    while cnt_a < min_cnt:
        outside = np.flatnonzero(~in_a)
        attach = np.array([sum(w for j, w in adj[i].items() if in_a[j])
                           for i in outside])
        pick = int(outside[np.argmax(attach)])
        in_a[pick] = True
        cnt_a += 1
    while cnt_a > max_cnt:
        inside = np.flatnonzero(in_a)
        attach = np.array([sum(w for j, w in adj[i].items() if not in_a[j])
                           for i in inside])
        pick = int(inside[np.argmax(attach)])
        in_a[pick] = False
        cnt_a -= 1
    return in_a


def _induced(graph_adj, nodes):
    local = {int(g): i for i, g in enumerate(nodes)}
    adj: list[dict[int, float]] = [dict() for _ in range(len(nodes))]
    for i, g in enumerate(nodes):
        for j, w in graph_adj[int(g)].items():
            if j in local:
                adj[i][local[j]] = w
    return adj


def partition_graph(graph: VisibilityGraph, requested_l: int,
                    min_cameras: int = 70, seed: int = 0) -> Partition:
    """Split cameras into at most ``requested_l`` balanced sub-blocks.

    The effective count is ``min(requested_l, M // min_cameras)`` with a
    floor of one, so no sub-block drops below the minimum size.  The
    heuristic is deterministic; ``seed`` is reserved for randomized
    strategies and currently unused.

    Args:
        graph: camera visibility graph.
        requested_l: desired number of sub-blocks (usually the thread count).
        min_cameras: minimum cameras per sub-block.
        seed: reserved.

    Returns:
        Partition with a total assignment and its node-weight balance ratio.
    """
    del seed
    if requested_l < 1:
        raise ValueError("requested_l must be >= 1")
    m = graph.n_nodes
    l_eff = max(1, min(requested_l, m // max(min_cameras, 1)))
    assignment = np.zeros(m, dtype=np.int64)
    if l_eff > 1:
        counts = np.ones(m, dtype=np.int64)
        next_id = [0]

        def recurse(nodes: np.ndarray, n_parts: int) -> None:
            if n_parts == 1:
                assignment[nodes] = next_id[0]
                next_id[0] += 1
                return
            parts_a = (n_parts + 1) // 2
            parts_b = n_parts - parts_a
            sub_adj = _induced(graph.adjacency, nodes)
            sub_w = graph.node_weight[nodes]
            sub_c = counts[nodes]
            target = float(sub_w.sum()) * parts_a / n_parts
            min_cnt = parts_a * min_cameras
            max_cnt = len(nodes) - parts_b * min_cameras
            in_a = _bisect(sub_w, sub_c, sub_adj, target, min_cnt, max_cnt)
            recurse(nodes[in_a], parts_a)
            recurse(nodes[~in_a], parts_b)

        recurse(np.arange(m, dtype=np.int64), l_eff)

    part_w = np.zeros(l_eff)
    np.add.at(part_w, assignment, graph.node_weight)
    mean_w = part_w.mean() if l_eff else 0.0
    balance = float(part_w.max() / mean_w) if mean_w > 0 else 1.0
    return Partition(assignment, l_eff, balance)


def partition_block(block: Block, requested_l: int, min_cameras: int = 70,
                    seed: int = 0) -> Partition:
    """Convenience wrapper: visibility graph + partition in one call."""
    return partition_graph(build_visibility_graph(block), requested_l,
                           min_cameras, seed)


# ---------------------------------------------------------------------------
# Exchange file
# ---------------------------------------------------------------------------

def write_partition(partition: Partition, path) -> None:
    """One ``camera_index sub_block_id`` pair per line."""
    lines = [f"{i} {int(s)}" for i, s in enumerate(partition.assignment)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_partition(path, n_cameras: int, node_weight: np.ndarray | None = None
                   ) -> Partition:
    """Replay an externally supplied assignment file."""
    assignment = np.full(n_cameras, -1, dtype=np.int64)
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        raw = raw.strip()
        if not raw:
            continue
        parts = raw.split()
        if len(parts) != 2:
            raise ParseError(ln, f"expected 'camera_index sub_block_id', got {raw!r}")
        try:
            cam, sub = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ParseError(ln, str(exc)) from exc
        if not 0 <= cam < n_cameras:
            raise ParseError(ln, f"camera index {cam} out of range")
        assignment[cam] = sub
    if (assignment < 0).any():
        missing = int(np.flatnonzero(assignment < 0)[0])
        raise ParseError(0, f"camera {missing} has no assignment")
    ids = np.unique(assignment)
    remap = {int(v): i for i, v in enumerate(ids)}
    assignment = np.array([remap[int(v)] for v in assignment], dtype=np.int64)
    l_eff = len(ids)
    if node_weight is None:
        node_weight = np.ones(n_cameras)
    part_w = np.zeros(l_eff)
    np.add.at(part_w, assignment, node_weight)
    balance = float(part_w.max() / part_w.mean()) if l_eff and part_w.mean() > 0 else 1.0
    return Partition(assignment, l_eff, balance)
