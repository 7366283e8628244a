"""Fixed-camera adjustment (intersection) of individual 3D points.

Re-estimates point coordinates with all cameras frozen and returns the
undamped information J^T W J at the solution, which downstream consensus
uses as a statistically scaled tie-point weight.  All points are solved
simultaneously: one damped 3x3 Newton system per point per sweep, fully
vectorized across the point set, with per-point damping, acceptance, and
convergence state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .errors import IntersectionDiverged
from .model import Block, ParamState
from .solver import AdjustOptions

#: Per-point LM sweeps; intersections either converge quickly or not at all.
MAX_INTERSECTION_ITERATIONS = 10


@dataclass
class IntersectionResult:
    """Outcome of one point intersection."""

    coords: np.ndarray
    information_total: np.ndarray   # undamped J^T W J over all observing cameras
    converged: bool
    iterations: int


@dataclass
class BatchIntersection:
    """Vectorized intersection outcome for a set of points."""

    point_indices: np.ndarray   # (n,)
    coords: np.ndarray          # (n, 3)
    information: np.ndarray     # (n, 3, 3)
    converged: np.ndarray       # (n,) bool
    diverged: np.ndarray        # (n,) bool
    iterations: np.ndarray      # (n,) int
    cost: np.ndarray            # (n,) final sum v^T W v


def _point_obs(block: Block, point_indices: np.ndarray):
    """Active observations of the requested points with row mapping."""
    sel = np.flatnonzero(block.active_obs_mask()
                         & np.isin(block.obs_pt, point_indices))
    row_of_pt = np.full(block.n_points, -1, dtype=np.int64)
    row_of_pt[point_indices] = np.arange(len(point_indices))
    return sel, row_of_pt[block.obs_pt[sel]]


def _scatter_cost(rows, per_obs, n):
    cost = np.zeros(n)
    bad = ~np.isfinite(per_obs)
    np.add.at(cost, rows, np.where(bad, 0.0, per_obs))
    has_bad = np.zeros(n, dtype=bool)
    has_bad[rows[bad]] = True
    cost[has_bad] = np.inf
    return cost


def intersect_batch(block: Block, point_indices, options: AdjustOptions | None = None,
                    weight_scale: np.ndarray | None = None) -> BatchIntersection:
    """Intersect many points at once, cameras fixed.

    Args:
        block: source of cameras, observations, and starting coordinates.
        point_indices: points to re-estimate (must be active).
        options: damping / convergence constants, shared with the solver.
        weight_scale: optional per-observation weight multiplier indexed
            like ``block`` observations (robust trial down-weighting).

    Returns:
        BatchIntersection; ``diverged`` marks points whose cost was never
        reduced within the sweep budget or that hit non-finite values.
        Coordinates of the block are not modified.
    """
    options = options or AdjustOptions()
    point_indices = np.asarray(point_indices, dtype=np.int64)
    n = len(point_indices)
    state = ParamState.from_block(block)
    coords = state.points[point_indices].copy()

    sel, rows = _point_obs(block, point_indices)
    cam_idx = block.obs_cam[sel].astype(np.int64)
    pt_idx = block.obs_pt[sel].astype(np.int64)
    obs_xy = block.obs_xy[sel]
    w = block.obs_w[sel]
    if weight_scale is not None:
        w = w * weight_scale[sel][:, None, None]

    def costs_at(points_n3: np.ndarray) -> np.ndarray:
        state.points[point_indices] = points_n3
        pix, depth = model.project_batch(state, cam_idx, pt_idx)
        v = pix - obs_xy
        per_obs = np.einsum("ki,kij,kj->k", v, w, v)
        per_obs = np.where(depth > 0.0, per_obs, np.inf)
        return _scatter_cost(rows, per_obs, n)

    cost = costs_at(coords)
    initial_cost = cost.copy()
    best = cost.copy()
    lam = np.full(n, options.damping)
    grace = np.full(n, options.grace_iterations)
    frozen = ~np.isfinite(cost)          # cannot even linearize
    improved = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=np.int64)
    obs_count = np.bincount(rows, minlength=n)
    frozen |= obs_count == 0

    d3 = np.arange(3)
    for _ in range(MAX_INTERSECTION_ITERATIONS):
        live_rows = ~frozen
        if not live_rows.any():
            break
        live_obs = live_rows[rows]
        k_live = np.flatnonzero(live_obs)
        state.points[point_indices] = coords
        r, _, jp, _ = model.residual_jacobian_batch(
            state, cam_idx[k_live], pt_idx[k_live], obs_xy[k_live],
            want_camera=False, want_point=True, want_shared=False)
        w_live = w[k_live]
        wjp = np.einsum("kab,kbe->kae", w_live, jp)
        n_mat = np.zeros((n, 3, 3))
        np.add.at(n_mat, rows[k_live], np.einsum("kai,kaj->kij", jp, wjp))
        g = np.zeros((n, 3))
        np.add.at(g, rows[k_live],
                  np.einsum("kae,ka->ke", jp, -np.einsum("kab,kb->ka", w_live, r)))

        damped = n_mat.copy()
        damped[:, d3, d3] *= (1.0 + lam)[:, None]
        zero_diag = damped[:, d3, d3] == 0.0
        damped[:, d3, d3] = np.where(zero_diag, 1.0, damped[:, d3, d3])
        det = np.linalg.det(damped)
        solvable = live_rows & np.isfinite(det) & (np.abs(det) > 1e-300)
        damped[~solvable] = np.eye(3)
        dx = np.linalg.solve(damped, g[:, :, None])[:, :, 0]
        dx[~solvable] = 0.0

        trial = coords + dx
        trial_cost = costs_at(np.where(solvable[:, None], trial, coords))
        accept = solvable & (trial_cost < cost)
        coords[accept] = trial[accept]
        cost[accept] = trial_cost[accept]
        improved |= accept
        lam[accept] = np.maximum(lam[accept] / 10.0, options.damping_min)
        reject = live_rows & ~accept
        lam[reject] = np.minimum(lam[reject] * 10.0, options.damping_max)
        iterations[live_rows] += 1

        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.sqrt(np.where(cost > 0.0, best / np.maximum(cost, 1e-300), np.inf))
        stalled = live_rows & (ratio < options.convergence_ratio)
        best = np.minimum(best, cost)
        use_grace = stalled & (grace > 0)
        grace[use_grace] -= 1
        frozen |= stalled & ~use_grace
        frozen |= live_rows & (cost <= 1e-30)

    # A point that starts at its optimum cannot reduce its cost; the stall
    # rule freezes it as converged.  Divergence is reserved for non-finite
    # states and points that exhausted the budget without either progress
    # or a convergence freeze.
    diverged = ~np.isfinite(cost) | (~frozen & ~improved & (initial_cost > 0.0))
    converged = ~diverged & (frozen | (cost <= 1e-30))

    info = np.zeros((n, 3, 3))
    ok = np.isfinite(cost)
    if ok.any():
        k_ok = np.flatnonzero(ok[rows])
        state.points[point_indices] = coords
        _, _, jp, _ = model.residual_jacobian_batch(
            state, cam_idx[k_ok], pt_idx[k_ok], obs_xy[k_ok],
            want_camera=False, want_point=True, want_shared=False)
        wjp = np.einsum("kab,kbe->kae", w[k_ok], jp)
        np.add.at(info, rows[k_ok], np.einsum("kai,kaj->kij", jp, wjp))

    state.points[point_indices] = coords  # leave state consistent; block untouched
    return BatchIntersection(point_indices, coords, info, converged, diverged,
                             iterations, cost)


def intersect_point(block: Block, point_index: int,
                    options: AdjustOptions | None = None) -> IntersectionResult:
    """LM over one point's coordinates with every camera fixed.

    Requires at least two active observations from cameras with distinct
    projection centers.

    Raises:
        IntersectionDiverged: the cost was not reduced within the sweep
            budget, or non-finite values appeared.
    """
    sel = np.flatnonzero(block.active_obs_mask() & (block.obs_pt == point_index))
    if len(sel) < 2:
        raise ValueError(f"point {point_index} needs >= 2 active observations")
    centers = np.stack([block.cameras[int(c)].center() for c in block.obs_cam[sel]])
    spread = np.abs(centers - centers[0]).max()
    if spread == 0.0:
        raise ValueError(f"point {point_index} observed from coincident centers")

    batch = intersect_batch(block, np.array([point_index]), options)
    if batch.diverged[0]:
        raise IntersectionDiverged(point_index)
    return IntersectionResult(coords=batch.coords[0],
                              information_total=batch.information[0],
                              converged=bool(batch.converged[0]),
                              iterations=int(batch.iterations[0]))


def information_totals(block: Block, point_indices,
                       obs_mask: np.ndarray | None = None) -> np.ndarray:
    """Undamped J^T W J per point at the current coordinates, (n, 3, 3).

    ``obs_mask`` restricts which observations contribute (on top of the
    active mask); down-weighted observations contribute their scaled info.
    """
    point_indices = np.asarray(point_indices, dtype=np.int64)
    n = len(point_indices)
    sel, rows = _point_obs(block, point_indices)
    if obs_mask is not None:
        keep = obs_mask[sel]
        sel, rows = sel[keep], rows[keep]
    info = np.zeros((n, 3, 3))
    if len(sel) == 0:
        return info
    state = ParamState.from_block(block)
    _, _, jp, _ = model.residual_jacobian_batch(
        state, block.obs_cam[sel].astype(np.int64),
        block.obs_pt[sel].astype(np.int64), block.obs_xy[sel],
        want_camera=False, want_point=True, want_shared=False)
    wjp = np.einsum("kab,kbe->kae", block.obs_w[sel], jp)
    np.add.at(info, rows, np.einsum("kai,kaj->kij", jp, wjp))
    return info


def reduced_information(block: Block, point_index: int, assignment: np.ndarray,
                        excluding: int) -> np.ndarray:
    """Information restricted to cameras outside one sub-block, (3, 3).

    Sums the per-observation 3x3 contributions of cameras whose sub-block
    differs from ``excluding``; the zero matrix when no outside camera
    observes the point (the point is then effectively free there).  May be
    rank deficient, which is valid as a PSD prior weight.
    """
    outside = assignment[block.obs_cam] != excluding
    return information_totals(block, np.array([point_index]), obs_mask=outside)[0]


def reduced_information_batch(block: Block, point_indices,
                              assignment: np.ndarray, n_subblocks: int) -> np.ndarray:
    """Per-point, per-sub-block reduced information, (n, L, 3, 3).

    Entry [j, l] excludes the cameras of sub-block l; computed as the total
    minus the within-l contribution so the partition additivity holds to
    machine precision.
    """
    point_indices = np.asarray(point_indices, dtype=np.int64)
    n = len(point_indices)
    sel, rows = _point_obs(block, point_indices)
    total = np.zeros((n, 3, 3))
    within = np.zeros((n, n_subblocks, 3, 3))
    if len(sel):
        state = ParamState.from_block(block)
        _, _, jp, _ = model.residual_jacobian_batch(
            state, block.obs_cam[sel].astype(np.int64),
            block.obs_pt[sel].astype(np.int64), block.obs_xy[sel],
            want_camera=False, want_point=True, want_shared=False)
        contrib = np.einsum("kai,kaj->kij", jp,
                            np.einsum("kab,kbe->kae", block.obs_w[sel], jp))
        np.add.at(total, rows, contrib)
        sub = assignment[block.obs_cam[sel]]
        np.add.at(within, (rows, sub), contrib)
    return total[:, None] - within
