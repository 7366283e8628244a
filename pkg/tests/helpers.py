"""Shared builders for synthetic test blocks and dense-matrix oracles."""

import numpy as np

from parba import model
from parba.model import (
    Block,
    Camera,
    Observation,
    Point3D,
    SharedCalibration,
)


def look_at_rotation(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Rotation whose camera looks from ``center`` toward ``target``.

    The camera frame follows the package convention: depth along -z.
    """
    view = target - center
    view = view / np.linalg.norm(view)
    z_cam = -view
    up = np.array([0.0, 0.0, 1.0])
    if abs(z_cam @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    x_cam = np.cross(up, z_cam)
    x_cam = x_cam / np.linalg.norm(x_cam)
    y_cam = np.cross(z_cam, x_cam)
    return np.stack([x_cam, y_cam, z_cam])


def make_synthetic_block(n_cameras=6, n_points=30, model_tag=model.POSE_ONLY,
                         noise=0.0, seed=0, keep_prob=1.0,
                         random_weights=False, radius=10.0):
    """Ring of cameras looking at a point cloud around the origin.

    Every point stays visible in at least two cameras.  Returns
    (block, ground_truth_block); the returned block carries the noisy
    observations but ground-truth parameters.
    """
    rng = np.random.default_rng(seed)
    points = rng.uniform(-2.0, 2.0, (n_points, 3))

    shared = None
    cameras = []
    for i in range(n_cameras):
        angle = 2.0 * np.pi * i / n_cameras + rng.normal(0.0, 0.05)
        center = np.array([radius * np.cos(angle), radius * np.sin(angle),
                           rng.uniform(-2.0, 2.0)])
        rot = look_at_rotation(center, np.zeros(3))
        t = -rot @ center
        if model_tag == model.PER_CAMERA_FOCAL_RADIAL:
            intr = np.array([rng.uniform(900.0, 1100.0), rng.uniform(-0.05, 0.05)])
            cameras.append(Camera(rot, t, model_tag, intr,
                                  fixed_k2=rng.uniform(-0.01, 0.01)))
        else:
            cameras.append(Camera(rot, t, model_tag))
    if model_tag == model.SHARED_CALIBRATION:
        shared = SharedCalibration(fx=1000.0, fy=995.0, skew=0.5, px=2.0,
                                   py=-3.0, k2=0.02, k4=-0.005)

    observations = []
    per_point = np.zeros(n_points, dtype=int)
    for j in range(n_points):
        seen = []
        for i in range(n_cameras):
            pix = model.project(cameras[i], shared, points[j])
            seen.append((i, pix))
        rng_keep = rng.uniform(0.0, 1.0, len(seen)) < keep_prob
        # Always keep the first two views so the point stays constrained.
        rng_keep[:2] = True
        for (i, pix), keep in zip(seen, rng_keep):
            if not keep:
                continue
            if random_weights:
                a = rng.normal(0.0, 0.5, (2, 2))
                w = a @ a.T + np.eye(2)
            else:
                w = np.eye(2)
            observations.append(Observation(i, j, pix + rng.normal(0.0, noise, 2), w))
            per_point[j] += 1
    assert per_point.min() >= min(2, n_cameras)

    truth = Block([c.copy() for c in cameras],
                  [Point3D(p.copy()) for p in points],
                  [Observation(o.camera_index, o.point_index, o.coords.copy(),
                               o.weight_info.copy()) for o in observations],
                  shared)
    block = truth.copy()
    return block, truth


def perturb_block(block: Block, angle_sigma=1e-3, translation_sigma=0.01,
                  point_sigma=0.0, seed=1) -> Block:
    """Gaussian perturbation of camera poses (and optionally points)."""
    rng = np.random.default_rng(seed)
    out = block.copy()
    for cam in out.cameras:
        cam.rotation = model.rodrigues(rng.normal(0.0, angle_sigma, 3)) @ cam.rotation
        cam.translation = cam.translation + rng.normal(0.0, translation_sigma, 3)
    if point_sigma > 0.0:
        out.points += rng.normal(0.0, point_sigma, out.points.shape)
    return out


def dense_normal_system(block: Block, priors=(), lam=0.0, gauge=None):
    """Dense J^T W J assembly from the single-observation API.

    Independent oracle: loops over observations, builds the explicit design
    matrix row by row, applies the same gauge/damping rules as the solver.
    Returns (N, b, layout_info) with layout [cameras | shared | points].
    """
    from parba.solver import GaugeFix, default_gauge
    from parba.model import ParamState

    state = ParamState.from_block(block)
    if gauge is None:
        gauge = default_gauge(block, state) if not priors else GaugeFix()

    m = block.n_cameras
    p = block.camera_param_count
    s = block.shared_param_count
    slot_pt = np.flatnonzero(block.active_point_mask())
    pt_slot = {int(j): k for k, j in enumerate(slot_pt)}
    dim = m * p + s + 3 * len(slot_pt)

    n_mat = np.zeros((dim, dim))
    b = np.zeros(dim)
    for k in range(block.n_observations):
        if block.obs_status[k] == model.OBS_DELETED:
            continue
        ci = int(block.obs_cam[k])
        pj = int(block.obs_pt[k])
        cam = block.cameras[ci]
        r, jc, jp, js = model.residual_and_jacobians(
            cam, block.shared_calibration, block.points[pj], block.observation(k))
        if gauge.camera_index == ci:
            jc = jc.copy()
            jc[:, 0:6] = 0.0
        if gauge.point_index == pj:
            jp = jp.copy()
            jp[:, gauge.point_axis] = 0.0
        row = np.zeros((2, dim))
        row[:, ci * p:(ci + 1) * p] = jc
        if js is not None:
            row[:, m * p:m * p + 7] = js
        off = m * p + s + 3 * pt_slot[pj]
        row[:, off:off + 3] = jp
        w = block.obs_w[k]
        n_mat += row.T @ w @ row
        b += row.T @ w @ (-r)
    for prior in priors:
        if int(prior.point_index) not in pt_slot:
            continue
        off = m * p + s + 3 * pt_slot[int(prior.point_index)]
        n_mat[off:off + 3, off:off + 3] += prior.information
        b[off:off + 3] += prior.information @ (prior.target - block.points[prior.point_index])

    diag = np.einsum("ii->i", n_mat)
    diag *= (1.0 + lam)
    fixed = np.zeros(dim, dtype=bool)
    if gauge.camera_index is not None:
        fixed[gauge.camera_index * p:gauge.camera_index * p + 6] = True
    if gauge.point_index is not None and int(gauge.point_index) in pt_slot:
        fixed[m * p + s + 3 * pt_slot[int(gauge.point_index)] + gauge.point_axis] = True
    dead = (diag == 0.0) | fixed
    diag[dead] = 1.0
    b[fixed] = 0.0
    return n_mat, b, (m, p, s, slot_pt)
