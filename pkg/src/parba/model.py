"""Domain types, camera models, projection, analytic Jacobians, and sigma0.

A Block bundles cameras, 3D points and weighted image observations; it is
the unit of adjustment.  Three camera parameterizations are supported:

* ``pose_only``        -- 6 pose parameters per camera.  Projection uses a
  unit focal length, or the block-level shared calibration held fixed when
  one is attached to the block.
* ``per_camera_focal_radial`` -- 6 pose parameters plus focal length and
  quadratic radial distortion per camera; the quartic coefficient read from
  the input file stays fixed.  Follows the community large-scale convention
  (see :mod:`parba.blockio`).
* ``shared_calibration``      -- 6 pose parameters per camera plus one
  block-level 7-vector (fx, fy, skew, px, py, k2, k4) estimated jointly.

Rotations are stored as full 3x3 matrices; optimization parameterizes a
3-vector rotation increment composed on the left and evaluated at zero,
which keeps Jacobians free of 180-degree singularities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DepthNonPositive, NonPositiveRedundancy

# Camera model tags.
POSE_ONLY = "pose_only"
PER_CAMERA_FOCAL_RADIAL = "per_camera_focal_radial"
SHARED_CALIBRATION = "shared_calibration"

MODEL_TAGS = (POSE_ONLY, PER_CAMERA_FOCAL_RADIAL, SHARED_CALIBRATION)

#: Optimized parameters per camera for each model.
CAMERA_PARAM_COUNT = {
    POSE_ONLY: 6,
    PER_CAMERA_FOCAL_RADIAL: 8,
    SHARED_CALIBRATION: 6,
}

#: Length of the intrinsics vector carried by each camera.
INTRINSICS_LEN = {
    POSE_ONLY: 0,
    PER_CAMERA_FOCAL_RADIAL: 2,
    SHARED_CALIBRATION: 0,
}

# Observation / point status codes (kept as small ints in Block arrays).
OBS_ACTIVE = 0
OBS_DOWN_WEIGHTED = 1
OBS_DELETED = 2
POINT_ACTIVE = 0
POINT_DELETED = 1

OBS_STATUS_NAMES = {OBS_ACTIVE: "active", OBS_DOWN_WEIGHTED: "down_weighted",
                    OBS_DELETED: "deleted"}
OBS_STATUS_CODES = {v: k for k, v in OBS_STATUS_NAMES.items()}
POINT_STATUS_NAMES = {POINT_ACTIVE: "active", POINT_DELETED: "deleted"}
POINT_STATUS_CODES = {v: k for k, v in POINT_STATUS_NAMES.items()}


# ---------------------------------------------------------------------------
# Rotation helpers
# ---------------------------------------------------------------------------

def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix of ``w`` (3,) or batch (k, 3) -> (k, 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out[0] if single else out


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for the axis-angle increment ``w`` (3,)."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    if theta < 1e-9:
        # Series expansions keep the result exact through O(theta^4).
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    k = skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest orthonormal matrix with determinant +1 (via SVD)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class SharedCalibration:
    """Block-level calibration: pinhole matrix plus radial distortion.

    ``k2`` and ``k4`` are the quadratic and quartic radial coefficients
    applied in normalized image coordinates before focal scaling.
    """

    fx: float
    fy: float
    skew: float = 0.0
    px: float = 0.0
    py: float = 0.0
    k2: float = 0.0
    k4: float = 0.0

    def __post_init__(self) -> None:
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.skew, self.px, self.py,
                         self.k2, self.k4], dtype=np.float64)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "SharedCalibration":
        fx, fy, sk, px, py, k2, k4 = (float(v) for v in values)
        return cls(fx, fy, sk, px, py, k2, k4)


@dataclass
class Camera:
    """One camera: orthonormal rotation, translation and model intrinsics.

    For ``per_camera_focal_radial`` the intrinsics vector is (focal, k1);
    the quartic coefficient ``fixed_k2`` is carried along but never
    optimized.
    """

    rotation: np.ndarray
    translation: np.ndarray
    model_tag: str = POSE_ONLY
    intrinsics: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fixed_k2: float = 0.0

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(-1)
        if self.model_tag not in MODEL_TAGS:
            raise ValueError(f"unknown camera model {self.model_tag!r}")
        if len(self.intrinsics) != INTRINSICS_LEN[self.model_tag]:
            raise ValueError(
                f"model {self.model_tag!r} expects "
                f"{INTRINSICS_LEN[self.model_tag]} intrinsics, "
                f"got {len(self.intrinsics)}"
            )

    @property
    def param_count(self) -> int:
        return CAMERA_PARAM_COUNT[self.model_tag]

    def center(self) -> np.ndarray:
        """Projection center -R^T t in scene coordinates."""
        return -self.rotation.T @ self.translation

    def copy(self) -> "Camera":
        return Camera(self.rotation.copy(), self.translation.copy(),
                      self.model_tag, self.intrinsics.copy(), self.fixed_k2)


@dataclass
class Point3D:
    """A 3D scene point."""

    coords: np.ndarray
    status: str = "active"

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(3)


@dataclass
class Observation:
    """One weighted image measurement of a point in a camera.

    ``weight_info`` is the symmetric 2x2 inverse covariance of the
    measurement in pixels^-2.
    """

    camera_index: int
    point_index: int
    coords: np.ndarray
    weight_info: np.ndarray = field(default_factory=lambda: np.eye(2))
    status: str = "active"

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(2)
        self.weight_info = np.asarray(self.weight_info, dtype=np.float64).reshape(2, 2)


class Block:
    """Cameras + points + observations; the unit of adjustment.

    Observations are held as parallel arrays for vectorized evaluation:
    ``obs_cam``/``obs_pt`` (K,) int32, ``obs_xy`` (K, 2), ``obs_w``
    (K, 2, 2) and ``obs_status`` (K,) int8.  Point coordinates live in
    ``points`` (N, 3) with ``point_status`` (N,) int8.
    """

    def __init__(self, cameras, points, observations,
                 shared_calibration: SharedCalibration | None = None):
        self.cameras: list[Camera] = list(cameras)
        if not self.cameras:
            self.model_tag = POSE_ONLY
        else:
            tags = {c.model_tag for c in self.cameras}
            if len(tags) != 1:
                raise ValueError(f"mixed camera models in one block: {tags}")
            self.model_tag = self.cameras[0].model_tag
        if self.model_tag == SHARED_CALIBRATION and shared_calibration is None:
            raise ValueError("shared_calibration model requires a calibration")
        self.shared_calibration = shared_calibration

        if isinstance(points, np.ndarray):
            self.points = np.array(points, dtype=np.float64).reshape(-1, 3)
            self.point_status = np.zeros(len(self.points), dtype=np.int8)
        else:
            pts = list(points)
            self.points = np.array([p.coords for p in pts], dtype=np.float64).reshape(-1, 3)
            self.point_status = np.array(
                [POINT_STATUS_CODES[p.status] for p in pts], dtype=np.int8)

        if isinstance(observations, dict):
            self.obs_cam = np.asarray(observations["cam"], dtype=np.int32)
            self.obs_pt = np.asarray(observations["pt"], dtype=np.int32)
            self.obs_xy = np.asarray(observations["xy"], dtype=np.float64).reshape(-1, 2)
            self.obs_w = np.asarray(observations["w"], dtype=np.float64).reshape(-1, 2, 2)
            status = observations.get("status")
            if status is None:
                self.obs_status = np.zeros(len(self.obs_cam), dtype=np.int8)
            else:
                self.obs_status = np.asarray(status, dtype=np.int8)
        else:
            obs = list(observations)
            self.obs_cam = np.array([o.camera_index for o in obs], dtype=np.int32)
            self.obs_pt = np.array([o.point_index for o in obs], dtype=np.int32)
            self.obs_xy = (np.array([o.coords for o in obs], dtype=np.float64).reshape(-1, 2)
                           if obs else np.zeros((0, 2)))
            self.obs_w = (np.array([o.weight_info for o in obs], dtype=np.float64)
                          if obs else np.zeros((0, 2, 2)))
            self.obs_status = np.array(
                [OBS_STATUS_CODES[o.status] for o in obs], dtype=np.int8)
        self._validate()

    # -- construction / validation ---------------------------------------

    def _validate(self) -> None:
        n_cam, n_pt = len(self.cameras), len(self.points)
        if len(self.obs_cam):
            if self.obs_cam.min() < 0 or self.obs_cam.max() >= n_cam:
                raise ValueError("observation references a camera out of range")
            if self.obs_pt.min() < 0 or self.obs_pt.max() >= n_pt:
                raise ValueError("observation references a point out of range")
            keys = self.obs_cam.astype(np.int64) * max(n_pt, 1) + self.obs_pt
            if len(np.unique(keys)) != len(keys):
                raise ValueError("duplicate (camera, point) observation")
        for i, cam in enumerate(self.cameras):
            r = cam.rotation
            if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
                raise ValueError(f"camera {i} rotation is not orthonormal")

    # -- sizes -------------------------------------------------------------

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_observations(self) -> int:
        return len(self.obs_cam)

    @property
    def camera_param_count(self) -> int:
        return CAMERA_PARAM_COUNT[self.model_tag]

    @property
    def shared_param_count(self) -> int:
        return 7 if self.model_tag == SHARED_CALIBRATION else 0

    # -- masks and views ----------------------------------------------------

    def active_obs_mask(self) -> np.ndarray:
        """Active includes down-weighted observations."""
        return self.obs_status != OBS_DELETED

    def active_point_mask(self) -> np.ndarray:
        return self.point_status == POINT_ACTIVE

    def observation(self, k: int) -> Observation:
        return Observation(int(self.obs_cam[k]), int(self.obs_pt[k]),
                           self.obs_xy[k].copy(), self.obs_w[k].copy(),
                           OBS_STATUS_NAMES[int(self.obs_status[k])])

    def point(self, j: int) -> Point3D:
        return Point3D(self.points[j].copy(),
                       POINT_STATUS_NAMES[int(self.point_status[j])])

    def copy(self) -> "Block":
        blk = Block.__new__(Block)
        blk.cameras = [c.copy() for c in self.cameras]
        blk.model_tag = self.model_tag
        blk.shared_calibration = (
            SharedCalibration.from_array(self.shared_calibration.as_array())
            if self.shared_calibration is not None else None)
        blk.points = self.points.copy()
        blk.point_status = self.point_status.copy()
        blk.obs_cam = self.obs_cam.copy()
        blk.obs_pt = self.obs_pt.copy()
        blk.obs_xy = self.obs_xy.copy()
        blk.obs_w = self.obs_w.copy()
        blk.obs_status = self.obs_status.copy()
        return blk

    # -- mutation -----------------------------------------------------------

    def down_weight_observations(self, idx: np.ndarray, factor: float) -> None:
        """Scale weight info of the given observations and mark them."""
        idx = np.asarray(idx, dtype=np.int64)
        self.obs_w[idx] *= factor
        self.obs_status[idx] = OBS_DOWN_WEIGHTED

    def delete_observations(self, idx: np.ndarray) -> None:
        self.obs_status[np.asarray(idx, dtype=np.int64)] = OBS_DELETED

    def delete_points(self, idx: np.ndarray) -> int:
        """Delete points and all their remaining observations.

        Returns the number of observations deleted alongside.
        """
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return 0
        self.point_status[idx] = POINT_DELETED
        doomed = np.isin(self.obs_pt, idx) & (self.obs_status != OBS_DELETED)
        self.obs_status[doomed] = OBS_DELETED
        return int(doomed.sum())

    def prune_underobserved_points(self, min_obs: int = 2) -> tuple[int, int]:
        """Delete active points left with fewer than ``min_obs`` live obs.

        Repeats until stable so cascading deletions settle.  Returns
        (#points deleted, #observations deleted).
        """
        pts_deleted = 0
        obs_deleted = 0
        while True:
            live = self.active_obs_mask()
            counts = np.bincount(self.obs_pt[live], minlength=self.n_points)
            victims = np.flatnonzero((counts < min_obs) & (self.point_status == POINT_ACTIVE))
            if victims.size == 0:
                return pts_deleted, obs_deleted
            pts_deleted += victims.size
            obs_deleted += self.delete_points(victims)

    # -- stacked parameter views ---------------------------------------------

    def stacked_rotations(self) -> np.ndarray:
        if not self.cameras:
            return np.zeros((0, 3, 3))
        return np.stack([c.rotation for c in self.cameras])

    def stacked_translations(self) -> np.ndarray:
        if not self.cameras:
            return np.zeros((0, 3))
        return np.stack([c.translation for c in self.cameras])

    def stacked_intrinsics(self) -> np.ndarray:
        ni = INTRINSICS_LEN[self.model_tag]
        if not self.cameras or ni == 0:
            return np.zeros((len(self.cameras), ni))
        return np.stack([c.intrinsics for c in self.cameras])

    def stacked_fixed_k2(self) -> np.ndarray:
        return np.array([c.fixed_k2 for c in self.cameras], dtype=np.float64)


# ---------------------------------------------------------------------------
# Parameter state used during adjustment
# ---------------------------------------------------------------------------

@dataclass
class ParamState:
    """Mutable snapshot of all adjustable parameters of a block."""

    rotations: np.ndarray       # (M, 3, 3)
    translations: np.ndarray    # (M, 3)
    intrinsics: np.ndarray      # (M, ni)
    fixed_k2: np.ndarray        # (M,)
    shared: np.ndarray | None   # (7,) when the shared calibration is estimated
    points: np.ndarray          # (N, 3)
    model_tag: str
    fixed_shared: np.ndarray | None = None  # (7,) pose_only with known calibration

    @classmethod
    def from_block(cls, block: Block) -> "ParamState":
        shared = None
        fixed_shared = None
        if block.model_tag == SHARED_CALIBRATION:
            shared = block.shared_calibration.as_array()
        elif block.shared_calibration is not None:
            fixed_shared = block.shared_calibration.as_array()
        return cls(block.stacked_rotations(), block.stacked_translations(),
                   block.stacked_intrinsics(), block.stacked_fixed_k2(),
                   shared, block.points.copy(), block.model_tag, fixed_shared)

    def copy(self) -> "ParamState":
        return ParamState(self.rotations.copy(), self.translations.copy(),
                          self.intrinsics.copy(), self.fixed_k2.copy(),
                          None if self.shared is None else self.shared.copy(),
                          self.points.copy(), self.model_tag,
                          None if self.fixed_shared is None else self.fixed_shared.copy())

    def write_to_block(self, block: Block) -> None:
        for i, cam in enumerate(block.cameras):
            cam.rotation = self.rotations[i].copy()
            cam.translation = self.translations[i].copy()
            if self.intrinsics.shape[1]:
                cam.intrinsics = self.intrinsics[i].copy()
        if self.shared is not None:
            block.shared_calibration = SharedCalibration.from_array(self.shared)
        block.points[...] = self.points


# ---------------------------------------------------------------------------
# Projection and Jacobians
# ---------------------------------------------------------------------------

def _normalized_coords(state: ParamState, cam_idx: np.ndarray,
                       pt_idx: np.ndarray) -> tuple[np.ndarray, ...]:
    """Camera-frame geometry for a batch of (camera, point) pairs.

    Returns (w, pc, depth, n) with w = R X, pc = w + t, depth = -pc_z and
    n = pc_xy / depth.  Non-positive depths yield NaN rows in n.
    """
    rot = state.rotations[cam_idx]                       # (k, 3, 3)
    w = np.einsum("kij,kj->ki", rot, state.points[pt_idx])
    pc = w + state.translations[cam_idx]
    depth = -pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        n = np.where((depth > 0.0)[:, None], pc[:, :2] / depth[:, None], np.nan)
    return w, pc, depth, n


def _pixel_from_normalized(state: ParamState, cam_idx: np.ndarray,
                           n: np.ndarray) -> np.ndarray:
    """Apply the model's distortion and focal scaling to normalized coords."""
    tag = state.model_tag
    if tag == PER_CAMERA_FOCAL_RADIAL:
        f = state.intrinsics[cam_idx, 0]
        k1 = state.intrinsics[cam_idx, 1]
        k2 = state.fixed_k2[cam_idx]
        r2 = np.einsum("ki,ki->k", n, n)
        d = 1.0 + k1 * r2 + k2 * r2 * r2
        return (f * d)[:, None] * n
    shared = state.shared if tag == SHARED_CALIBRATION else state.fixed_shared
    if shared is None:
        return n.copy()
    fx, fy, sk, px, py, k2, k4 = shared
    r2 = np.einsum("ki,ki->k", n, n)
    d = 1.0 + k2 * r2 + k4 * r2 * r2
    nd = d[:, None] * n
    pix = np.empty_like(n)
    pix[:, 0] = fx * nd[:, 0] + sk * nd[:, 1] + px
    pix[:, 1] = fy * nd[:, 1] + py
    return pix


def project_batch(state: ParamState, cam_idx: np.ndarray, pt_idx: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Project (camera, point) index pairs; no depth check.

    Returns (pixels (k, 2), depth (k,)); rows with depth <= 0 are NaN.
    """
    _, _, depth, n = _normalized_coords(state, cam_idx, pt_idx)
    return _pixel_from_normalized(state, cam_idx, n), depth


def _pixel_gradient_wrt_normalized(state: ParamState, cam_idx: np.ndarray,
                                   n: np.ndarray) -> np.ndarray:
    """d pixel / d normalized coords, (k, 2, 2)."""
    k = len(cam_idx)
    tag = state.model_tag
    eye2 = np.eye(2)
    if tag == PER_CAMERA_FOCAL_RADIAL:
        f = state.intrinsics[cam_idx, 0]
        k1 = state.intrinsics[cam_idx, 1]
        k2 = state.fixed_k2[cam_idx]
        r2 = np.einsum("ki,ki->k", n, n)
        d = 1.0 + k1 * r2 + k2 * r2 * r2
        g = (2.0 * k1 + 4.0 * k2 * r2)[:, None] * n     # dD/dn
        a = d[:, None, None] * eye2 + np.einsum("ki,kj->kij", n, g)
        return f[:, None, None] * a
    shared = state.shared if tag == SHARED_CALIBRATION else state.fixed_shared
    if shared is None:
        return np.broadcast_to(eye2, (k, 2, 2)).copy()
    fx, fy, sk, _, _, k2, k4 = shared
    r2 = np.einsum("ki,ki->k", n, n)
    d = 1.0 + k2 * r2 + k4 * r2 * r2
    g = (2.0 * k2 + 4.0 * k4 * r2)[:, None] * n
    dnd_dn = d[:, None, None] * eye2 + np.einsum("ki,kj->kij", n, g)
    kmat = np.array([[fx, sk], [0.0, fy]])
    return np.einsum("ab,kbj->kaj", kmat, dnd_dn)


def residual_jacobian_batch(state: ParamState, cam_idx: np.ndarray,
                            pt_idx: np.ndarray, obs_xy: np.ndarray,
                            *, want_camera: bool = True, want_point: bool = True,
                            want_shared: bool = True):
    """Residuals and exact analytic Jacobians for a batch of observations.

    The camera Jacobian is taken with respect to the 6 (or 8) parameters
    [rotation increment (3), translation (3), (focal, k1)] evaluated at a
    zero increment.  Raises DepthNonPositive if any pair is degenerate.

    Returns (residual (k, 2), J_cam (k, 2, p) | None, J_point (k, 2, 3) |
    None, J_shared (k, 2, 7) | None).
    """
    cam_idx = np.asarray(cam_idx, dtype=np.int64)
    pt_idx = np.asarray(pt_idx, dtype=np.int64)
    w, _, depth, n = _normalized_coords(state, cam_idx, pt_idx)
    bad = np.flatnonzero(~(depth > 0.0))
    if bad.size:
        b = bad[0]
        raise DepthNonPositive(int(cam_idx[b]), int(pt_idx[b]), float(depth[b]))
    residual = _pixel_from_normalized(state, cam_idx, n) - obs_xy

    j_cam = j_pt = j_sh = None
    if want_camera or want_point or want_shared:
        a = _pixel_gradient_wrt_normalized(state, cam_idx, n)   # (k, 2, 2)
        # d n / d pc: rows [1/d, 0, nx/d], [0, 1/d, ny/d]
        k = len(cam_idx)
        b_mat = np.zeros((k, 2, 3))
        inv_d = 1.0 / depth
        b_mat[:, 0, 0] = inv_d
        b_mat[:, 1, 1] = inv_d
        b_mat[:, 0, 2] = n[:, 0] * inv_d
        b_mat[:, 1, 2] = n[:, 1] * inv_d
        g = np.einsum("kab,kbj->kaj", a, b_mat)                 # d pix / d pc

        if want_camera:
            p = CAMERA_PARAM_COUNT[state.model_tag]
            j_cam = np.zeros((k, 2, p))
            # Rotation increment composed on the left: d pc / d omega = -[w]x.
            j_cam[:, :, 0:3] = -np.einsum("kaj,kjm->kam", g, skew(w))
            j_cam[:, :, 3:6] = g
            if state.model_tag == PER_CAMERA_FOCAL_RADIAL:
                f = state.intrinsics[cam_idx, 0]
                k1 = state.intrinsics[cam_idx, 1]
                k2 = state.fixed_k2[cam_idx]
                r2 = np.einsum("ki,ki->k", n, n)
                d = 1.0 + k1 * r2 + k2 * r2 * r2
                j_cam[:, :, 6] = d[:, None] * n
                j_cam[:, :, 7] = (f * r2)[:, None] * n
        if want_point:
            j_pt = np.einsum("kaj,kjm->kam", g, state.rotations[cam_idx])
        if want_shared and state.model_tag == SHARED_CALIBRATION:
            fx, fy, sk, _, _, k2, k4 = state.shared
            r2 = np.einsum("ki,ki->k", n, n)
            r4 = r2 * r2
            d = 1.0 + k2 * r2 + k4 * r4
            nd = d[:, None] * n
            j_sh = np.zeros((k, 2, 7))
            j_sh[:, 0, 0] = nd[:, 0]
            j_sh[:, 1, 1] = nd[:, 1]
            j_sh[:, 0, 2] = nd[:, 1]
            j_sh[:, 0, 3] = 1.0
            j_sh[:, 1, 4] = 1.0
            j_sh[:, 0, 5] = fx * r2 * n[:, 0] + sk * r2 * n[:, 1]
            j_sh[:, 1, 5] = fy * r2 * n[:, 1]
            j_sh[:, 0, 6] = fx * r4 * n[:, 0] + sk * r4 * n[:, 1]
            j_sh[:, 1, 6] = fy * r4 * n[:, 1]
    return residual, j_cam, j_pt, j_sh


def _single_state(camera: Camera, shared: SharedCalibration | None,
                  coords: np.ndarray) -> ParamState:
    est_shared = None
    fixed_shared = None
    if camera.model_tag == SHARED_CALIBRATION:
        if shared is None:
            raise ValueError("shared_calibration camera needs a calibration")
        est_shared = shared.as_array()
    elif shared is not None:
        fixed_shared = shared.as_array()
    return ParamState(camera.rotation[None], camera.translation[None],
                      camera.intrinsics[None].reshape(1, -1),
                      np.array([camera.fixed_k2]), est_shared,
                      np.asarray(coords, dtype=np.float64).reshape(1, 3),
                      camera.model_tag, fixed_shared)


def project(camera: Camera, shared: SharedCalibration | None, point) -> np.ndarray:
    """Project one 3D point into one camera.

    Args:
        camera: the camera.
        shared: block-level calibration; estimated for shared_calibration
            cameras, used as fixed known intrinsics for pose_only ones.
        point: Point3D or (3,) array.

    Returns:
        Pixel coordinates (2,).

    Raises:
        DepthNonPositive: the point is at or behind the projection center.
    """
    coords = point.coords if isinstance(point, Point3D) else np.asarray(point)
    state = _single_state(camera, shared, coords)
    idx = np.zeros(1, dtype=np.int64)
    pix, depth = project_batch(state, idx, idx)
    if not depth[0] > 0.0:
        raise DepthNonPositive(-1, -1, float(depth[0]))
    return pix[0]


def residual_and_jacobians(camera: Camera, shared: SharedCalibration | None,
                           point, obs: Observation):
    """Residual (projection - measurement) and analytic Jacobians.

    Returns (residual (2,), J_camera (2, p), J_point (2, 3),
    J_shared (2, 7) or None).
    """
    coords = point.coords if isinstance(point, Point3D) else np.asarray(point)
    state = _single_state(camera, shared, coords)
    idx = np.zeros(1, dtype=np.int64)
    r, jc, jp, js = residual_jacobian_batch(state, idx, idx, obs.coords[None])
    return r[0], jc[0], jp[0], js[0] if js is not None else None


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def weighted_residual_sum(block: Block, state: ParamState | None = None,
                          obs_mask: np.ndarray | None = None) -> float:
    """Sum of v^T W v over active observations; inf when degenerate."""
    if state is None:
        state = ParamState.from_block(block)
    if obs_mask is None:
        obs_mask = block.active_obs_mask()
    idx = np.flatnonzero(obs_mask)
    if idx.size == 0:
        return 0.0
    pix, depth = project_batch(state, block.obs_cam[idx].astype(np.int64),
                               block.obs_pt[idx].astype(np.int64))
    if not np.all(depth > 0.0) or not np.all(np.isfinite(pix)):
        return float("inf")
    v = pix - block.obs_xy[idx]
    return float(np.einsum("ki,kij,kj->", v, block.obs_w[idx], v))


def free_parameter_count(block: Block) -> int:
    """Adjustable parameters: cameras + shared calibration + active points."""
    n_active_pts = int(block.active_point_mask().sum())
    return (block.camera_param_count * block.n_cameras
            + block.shared_param_count + 3 * n_active_pts)


def sigma0(block: Block, n_fixed_params: int = 0,
           state: ParamState | None = None) -> float:
    """Root mean weighted residual per redundancy, in pixels.

    sigma0 = sqrt(sum_k v^T W v / redundancy) over active observations,
    with redundancy = 2 * #active observations - #free parameters.
    Down-weighted observations contribute with their down-weighted info.

    Raises:
        NonPositiveRedundancy: if the block is under-determined.
    """
    n_active = int(block.active_obs_mask().sum())
    redundancy = 2 * n_active - (free_parameter_count(block) - n_fixed_params)
    if redundancy <= 0:
        raise NonPositiveRedundancy(
            f"redundancy {redundancy} (observations {n_active})")
    return float(np.sqrt(weighted_residual_sum(block, state) / redundancy))
