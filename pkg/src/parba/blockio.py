"""Dataset ingestion, synthetic block generation, and native persistence.

The generator produces a classical nadir-looking aerial block: regular
strips with configurable endlap/sidelap, points uniformly distributed on
the ground plane but kept only where at least two cameras see them (the
overlap area), Gaussian image noise, and an independently perturbed copy
of the cameras as the adjustment starting point.  Flight geometry defaults
to a 1000 x 1000 px image, 1000 px focal length and 1000-unit flight
height; cameras are pose-only with this calibration attached as fixed.

Two on-disk formats are supported: the community large-scale text format
(header ``num_cameras num_points num_observations``, observation lines,
then 9 camera parameters and 3 point coordinates, one value per line) and
a lossless line-oriented native format versioned ``RPBA1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, ParseError, SpecInfeasible, VersionMismatch
from .model import (
    Block,
    Camera,
    OBS_STATUS_CODES,
    OBS_STATUS_NAMES,
    PER_CAMERA_FOCAL_RADIAL,
    POINT_STATUS_CODES,
    POINT_STATUS_NAMES,
    POSE_ONLY,
    SHARED_CALIBRATION,
    ParamState,
    SharedCalibration,
    project_batch,
    rodrigues,
)

NATIVE_VERSION = "RPBA1"


@dataclass
class GeneratorSpec:
    """Synthetic aerial block parameters."""

    strips: int
    cameras_per_strip: int
    endlap: float = 0.6
    sidelap: float = 0.2
    points_per_camera: int = 100
    noise_px: float = 1.0
    perturb_angle_rad: float = 1e-4
    perturb_translation: float = 0.1
    seed: int = 0
    flight_height: float = 1000.0
    focal_px: float = 1000.0
    image_size_px: float = 1000.0
    outlier_fraction: float = 0.0
    outlier_min_px: float = 20.0
    outlier_max_px: float = 200.0

    def __post_init__(self) -> None:
        if self.strips < 1 or self.cameras_per_strip < 1:
            raise ValueError("strip and camera counts must be >= 1")
        if not (0.0 < self.endlap < 1.0 and 0.0 < self.sidelap < 1.0):
            raise ValueError("overlap fractions must lie in (0, 1)")
        if self.points_per_camera < 1:
            raise ValueError("points_per_camera must be >= 1")
        if min(self.noise_px, self.perturb_angle_rad, self.perturb_translation,
               self.outlier_fraction) < 0.0:
            raise ValueError("noise, perturbation and outlier settings must be >= 0")
        if min(self.flight_height, self.focal_px, self.image_size_px) <= 0.0:
            raise ValueError("flight geometry values must be positive")

    @property
    def footprint(self) -> float:
        """Ground footprint width of one image."""
        return self.image_size_px * self.flight_height / self.focal_px

    @property
    def base_x(self) -> float:
        """Along-strip camera spacing."""
        return (1.0 - self.endlap) * self.footprint

    @property
    def base_y(self) -> float:
        """Across-strip spacing."""
        return (1.0 - self.sidelap) * self.footprint


def _visible_cameras(spec: GeneratorSpec, pts: np.ndarray):
    """Stencil visibility: camera grid indices seeing each ground point.

    Returns (cam_index (n, stencil), valid (n, stencil)); a point is
    visible when its offset from the camera center stays within half the
    footprint in both axes.
    """
    half = spec.footprint / 2.0
    dx, dy = spec.base_x, spec.base_y
    n_c, n_s = spec.cameras_per_strip, spec.strips

    span_x = int(np.floor(spec.footprint / dx)) + 1
    span_y = int(np.floor(spec.footprint / dy)) + 1
    cx_min = np.ceil((pts[:, 0] - half) / dx).astype(np.int64)
    sy_min = np.ceil((pts[:, 1] - half) / dy).astype(np.int64)
    cs = cx_min[:, None] + np.arange(span_x)[None, :]          # (n, span_x)
    ss = sy_min[:, None] + np.arange(span_y)[None, :]          # (n, span_y)
    ok_c = (cs >= 0) & (cs < n_c) & \
        (np.abs(pts[:, 0][:, None] - cs * dx) <= half)
    ok_s = (ss >= 0) & (ss < n_s) & \
        (np.abs(pts[:, 1][:, None] - ss * dy) <= half)
    cam = (ss[:, None, :] * n_c + cs[:, :, None]).reshape(len(pts), -1)
    valid = (ok_s[:, None, :] & ok_c[:, :, None]).reshape(len(pts), -1)
    return cam, valid


def generate(spec: GeneratorSpec):
    """Build (ground-truth block, perturbed block, outlier labels).

    Candidate points are sampled uniformly inside each camera footprint and
    kept only when visible in at least two cameras; observations are exact
    projections plus Gaussian noise, with identity weights.  The perturbed
    copy applies independent Gaussian perturbations to all camera angles
    and projection centers.  Everything is deterministic per seed.

    Raises:
        SpecInfeasible: the overlap geometry leaves no shared points.
    """
    rng = np.random.default_rng(spec.seed)
    n_cameras = spec.strips * spec.cameras_per_strip
    half = spec.footprint / 2.0

    centers = np.zeros((n_cameras, 3))
    grid_s, grid_c = np.divmod(np.arange(n_cameras), spec.cameras_per_strip)
    centers[:, 0] = grid_c * spec.base_x
    centers[:, 1] = grid_s * spec.base_y
    centers[:, 2] = spec.flight_height

    n_candidates = n_cameras * spec.points_per_camera
    offsets = rng.uniform(-half, half, (n_candidates, 2))
    pts = np.zeros((n_candidates, 3))
    anchor = np.repeat(np.arange(n_cameras), spec.points_per_camera)
    pts[:, 0] = centers[anchor, 0] + offsets[:, 0]
    pts[:, 1] = centers[anchor, 1] + offsets[:, 1]

    cam_stencil, valid = _visible_cameras(spec, pts)
    n_views = valid.sum(axis=1)
    keep = n_views >= 2
    if not keep.any():
        raise SpecInfeasible(
            "no candidate point is visible in two cameras; "
            "increase overlap or camera counts")
    pts = pts[keep]
    cam_stencil, valid = cam_stencil[keep], valid[keep]
    n_points = len(pts)

    rows = np.repeat(np.arange(n_points), valid.shape[1])[valid.ravel()]
    cams = cam_stencil.ravel()[valid.ravel()]
    order = np.lexsort((cams, rows))
    obs_pt = rows[order].astype(np.int32)
    obs_cam = cams[order].astype(np.int32)

    shared = SharedCalibration(fx=spec.focal_px, fy=spec.focal_px)
    truth_state = ParamState(
        rotations=np.broadcast_to(np.eye(3), (n_cameras, 3, 3)).copy(),
        translations=-centers, intrinsics=np.zeros((n_cameras, 0)),
        fixed_k2=np.zeros(n_cameras), shared=None, points=pts,
        model_tag=POSE_ONLY, fixed_shared=shared.as_array())
    exact, _ = project_batch(truth_state, obs_cam.astype(np.int64),
                             obs_pt.astype(np.int64))
    noisy = exact + rng.normal(0.0, spec.noise_px, exact.shape)

    labels = np.zeros(len(obs_pt), dtype=bool)
    n_out = int(round(spec.outlier_fraction * len(obs_pt)))
    if n_out:
        hit = rng.choice(len(obs_pt), n_out, replace=False)
        mag = rng.uniform(spec.outlier_min_px, spec.outlier_max_px, n_out)
        ang = rng.uniform(0.0, 2.0 * np.pi, n_out)
        noisy[hit] += mag[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        labels[hit] = True

    cameras = [Camera(np.eye(3), -centers[i]) for i in range(n_cameras)]
    weights = np.broadcast_to(np.eye(2), (len(obs_pt), 2, 2)).copy()
    truth = Block(cameras, pts,
                  {"cam": obs_cam, "pt": obs_pt, "xy": noisy, "w": weights},
                  shared_calibration=shared)

    perturbed = truth.copy()
    d_ang = rng.normal(0.0, spec.perturb_angle_rad, (n_cameras, 3))
    d_pos = rng.normal(0.0, spec.perturb_translation, (n_cameras, 3))
    for i, cam in enumerate(perturbed.cameras):
        rot = rodrigues(d_ang[i]) @ cam.rotation
        cam.rotation = rot
        cam.translation = -rot @ (centers[i] + d_pos[i])
    return truth, perturbed, labels


# ---------------------------------------------------------------------------
# Community large-scale format
# ---------------------------------------------------------------------------

class _TokenReader:
    """Whitespace token stream that remembers line numbers for errors."""

    def __init__(self, text: str):
        self.tokens: list[tuple[int, str]] = []
        for ln, line in enumerate(text.splitlines(), start=1):
            for tok in line.split():
                self.tokens.append((ln, tok))
        self.pos = 0
        self.last_line = self.tokens[-1][0] if self.tokens else 1

    def next(self, what: str) -> tuple[int, str]:
        if self.pos >= len(self.tokens):
            raise ParseError(self.last_line, f"unexpected end of file, expected {what}")
        item = self.tokens[self.pos]
        self.pos += 1
        return item

    def next_int(self, what: str) -> tuple[int, int]:
        ln, tok = self.next(what)
        try:
            return ln, int(tok)
        except ValueError:
            raise ParseError(ln, f"expected integer {what}, got {tok!r}") from None

    def next_float(self, what: str) -> tuple[int, float]:
        ln, tok = self.next(what)
        try:
            return ln, float(tok)
        except ValueError:
            raise ParseError(ln, f"expected number {what}, got {tok!r}") from None

    def expect_end(self) -> None:
        if self.pos < len(self.tokens):
            ln, tok = self.tokens[self.pos]
            raise ParseError(ln, f"trailing data {tok!r}")


def read_bal(path) -> Block:
    """Read the community large-scale text format.

    Cameras use the standard convention: p = -(R X + t) scaled by its
    third component, distortion 1 + k1 |p|^2 + k2 |p|^4, pixel =
    f * factor * p.  Focal and k1 are optimized downstream; k2 is held
    fixed.  Observation weights are identity.

    Raises:
        ParseError: malformed or truncated content (with line number).
        IndexOutOfRange: observation referencing a missing camera/point.
    """
    with open(path, "r") as fh:
        reader = _TokenReader(fh.read())
    _, n_cameras = reader.next_int("camera count")
    _, n_points = reader.next_int("point count")
    _, n_obs = reader.next_int("observation count")

    obs_cam = np.zeros(n_obs, dtype=np.int32)
    obs_pt = np.zeros(n_obs, dtype=np.int32)
    obs_xy = np.zeros((n_obs, 2))
    seen = set()
    for k in range(n_obs):
        ln, ci = reader.next_int("camera index")
        if not 0 <= ci < n_cameras:
            raise IndexOutOfRange(ln, f"camera index {ci} out of range")
        ln, pj = reader.next_int("point index")
        if not 0 <= pj < n_points:
            raise IndexOutOfRange(ln, f"point index {pj} out of range")
        if (ci, pj) in seen:
            raise ParseError(ln, f"duplicate observation of point {pj} in camera {ci}")
        seen.add((ci, pj))
        _, x = reader.next_float("x")
        _, y = reader.next_float("y")
        obs_cam[k], obs_pt[k], obs_xy[k] = ci, pj, (x, y)

    cameras = []
    for _ in range(n_cameras):
        vals = [reader.next_float("camera parameter")[1] for _ in range(9)]
        rot = rodrigues(np.array(vals[0:3]))
        cameras.append(Camera(rot, np.array(vals[3:6]), PER_CAMERA_FOCAL_RADIAL,
                              np.array(vals[6:8]), fixed_k2=vals[8]))
    points = np.zeros((n_points, 3))
    for j in range(n_points):
        points[j] = [reader.next_float("point coordinate")[1] for _ in range(3)]
    reader.expect_end()

    weights = np.broadcast_to(np.eye(2), (n_obs, 2, 2)).copy()
    return Block(cameras, points,
                 {"cam": obs_cam, "pt": obs_pt, "xy": obs_xy, "w": weights})


# ---------------------------------------------------------------------------
# Native format
# ---------------------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_native(block: Block, path) -> None:
    """Lossless line-oriented text dump; numbers round-trip exactly."""
    lines = [NATIVE_VERSION, f"model {block.model_tag}",
             f"counts {block.n_cameras} {block.n_points} {block.n_observations}"]
    if block.shared_calibration is not None:
        lines.append("shared " + _fmt(block.shared_calibration.as_array()))
    else:
        lines.append("shared none")
    for cam in block.cameras:
        fields = list(cam.rotation.ravel()) + list(cam.translation)
        if block.model_tag == PER_CAMERA_FOCAL_RADIAL:
            fields += [cam.intrinsics[0], cam.intrinsics[1], cam.fixed_k2]
        lines.append("camera " + _fmt(fields))
    for j in range(block.n_points):
        lines.append("point " + _fmt(block.points[j]) + " "
                     + POINT_STATUS_NAMES[int(block.point_status[j])])
    for k in range(block.n_observations):
        w = block.obs_w[k]
        lines.append(
            f"obs {int(block.obs_cam[k])} {int(block.obs_pt[k])} "
            + _fmt([block.obs_xy[k, 0], block.obs_xy[k, 1], w[0, 0], w[0, 1], w[1, 1]])
            + " " + OBS_STATUS_NAMES[int(block.obs_status[k])])
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, what: str) -> tuple[int, list[str]]:
        while self.pos < len(self.lines):
            self.pos += 1
            parts = self.lines[self.pos - 1].split()
            if parts:
                return self.pos, parts
        raise ParseError(len(self.lines) + 1, f"unexpected end of file, expected {what}")


def read_native(path) -> Block:
    """Read a native block file written by :func:`write_native`.

    Raises:
        VersionMismatch: unknown version tag on the first line.
        ParseError: malformed or truncated records (with line number).
    """
    text = open(path, "r").read()
    reader = _LineReader(text)
    ln, head = reader.next("version tag")
    if head[0] != NATIVE_VERSION:
        raise VersionMismatch(f"line {ln}: expected {NATIVE_VERSION}, got {head[0]!r}")

    ln, parts = reader.next("model tag")
    if parts[0] != "model" or len(parts) != 2:
        raise ParseError(ln, "expected 'model <tag>'")
    model_tag = parts[1]
    if model_tag not in (POSE_ONLY, PER_CAMERA_FOCAL_RADIAL, SHARED_CALIBRATION):
        raise ParseError(ln, f"unknown model tag {model_tag!r}")

    ln, parts = reader.next("counts")
    if parts[0] != "counts" or len(parts) != 4:
        raise ParseError(ln, "expected 'counts M N K'")
    try:
        n_cameras, n_points, n_obs = (int(v) for v in parts[1:])
    except ValueError:
        raise ParseError(ln, "counts must be integers") from None

    ln, parts = reader.next("shared calibration")
    if parts[0] != "shared":
        raise ParseError(ln, "expected 'shared'")
    shared = None
    if parts[1:] != ["none"]:
        if len(parts) != 8:
            raise ParseError(ln, "shared calibration needs 7 values")
        try:
            shared = SharedCalibration.from_array(np.array([float(v) for v in parts[1:]]))
        except ValueError as exc:
            raise ParseError(ln, str(exc)) from exc

    def floats(parts, ln, n, what):
        if len(parts) != n:
            raise ParseError(ln, f"expected {n} fields for {what}, got {len(parts)}")
        try:
            return [float(v) for v in parts]
        except ValueError:
            raise ParseError(ln, f"bad number in {what}") from None

    cameras = []
    n_fields = 12 + (3 if model_tag == PER_CAMERA_FOCAL_RADIAL else 0)
    for _ in range(n_cameras):
        ln, parts = reader.next("camera record")
        if parts[0] != "camera":
            raise ParseError(ln, f"expected camera record, got {parts[0]!r}")
        vals = floats(parts[1:], ln, n_fields, "camera")
        rot = np.array(vals[0:9]).reshape(3, 3)
        if model_tag == PER_CAMERA_FOCAL_RADIAL:
            cameras.append(Camera(rot, np.array(vals[9:12]), model_tag,
                                  np.array(vals[12:14]), fixed_k2=vals[14]))
        else:
            cameras.append(Camera(rot, np.array(vals[9:12]), model_tag))

    points = np.zeros((n_points, 3))
    point_status = np.zeros(n_points, dtype=np.int8)
    for j in range(n_points):
        ln, parts = reader.next("point record")
        if parts[0] != "point" or len(parts) != 5:
            raise ParseError(ln, "expected 'point x y z status'")
        points[j] = floats(parts[1:4], ln, 3, "point")
        if parts[4] not in POINT_STATUS_CODES:
            raise ParseError(ln, f"unknown point status {parts[4]!r}")
        point_status[j] = POINT_STATUS_CODES[parts[4]]

    obs_cam = np.zeros(n_obs, dtype=np.int32)
    obs_pt = np.zeros(n_obs, dtype=np.int32)
    obs_xy = np.zeros((n_obs, 2))
    obs_w = np.zeros((n_obs, 2, 2))
    obs_status = np.zeros(n_obs, dtype=np.int8)
    for k in range(n_obs):
        ln, parts = reader.next("observation record")
        if parts[0] != "obs" or len(parts) != 9:
            raise ParseError(ln, "expected 'obs cam pt x y w00 w01 w11 status'")
        try:
            ci, pj = int(parts[1]), int(parts[2])
        except ValueError:
            raise ParseError(ln, "bad observation indices") from None
        if not 0 <= ci < n_cameras:
            raise IndexOutOfRange(ln, f"camera index {ci} out of range")
        if not 0 <= pj < n_points:
            raise IndexOutOfRange(ln, f"point index {pj} out of range")
        x, y, w00, w01, w11 = floats(parts[3:8], ln, 5, "observation")
        if parts[8] not in OBS_STATUS_CODES:
            raise ParseError(ln, f"unknown observation status {parts[8]!r}")
        obs_cam[k], obs_pt[k] = ci, pj
        obs_xy[k] = (x, y)
        obs_w[k] = [[w00, w01], [w01, w11]]
        obs_status[k] = OBS_STATUS_CODES[parts[8]]

    block = Block(cameras, points,
                  {"cam": obs_cam, "pt": obs_pt, "xy": obs_xy, "w": obs_w,
                   "status": obs_status}, shared_calibration=shared)
    block.point_status[:] = point_status
    return block


def read_block(path) -> Block:
    """Auto-detect the on-disk format (native vs community)."""
    with open(path, "r") as fh:
        first = fh.readline().strip()
    if first.startswith("RPBA"):
        return read_native(path)
    return read_bal(path)


def normalize_weights(block: Block) -> Block:
    """Scale all weight matrices so the mean per-coordinate weight is 1.

    One global scalar divides every weight-info matrix; the normalization
    functional is the mean of trace(W)/2 over non-deleted observations.
    """
    live = block.active_obs_mask()
    if not live.any():
        return block
    mean_w = float(np.einsum("kii->k", block.obs_w[live]).mean()) / 2.0
    if mean_w > 0.0:
        block.obs_w /= mean_w
    return block
