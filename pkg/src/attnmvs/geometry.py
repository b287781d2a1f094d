"""Camera models, depth hypothesis sampling, homography and per-pixel warping.

Conventions: pixel centers sit at integer coordinates, x right, y down;
world-to-camera mapping is X_cam = R @ X_world + t. Depths are z-coordinates
in the camera frame, in scene units (mm by convention).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .fileio import read_camera_file, write_camera_file

DTYPE = torch.float64


@dataclass
class Camera:
    """One calibrated view: intrinsics, world-to-camera pose, usable depth range."""

    intrinsics: np.ndarray          # 3x3, pixels
    rotation: np.ndarray            # 3x3, world -> camera
    translation: np.ndarray         # 3-vector
    depth_min: float
    depth_max: float

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.depth_min = float(self.depth_min)
        self.depth_max = float(self.depth_max)
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant must be +1")
        k = self.intrinsics
        if np.abs(k[np.tril_indices(3, -1)]).max() > 1e-6:
            raise ValueError("intrinsic matrix must be upper-triangular")
        if np.any(np.diag(k) <= 0):
            raise ValueError("intrinsic diagonal must be positive")
        if not (0.0 < self.depth_min < self.depth_max):
            raise ValueError(f"need 0 < depth_min < depth_max, "
                             f"got [{self.depth_min}, {self.depth_max}]")

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def extrinsic_matrix(self):
        ext = np.eye(4)
        ext[:3, :3] = self.rotation
        ext[:3, 3] = self.translation
        return ext


@dataclass
class DepthHypothesisField:
    """Per-pixel ordered depth hypotheses at one scale, shape (D, H, W)."""

    values: torch.Tensor
    scale: int = 0

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"hypothesis field must be (D, H, W), got {tuple(self.values.shape)}")

    @property
    def count(self):
        return self.values.shape[0]

    def validate(self, depth_min=None, depth_max=None, eps=1e-9):
        diffs = self.values[1:] - self.values[:-1]
        if self.count > 1 and not bool((diffs > 0).all()):
            raise ValueError("hypotheses must be strictly increasing along D")
        if depth_min is not None and bool((self.values < depth_min - eps).any()):
            raise ValueError("hypotheses fall below depth_min")
        if depth_max is not None and bool((self.values > depth_max + eps).any()):
            raise ValueError("hypotheses exceed depth_max")


@dataclass
class WarpResult:
    """Warped map plus per-pixel validity; warped is zero wherever valid is False."""

    warped: torch.Tensor
    valid: torch.Tensor = field(repr=False)


def scale_camera(cam: Camera, scale: int) -> Camera:
    """Camera for feature maps downsampled by 2**scale (scale 0 = full resolution)."""
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    k = cam.intrinsics.copy()
    k[:2] *= 0.5 ** scale
    return Camera(k, cam.rotation, cam.translation, cam.depth_min, cam.depth_max)


def relative_pose(ref: Camera, src: Camera):
    """(R_rel, t_rel) mapping reference-camera coordinates into the source camera."""
    r_rel = src.rotation @ ref.rotation.T
    t_rel = src.translation - r_rel @ ref.translation
    return r_rel, t_rel


def plane_homography(ref: Camera, src: Camera, depth: float) -> np.ndarray:
    """Homography induced by the fronto-parallel plane at the given reference depth.

    Maps homogeneous reference pixels to source pixels for 3D points with
    z = depth in the reference camera frame:
        H(d) = K_src (R_rel + t_rel n^T / d) K_ref^{-1},  n = (0, 0, 1)^T.
    The sign of the plane term follows from X_src = R_rel X_ref + t_rel with
    n^T X_ref = d on the plane.
    """
    if depth <= 0:
        raise ValueError(f"plane depth must be positive, got {depth}")
    if abs(np.linalg.det(ref.intrinsics)) < 1e-12 or abs(np.linalg.det(src.intrinsics)) < 1e-12:
        raise ValueError("singular intrinsic matrix")
    r_rel, t_rel = relative_pose(ref, src)
    n = np.array([0.0, 0.0, 1.0])
    mid = r_rel + np.outer(t_rel, n) / depth
    return src.intrinsics @ mid @ np.linalg.inv(ref.intrinsics)


def pixel_grid(height, width, dtype=DTYPE):
    """Integer pixel-center coordinates as (x, y) tensors of shape (H, W)."""
    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype),
                            torch.arange(width, dtype=dtype), indexing="ij")
    return xs, ys


def bilinear_sample(fmap: torch.Tensor, x: torch.Tensor, y: torch.Tensor,
                    mask: torch.Tensor = None):
    """Sample a (C, H, W) map at continuous pixel coordinates.

    Returns (values, valid): values has shape (C, *x.shape) and is zero where
    valid is False. A sample is valid when it lies inside [0, W-1] x [0, H-1],
    so every bilinear tap it actually uses is in bounds (samples exactly on
    the far border read the border pixel). An optional extra `mask` is folded
    into the validity and the zeroing.
    """
    c, h, w = fmap.shape
    if h < 2 or w < 2:
        raise ValueError("bilinear sampling needs at least a 2x2 map")
    # Tolerate float rounding at the image border: coordinates within eps of
    # the frame count as valid and read the border pixel exactly.
    eps = 1e-9
    finite = torch.isfinite(x) & torch.isfinite(y)
    valid = finite & (x >= -eps) & (x <= w - 1 + eps) \
        & (y >= -eps) & (y <= h - 1 + eps)
    if mask is not None:
        valid = valid & mask
    # Invalid coordinates are parked at 0 so no NaN can leak through the
    # sampler; the gate multiply re-zeroes whatever they fetched.
    xs = torch.where(valid, x, torch.zeros_like(x)).clamp(0, w - 1)
    ys = torch.where(valid, y, torch.zeros_like(y)).clamp(0, h - 1)
    grid = torch.stack([xs * (2.0 / (w - 1)) - 1.0,
                        ys * (2.0 / (h - 1)) - 1.0], dim=-1).reshape(1, -1, 1, 2)
    out = torch.nn.functional.grid_sample(
        fmap.unsqueeze(0), grid, mode="bilinear", padding_mode="zeros",
        align_corners=True)
    vals = out.reshape(c, -1) * valid.to(fmap.dtype).reshape(-1)
    return vals.reshape(c, *x.shape), valid


def _to_tensor(arr, dtype=DTYPE):
    if isinstance(arr, torch.Tensor):
        return arr.to(dtype)
    return torch.as_tensor(arr, dtype=dtype)


def warp_by_homography(f_src: torch.Tensor, hom) -> WarpResult:
    """Warp a (C, H, W) source map onto the reference grid through a 3x3 homography."""
    hom_t = _to_tensor(hom, f_src.dtype)
    if abs(float(torch.linalg.det(hom_t))) < 1e-12:
        raise ValueError("homography is singular")
    c, h, w = f_src.shape
    xs, ys = pixel_grid(h, w, f_src.dtype)
    ones = torch.ones_like(xs)
    pts = torch.stack([xs, ys, ones], dim=0).reshape(3, -1)   # (3, H*W)
    proj = hom_t @ pts
    z = proj[2]
    front = z > 1e-12
    zsafe = torch.where(front, z, torch.ones_like(z))
    u = (proj[0] / zsafe).reshape(h, w)
    v = (proj[1] / zsafe).reshape(h, w)
    vals, valid = bilinear_sample(f_src, u, v, mask=front.reshape(h, w))
    return WarpResult(vals, valid)


def warp_by_depth_field(f_src: torch.Tensor, ref: Camera, src: Camera,
                        depths: DepthHypothesisField) -> WarpResult:
    """Warp a (C, H, W) source map to every per-pixel depth hypothesis.

    Back-projects each reference pixel to its hypothesized depth, reprojects
    into the source view and samples bilinearly. Returns warped (C, D, H, W)
    and valid (D, H, W). Equals warp_by_homography when the hypotheses are
    spatially constant.
    """
    values = depths.values if isinstance(depths, DepthHypothesisField) else depths
    c, h, w = f_src.shape
    d = values.shape[0]
    if values.shape[1:] != (h, w):
        raise ValueError(f"hypothesis field {tuple(values.shape)} does not match "
                         f"feature map {(h, w)}")
    r_rel, t_rel = relative_pose(ref, src)
    k_src = _to_tensor(src.intrinsics, f_src.dtype)
    # Rays through reference pixels, premultiplied so projection is one matmul:
    # p_src = K_src (R_rel K_ref^{-1} x * depth + t_rel)
    m = k_src @ _to_tensor(r_rel @ np.linalg.inv(ref.intrinsics), f_src.dtype)
    kt = k_src @ _to_tensor(t_rel, f_src.dtype)
    xs, ys = pixel_grid(h, w, f_src.dtype)
    pts = torch.stack([xs, ys, torch.ones_like(xs)], dim=0).reshape(3, -1)
    rays = (m @ pts).reshape(3, 1, h, w)                       # (3, 1, H, W)
    proj = rays * values.unsqueeze(0) + kt.reshape(3, 1, 1, 1)  # (3, D, H, W)
    z = proj[2]
    front = z > 1e-12
    zsafe = torch.where(front, z, torch.ones_like(z))
    u = proj[0] / zsafe
    v = proj[1] / zsafe
    vals, valid = bilinear_sample(f_src, u, v, mask=front)     # (C, D, H, W)
    return WarpResult(vals, valid)


def sample_uniform_depths(depth_min, depth_max, count, shape,
                          scale: int = 0) -> DepthHypothesisField:
    """Spatially constant hypotheses: `count` values evenly spanning the range."""
    if count < 2:
        raise ValueError(f"need at least 2 hypotheses, got {count}")
    if not depth_min < depth_max:
        raise ValueError("depth_min must be below depth_max")
    h, w = shape
    values = torch.linspace(float(depth_min), float(depth_max), count, dtype=DTYPE)
    return DepthHypothesisField(values.reshape(count, 1, 1).expand(count, h, w).clone(),
                                scale=scale)


def backproject(cam: Camera, depth: torch.Tensor) -> torch.Tensor:
    """Lift a depth map (..., H, W) to world points (3, ..., H, W) at pixel centers."""
    h, w = depth.shape[-2:]
    xs, ys = pixel_grid(h, w, depth.dtype)
    pts = torch.stack([xs, ys, torch.ones_like(xs)], dim=0).reshape(3, -1)
    rays = _to_tensor(cam.rotation.T @ np.linalg.inv(cam.intrinsics), depth.dtype) @ pts
    rays = rays.reshape((3,) + (1,) * (depth.ndim - 2) + (h, w))
    center = _to_tensor(cam.center, depth.dtype).reshape((3,) + (1,) * depth.ndim)
    return rays * depth.unsqueeze(0) + center


def project(cam: Camera, points: torch.Tensor):
    """Project world points (3, ...) into a view. Returns (u, v, z_cam)."""
    r = _to_tensor(cam.rotation, points.dtype)
    t = _to_tensor(cam.translation, points.dtype)
    k = _to_tensor(cam.intrinsics, points.dtype)
    flat = points.reshape(3, -1)
    cam_pts = k @ (r @ flat + t.reshape(3, 1))
    z = cam_pts[2].reshape(points.shape[1:])
    zsafe = torch.where(z.abs() > 1e-12, z, torch.full_like(z, 1e-12))
    u = (cam_pts[0].reshape(z.shape)) / zsafe
    v = (cam_pts[1].reshape(z.shape)) / zsafe
    return u, v, z


def project_pixel(ref: Camera, src: Camera, xy, depth, image_shape=None):
    """Reproject one reference pixel at a given depth into the source view.

    Returns (uv, in_bounds). Points behind the source camera are flagged,
    not raised; when image_shape=(H, W) is given the flag also requires the
    projection to land inside the image.
    """
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    xy = np.asarray(xy, dtype=np.float64)
    ray = ref.rotation.T @ np.linalg.inv(ref.intrinsics) @ np.array([xy[0], xy[1], 1.0])
    point = ray * float(depth) + ref.center
    cam_pt = src.intrinsics @ (src.rotation @ point + src.translation)
    ok = cam_pt[2] > 1e-12
    uv = cam_pt[:2] / (cam_pt[2] if ok else 1.0)
    if ok and image_shape is not None:
        h, w = image_shape
        ok = bool(0 <= uv[0] <= w - 1 and 0 <= uv[1] <= h - 1)
    return uv, bool(ok)


# ---------------------------------------------------------------------------
# Camera file adapters
# ---------------------------------------------------------------------------

def load_camera(path) -> Camera:
    extrinsic, intrinsic, depth_line = read_camera_file(path)
    if len(depth_line) >= 4:
        depth_min, depth_max = depth_line[0], depth_line[3]
    else:
        # Fall back to min + interval * (count - 1) when no explicit max is stored.
        depth_min = depth_line[0]
        count = depth_line[2] if len(depth_line) > 2 else 192
        depth_max = depth_min + depth_line[1] * (count - 1)
    return Camera(intrinsic, extrinsic[:3, :3], extrinsic[:3, 3], depth_min, depth_max)


def save_camera(path, cam: Camera, depth_count: int = 32):
    interval = (cam.depth_max - cam.depth_min) / (depth_count - 1)
    write_camera_file(path, cam.extrinsic_matrix(), cam.intrinsics,
                      cam.depth_min, interval, float(depth_count), cam.depth_max)
