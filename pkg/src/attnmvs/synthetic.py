"""Ray-cast synthetic scenes with exact ground-truth depth for desk-scale training.

The world frame coincides with the reference camera frame, so fronto-parallel
planes are z = const surfaces. Every surface carries a smooth procedural 3D
texture evaluated at the hit point, which makes the rendered views photo-
consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera

MAX_PRIMITIVES = 8


@dataclass
class PlanePrimitive:
    """Fronto-parallel plane z = depth (world units)."""

    depth: float


@dataclass
class SpherePrimitive:
    center: tuple
    radius: float


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 80
    num_views: int = 3              # reference + sources
    focal: float = 100.0
    depth_min: float = 425.0
    depth_max: float = 935.0
    ring_radius: float = 130.0
    primitives: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise ValueError("scene needs at least one primitive")
        if len(self.primitives) > MAX_PRIMITIVES:
            raise ValueError(f"at most {MAX_PRIMITIVES} primitives supported, "
                             f"got {len(self.primitives)}")
        if self.num_views < 2:
            raise ValueError("need a reference view and at least one source view")
        for prim in self.primitives:
            if isinstance(prim, PlanePrimitive):
                depth = prim.depth
            else:
                depth = prim.center[2]
                if prim.radius <= 0:
                    raise ValueError("sphere radius must be positive")
                if prim.center[2] - prim.radius <= self.depth_min:
                    raise ValueError("sphere crosses the near depth bound")
            if not (self.depth_min < depth < self.depth_max):
                raise ValueError(f"primitive depth {depth} outside "
                                 f"({self.depth_min}, {self.depth_max})")


@dataclass
class SurfaceTexture:
    """Per-channel smooth color field: base + sum of sinusoids over 3D position."""

    base: np.ndarray          # (3,)
    directions: np.ndarray    # (M, 3) unit vectors
    frequencies: np.ndarray   # (M,) rad per scene unit
    phases: np.ndarray        # (M,)
    amplitudes: np.ndarray    # (3, M)

    def sample(self, points):
        """Colors (3, ...) in [0, 1] for world points (..., 3)."""
        phase = points @ self.directions.T * self.frequencies + self.phases
        waves = np.sin(phase)                                     # (..., M)
        colors = self.base.reshape((3,) + (1,) * (points.ndim - 1))
        colors = colors + np.moveaxis(waves @ self.amplitudes.T, -1, 0)
        return np.clip(colors, 0.0, 1.0)


@dataclass
class SyntheticScene:
    images: np.ndarray        # (V, 3, H, W) float64 in [0, 1]
    cameras: list             # V Camera objects, index 0 = reference
    depths: np.ndarray        # (V, H, W) exact per-view depth, 0 where no hit
    spec: SceneSpec
    textures: list

    @property
    def gt_depth(self):
        return self.depths[0]

    @property
    def gt_valid(self):
        return self.depths[0] > 0


def _look_at_rotation(center, target):
    """World-to-camera rotation for a camera at `center` looking at `target`.

    Camera axes: x right, y down, z forward (right-handed, det +1).
    """
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=0)


def _ring_cameras(spec: SceneSpec, rng) -> list:
    k = np.array([[spec.focal, 0.0, (spec.width - 1) / 2.0],
                  [0.0, spec.focal, (spec.height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    cams = [Camera(k, np.eye(3), np.zeros(3), spec.depth_min, spec.depth_max)]
    target_z = 0.5 * (spec.depth_min + spec.depth_max)
    n_src = spec.num_views - 1
    for i in range(n_src):
        angle = 2.0 * np.pi * i / n_src + rng.uniform(-0.3, 0.3)
        radius = spec.ring_radius * rng.uniform(0.85, 1.15)
        center = np.array([radius * np.cos(angle), radius * np.sin(angle),
                           rng.uniform(-15.0, 15.0)])
        target = np.array([rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0),
                           target_z])
        rot = _look_at_rotation(center, target)
        cams.append(Camera(k, rot, -rot @ center, spec.depth_min, spec.depth_max))
    return cams


def _random_texture(rng, n_waves=2, max_freq=0.022) -> SurfaceTexture:
    directions = rng.normal(size=(n_waves, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return SurfaceTexture(
        base=rng.uniform(0.35, 0.65, size=3),
        directions=directions,
        frequencies=rng.uniform(0.010, max_freq, size=n_waves),
        phases=rng.uniform(0.0, 2.0 * np.pi, size=n_waves),
        amplitudes=rng.uniform(0.08, 0.15, size=(3, n_waves)),
    )


def _intersect(primitive, origins, dirs):
    """Ray parameters t (>= 0 where hit, inf elsewhere) for origin + t * dir."""
    if isinstance(primitive, PlanePrimitive):
        dz = dirs[..., 2]
        t = np.where(np.abs(dz) > 1e-12,
                     (primitive.depth - origins[..., 2]) / np.where(np.abs(dz) > 1e-12, dz, 1.0),
                     np.inf)
    else:
        oc = origins - np.asarray(primitive.center, dtype=np.float64)
        a = (dirs * dirs).sum(-1)
        b = 2.0 * (dirs * oc).sum(-1)
        c = (oc * oc).sum(-1) - primitive.radius ** 2
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t_near = (-b - sq) / (2.0 * a)
        t_far = (-b + sq) / (2.0 * a)
        t = np.where(t_near > 1e-9, t_near, t_far)
        t = np.where(hit, t, np.inf)
    return np.where(t > 1e-9, t, np.inf)


def render_view(camera: Camera, primitives, textures, image_shape):
    """Render one view. Returns (image (3, H, W), depth (H, W); depth 0 = no hit).

    Ray directions carry unit z in the camera frame, so the ray parameter of a
    hit equals its depth in this view.
    """
    h, w = image_shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1)           # (H, W, 3)
    dirs_cam = pix @ np.linalg.inv(camera.intrinsics).T
    dirs = dirs_cam @ camera.rotation                              # R^T applied rowwise
    origins = np.broadcast_to(camera.center, dirs.shape)

    depth = np.full((h, w), np.inf)
    hit_index = np.full((h, w), -1, dtype=np.int64)
    for idx, prim in enumerate(primitives):
        t = _intersect(prim, origins, dirs)
        closer = t < depth
        depth = np.where(closer, t, depth)
        hit_index = np.where(closer, idx, hit_index)

    image = np.zeros((3, h, w))
    points = origins + dirs * np.where(np.isfinite(depth), depth, 0.0)[..., None]
    for idx, tex in enumerate(textures):
        mask = hit_index == idx
        if mask.any():
            image[:, mask] = tex.sample(points[mask])
    return image, np.where(np.isfinite(depth), depth, 0.0)


def generate_synthetic_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    """Deterministic scene for a spec and seed: cameras, images, exact depths."""
    rng = np.random.default_rng(seed)
    cameras = _ring_cameras(spec, rng)
    textures = [_random_texture(rng) for _ in spec.primitives]
    images = np.zeros((spec.num_views, 3, spec.height, spec.width))
    depths = np.zeros((spec.num_views, spec.height, spec.width))
    for v, cam in enumerate(cameras):
        images[v], depths[v] = render_view(cam, spec.primitives, textures,
                                           (spec.height, spec.width))
    return SyntheticScene(images, cameras, depths, spec, textures)


def random_scene_spec(rng, height=64, width=80, num_views=3) -> SceneSpec:
    """Two-primitive scene: a background plane plus one sphere, depths in range."""
    background = PlanePrimitive(depth=float(rng.uniform(780.0, 900.0)))
    radius = float(rng.uniform(60.0, 100.0))
    center = (float(rng.uniform(-90.0, 90.0)), float(rng.uniform(-60.0, 60.0)),
              float(rng.uniform(440.0, 700.0) + radius))
    sphere = SpherePrimitive(center=center, radius=radius)
    return SceneSpec(height=height, width=width, num_views=num_views,
                     primitives=[background, sphere])
