"""Three-scale coarse-to-fine forward pass, training loop and dataset plumbing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import fileio
from .cost_volume import build_feature_volume, variance_aggregate
from .features import FeatureExtractor
from .geometry import Camera, load_camera, sample_uniform_depths, save_camera, scale_camera
from .losses import (LossWeights, depth_loss, downsample_ground_truth, feature_loss,
                     multi_metric_loss, neighbor_balance_loss, position_loss)
from .regression import (CostRegularizer, adaptive_range, estimate_uncertainty,
                         regress_depth, sample_adaptive_depths)
from .synthetic import SyntheticScene, generate_synthetic_scene, random_scene_spec

logger = logging.getLogger(__name__)

DTYPE = torch.float64
SCALES = (2, 1, 0)   # downsampling exponents, coarsest -> finest


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class NetworkConfig:
    """Hyperparameters of the three-scale network and its training loop."""

    depth_counts: tuple = (32, 16, 8)    # hypotheses per scale, coarsest -> finest
    range_factor: float = 1.5            # sigma multiplier for the next scale's range
    groups: int = 8                      # correlation groups
    channels: int = 32                   # feature channels per scale
    base_channels: int = 16              # extractor encoder width
    regularizer_channels: int = 8        # hourglass base width
    window: int = 3                      # attention window
    loss: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 0.0016
    num_sources: int = 2
    seed: int = 0

    def __post_init__(self):
        if len(self.depth_counts) != len(SCALES):
            raise ValueError(f"exactly {len(SCALES)} scales are supported")
        if any(d < 2 for d in self.depth_counts):
            raise ValueError("each scale needs at least 2 depth hypotheses")
        if self.channels % self.groups:
            raise ValueError(f"channels {self.channels} must be divisible by "
                             f"group count {self.groups}")


@dataclass
class ForwardOutput:
    """Everything the loss needs, ordered coarsest -> finest."""

    depths: list              # (H_s, W_s) per scale
    sigmas: list
    prob_volumes: list        # ProbabilityVolume per scale
    hypotheses: list          # DepthHypothesisField per scale
    ref_features: list        # (C, H_s, W_s) per scale
    src_features: list        # per scale: list over sources of (C, H_s, W_s)

    @property
    def final_depth(self):
        return self.depths[-1]

    @property
    def final_confidence(self):
        return self.prob_volumes[-1].probs.max(dim=0).values


class MVSNetwork(torch.nn.Module):
    """Feature extraction, per-scale cost volumes, regularization and regression."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.extractor = FeatureExtractor(config.channels, config.base_channels,
                                          config.window)
        self.regularizers = torch.nn.ModuleList(
            CostRegularizer(config.groups, config.regularizer_channels)
            for _ in SCALES)

    def forward(self, ref_image, src_images, ref_cam: Camera, src_cams) -> ForwardOutput:
        cfg = self.config
        if src_images.shape[0] != len(src_cams):
            raise ValueError("one camera per source image required")
        h, w = ref_image.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"image size must be divisible by 8 for the 3-scale "
                             f"network, got {h}x{w}")
        views = torch.cat([ref_image.unsqueeze(0), src_images], dim=0)
        feats = self.extractor(views)     # coarse -> fine, each (V, C, H_s, W_s)

        out = ForwardOutput([], [], [], [], [], [])
        hyp = None
        for i, s in enumerate(SCALES):
            ref_cam_s = scale_camera(ref_cam, s)
            src_cams_s = [scale_camera(c, s) for c in src_cams]
            f_ref = feats[i][0]
            f_srcs = [feats[i][1 + j] for j in range(len(src_cams))]
            hs, ws = f_ref.shape[-2:]
            if i == 0:
                hyp = sample_uniform_depths(ref_cam.depth_min, ref_cam.depth_max,
                                            cfg.depth_counts[0], (hs, ws), scale=s)
            else:
                prev = out.hypotheses[-1].values
                spacing = (prev[-1] - prev[0]) / (prev.shape[0] - 1)
                lo, hi = adaptive_range(out.depths[-1], out.sigmas[-1],
                                        cfg.range_factor, ref_cam.depth_min,
                                        ref_cam.depth_max, spacing)
                hyp = sample_adaptive_depths(lo, hi, cfg.depth_counts[i],
                                             (hs, ws), scale=s)
            # The vectorized per-pixel warp also covers the spatially constant
            # coarsest hypotheses and beats a per-plane homography loop here;
            # both paths are cross-checked for equivalence in the tests.
            volumes = [build_feature_volume(f_ref, f_src, ref_cam_s, cam_s, hyp,
                                            cfg.groups)
                       for f_src, cam_s in zip(f_srcs, src_cams_s)]
            cost = variance_aggregate(volumes)
            probs = self.regularizers[i](cost)
            depth = regress_depth(probs, hyp)
            sigma = estimate_uncertainty(probs, hyp, depth)

            out.depths.append(depth)
            out.sigmas.append(sigma)
            out.prob_volumes.append(probs)
            out.hypotheses.append(hyp)
            out.ref_features.append(f_ref)
            out.src_features.append(f_srcs)
        return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class SceneSample:
    """One training/inference unit: a reference view with its source views."""

    ref_image: torch.Tensor   # (3, H, W)
    src_images: torch.Tensor  # (N, 3, H, W)
    ref_cam: Camera
    src_cams: list
    gt_depth: torch.Tensor = None
    gt_valid: torch.Tensor = None
    ref_view: int = 0


def sample_from_scene(scene: SyntheticScene, num_sources=None,
                      ref_view: int = 0) -> SceneSample:
    views = list(range(len(scene.cameras)))
    views.remove(ref_view)
    if num_sources is not None:
        views = views[:num_sources]
    gt = torch.as_tensor(scene.depths[ref_view], dtype=DTYPE)
    return SceneSample(
        ref_image=torch.as_tensor(scene.images[ref_view], dtype=DTYPE),
        src_images=torch.as_tensor(scene.images[views], dtype=DTYPE),
        ref_cam=scene.cameras[ref_view],
        src_cams=[scene.cameras[v] for v in views],
        gt_depth=gt,
        gt_valid=gt > 0,
        ref_view=ref_view,
    )


def crop_sample(sample: SceneSample, crop_shape, rng) -> SceneSample:
    """Random crop with the principal point shifted to keep the cameras consistent."""
    h, w = sample.ref_image.shape[-2:]
    ch, cw = crop_shape
    if (ch, cw) == (h, w):
        return sample
    if ch > h or cw > w:
        raise ValueError(f"crop {crop_shape} exceeds image {h}x{w}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))

    def shift(cam):
        k = cam.intrinsics.copy()
        k[0, 2] -= x0
        k[1, 2] -= y0
        return Camera(k, cam.rotation, cam.translation, cam.depth_min, cam.depth_max)

    return replace(
        sample,
        ref_image=sample.ref_image[..., y0:y0 + ch, x0:x0 + cw],
        src_images=sample.src_images[..., y0:y0 + ch, x0:x0 + cw],
        ref_cam=shift(sample.ref_cam),
        src_cams=[shift(c) for c in sample.src_cams],
        gt_depth=sample.gt_depth[y0:y0 + ch, x0:x0 + cw],
        gt_valid=sample.gt_valid[y0:y0 + ch, x0:x0 + cw],
    )


@dataclass
class TrainState:
    network: MVSNetwork
    optimizer: torch.optim.Optimizer
    config: NetworkConfig
    step: int = 0


def create_train_state(config: NetworkConfig) -> TrainState:
    torch.manual_seed(config.seed)
    network = MVSNetwork(config)
    optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)
    return TrainState(network, optimizer, config)


def scene_losses(output: ForwardOutput, sample: SceneSample, config: NetworkConfig):
    """Per-scale feature and depth terms plus the combined objective for one scene."""
    weights = config.loss
    feature_terms, depth_terms = [], []
    breakdown = {"position": 0.0, "neighbor": 0.0}
    for i, s in enumerate(SCALES):
        gt_s, valid_s = downsample_ground_truth(sample.gt_depth, sample.gt_valid, 2 ** s)
        ref_cam_s = scale_camera(sample.ref_cam, s)
        src_cams_s = [scale_camera(c, s) for c in sample.src_cams]
        pos, _ = position_loss(output.ref_features[i], output.src_features[i],
                               ref_cam_s, src_cams_s, gt_s, valid_s)
        nei = neighbor_balance_loss(output.ref_features[i], weights.block)
        feature_terms.append(feature_loss(pos, nei, weights.epsilon))
        dep, _ = depth_loss([output.depths[i]], [gt_s], [valid_s],
                            [weights.scale_weights[i]])
        depth_terms.append(dep)
        breakdown["position"] += float(pos.detach())
        breakdown["neighbor"] += float(nei.detach())
    total = multi_metric_loss(feature_terms, depth_terms,
                              weights.beta_feature, weights.beta_depth)
    breakdown["feature"] = sum(float(t.detach()) for t in feature_terms)
    breakdown["depth"] = sum(float(t.detach()) for t in depth_terms)
    return total, breakdown


def train_step(state: TrainState, batch):
    """One optimization step over a batch of SceneSamples.

    Returns a loss breakdown dict; a non-finite total aborts the step without
    touching the parameters and sets breakdown["aborted"].
    """
    state.network.train()
    totals = []
    breakdowns = []
    for sample in batch:
        output = state.network(sample.ref_image, sample.src_images,
                               sample.ref_cam, sample.src_cams)
        total, breakdown = scene_losses(output, sample, state.config)
        totals.append(total)
        breakdowns.append(breakdown)
    loss = torch.stack(totals).mean()
    summary = {key: float(np.mean([b[key] for b in breakdowns]))
               for key in breakdowns[0]}
    summary["total"] = float(loss.detach())
    if not torch.isfinite(loss):
        logger.warning("non-finite loss at step %d; step aborted", state.step)
        summary["aborted"] = 1.0
        return summary
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return summary


def missing_gradients(network: MVSNetwork):
    """Names of parameters with absent or all-zero gradients (run after backward)."""
    names = []
    for name, param in network.named_parameters():
        if param.grad is None or not bool((param.grad != 0).any()):
            names.append(name)
    return names


def format_loss_line(step, summary):
    keys = ["position", "neighbor", "feature", "depth", "total"]
    parts = [f"step {step}"] + [f"{k} {summary[k]:.10g}" for k in keys if k in summary]
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Checkpoints (flat named-tensor archive + plain-text config snapshot)
# ---------------------------------------------------------------------------

def save_checkpoint(path, state: TrainState):
    tensors = {}
    for name, value in state.network.state_dict().items():
        tensors[name] = value.detach().cpu().numpy()
    param_names = {id(p): n for n, p in state.network.named_parameters()}
    for param, opt_state in state.optimizer.state.items():
        name = param_names[id(param)]
        for key in ("exp_avg", "exp_avg_sq"):
            if key in opt_state:
                tensors[f"optim.{name}.{key}"] = opt_state[key].detach().cpu().numpy()
    tensors["meta.step"] = np.asarray(float(state.step))
    fileio.write_tensor_archive(path, tensors)


def load_checkpoint(path, state: TrainState):
    """Restore parameters, buffers and optimizer moments; returns the stored step."""
    tensors = fileio.read_tensor_archive(path)
    step = int(tensors.pop("meta.step", np.asarray(0.0)))
    model_state = {}
    optim_arrays = {}
    for name, arr in tensors.items():
        if name.startswith("optim."):
            optim_arrays[name[len("optim."):]] = arr
        else:
            model_state[name] = torch.as_tensor(arr)
    reference = state.network.state_dict()
    if set(model_state) != set(reference):
        missing = set(reference) - set(model_state)
        extra = set(model_state) - set(reference)
        raise fileio.DataFormatError(
            f"checkpoint does not match the network (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})")
    for name, value in model_state.items():
        if tuple(value.shape) != tuple(reference[name].shape):
            raise fileio.DataFormatError(
                f"checkpoint does not match the network: {name} has shape "
                f"{tuple(value.shape)}, expected {tuple(reference[name].shape)}")
    state.network.load_state_dict(
        {k: v.to(reference[k].dtype) for k, v in model_state.items()})
    if optim_arrays:
        for name, param in state.network.named_parameters():
            opt_state = state.optimizer.state.setdefault(param, {})
            for key in ("exp_avg", "exp_avg_sq"):
                arr = optim_arrays.get(f"{name}.{key}")
                if arr is not None:
                    opt_state[key] = torch.as_tensor(arr, dtype=param.dtype)
            if "exp_avg" in opt_state:
                opt_state["step"] = torch.tensor(float(step))
    state.step = step
    return step


# ---------------------------------------------------------------------------
# Dataset layout:
#   <root>/scenes/<name>/images/%08d.png
#   <root>/scenes/<name>/cams/%08d_cam.txt
#   <root>/scenes/<name>/depths/%08d.pfm      (ground truth, training only)
#   <root>/scenes/<name>/pair.txt
# ---------------------------------------------------------------------------

def write_pair_file(path, pairs):
    lines = [str(len(pairs))]
    for ref, srcs in pairs:
        lines.append(str(ref))
        lines.append(" ".join([str(len(srcs))]
                              + [f"{v} 1.0" for v in srcs]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pair_file(path):
    tokens = Path(path).read_text(encoding="ascii").split()
    idx = 0
    count = int(tokens[idx]); idx += 1
    pairs = []
    for _ in range(count):
        ref = int(tokens[idx]); idx += 1
        n = int(tokens[idx]); idx += 1
        srcs = []
        for _ in range(n):
            srcs.append(int(tokens[idx])); idx += 2   # skip the score column
        pairs.append((ref, srcs))
    return pairs


def write_scene(scene_dir, scene: SyntheticScene, depth_count=32):
    scene_dir = Path(scene_dir)
    for sub in ("images", "cams", "depths"):
        (scene_dir / sub).mkdir(parents=True, exist_ok=True)
    n_views = len(scene.cameras)
    for v in range(n_views):
        img = (np.clip(scene.images[v], 0.0, 1.0) * 255.0).round().astype(np.uint8)
        Image.fromarray(img.transpose(1, 2, 0)).save(scene_dir / "images" / f"{v:08d}.png")
        save_camera(scene_dir / "cams" / f"{v:08d}_cam.txt", scene.cameras[v],
                    depth_count)
        fileio.write_pfm(scene_dir / "depths" / f"{v:08d}.pfm", scene.depths[v])
    pairs = [(ref, [v for v in range(n_views) if v != ref]) for ref in range(n_views)]
    write_pair_file(scene_dir / "pair.txt", pairs)


def write_synthetic_dataset(root, count, seed, height=64, width=80, num_views=3):
    """Generate `count` independent random scenes under <root>/scenes."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(count):
        spec = random_scene_spec(rng, height=height, width=width, num_views=num_views)
        scene = generate_synthetic_scene(spec, seed=int(rng.integers(0, 2 ** 31)))
        name = f"scene_{i:04d}"
        write_scene(root / "scenes" / name, scene)
        names.append(name)
    return names


def list_scenes(root):
    scenes_dir = Path(root) / "scenes"
    if not scenes_dir.is_dir():
        raise FileNotFoundError(f"no scenes/ directory under {root}")
    return sorted(p for p in scenes_dir.iterdir() if p.is_dir())


def load_image(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return torch.as_tensor(arr.transpose(2, 0, 1), dtype=DTYPE)


def load_scene_sample(scene_dir, ref_view, num_sources=None,
                      with_depth=True) -> SceneSample:
    scene_dir = Path(scene_dir)
    pairs = dict(read_pair_file(scene_dir / "pair.txt"))
    if ref_view not in pairs:
        raise fileio.DataFormatError(f"{scene_dir}/pair.txt has no entry for "
                                     f"reference view {ref_view}")
    srcs = pairs[ref_view]
    if num_sources is not None:
        srcs = srcs[:num_sources]
    if not srcs:
        raise fileio.DataFormatError(f"reference view {ref_view} has no source views")
    ref_image = load_image(scene_dir / "images" / f"{ref_view:08d}.png")
    src_images = torch.stack([load_image(scene_dir / "images" / f"{v:08d}.png")
                              for v in srcs])
    ref_cam = load_camera(scene_dir / "cams" / f"{ref_view:08d}_cam.txt")
    src_cams = [load_camera(scene_dir / "cams" / f"{v:08d}_cam.txt") for v in srcs]
    gt_depth = gt_valid = None
    if with_depth:
        depth_path = scene_dir / "depths" / f"{ref_view:08d}.pfm"
        if depth_path.exists():
            gt_depth = torch.as_tensor(fileio.read_pfm(depth_path), dtype=DTYPE)
            gt_valid = gt_depth > 0
    return SceneSample(ref_image, src_images, ref_cam, src_cams,
                       gt_depth, gt_valid, ref_view)


def training_samples(root, num_sources):
    """All (scene, reference-view 0) samples of a dataset, in scene order."""
    samples = []
    for scene_dir in list_scenes(root):
        samples.append(load_scene_sample(scene_dir, 0, num_sources))
    if not samples:
        raise fileio.DataFormatError(f"dataset under {root} contains no scenes")
    return samples


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def infer_scene(network: MVSNetwork, scene_dir, out_dir, num_sources=None):
    """Predict finest-scale depth + confidence PFMs for every reference view listed
    in the scene's pair file."""
    scene_dir = Path(scene_dir)
    out_dir = Path(out_dir)
    (out_dir / "depth_est").mkdir(parents=True, exist_ok=True)
    (out_dir / "confidence").mkdir(parents=True, exist_ok=True)
    network.eval()
    written = []
    for ref_view, _ in read_pair_file(scene_dir / "pair.txt"):
        sample = load_scene_sample(scene_dir, ref_view, num_sources, with_depth=False)
        with torch.no_grad():
            output = network(sample.ref_image, sample.src_images,
                             sample.ref_cam, sample.src_cams)
        fileio.write_pfm(out_dir / "depth_est" / f"{ref_view:08d}.pfm",
                         output.final_depth.numpy())
        fileio.write_pfm(out_dir / "confidence" / f"{ref_view:08d}.pfm",
                         output.final_confidence.numpy())
        written.append(ref_view)
    return written
