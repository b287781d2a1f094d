"""Self-contained verification suites: oracles, gradient checks, round trips.

Every oracle here is an independent scalar-loop implementation kept deliberately
separate from the vectorized code paths it cross-checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from . import evalmetrics, fusion
from .cost_volume import (FeatureVolume, build_feature_volume, groupwise_correlation,
                          variance_aggregate)
from .features import local_self_attention
from .geometry import (Camera, DepthHypothesisField, backproject, plane_homography,
                       project_pixel)
from .losses import (depth_loss, feature_loss, multi_metric_loss,
                     neighbor_balance_loss, position_loss)
from .pipeline import (MVSNetwork, NetworkConfig, create_train_state,
                       sample_from_scene, train_step)
from .regression import (CostRegularizer, adaptive_range, estimate_uncertainty,
                         regress_depth)
from .synthetic import (PlanePrimitive, SceneSpec, generate_synthetic_scene,
                        random_scene_spec)

DTYPE = torch.float64


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def attention_oracle(x, w_q, w_k, w_v, rel_pos):
    """Literal four-step evaluation of windowed self-attention, pixel by pixel.

    1. fix the pixel, its in-image block and the relative offsets;
    2. compute queries, keys, values;
    3. inner products of the query with keys and offsets, then softmax;
    4. weight the values by the softmax result.
    """
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    window = (rel_pos.shape[0] + 1) // 2
    pad = window // 2
    d_out = w_v.shape[0]
    out = np.zeros((d_out, h, w))
    for i in range(h):
        for j in range(w):
            q = w_q @ x[:, i, j]
            logits, values = [], []
            for a in range(i - pad, i + pad + 1):
                for b in range(j - pad, j + pad + 1):
                    if not (0 <= a < h and 0 <= b < w):
                        continue
                    key = w_k @ x[:, a, b]
                    offset = rel_pos[a - i + window - 1, b - j + window - 1]
                    logits.append(q @ key + q @ offset)
                    values.append(w_v @ x[:, a, b])
            logits = np.asarray(logits)
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            out[:, i, j] = sum(wt * val for wt, val in zip(weights, values))
    return out


def _bilinear_scalar(fmap, u, v):
    """Scalar bilinear read matching the documented sampling contract."""
    c, h, w = fmap.shape
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        return None
    x0 = min(int(np.floor(u)), w - 2)
    y0 = min(int(np.floor(v)), h - 2)
    fx, fy = u - x0, v - y0
    return ((1 - fx) * (1 - fy) * fmap[:, y0, x0]
            + fx * (1 - fy) * fmap[:, y0, x0 + 1]
            + (1 - fx) * fy * fmap[:, y0 + 1, x0]
            + fx * fy * fmap[:, y0 + 1, x0 + 1])


def feature_volume_oracle(f_ref, f_src, ref_cam: Camera, src_cam: Camera,
                          depth_values, groups):
    """Per-pixel projection/sampling/correlation loop over all hypotheses."""
    f_ref = np.asarray(f_ref, dtype=np.float64)
    f_src = np.asarray(f_src, dtype=np.float64)
    c, h, w = f_ref.shape
    d = depth_values.shape[0]
    per = c // groups
    data = np.zeros((groups, d, h, w))
    valid = np.zeros((d, h, w), dtype=bool)
    k_ref_inv = np.linalg.inv(ref_cam.intrinsics)
    for y in range(h):
        for x in range(w):
            for di in range(d):
                depth = float(depth_values[di, y, x])
                ray = ref_cam.rotation.T @ (k_ref_inv @ np.array([x, y, 1.0]))
                point = ray * depth + ref_cam.center
                p = src_cam.intrinsics @ (src_cam.rotation @ point + src_cam.translation)
                if p[2] <= 1e-12:
                    continue
                u, v = p[0] / p[2], p[1] / p[2]
                sample = _bilinear_scalar(f_src, u, v)
                if sample is None:
                    continue
                valid[di, y, x] = True
                for g in range(groups):
                    sl = slice(g * per, (g + 1) * per)
                    data[g, di, y, x] = f_ref[sl, y, x] @ sample[sl] / per
    return data, valid


def variance_oracle(volumes, valids):
    """Cell-by-cell validity-aware variance over views."""
    volumes = [np.asarray(v, dtype=np.float64) for v in volumes]
    out = np.zeros_like(volumes[0])
    g = volumes[0].shape[0]
    _, d, h, w = volumes[0].shape
    for di in range(d):
        for y in range(h):
            for x in range(w):
                idx = [i for i, val in enumerate(valids) if val[di, y, x]]
                if not idx:
                    continue
                for gi in range(g):
                    vals = np.array([volumes[i][gi, di, y, x] for i in idx])
                    out[gi, di, y, x] = ((vals - vals.mean()) ** 2).mean()
    return out


def nearest_neighbor_oracle(query, reference):
    """All-pairs nearest-neighbor distances."""
    query = np.asarray(query, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    diffs = np.linalg.norm(query[:, None, :] - reference[None, :, :], axis=2)
    idx = diffs.argmin(axis=1)
    return np.linalg.norm(query - reference[idx], axis=1)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_check(fn, tensors, step=1e-5, floor=1e-8):
    """Max relative error between autograd and central differences.

    fn() must return a scalar computed from `tensors` (leaf float64 tensors
    with requires_grad). The error of each tensor is normalized by the largest
    finite-difference component (with an absolute floor) so uniformly tiny
    gradients do not blow up the ratio.
    """
    out = fn()
    analytic = torch.autograd.grad(out, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(tensors, analytic):
            grad = torch.zeros_like(tensor) if grad is None else grad
            fd = torch.zeros_like(tensor)
            flat = tensor.reshape(-1)
            fd_flat = fd.reshape(-1)
            for idx in range(flat.numel()):
                orig = float(flat[idx])
                flat[idx] = orig + step
                hi = float(fn())
                flat[idx] = orig - step
                lo = float(fn())
                flat[idx] = orig
                fd_flat[idx] = (hi - lo) / (2.0 * step)
            scale = max(float(fd.abs().max()), floor)
            err = float((grad - fd).abs().max()) / scale
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def attention_suite(trials=100, seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(3, 5, 5))
        w_q, w_k, w_v = (rng.normal(size=(3, 3)) for _ in range(3))
        rel = rng.normal(size=(5, 5, 3)) * 0.3
        ours = local_self_attention(
            torch.as_tensor(x), torch.as_tensor(w_q), torch.as_tensor(w_k),
            torch.as_tensor(w_v), torch.as_tensor(rel)).numpy()
        ref = attention_oracle(x, w_q, w_k, w_v, rel)
        worst = max(worst, float(np.abs(ours - ref).max()))
    elapsed = time.perf_counter() - start
    return [CheckResult(
        f"attention matches the four-step oracle on {trials} random 5x5x3 inputs",
        worst <= tol and elapsed < 10.0,
        f"max abs err {worst:.3g}, {elapsed:.2f}s")]


def _jitter_camera(rng, base: Camera, translation_scale=30.0) -> Camera:
    angles = rng.uniform(-0.08, 0.08, size=3)
    r = Rotation.from_euler("xyz", angles).as_matrix() @ base.rotation
    t = base.translation + rng.uniform(-1, 1, size=3) * translation_scale
    return Camera(base.intrinsics, r, t, base.depth_min, base.depth_max)


def _random_pair(rng, h=8, w=8, focal=20.0, depth_min=80.0, depth_max=200.0):
    k = np.array([[focal, 0.0, (w - 1) / 2], [0.0, focal, (h - 1) / 2], [0, 0, 1.0]])
    ref = Camera(k, np.eye(3), np.zeros(3), depth_min, depth_max)
    src = _jitter_camera(rng, ref)
    return ref, src


def cost_volume_suite(seed=0, tol=1e-5):
    rng = np.random.default_rng(seed)
    h = w = 8
    d, groups, c = 4, 2, 4
    ref, src = _random_pair(rng, h, w)
    f_ref = rng.normal(size=(c, h, w))
    f_src = rng.normal(size=(c, h, w))
    base = np.linspace(ref.depth_min, ref.depth_max, d)
    values = base.reshape(d, 1, 1) + rng.uniform(-5, 5, size=(d, h, w))
    values = np.sort(values, axis=0)
    depths = DepthHypothesisField(torch.as_tensor(values, dtype=DTYPE))

    ours = build_feature_volume(torch.as_tensor(f_ref, dtype=DTYPE),
                                torch.as_tensor(f_src, dtype=DTYPE),
                                ref, src, depths, groups)
    oracle_data, oracle_valid = feature_volume_oracle(f_ref, f_src, ref, src,
                                                      values, groups)
    err = float(np.abs(ours.data.numpy() - oracle_data).max())
    same_valid = bool((ours.valid.numpy() == oracle_valid).all())
    results = [CheckResult(
        "group-wise volume matches the per-pixel projection loop oracle (8x8, D=4, G=2)",
        err <= tol and same_valid,
        f"max abs err {err:.3g}, masks equal: {same_valid}")]

    vols, valids = [], []
    for _ in range(3):
        data = rng.normal(size=(groups, d, h, w))
        valid = rng.uniform(size=(d, h, w)) > 0.25
        data = data * valid
        vols.append(FeatureVolume(torch.as_tensor(data, dtype=DTYPE),
                                  torch.as_tensor(valid)))
        valids.append(valid)
    agg = variance_aggregate(vols).data.numpy()
    ref_var = variance_oracle([v.data.numpy() for v in vols], valids)
    verr = float(np.abs(agg - ref_var).max())
    results.append(CheckResult(
        "variance aggregation matches the per-cell loop oracle",
        verr <= 1e-10, f"max abs err {verr:.3g}"))
    return results


def gradient_suite(seeds=20, tol=1e-4, step=1e-5):
    results = []

    def run(name, build):
        worst = 0.0
        for seed in range(seeds):
            tensors, fn = build(np.random.default_rng(seed), seed)
            worst = max(worst, finite_difference_check(fn, tensors, step))
        results.append(CheckResult(f"gradients: {name}", worst <= tol,
                                   f"max rel err {worst:.3g} over {seeds} seeds"))

    def t(arr):
        return torch.as_tensor(np.asarray(arr), dtype=DTYPE).requires_grad_(True)

    def build_attention(rng, _):
        x = t(rng.normal(size=(3, 4, 4)))
        w_q, w_k, w_v = (t(rng.normal(size=(3, 3))) for _ in range(3))
        rel = t(rng.normal(size=(5, 5, 3)) * 0.3)
        probe = torch.as_tensor(rng.normal(size=(3, 4, 4)), dtype=DTYPE)
        fn = lambda: (local_self_attention(x, w_q, w_k, w_v, rel) * probe).sum()
        return [x, w_q, w_k, w_v, rel], fn

    def build_correlation_variance(rng, _):
        f_ref = t(rng.normal(size=(4, 3, 3)))
        srcs = [t(rng.normal(size=(4, 2, 3, 3))) for _ in range(2)]
        valids = [torch.as_tensor(rng.uniform(size=(2, 3, 3)) > 0.2) for _ in range(2)]
        probe = torch.as_tensor(rng.normal(size=(2, 2, 3, 3)), dtype=DTYPE)

        def fn():
            vols = []
            for src, valid in zip(srcs, valids):
                corr = groupwise_correlation(f_ref.unsqueeze(1), src, 2)
                vols.append(FeatureVolume(corr * valid.to(corr.dtype), valid))
            return (variance_aggregate(vols).data * probe).sum()
        return [f_ref] + srcs, fn

    regs = {}

    def build_regress_regularize(rng, seed):
        torch.manual_seed(seed)
        if seed not in regs:
            regs[seed] = CostRegularizer(in_channels=2, base_channels=4).eval()
        reg = regs[seed]
        cost = t(rng.normal(size=(2, 4, 4, 4)) ** 2)
        hyp = torch.as_tensor(np.sort(rng.uniform(100, 200, size=(4, 4, 4)), axis=0),
                              dtype=DTYPE)
        probe = torch.as_tensor(rng.normal(size=(4, 4)), dtype=DTYPE)
        fn = lambda: (regress_depth(reg(cost), hyp) * probe).sum()
        return [cost], fn

    def build_position(rng, _):
        ref, src = _random_pair(rng, 6, 6)
        f_ref = t(rng.normal(size=(3, 6, 6)))
        f_src = t(rng.normal(size=(3, 6, 6)))
        gt = torch.as_tensor(rng.uniform(90, 150, size=(6, 6)), dtype=DTYPE)
        valid = torch.ones(6, 6, dtype=torch.bool)
        fn = lambda: position_loss(f_ref, [f_src], ref, [src], gt, valid)[0]
        return [f_ref, f_src], fn

    def build_neighbor(rng, _):
        f = t(rng.normal(size=(3, 5, 5)))
        return [f], lambda: neighbor_balance_loss(f, 3)

    def build_feature(rng, _):
        pos = t(rng.uniform(0.1, 2.0, size=()))
        nei = t(rng.uniform(0.1, 2.0, size=()))
        return [pos, nei], lambda: feature_loss(pos, nei, 0.01)

    def build_depth(rng, _):
        preds = [t(rng.uniform(100, 200, size=(4, 4))) for _ in range(2)]
        gts = [torch.as_tensor(rng.uniform(100, 200, size=(4, 4)), dtype=DTYPE)
               for _ in range(2)]
        masks = [torch.as_tensor(rng.uniform(size=(4, 4)) > 0.3) for _ in range(2)]
        fn = lambda: depth_loss(preds, gts, masks, [0.5, 2.0])[0]
        return preds, fn

    def build_multi_metric(rng, _):
        fea = [t(rng.uniform(0.1, 2.0, size=())) for _ in range(3)]
        dep = [t(rng.uniform(0.1, 2.0, size=())) for _ in range(3)]
        return fea + dep, lambda: multi_metric_loss(fea, dep, 1.0, 1.0)

    run("local self-attention (x, projections, offsets)", build_attention)
    run("group-wise correlation + variance aggregation", build_correlation_variance)
    run("depth regression through the regularizer", build_regress_regularize)
    run("position loss", build_position)
    run("neighbor balance loss", build_neighbor)
    run("feature loss combination", build_feature)
    run("depth loss", build_depth)
    run("multi-metric total", build_multi_metric)
    return results


def equations_suite(tol=1e-9):
    results = []
    probs = torch.tensor([0.5, 0.5], dtype=DTYPE).reshape(2, 1, 1)
    hyp = torch.tensor([400.0, 600.0], dtype=DTYPE).reshape(2, 1, 1)
    depth = regress_depth(probs, hyp)
    results.append(CheckResult("uniform {400,600} regresses to 500",
                               abs(float(depth) - 500.0) <= tol,
                               f"got {float(depth)!r}"))
    sigma = estimate_uncertainty(probs, hyp, depth)
    results.append(CheckResult("uniform {400,600} has sigma 100",
                               abs(float(sigma) - 100.0) <= tol,
                               f"got {float(sigma)!r}"))
    lo, hi = adaptive_range(depth, sigma, 1.5, 1.0, 10000.0, 1.0)
    ok = abs(float(lo) - 350.0) <= tol and abs(float(hi) - 650.0) <= tol
    results.append(CheckResult("range factor 1.5 brackets [350, 650]", ok,
                               f"got [{float(lo)!r}, {float(hi)!r}]"))
    return results


def geometry_suite(seed=0, samples=10000):
    rng = np.random.default_rng(seed)
    results = []

    k = np.array([[100.0, 0, 0], [0, 100.0, 0], [0, 0, 1.0]])
    ref = Camera(k, np.eye(3), np.zeros(3), 1.0, 1e6)
    ident = plane_homography(ref, ref, 57.0)
    err = float(np.abs(ident - np.eye(3)).max())
    results.append(CheckResult("same-camera homography is the identity",
                               err <= 1e-9, f"max abs err {err:.3g}"))

    # Hand derivation: X = (u d / f, v d / f, d); the source camera with
    # translation (b, 0, 0) sees u' = f (u d / f + b) / d = u + f b / d.
    src = Camera(k, np.eye(3), np.array([0.5, 0.0, 0.0]), 1.0, 1e6)
    hom = plane_homography(ref, src, 50.0)
    mapped = hom @ np.array([3.0, -2.0, 1.0])
    mapped = mapped / mapped[2]
    err = float(np.abs(mapped - np.array([4.0, -2.0, 1.0])).max())
    results.append(CheckResult(
        "baseline +0.5 at depth 50 shifts pixels by f*b/d = +1.0",
        err <= 1e-9, f"max abs err {err:.3g}"))

    src_neg = Camera(k, np.eye(3), np.array([-0.5, 0.0, 0.0]), 1.0, 1e6)
    uv, _ = project_pixel(ref, src_neg, (3.0, -2.0), 50.0)
    err = float(np.abs(uv - np.array([2.0, -2.0])).max())
    results.append(CheckResult(
        "baseline -0.5 at depth 50 shifts pixels by -1.0",
        err <= 1e-9, f"max abs err {err:.3g}"))

    rot = _jitter_camera(rng, ref, translation_scale=2.0)
    far = plane_homography(ref, rot, 1e9)
    pure = rot.intrinsics @ rot.rotation @ ref.rotation.T @ np.linalg.inv(ref.intrinsics)
    err = float(np.abs(far - pure).max())
    results.append(CheckResult("d -> inf approaches the rotation homography",
                               err <= 1e-6, f"max abs err {err:.3g}"))

    worst = 0.0
    for _ in range(samples):
        base = Camera(k, np.eye(3), np.zeros(3), 1.0, 1e6)
        cam_ref = _jitter_camera(rng, base)
        cam_src = _jitter_camera(rng, base)
        xy = rng.uniform(-50, 50, size=2)
        depth = rng.uniform(20.0, 400.0)
        ray = cam_ref.rotation.T @ np.linalg.inv(cam_ref.intrinsics) \
            @ np.array([xy[0], xy[1], 1.0])
        point = ray * depth + cam_ref.center
        cam_pt = cam_src.rotation @ point + cam_src.translation
        if cam_pt[2] <= 1e-6:
            continue
        uv, _ = project_pixel(cam_ref, cam_src, xy, depth)
        ray2 = cam_src.rotation.T @ np.linalg.inv(cam_src.intrinsics) \
            @ np.array([uv[0], uv[1], 1.0])
        point2 = ray2 * cam_pt[2] + cam_src.center
        worst = max(worst, float(np.abs(point2 - point).max()))
    results.append(CheckResult(
        f"project/back-project round trip on {samples} random configurations",
        worst < 1e-6, f"max abs err {worst:.3g}"))
    return results


def fusion_eval_suite(seed=0):
    results = []
    spec = SceneSpec(height=48, width=64, num_views=3, ring_radius=60.0,
                     primitives=[PlanePrimitive(depth=600.0)])
    scene = generate_synthetic_scene(spec, seed=seed)
    thresholds = fusion.FusionThresholds(prob_min=0.0, reproj_max=1.0,
                                         rel_depth_max=0.01, min_views=1)
    masks = fusion.geometric_filter(list(scene.depths), scene.cameras, thresholds)
    cloud = fusion.fuse(list(scene.depths), list(scene.images), scene.cameras,
                        masks, thresholds)
    plane_err = float(np.abs(cloud.points[:, 2] - 600.0).max()) if len(cloud) else np.inf
    results.append(CheckResult(
        "fused exact plane depths lie on the plane",
        len(cloud) > 0 and plane_err < 1e-3, f"max |z - 600| = {plane_err:.3g}"))

    gt_points = []
    for v in range(len(scene.cameras)):
        pts = backproject(scene.cameras[v],
                          torch.as_tensor(scene.depths[v], dtype=DTYPE))
        gt_points.append(pts.reshape(3, -1).T.numpy())
    gt_cloud = np.concatenate(gt_points)
    tau = 0.01 * (spec.depth_max - spec.depth_min)
    acc = evalmetrics.accuracy(cloud.points, gt_cloud, max_dist=20.0)
    comp = evalmetrics.completeness(cloud.points, gt_cloud, max_dist=20.0)
    _, _, f1 = evalmetrics.f_score(cloud.points, gt_cloud, tau)
    results.append(CheckResult(
        "plane round trip: accuracy/completeness < 1e-3 and F-score 100",
        acc < 1e-3 and comp < 1e-3 and f1 == 100.0,
        f"acc {acc:.3g}, comp {comp:.3g}, F {f1:.2f}"))

    rng = np.random.default_rng(seed)
    a = rng.normal(size=(100, 3)) * 50.0
    b = rng.normal(size=(100, 3)) * 50.0
    ours = evalmetrics.nearest_neighbor_distances(a, b)
    oracle = nearest_neighbor_oracle(a, b)
    exact = bool((ours == oracle).all())
    results.append(CheckResult(
        "nearest-neighbor tree equals brute force exactly on 100x100 clouds",
        exact, "bitwise equal" if exact else "mismatch"))
    return results


def determinism_suite(seed=0):
    results = []
    config = NetworkConfig(seed=seed)
    rng = np.random.default_rng(seed)
    spec = random_scene_spec(rng, height=32, width=40)
    scene = generate_synthetic_scene(spec, seed=seed)
    sample = sample_from_scene(scene, num_sources=2)

    outputs = []
    for _ in range(2):
        torch.manual_seed(seed)
        net = MVSNetwork(config).eval()
        with torch.no_grad():
            out = net(sample.ref_image, sample.src_images, sample.ref_cam,
                      sample.src_cams)
        outputs.append(out.final_depth.numpy().copy())
    same_forward = bool((outputs[0] == outputs[1]).all())
    results.append(CheckResult("forward pass is bitwise deterministic",
                               same_forward, ""))

    params = []
    for _ in range(2):
        state = create_train_state(config)
        for _ in range(2):
            train_step(state, [sample])
        params.append(torch.cat([p.detach().reshape(-1)
                                 for p in state.network.parameters()]).numpy().copy())
    same_train = bool((params[0] == params[1]).all())
    results.append(CheckResult("two training steps are bitwise deterministic",
                               same_train, ""))
    return results


SUITES = {
    "attention": attention_suite,
    "cost-volume": cost_volume_suite,
    "gradients": gradient_suite,
    "equations": equations_suite,
    "geometry": geometry_suite,
    "fusion-eval": fusion_eval_suite,
    "determinism": determinism_suite,
}


def run_suite(name):
    if name == "all":
        results = []
        for suite in SUITES.values():
            results.extend(suite())
        return results
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name]()
