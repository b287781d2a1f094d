import copy

import numpy as np
import pytest
import torch

from attnmvs.losses import LossWeights
from attnmvs.pipeline import (MVSNetwork, NetworkConfig, create_train_state,
                              crop_sample, infer_scene, list_scenes,
                              load_checkpoint, load_scene_sample, missing_gradients,
                              read_pair_file, sample_from_scene, save_checkpoint,
                              scene_losses, train_step, training_samples,
                              write_pair_file, write_scene,
                              write_synthetic_dataset)
from attnmvs.synthetic import (PlanePrimitive, SceneSpec, SpherePrimitive,
                               generate_synthetic_scene, random_scene_spec)

from conftest import DTYPE


def small_config(**kwargs):
    defaults = dict(depth_counts=(8, 6, 4), channels=16, base_channels=8,
                    regularizer_channels=4, groups=4, seed=0)
    defaults.update(kwargs)
    return NetworkConfig(**defaults)


def small_scene(seed=0, height=32, width=40):
    rng = np.random.default_rng(seed)
    spec = random_scene_spec(rng, height=height, width=width)
    return generate_synthetic_scene(spec, seed=seed)


@pytest.fixture(scope="module")
def scene_sample():
    return sample_from_scene(small_scene(3), num_sources=2)


class TestNetworkConfig:
    def test_defaults_match_training_recipe(self):
        cfg = NetworkConfig()
        assert cfg.depth_counts == (32, 16, 8)
        assert cfg.range_factor == 1.5
        assert cfg.groups == 8
        assert cfg.learning_rate == 0.0016
        assert cfg.num_sources == 2
        assert cfg.loss.scale_weights == (0.5, 1.0, 2.0)
        assert cfg.loss.epsilon == 0.01
        assert cfg.loss.beta_feature == 1.0 and cfg.loss.beta_depth == 1.0

    def test_rejects_indivisible_channel_grouping(self):
        with pytest.raises(ValueError):
            NetworkConfig(channels=30, groups=8)

    def test_rejects_tiny_hypothesis_counts(self):
        with pytest.raises(ValueError):
            NetworkConfig(depth_counts=(32, 16, 1))


class TestForward:
    def test_shape_and_hypothesis_schedule(self, scene_sample):
        torch.manual_seed(0)
        net = MVSNetwork(small_config())
        out = net(scene_sample.ref_image, scene_sample.src_images,
                  scene_sample.ref_cam, scene_sample.src_cams)
        assert [tuple(d.shape) for d in out.depths] == [(8, 10), (16, 20), (32, 40)]
        assert [h.count for h in out.hypotheses] == [8, 6, 4]
        assert [tuple(p.probs.shape) for p in out.prob_volumes] == \
            [(8, 8, 10), (6, 16, 20), (4, 32, 40)]

    def test_single_source_view_runs(self, scene_sample):
        torch.manual_seed(0)
        net = MVSNetwork(small_config())
        out = net(scene_sample.ref_image, scene_sample.src_images[:1],
                  scene_sample.ref_cam, scene_sample.src_cams[:1])
        assert torch.isfinite(out.final_depth).all()

    def test_bitwise_deterministic(self, scene_sample):
        outs = []
        for _ in range(2):
            torch.manual_seed(11)
            net = MVSNetwork(small_config()).eval()
            with torch.no_grad():
                out = net(scene_sample.ref_image, scene_sample.src_images,
                          scene_sample.ref_cam, scene_sample.src_cams)
            outs.append(out)
        for a, b in zip(outs[0].depths, outs[1].depths):
            assert bool((a == b).all())
        for a, b in zip(outs[0].sigmas, outs[1].sigmas):
            assert bool((a == b).all())

    def test_scale_chaining_containment(self, scene_sample):
        torch.manual_seed(0)
        cfg = small_config()
        net = MVSNetwork(cfg)
        out = net(scene_sample.ref_image, scene_sample.src_images,
                  scene_sample.ref_cam, scene_sample.src_cams)
        cam = scene_sample.ref_cam
        for field in out.hypotheses:
            field.validate(cam.depth_min, cam.depth_max)
        for i in (1, 2):
            prev = out.hypotheses[i - 1].values
            spacing = (prev[-1] - prev[0]) / (prev.shape[0] - 1)
            from attnmvs.regression import adaptive_range, sample_adaptive_depths
            lo, hi = adaptive_range(out.depths[i - 1], out.sigmas[i - 1],
                                    cfg.range_factor, cam.depth_min,
                                    cam.depth_max, spacing)
            expected = sample_adaptive_depths(lo, hi, cfg.depth_counts[i],
                                              tuple(out.depths[i].shape))
            assert bool((out.hypotheses[i].values >= expected.values[0] - 1e-9).all())
            assert bool((out.hypotheses[i].values <= expected.values[-1] + 1e-9).all())

    def test_depth_within_camera_range(self, scene_sample):
        torch.manual_seed(2)
        net = MVSNetwork(small_config())
        out = net(scene_sample.ref_image, scene_sample.src_images,
                  scene_sample.ref_cam, scene_sample.src_cams)
        cam = scene_sample.ref_cam
        for depth in out.depths:
            assert bool((depth >= cam.depth_min - 1e-6).all())
            assert bool((depth <= cam.depth_max + 1e-6).all())

    def test_rejects_bad_sizes(self, scene_sample):
        net = MVSNetwork(small_config())
        with pytest.raises(ValueError, match="divisible"):
            net(torch.rand(3, 30, 40, dtype=DTYPE), scene_sample.src_images,
                scene_sample.ref_cam, scene_sample.src_cams)

    def test_camera_count_mismatch(self, scene_sample):
        net = MVSNetwork(small_config())
        with pytest.raises(ValueError, match="camera"):
            net(scene_sample.ref_image, scene_sample.src_images,
                scene_sample.ref_cam, scene_sample.src_cams[:1])


class TestTrainStep:
    def test_every_parameter_receives_gradient(self, scene_sample):
        state = create_train_state(small_config())
        out = state.network(scene_sample.ref_image, scene_sample.src_images,
                            scene_sample.ref_cam, scene_sample.src_cams)
        total, _ = scene_losses(out, scene_sample, state.config)
        total.backward()
        assert missing_gradients(state.network) == []

    def test_loss_decreases_on_one_scene(self):
        # Repeated steps on a fixed scene: the 50-step trend must not increase.
        passes = 0
        for seed in range(5):
            state = create_train_state(small_config(seed=seed))
            sample = sample_from_scene(small_scene(40 + seed), num_sources=2)
            losses = []
            for _ in range(56):
                losses.append(train_step(state, [sample])["total"])
            if np.mean(losses[-8:]) <= np.mean(losses[:8]):
                passes += 1
        assert passes >= 5

    def test_zero_learning_rate_keeps_parameters(self, scene_sample):
        state = create_train_state(small_config(learning_rate=0.0))
        before = [p.detach().clone() for p in state.network.parameters()]
        train_step(state, [scene_sample])
        for p, b in zip(state.network.parameters(), before):
            assert bool((p == b).all())

    def test_zero_weights_zero_loss_and_no_update(self, scene_sample):
        cfg = small_config(loss=LossWeights(beta_feature=0.0, beta_depth=0.0))
        state = create_train_state(cfg)
        before = [p.detach().clone() for p in state.network.parameters()]
        summary = train_step(state, [scene_sample])
        assert summary["total"] == 0.0
        for p, b in zip(state.network.parameters(), before):
            assert bool((p == b).all())

    def test_non_finite_loss_aborts_without_update(self, scene_sample):
        state = create_train_state(small_config())
        sample = copy.copy(scene_sample)
        sample.gt_depth = scene_sample.gt_depth.clone()
        sample.gt_depth[0, 0] = float("inf")   # valid pixel with infinite error
        before = [p.detach().clone() for p in state.network.parameters()]
        summary = train_step(state, [sample])
        assert summary.get("aborted") == 1.0
        assert state.step == 0
        for p, b in zip(state.network.parameters(), before):
            assert bool((p == b).all())


class TestCropSample:
    def test_crop_consistency(self, scene_sample):
        rng = np.random.default_rng(0)
        cropped = crop_sample(scene_sample, (16, 24), rng)
        assert cropped.ref_image.shape == (3, 16, 24)
        assert cropped.src_images.shape[-2:] == (16, 24)
        assert cropped.gt_depth.shape == (16, 24)
        # Principal point moved by the crop offset.
        dx = scene_sample.ref_cam.intrinsics[0, 2] - cropped.ref_cam.intrinsics[0, 2]
        dy = scene_sample.ref_cam.intrinsics[1, 2] - cropped.ref_cam.intrinsics[1, 2]
        assert dx >= 0 and dy >= 0
        y0, x0 = int(dy), int(dx)
        assert bool((cropped.ref_image
                     == scene_sample.ref_image[:, y0:y0 + 16, x0:x0 + 24]).all())

    def test_full_size_crop_is_identity(self, scene_sample):
        rng = np.random.default_rng(0)
        h, w = scene_sample.ref_image.shape[-2:]
        assert crop_sample(scene_sample, (h, w), rng) is scene_sample

    def test_oversize_crop_rejected(self, scene_sample):
        with pytest.raises(ValueError):
            crop_sample(scene_sample, (1000, 10), np.random.default_rng(0))


class TestCheckpoints:
    def test_roundtrip_restores_parameters(self, tmp_path, scene_sample):
        state = create_train_state(small_config())
        train_step(state, [scene_sample])
        path = tmp_path / "ckpt.ntar"
        save_checkpoint(path, state)

        fresh = create_train_state(small_config(seed=99))
        step = load_checkpoint(path, fresh)
        assert step == 1
        for (na, a), (nb, b) in zip(state.network.state_dict().items(),
                                    fresh.network.state_dict().items()):
            assert na == nb
            assert torch.allclose(a.to(torch.float32), b.to(torch.float32),
                                  atol=0.0)

    def test_training_continues_after_restore(self, tmp_path, scene_sample):
        state = create_train_state(small_config())
        train_step(state, [scene_sample])
        save_checkpoint(tmp_path / "c.ntar", state)
        fresh = create_train_state(small_config())
        load_checkpoint(tmp_path / "c.ntar", fresh)
        summary = train_step(fresh, [scene_sample])
        assert np.isfinite(summary["total"])
        assert fresh.step == 2

    def test_mismatched_checkpoint_rejected(self, tmp_path, scene_sample):
        from attnmvs.fileio import DataFormatError
        state = create_train_state(small_config())
        save_checkpoint(tmp_path / "c.ntar", state)
        other = create_train_state(small_config(channels=24, groups=4))
        with pytest.raises(DataFormatError, match="does not match"):
            load_checkpoint(tmp_path / "c.ntar", other)


class TestDatasetLayout:
    def test_write_and_load_scene(self, tmp_path):
        scene = small_scene(5)
        write_scene(tmp_path / "scenes" / "scene_0000", scene)
        sample = load_scene_sample(tmp_path / "scenes" / "scene_0000", 0,
                                   num_sources=2)
        assert sample.ref_image.shape == (3, 32, 40)
        assert sample.src_images.shape == (2, 3, 32, 40)
        # Camera files round trip exactly.
        assert np.array_equal(sample.ref_cam.rotation, scene.cameras[0].rotation)
        assert np.array_equal(sample.ref_cam.translation,
                              scene.cameras[0].translation)
        # PNG quantization bounds the image error.
        err = (sample.ref_image.numpy()
               - np.clip(scene.images[0], 0, 1)).max()
        assert err <= 1.0 / 255.0
        # Ground truth PFMs are float32 copies of the rendered depth.
        assert np.allclose(sample.gt_depth.numpy(), scene.depths[0], rtol=1e-6)

    def test_pair_file_roundtrip(self, tmp_path):
        pairs = [(0, [1, 2]), (1, [0, 2]), (2, [1, 0])]
        write_pair_file(tmp_path / "pair.txt", pairs)
        assert read_pair_file(tmp_path / "pair.txt") == pairs

    def test_dataset_generation_and_listing(self, tmp_path):
        names = write_synthetic_dataset(tmp_path, count=3, seed=0,
                                        height=32, width=40)
        assert names == ["scene_0000", "scene_0001", "scene_0002"]
        scenes = list_scenes(tmp_path)
        assert [s.name for s in scenes] == names
        samples = training_samples(tmp_path, num_sources=2)
        assert len(samples) == 3

    def test_dataset_generation_is_deterministic(self, tmp_path):
        write_synthetic_dataset(tmp_path / "a", count=2, seed=4, height=32, width=40)
        write_synthetic_dataset(tmp_path / "b", count=2, seed=4, height=32, width=40)
        for rel in ("scenes/scene_0001/images/00000001.png",
                    "scenes/scene_0001/cams/00000001_cam.txt",
                    "scenes/scene_0001/depths/00000001.pfm",
                    "scenes/scene_0001/pair.txt"):
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes()

    def test_missing_pair_entry_reported(self, tmp_path):
        from attnmvs.fileio import DataFormatError
        scene = small_scene(6)
        write_scene(tmp_path / "scenes" / "s", scene)
        with pytest.raises(DataFormatError, match="reference view 9"):
            load_scene_sample(tmp_path / "scenes" / "s", 9)


class TestInferScene:
    def test_writes_depth_and_confidence(self, tmp_path):
        scene = small_scene(7)
        scene_dir = tmp_path / "scenes" / "s0"
        write_scene(scene_dir, scene)
        torch.manual_seed(0)
        net = MVSNetwork(small_config())
        views = infer_scene(net, scene_dir, tmp_path / "out" / "s0", num_sources=2)
        assert views == [0, 1, 2]
        from attnmvs.fileio import read_pfm
        depth = read_pfm(tmp_path / "out" / "s0" / "depth_est" / "00000000.pfm")
        conf = read_pfm(tmp_path / "out" / "s0" / "confidence" / "00000000.pfm")
        assert depth.shape == (32, 40)
        assert conf.shape == (32, 40)
        assert (conf >= 0).all() and (conf <= 1).all()
