import numpy as np
import pytest
import torch

from attnmvs.geometry import project_pixel
from attnmvs.synthetic import (PlanePrimitive, SceneSpec, SpherePrimitive,
                               generate_synthetic_scene, random_scene_spec)

from conftest import DTYPE, tensor


def plane_spec(depth=600.0, **kwargs):
    return SceneSpec(primitives=[PlanePrimitive(depth=depth)], **kwargs)


class TestSceneSpec:
    def test_rejects_too_many_primitives(self):
        prims = [PlanePrimitive(depth=500.0 + i) for i in range(9)]
        with pytest.raises(ValueError, match="at most"):
            SceneSpec(primitives=prims)

    def test_rejects_out_of_range_depth(self):
        with pytest.raises(ValueError, match="outside"):
            SceneSpec(primitives=[PlanePrimitive(depth=100.0)])

    def test_rejects_sphere_crossing_near_bound(self):
        with pytest.raises(ValueError):
            SceneSpec(primitives=[SpherePrimitive(center=(0, 0, 500.0),
                                                  radius=200.0)])


class TestGenerate:
    def test_single_plane_has_constant_reference_depth(self):
        scene = generate_synthetic_scene(plane_spec(600.0), seed=3)
        assert np.allclose(scene.gt_depth, 600.0, atol=1e-9)
        assert scene.gt_valid.all()

    def test_deterministic_for_spec_and_seed(self):
        spec = plane_spec(700.0, height=32, width=40)
        a = generate_synthetic_scene(spec, seed=9)
        b = generate_synthetic_scene(spec, seed=9)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.depths, b.depths)
        for ca, cb in zip(a.cameras, b.cameras):
            assert np.array_equal(ca.rotation, cb.rotation)
            assert np.array_equal(ca.translation, cb.translation)

    def test_different_seeds_differ(self):
        spec = plane_spec(700.0, height=32, width=40)
        a = generate_synthetic_scene(spec, seed=1)
        b = generate_synthetic_scene(spec, seed=2)
        assert not np.array_equal(a.images, b.images)

    def test_photoconsistency_on_a_plane(self):
        # Project every reference pixel at its true depth into each source
        # view; the bilinearly sampled color must match the reference color
        # to well under the bilinear interpolation budget of the texture.
        scene = generate_synthetic_scene(plane_spec(600.0, height=48, width=64),
                                         seed=5)
        h, w = scene.gt_depth.shape
        from attnmvs.geometry import backproject, project, bilinear_sample
        depth = tensor(scene.gt_depth)
        points = backproject(scene.cameras[0], depth)
        worst_mean = 0.0
        for v in range(1, len(scene.cameras)):
            u, vv, z = project(scene.cameras[v], points)
            img = tensor(scene.images[v])
            sampled, ok = bilinear_sample(img, u, vv, mask=z > 0)
            ref = tensor(scene.images[0])
            err = (sampled - ref).abs().max(dim=0).values
            mean_err = float(err[ok].mean())
            worst_mean = max(worst_mean, mean_err)
            assert ok.float().mean() > 0.5
        assert worst_mean < 1e-3

    def test_sphere_depth_profile(self):
        spec = SceneSpec(primitives=[PlanePrimitive(depth=850.0),
                                     SpherePrimitive(center=(0.0, 0.0, 600.0),
                                                     radius=80.0)])
        scene = generate_synthetic_scene(spec, seed=2)
        h, w = scene.gt_depth.shape
        center_depth = scene.gt_depth[h // 2, w // 2]
        assert abs(center_depth - 520.0) <= 1.0        # front of the sphere
        assert np.isclose(scene.gt_depth[0, 0], 850.0)  # background corner
        assert scene.gt_depth.min() >= spec.depth_min
        assert scene.gt_depth.max() <= spec.depth_max


class TestRandomSceneSpec:
    def test_two_primitives_within_range(self, rng):
        for _ in range(20):
            spec = random_scene_spec(rng)
            assert len(spec.primitives) == 2
            scene = generate_synthetic_scene(spec, seed=int(rng.integers(1 << 30)))
            assert scene.gt_valid.all()
            assert scene.gt_depth.min() >= spec.depth_min
            assert scene.gt_depth.max() <= spec.depth_max
