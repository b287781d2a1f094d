import numpy as np
import pytest
import torch

from attnmvs.losses import (LossWeights, depth_loss, downsample_ground_truth,
                            feature_loss, multi_metric_loss, neighbor_balance_loss,
                            position_loss)
from attnmvs.verify import finite_difference_check

from conftest import DTYPE, identity_camera, tensor, translated_camera


def neighbor_loss_oracle(f, block):
    """Per-pixel double loop over ordered in-image pairs."""
    c, h, w = f.shape
    pad = block // 2
    total, count = 0.0, 0
    for i in range(h):
        for j in range(w):
            for a in range(i - pad, i + pad + 1):
                for b in range(j - pad, j + pad + 1):
                    if (a, b) == (i, j) or not (0 <= a < h and 0 <= b < w):
                        continue
                    total += float(np.linalg.norm(f[:, i, j] - f[:, a, b]))
                    count += 1
    return total / count


class TestPositionLoss:
    def test_perfect_correspondence_is_zero(self, rng):
        cam = identity_camera(focal=50.0, cx=3.0, cy=3.0, depth_min=10,
                              depth_max=200)
        f = tensor(rng.normal(size=(4, 7, 7)))
        gt = tensor(rng.uniform(20, 150, size=(7, 7)))
        valid = torch.ones(7, 7, dtype=torch.bool)
        loss, pairs = position_loss(f, [f], cam, [cam], gt, valid)
        assert pairs == 49
        assert float(loss) <= 1e-12

    def test_constant_difference_vector(self, rng):
        cam = identity_camera(focal=50.0, cx=3.0, cy=3.0, depth_min=10,
                              depth_max=200)
        delta = np.array([0.3, -0.4, 1.2])
        f_ref = torch.zeros(3, 6, 6, dtype=DTYPE)
        f_src = tensor(np.broadcast_to(-delta[:, None, None], (3, 6, 6)).copy())
        gt = torch.full((6, 6), 80.0, dtype=DTYPE)
        valid = torch.ones(6, 6, dtype=torch.bool)
        loss, _ = position_loss(f_ref, [f_src], cam, [cam], gt, valid)
        assert abs(float(loss) - np.linalg.norm(delta)) <= 1e-12

    def test_all_projections_out_of_bounds(self, rng, caplog):
        ref = identity_camera(focal=50.0, cx=3.0, cy=3.0, depth_min=10,
                              depth_max=200)
        src = translated_camera(ref, (1e5, 0.0, 0.0))
        f = tensor(rng.normal(size=(3, 6, 6)))
        gt = torch.full((6, 6), 80.0, dtype=DTYPE)
        valid = torch.ones(6, 6, dtype=torch.bool)
        with caplog.at_level("WARNING"):
            loss, pairs = position_loss(f, [f], ref, [src], gt, valid)
        assert pairs == 0 and float(loss) == 0.0
        assert any("no valid" in r.message for r in caplog.records)

    def test_symmetric_for_exact_bijective_correspondence(self, rng):
        cam = identity_camera(focal=50.0, cx=3.0, cy=3.0, depth_min=10,
                              depth_max=200)
        a = tensor(rng.normal(size=(3, 6, 6)))
        b = tensor(rng.normal(size=(3, 6, 6)))
        gt = torch.full((6, 6), 60.0, dtype=DTYPE)
        valid = torch.ones(6, 6, dtype=torch.bool)
        ab, _ = position_loss(a, [b], cam, [cam], gt, valid)
        ba, _ = position_loss(b, [a], cam, [cam], gt, valid)
        assert abs(float(ab) - float(ba)) <= 1e-12

    def test_scaling_the_difference_scales_the_loss(self, rng):
        cam = identity_camera(focal=50.0, cx=3.0, cy=3.0, depth_min=10,
                              depth_max=200)
        f_ref = tensor(rng.normal(size=(3, 6, 6)))
        diff = tensor(rng.normal(size=(3, 6, 6)))
        gt = torch.full((6, 6), 60.0, dtype=DTYPE)
        valid = torch.ones(6, 6, dtype=torch.bool)
        one, _ = position_loss(f_ref, [f_ref + diff], cam, [cam], gt, valid)
        three, _ = position_loss(f_ref, [f_ref + 3.0 * diff], cam, [cam], gt, valid)
        assert abs(float(three) - 3.0 * float(one)) <= 1e-9

    def test_requires_a_source_view(self, rng):
        cam = identity_camera()
        with pytest.raises(ValueError):
            position_loss(tensor(rng.normal(size=(3, 4, 4))), [], cam, [],
                          torch.ones(4, 4, dtype=DTYPE),
                          torch.ones(4, 4, dtype=torch.bool))


class TestNeighborBalanceLoss:
    def test_constant_map_is_exactly_zero(self):
        f = torch.full((3, 5, 5), 0.73, dtype=DTYPE)
        assert float(neighbor_balance_loss(f, 3)) == 0.0

    def test_two_pixel_map(self, rng):
        f = tensor(rng.normal(size=(4, 1, 2)))
        expected = float(torch.linalg.vector_norm(f[:, 0, 0] - f[:, 0, 1]))
        assert abs(float(neighbor_balance_loss(f, 3)) - expected) <= 1e-12

    def test_alternating_strip_is_unit_distance(self):
        # 1xN checkerboard of two vectors at distance 1: every in-image pair
        # spans the two colors, so the pair-normalized loss is exactly 1.
        a = np.array([0.0, 0.0, 0.0])
        b = a + np.array([1.0, 0.0, 0.0])
        strip = np.stack([a, b, a, b, a, b], axis=1)[:, None, :]
        assert abs(float(neighbor_balance_loss(tensor(strip), 3)) - 1.0) <= 1e-12

    def test_2d_checkerboard_matches_loop_oracle(self):
        a = np.zeros(3)
        b = np.array([1.0, 0.0, 0.0])
        board = np.zeros((3, 4, 4))
        for i in range(4):
            for j in range(4):
                board[:, i, j] = a if (i + j) % 2 == 0 else b
        ours = float(neighbor_balance_loss(tensor(board), 3))
        assert abs(ours - neighbor_loss_oracle(board, 3)) <= 1e-12

    def test_random_map_matches_loop_oracle(self, rng):
        f = rng.normal(size=(3, 5, 6))
        ours = float(neighbor_balance_loss(tensor(f), 3))
        assert abs(ours - neighbor_loss_oracle(f, 3)) <= 1e-10

    def test_invariances(self, rng):
        f = rng.normal(size=(4, 5, 5))
        base = float(neighbor_balance_loss(tensor(f), 3))
        permuted = f[[2, 0, 3, 1]]
        shifted = f + rng.normal(size=(4, 1, 1))
        assert abs(float(neighbor_balance_loss(tensor(permuted), 3)) - base) <= 1e-12
        assert abs(float(neighbor_balance_loss(tensor(shifted), 3)) - base) <= 1e-10

    def test_rejects_even_block(self, rng):
        with pytest.raises(ValueError):
            neighbor_balance_loss(tensor(rng.normal(size=(3, 4, 4))), 2)


class TestFeatureLoss:
    def test_zero_terms(self):
        assert float(feature_loss(tensor(0.0), tensor(0.0), 0.01)) == 0.0

    def test_reference_combination(self):
        assert abs(float(feature_loss(tensor(1.0), tensor(2.0), 0.01)) - 1.02) <= 1e-12

    def test_zero_epsilon_is_position_only(self, rng):
        pos = float(rng.uniform(0, 5))
        assert float(feature_loss(tensor(pos), tensor(99.0), 0.0)) == pos

    def test_rejects_negative_epsilon(self):
        with pytest.raises(ValueError):
            feature_loss(tensor(1.0), tensor(1.0), -0.1)


class TestDepthLoss:
    def test_exact_prediction_is_zero(self, rng):
        gt = tensor(rng.uniform(400, 900, size=(4, 4)))
        mask = torch.ones(4, 4, dtype=torch.bool)
        loss, _ = depth_loss([gt.clone()], [gt], [mask], [2.0])
        assert float(loss) == 0.0

    def test_two_pixel_example(self):
        pred = tensor([[501.0, 603.0]])
        gt = tensor([[500.0, 600.0]])
        mask = torch.ones(1, 2, dtype=torch.bool)
        loss, count = depth_loss([pred], [gt], [mask], [2.0])
        assert count == 2
        assert abs(float(loss) - 4.0) <= 1e-12

    def test_constant_error_is_weight_times_error(self, rng):
        gt = tensor(rng.uniform(400, 900, size=(3, 5)))
        mask = torch.ones(3, 5, dtype=torch.bool)
        loss, _ = depth_loss([gt + 7.0], [gt], [mask], [0.5])
        assert abs(float(loss) - 3.5) <= 1e-9

    def test_empty_valid_set_warns_and_is_zero(self, rng, caplog):
        gt = tensor(rng.uniform(400, 900, size=(3, 3)))
        mask = torch.zeros(3, 3, dtype=torch.bool)
        with caplog.at_level("WARNING"):
            loss, count = depth_loss([gt + 1.0], [gt], [mask], [1.0])
        assert count == 0 and float(loss) == 0.0
        assert any("no valid" in r.message for r in caplog.records)

    def test_multi_scale_sum(self, rng):
        gts = [tensor(rng.uniform(400, 900, size=(2, 2))) for _ in range(3)]
        masks = [torch.ones(2, 2, dtype=torch.bool)] * 3
        preds = [g + c for g, c in zip(gts, (1.0, 2.0, 3.0))]
        loss, _ = depth_loss(preds, gts, masks, [0.5, 1.0, 2.0])
        assert abs(float(loss) - (0.5 * 1 + 1.0 * 2 + 2.0 * 3)) <= 1e-9


class TestMultiMetricLoss:
    def test_all_zero(self):
        z = [tensor(0.0)] * 3
        assert float(multi_metric_loss(z, z, 1.0, 1.0)) == 0.0

    def test_reference_sum(self):
        total = multi_metric_loss([tensor(1.0)], [tensor(2.0)], 1.0, 1.0)
        assert float(total) == 3.0

    def test_depth_only_ablation(self, rng):
        fea = [tensor(float(rng.uniform(1, 5))) for _ in range(3)]
        dep = [tensor(float(rng.uniform(1, 5))) for _ in range(3)]
        total = multi_metric_loss(fea, dep, 0.0, 1.0)
        assert abs(float(total) - sum(float(d) for d in dep)) <= 1e-12

    def test_rejects_mismatched_lists(self):
        with pytest.raises(ValueError):
            multi_metric_loss([tensor(1.0)], [], 1.0, 1.0)


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.beta_feature, w.beta_depth, w.epsilon) == (1.0, 1.0, 0.01)
        assert w.scale_weights == (0.5, 1.0, 2.0)
        assert w.block == 3

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            LossWeights(beta_feature=-1.0)
        with pytest.raises(ValueError):
            LossWeights(block=4)


class TestDownsampleGroundTruth:
    def test_invalid_propagation(self):
        gt = tensor(np.arange(16, dtype=np.float64).reshape(4, 4))
        valid = torch.ones(4, 4, dtype=torch.bool)
        valid[0, 0] = False
        gt2, valid2 = downsample_ground_truth(gt, valid, 2)
        assert gt2.shape == (2, 2)
        assert not bool(valid2[0, 0])
        assert float(gt2[1, 1]) == 10.0


class TestGradients:
    def test_all_loss_gradients(self, rng):
        cam = identity_camera(focal=30.0, cx=2.0, cy=2.0, depth_min=10,
                              depth_max=200)
        f_ref = tensor(rng.normal(size=(3, 5, 5))).requires_grad_(True)
        f_src = tensor(rng.normal(size=(3, 5, 5))).requires_grad_(True)
        gt = tensor(rng.uniform(30, 100, size=(5, 5)))
        valid = torch.ones(5, 5, dtype=torch.bool)
        fn = lambda: position_loss(f_ref, [f_src], cam, [cam], gt, valid)[0]
        assert finite_difference_check(fn, [f_ref, f_src]) <= 1e-4

        f = tensor(rng.normal(size=(3, 4, 4))).requires_grad_(True)
        assert finite_difference_check(lambda: neighbor_balance_loss(f, 3),
                                       [f]) <= 1e-4
