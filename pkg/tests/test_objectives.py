import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeseg.objectives import (
    AUGMENTATIONS,
    apply_augmentation,
    consistency_loss,
    entropy_loss,
    invert_augmentation,
    rotation_loss,
    weighted_bce,
)


def bce_oracle(pred, target, weights):
    """Direct per-pixel formula, plain Python floats."""
    eps = 1e-7
    total = 0.0
    b = pred.shape[0]
    for i in range(b):
        w = float(weights[i])
        for p, t in zip(pred[i].flatten().tolist(), target[i].flatten().tolist()):
            p = min(max(p, eps), 1 - eps)
            total += -(w * t * math.log(p) + (1 - t) * math.log(1 - p))
    return total / (b * pred[0].numel())


class TestWeightedBce:
    def test_half_and_half_at_point_five(self):
        pred = torch.full((1, 4, 4), 0.5)
        target = torch.zeros(1, 4, 4)
        target[0, :2] = 1
        loss = weighted_bce(pred, target, torch.ones(1))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect_prediction_near_zero(self):
        target = torch.zeros(1, 4, 4)
        target[0, 0, 0] = 1
        loss = weighted_bce(target.clone(), target, torch.ones(1))
        assert loss.item() <= 2 * 1e-7 * abs(math.log(1e-7))

    def test_two_by_two_hand_value(self):
        target = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]])
        pred = torch.tensor([[[0.8, 0.1], [0.2, 0.1]]])
        loss = weighted_bce(pred, target, torch.tensor([3.0]))
        expected = (3 * -math.log(0.8) - math.log(0.9) - math.log(0.8) - math.log(0.9)) / 4
        assert loss.item() == pytest.approx(expected, abs=1e-6)
        assert loss.item() == pytest.approx(0.2758, abs=1e-4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            weighted_bce(torch.rand(1, 4, 4), torch.zeros(1, 4, 5), torch.ones(1))

    def test_non_binary_target_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            weighted_bce(torch.rand(1, 2, 2), torch.full((1, 2, 2), 0.5), torch.ones(1))

    def test_unit_weights_match_plain_bce_oracle(self):
        gen = torch.Generator().manual_seed(0)
        pred = torch.rand(3, 4, 4, generator=gen)
        target = (torch.rand(3, 4, 4, generator=gen) > 0.5).float()
        loss = weighted_bce(pred, target, torch.ones(3))
        assert loss.item() == pytest.approx(bce_oracle(pred, target, torch.ones(3)), rel=1e-6)

    def test_image_sum_differs_by_pixel_count(self):
        gen = torch.Generator().manual_seed(1)
        pred = torch.rand(2, 4, 4, generator=gen)
        target = (torch.rand(2, 4, 4, generator=gen) > 0.5).float()
        w = torch.tensor([2.0, 5.0])
        a = weighted_bce(pred, target, w, normalization="pixel_mean")
        b = weighted_bce(pred, target, w, normalization="image_sum")
        assert b.item() == pytest.approx(a.item() * 16, rel=1e-6)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(2)
        for _ in range(5):
            pred = torch.rand(1, 4, 4, generator=gen, dtype=torch.float64) * 0.9 + 0.05
            pred.requires_grad_(True)
            target = (torch.rand(1, 4, 4, generator=gen) > 0.5).double()
            w = torch.tensor([3.0], dtype=torch.float64)
            weighted_bce(pred, target, w).value.backward()
            eps = 1e-6
            with torch.no_grad():
                for idx in np.ndindex(4, 4):
                    orig = pred[0][idx].item()
                    pred[0][idx] = orig + eps
                    hi = weighted_bce(pred, target, w).item()
                    pred[0][idx] = orig - eps
                    lo = weighted_bce(pred, target, w).item()
                    pred[0][idx] = orig
                    fd = (hi - lo) / (2 * eps)
                    assert abs(pred.grad[0][idx].item() - fd) <= 1e-4 * max(1.0, abs(fd))

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_pixel_permutation_invariance(self, seed):
        gen = torch.Generator().manual_seed(seed)
        pred = torch.rand(1, 3, 3, generator=gen)
        target = (torch.rand(1, 3, 3, generator=gen) > 0.5).float()
        perm = torch.randperm(9, generator=gen)
        shuffled = weighted_bce(
            pred.view(1, -1)[:, perm].view(1, 3, 3),
            target.view(1, -1)[:, perm].view(1, 3, 3),
            torch.tensor([2.0]),
        )
        assert shuffled.item() == pytest.approx(
            weighted_bce(pred, target, torch.tensor([2.0])).item(), rel=1e-6
        )


class TestEntropyLoss:
    def test_maximal_at_half(self):
        assert entropy_loss(torch.full((1, 4, 4), 0.5)).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_confident_predictions_near_zero(self):
        assert entropy_loss(torch.full((1, 4, 4), 1e-6)).item() == pytest.approx(0.0, abs=1e-4)

    def test_quarter_hand_value(self):
        expected = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
        loss = entropy_loss(torch.full((2, 3, 3), 0.25))
        assert loss.item() == pytest.approx(expected, abs=1e-6)
        assert loss.item() == pytest.approx(0.5623, abs=1e-4)

    def test_half_maximizes_over_grid(self):
        values = {p: entropy_loss(torch.full((1, 4, 4), p)).item() for p in np.linspace(0.05, 0.95, 19)}
        assert max(values, key=values.get) == pytest.approx(0.5)


class TestConsistencyLoss:
    def test_identical_maps_zero(self):
        x = torch.rand(2, 4, 4)
        assert consistency_loss(x, x, "identity").item() == 0.0

    def test_constant_offset(self):
        x = torch.rand(1, 4, 4) * 0.5
        assert consistency_loss(x, x + 0.1, "identity").item() == pytest.approx(0.01, abs=1e-6)

    def test_symmetry(self):
        a, b = torch.rand(1, 4, 4), torch.rand(1, 4, 4)
        assert consistency_loss(a, b, "identity").item() == pytest.approx(
            consistency_loss(b, a, "identity").item(), rel=1e-6
        )

    @pytest.mark.parametrize("name", AUGMENTATIONS)
    def test_inverse_realigns(self, name):
        x = torch.rand(1, 4, 4)
        assert consistency_loss(x, apply_augmentation(x, name), name).item() == 0.0

    def test_unknown_transform_rejected(self):
        with pytest.raises(ValueError, match="unknown augmentation"):
            invert_augmentation(torch.rand(1, 4, 4), "shear")


class TestRotationLoss:
    def test_uniform_is_log4(self):
        probs = torch.full((8, 4), 0.25)
        labels = torch.arange(8) % 4
        assert rotation_loss(probs, labels).item() == pytest.approx(math.log(4), abs=1e-6)

    def test_confident_correct_near_zero(self):
        eps = 1e-6
        probs = torch.full((1, 4), eps)
        probs[0, 2] = 1 - 3 * eps
        assert rotation_loss(probs, torch.tensor([2])).item() == pytest.approx(0.0, abs=1e-5)

    def test_single_term(self):
        probs = torch.tensor([[0.7, 0.1, 0.1, 0.1]])
        loss = rotation_loss(probs, torch.tensor([0]))
        assert loss.item() == pytest.approx(-math.log(0.7), abs=1e-6)
        assert loss.item() == pytest.approx(0.3567, abs=1e-4)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            rotation_loss(torch.full((1, 4), 0.25), torch.tensor([4]))
