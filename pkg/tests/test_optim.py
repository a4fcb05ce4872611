import math

import pytest
import torch

from recap.config import DTYPE
from recap.models.schemas import DivergenceError, InvalidArgumentError
from recap.services.optim import (
    AdamState,
    adam_step,
    central_difference,
    image_loss,
    metrics_psnr,
    metrics_ssim,
    relative_error,
    ssim,
)


class TestMetrics:
    @pytest.fixture
    def image(self):
        gen = torch.Generator().manual_seed(0)
        return torch.rand(16, 16, 3, generator=gen, dtype=DTYPE)

    def test_psnr_of_known_mse(self):
        a = torch.zeros(8, 8, 3, dtype=DTYPE)
        b = torch.full((8, 8, 3), 0.1, dtype=DTYPE)
        assert math.isclose(metrics_psnr(a, b), 20.0, rel_tol=1e-9)

    def test_psnr_of_identical_images_is_infinite(self, image):
        assert metrics_psnr(image, image) == math.inf

    def test_ssim_of_identical_images_is_one(self, image):
        assert math.isclose(metrics_ssim(image, image), 1.0, rel_tol=1e-12)

    def test_ssim_drops_with_noise(self, image):
        gen = torch.Generator().manual_seed(1)
        noisy = torch.clamp(image + 0.2 * torch.randn(image.shape, generator=gen, dtype=DTYPE), 0.0, 1.0)
        assert metrics_ssim(image, noisy) < 0.95

    def test_image_loss_is_zero_for_a_match(self, image):
        assert abs(float(image_loss(image, image))) < 1e-12

    def test_image_loss_is_l1_without_ssim_term(self, image):
        other = torch.clamp(image + 0.05, 0.0, 1.0)
        expected = float(torch.abs(image - other).mean())
        assert math.isclose(float(image_loss(image, other, lambda_ssim=0.0)), expected, rel_tol=1e-12)

    def test_black_against_white_costs_about_one(self):
        black = torch.zeros(32, 32, 3, dtype=DTYPE)
        white = torch.ones(32, 32, 3, dtype=DTYPE)
        assert math.isclose(float(image_loss(black, white)), 1.0, abs_tol=1e-3)

    def test_image_loss_is_symmetric(self, image):
        gen = torch.Generator().manual_seed(2)
        other = torch.rand(image.shape, generator=gen, dtype=DTYPE)
        assert math.isclose(float(image_loss(image, other)), float(image_loss(other, image)), rel_tol=1e-12)

    def test_shape_mismatch_rejected(self, image):
        with pytest.raises(InvalidArgumentError):
            ssim(image, image[:8])
        with pytest.raises(InvalidArgumentError):
            metrics_psnr(image, image[:, :8])

    def test_ssim_is_differentiable(self, image):
        x = image.clone().requires_grad_(True)
        target = torch.flip(image, dims=(0,))
        image_loss(x, target).backward()
        assert torch.all(torch.isfinite(x.grad))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        params = {"w": torch.zeros(3, dtype=DTYPE)}
        grads = {"w": torch.tensor([3.0, -0.5, 1e-3], dtype=DTYPE)}
        updated = adam_step(params, grads, AdamState(), 0.01)
        assert torch.allclose(updated["w"], torch.tensor([-0.01, 0.01, -0.01], dtype=DTYPE), atol=1e-6)

    def test_missing_gradient_leaves_key_untouched(self):
        state = AdamState()
        params = {"a": torch.ones(2, dtype=DTYPE), "b": torch.ones(2, dtype=DTYPE)}
        updated = adam_step(params, {"a": torch.ones(2, dtype=DTYPE), "b": None}, state, 0.1)
        assert updated["b"] is params["b"]
        assert state.steps == {"a": 1}

    def test_step_counts_are_per_key(self):
        state = AdamState()
        params = {"a": torch.zeros(1, dtype=DTYPE), "b": torch.zeros(1, dtype=DTYPE)}
        g = torch.ones(1, dtype=DTYPE)
        params = adam_step(params, {"a": g}, state, 0.1)
        params = adam_step(params, {"a": g}, state, 0.1)
        params = adam_step(params, {"b": g}, state, 0.1)
        assert state.steps == {"a": 2, "b": 1}
        # b's first step is still bias-corrected to a full lr
        assert math.isclose(float(params["b"][0]), -0.1, rel_tol=1e-6)

    def test_per_key_learning_rates_and_projection(self):
        params = {"a": torch.zeros(1, dtype=DTYPE), "b": torch.zeros(1, dtype=DTYPE)}
        grads = {"a": torch.ones(1, dtype=DTYPE), "b": torch.ones(1, dtype=DTYPE)}
        updated = adam_step(params, grads, AdamState(), {"a": 0.1, "b": 0.5},
                            projections={"b": lambda x: torch.clamp_min(x, 0.0)})
        assert math.isclose(float(updated["a"][0]), -0.1, rel_tol=1e-6)
        assert float(updated["b"][0]) == 0.0

    def test_inputs_are_not_modified(self):
        w = torch.ones(2, dtype=DTYPE)
        adam_step({"w": w}, {"w": torch.ones(2, dtype=DTYPE)}, AdamState(), 0.1)
        assert torch.equal(w, torch.ones(2, dtype=DTYPE))

    def test_non_finite_gradient_diverges(self):
        params = {"w": torch.zeros(2, dtype=DTYPE)}
        with pytest.raises(DivergenceError):
            adam_step(params, {"w": torch.tensor([1.0, float("nan")], dtype=DTYPE)}, AdamState(), 0.1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            adam_step({"w": torch.zeros(2, dtype=DTYPE)}, {"w": torch.zeros(3, dtype=DTYPE)}, AdamState(), 0.1)

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidArgumentError):
            adam_step({"w": torch.zeros(2, dtype=DTYPE)}, {"q": torch.zeros(2, dtype=DTYPE)}, AdamState(), 0.1)

    def test_minimizes_a_quadratic(self):
        state = AdamState()
        params = {"x": torch.tensor([3.0, -2.0], dtype=DTYPE)}
        for _ in range(500):
            x = params["x"].clone().requires_grad_(True)
            (x * x).sum().backward()
            params = adam_step(params, {"x": x.grad}, state, 0.05)
        assert float(params["x"].abs().max()) < 0.1

    def test_reaches_the_optimum_of_a_quadratic_bowl(self):
        optimum = torch.tensor([1.0, -0.5], dtype=DTYPE)
        curvature = torch.tensor([1.0, 2.0], dtype=DTYPE)
        state = AdamState()
        params = {"x": torch.zeros(2, dtype=DTYPE)}
        for _ in range(2000):
            x = params["x"].clone().requires_grad_(True)
            (curvature * (x - optimum) ** 2).sum().backward()
            params = adam_step(params, {"x": x.grad}, state, 0.01)
        assert float((params["x"] - optimum).abs().max()) < 1e-6

    def test_zero_gradient_leaves_params_in_place(self):
        params = {"w": torch.tensor([0.4, -0.7], dtype=DTYPE)}
        updated = adam_step(params, {"w": torch.zeros(2, dtype=DTYPE)}, AdamState(), 0.1)
        assert torch.equal(updated["w"], params["w"])


class TestFiniteDifferences:
    def test_matches_analytic_derivative(self):
        x = torch.tensor([0.3, -1.2, 2.0], dtype=DTYPE)
        numeric = central_difference(lambda t: (t ** 3).sum(), x, 1)
        assert math.isclose(numeric, 3.0 * 1.2 ** 2, rel_tol=1e-7)
        assert torch.equal(x, torch.tensor([0.3, -1.2, 2.0], dtype=DTYPE))

    def test_relative_error(self):
        assert relative_error(1.0, 1.0) == 0.0
        assert math.isclose(relative_error(1.0, 0.9), 0.1, rel_tol=1e-12)
        assert relative_error(0.0, 0.0) == 0.0
