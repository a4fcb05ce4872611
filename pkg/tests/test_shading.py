import math

import pytest
import torch

from recap.config import DTYPE
from recap.models.schemas import InvalidArgumentError, PostProcessConfig
from recap.services.brdf import MaterialTensors
from recap.services.envmap import CubeMap, LatLongImage
from recap.services.shading import (
    adapt_latlong_for_baseline,
    loss_energy,
    loss_sat,
    postprocess,
    preprocess_hdr_for_config,
    read_baseline_latlong,
    shade,
    shade_metallic_blend,
    shade_proposed,
)
from recap.utils.helpers import dot
from tests.conftest import make_materials


def _geometry(count: int, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    n = torch.randn(count, 3, generator=gen, dtype=DTYPE)
    n = n / torch.linalg.norm(n, dim=-1, keepdim=True)
    v = torch.randn(count, 3, generator=gen, dtype=DTYPE)
    v = v / torch.linalg.norm(v, dim=-1, keepdim=True)
    v = torch.where(dot(n, v, keepdim=True) < 0, -v, v)
    return n, v


def _random_materials(count: int, seed: int = 1) -> MaterialTensors:
    gen = torch.Generator().manual_seed(seed)
    return MaterialTensors(
        basecolor=torch.rand(count, 3, generator=gen, dtype=DTYPE),
        tint=torch.rand(count, 3, generator=gen, dtype=DTYPE),
        roughness=torch.rand(count, generator=gen, dtype=DTYPE),
        metallic=torch.zeros(count, dtype=DTYPE),
    )


class TestShadingModels:
    def test_white_light_reduces_to_lut_and_albedo(self, white_env, small_lut):
        n, v = _geometry(32)
        mat = make_materials(32, basecolor=0.3, tint=0.0, roughness=0.35)
        out = shade_proposed(mat, n, v, white_env, small_lut)
        _, beta2 = small_lut.lookup(torch.clamp_min(dot(n, v), 1e-4), mat.roughness)
        assert torch.allclose(out, beta2[:, None] + 0.3, atol=1e-10)

    def test_dielectric_corner_matches_metallic_blend(self, sky_env, small_lut):
        n, v = _geometry(64)
        base = _random_materials(64)
        proposed = MaterialTensors(base.basecolor, torch.full_like(base.tint, 0.04), base.roughness, base.metallic)
        metallic = MaterialTensors(base.basecolor, base.tint, base.roughness, torch.zeros_like(base.metallic))
        a = shade_proposed(proposed, n, v, sky_env, small_lut)
        b = shade_metallic_blend(metallic, n, v, sky_env, small_lut)
        assert torch.allclose(a, b, rtol=0.0, atol=1e-12)

    def test_metal_corner_matches_metallic_blend(self, sky_env, small_lut):
        n, v = _geometry(64, seed=5)
        base = _random_materials(64, seed=6)
        proposed = MaterialTensors(torch.zeros_like(base.basecolor), base.basecolor, base.roughness, base.metallic)
        metallic = MaterialTensors(base.basecolor, base.tint, base.roughness, torch.ones_like(base.metallic))
        a = shade_proposed(proposed, n, v, sky_env, small_lut)
        b = shade_metallic_blend(metallic, n, v, sky_env, small_lut)
        assert torch.allclose(a, b, rtol=0.0, atol=1e-12)

    def test_radiance_scales_linearly_with_lighting(self, sky_env, small_lut):
        n, v = _geometry(16)
        mat = _random_materials(16)
        a = shade("proposed", mat, n, v, sky_env, small_lut)
        b = shade("proposed", mat, n, v, sky_env.scaled(2.0), small_lut)
        assert torch.allclose(b, 2.0 * a, atol=1e-12)

    def test_unknown_model_rejected(self, sky_env, small_lut):
        n, v = _geometry(2)
        with pytest.raises(InvalidArgumentError):
            shade("phong", _random_materials(2), n, v, sky_env, small_lut)

    def test_one_environment_cannot_tell_metal_from_dielectric(self, white_env, sky_env, small_lut):
        """Under uniform light a dielectric with a tuned basecolor reproduces a metal; a second environment separates them"""
        n, v = _geometry(16, seed=7)
        metal = make_materials(16, basecolor=0.6, roughness=0.4, metallic=1.0)
        beta1, _ = small_lut.lookup(torch.clamp_min(dot(n, v), 1e-4), metal.roughness)
        dielectric = MaterialTensors(
            basecolor=((0.6 - 0.04) * beta1)[:, None].expand(16, 3).clone(),
            tint=metal.tint,
            roughness=metal.roughness,
            metallic=torch.zeros(16, dtype=DTYPE),
        )
        a = shade_metallic_blend(metal, n, v, white_env, small_lut)
        b = shade_metallic_blend(dielectric, n, v, white_env, small_lut)
        assert torch.allclose(a, b, atol=1e-10)

        a = shade_metallic_blend(metal, n, v, sky_env, small_lut)
        b = shade_metallic_blend(dielectric, n, v, sky_env, small_lut)
        assert float((a - b).abs().max()) > 1e-3

    def test_gradients_reach_materials(self, sky_env, small_lut):
        n, v = _geometry(8)
        base = _random_materials(8)
        tint = base.tint.clone().requires_grad_(True)
        basecolor = base.basecolor.clone().requires_grad_(True)
        out = shade_proposed(MaterialTensors(basecolor, tint, base.roughness, base.metallic), n, v, sky_env, small_lut)
        out.sum().backward()
        assert float(tint.grad.min()) >= 0.0
        assert float(basecolor.grad.min()) > 0.0


class TestPostprocess:
    @pytest.mark.parametrize("name, value, expected", [
        ("hdr_clip_gamma", 0.5, 0.5 ** (1.0 / 2.2)),
        ("hdr_clip_gamma", 2.0, 1.0),
        ("hdr_clip", 0.5, 0.5),
        ("hdr_clip", 3.0, 1.0),
        ("ldr", 1.7, 1.0),
        ("hdr_reinhard_gamma", 1.0, 0.5 ** (1.0 / 2.2)),
        ("hdr_aces_gamma", 0.0, 0.0),
    ])
    def test_known_values(self, name, value, expected):
        out = postprocess(torch.tensor([value], dtype=DTYPE), PostProcessConfig.from_name(name))
        assert math.isclose(float(out[0]), expected, abs_tol=1e-12)

    def test_gamma_midpoint(self):
        out = postprocess(torch.tensor([0.5], dtype=DTYPE), PostProcessConfig.from_name("hdr_clip_gamma"))
        assert math.isclose(float(out[0]), 0.7297, abs_tol=1e-4)

    def test_output_is_displayable(self):
        x = torch.linspace(0.0, 50.0, 101, dtype=DTYPE)
        for name in ("hdr_reinhard_gamma", "hdr_aces_gamma", "hdr_clip_gamma"):
            out = postprocess(x, PostProcessConfig.from_name(name))
            assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_nan_rejected(self):
        with pytest.raises(InvalidArgumentError):
            postprocess(torch.tensor([float("nan")], dtype=DTYPE), PostProcessConfig())

    def test_negative_rejected(self):
        with pytest.raises(InvalidArgumentError):
            postprocess(torch.tensor([-1e-3], dtype=DTYPE), PostProcessConfig())

    def test_gamma_gradient_is_finite_at_zero(self):
        x = torch.zeros(4, dtype=DTYPE, requires_grad=True)
        postprocess(x, PostProcessConfig.from_name("hdr_clip_gamma")).sum().backward()
        assert torch.all(torch.isfinite(x.grad))

    def test_names_round_trip(self):
        assert PostProcessConfig.from_name("ldr_gamma").name == "ldr_gamma"
        assert PostProcessConfig.from_flags("nonneg", "reinhard", "on").name == "hdr_reinhard_gamma"

    def test_unknown_name_rejected(self):
        with pytest.raises(InvalidArgumentError):
            PostProcessConfig.from_name("filmic")

    @pytest.mark.parametrize("name", ["ldr", "ldr_gamma", "hdr_clip", "hdr_clip_gamma", "hdr_reinhard_gamma", "hdr_aces_gamma"])
    def test_monotone_in_radiance(self, name):
        x = torch.linspace(0.0, 20.0, 2001, dtype=DTYPE)
        out = postprocess(x, PostProcessConfig.from_name(name))
        assert torch.all(out[1:] >= out[:-1])


class TestHdrPreprocessing:
    def test_unit_range_clamps(self):
        cube = CubeMap.constant(4, 3.0)
        out = preprocess_hdr_for_config(cube, PostProcessConfig.from_name("ldr"))
        assert torch.all(out.texels == 1.0)

    def test_nonneg_range_keeps_hdr(self):
        cube = CubeMap.constant(4, 3.0)
        assert preprocess_hdr_for_config(cube, PostProcessConfig.from_name("hdr_clip")) is cube

    def test_clip_baseline(self):
        img = LatLongImage(torch.full((4, 8, 3), 2.5, dtype=DTYPE))
        assert torch.all(adapt_latlong_for_baseline(img, "y_up_clip").texels == 1.0)

    def test_sigmoid_baseline_flips_and_inverts(self):
        texels = torch.linspace(0.1, 0.9, 4, dtype=DTYPE)[:, None, None].expand(4, 8, 3).clone()
        out = adapt_latlong_for_baseline(LatLongImage(texels), "y_down_sigmoid")
        assert torch.allclose(torch.sigmoid(out.texels), torch.flip(texels, dims=(0,)), atol=1e-12)

    def test_unknown_convention_rejected(self):
        img = LatLongImage(torch.zeros(4, 8, 3, dtype=DTYPE))
        with pytest.raises(InvalidArgumentError):
            adapt_latlong_for_baseline(img, "y_sideways")

    def test_adapted_sigmoid_reads_back_as_clipped_lighting(self):
        gen = torch.Generator().manual_seed(3)
        img = LatLongImage(3.0 * torch.rand(8, 16, 3, generator=gen, dtype=DTYPE))
        seen = read_baseline_latlong(adapt_latlong_for_baseline(img, "y_down_sigmoid"), "y_down_sigmoid")
        assert torch.allclose(seen.texels, torch.clamp(img.texels, 1e-4, 1.0 - 1e-4), atol=1e-12)

    def test_clip_storage_is_read_as_is(self):
        img = LatLongImage(torch.rand(4, 8, 3, dtype=DTYPE))
        assert read_baseline_latlong(img, "y_up_clip") is img

    def test_unadapted_sigmoid_storage_is_flipped_and_washed_out(self):
        texels = torch.linspace(0.0, 2.0, 4, dtype=DTYPE)[:, None, None].expand(4, 8, 3).clone()
        seen = read_baseline_latlong(LatLongImage(texels), "y_down_sigmoid")
        assert float(seen.texels.min()) >= 0.5
        assert float(seen.texels[0, 0, 0]) > float(seen.texels[-1, 0, 0])

    def test_reader_rejects_unknown_convention(self):
        with pytest.raises(InvalidArgumentError):
            read_baseline_latlong(LatLongImage(torch.zeros(4, 8, 3, dtype=DTYPE)), "y_sideways")


class TestRegularizers:
    def test_saturation_of_pure_red(self):
        tint = torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE)
        assert math.isclose(float(loss_sat(tint, 1.0)), math.sqrt(6.0) / 3.0, rel_tol=1e-12)

    def test_grey_tint_is_free_and_differentiable(self):
        tint = torch.full((5, 3), 0.25, dtype=DTYPE, requires_grad=True)
        loss = loss_sat(tint, 1.0)
        loss.backward()
        assert float(loss) == 0.0
        assert torch.all(torch.isfinite(tint.grad))

    def test_energy_hinge(self):
        tint = torch.ones(3, dtype=DTYPE)
        basecolor = torch.zeros(3, dtype=DTYPE)
        assert math.isclose(float(loss_energy(tint, basecolor, 1.0)), (math.sqrt(3.0) - 1.0) ** 2, rel_tol=1e-12)

    def test_energy_inside_budget_is_zero(self):
        tint = torch.full((3,), 0.1, dtype=DTYPE)
        basecolor = torch.full((3,), 0.3, dtype=DTYPE)
        assert float(loss_energy(tint, basecolor, 1.0)) == 0.0

    def test_weights_scale_linearly(self):
        tint = torch.tensor([[0.8, 0.1, 0.1]], dtype=DTYPE)
        assert math.isclose(float(loss_sat(tint, 0.5)), 0.5 * float(loss_sat(tint, 1.0)), rel_tol=1e-12)
