"""Split-sum shading, display post-processing and the material regularizers."""
import logging
from typing import Literal

import torch

from recap.config import ACES_COEFFICIENTS, DIELECTRIC_F0, GAMMA, NDOTV_FLOOR
from recap.models.schemas import InvalidArgumentError, PostProcessConfig, RangeMode, ToneMap
from recap.services.brdf import BrdfLut, MaterialTensors
from recap.services.envmap import CubeMap, LatLongImage, PrefilteredEnv, query_specular, sample
from recap.utils.helpers import dot, safe_norm, safe_normalize

logger = logging.getLogger(__name__)

__all__ = [
    "MaterialTensors",
    "shade_proposed",
    "shade_metallic_blend",
    "shade",
    "postprocess",
    "preprocess_hdr_for_config",
    "adapt_latlong_for_baseline",
    "read_baseline_latlong",
    "loss_sat",
    "loss_energy",
]


def _lighting_terms(mat: MaterialTensors, n: torch.Tensor, v: torch.Tensor, env: PrefilteredEnv, lut: BrdfLut):
    n_dot_v = dot(n, v)
    if logger.isEnabledFor(logging.DEBUG) and torch.any(n_dot_v < NDOTV_FLOOR):
        logger.debug(f"{int((n_dot_v < NDOTV_FLOOR).sum())} shading samples with n.v below {NDOTV_FLOOR} clamped")
    mu = torch.clamp_min(n_dot_v, NDOTV_FLOOR)
    reflected = safe_normalize(2.0 * n_dot_v[..., None] * n - v)

    e_s = query_specular(env, reflected, mat.roughness)
    e_d = sample(env.diffuse, n, check=False)
    beta1, beta2 = lut.lookup(mu, mat.roughness)
    return e_d, e_s, beta1[..., None], beta2[..., None]


def shade_proposed(mat: MaterialTensors, n: torch.Tensor, v: torch.Tensor, env: PrefilteredEnv, lut: BrdfLut) -> torch.Tensor:
    """L = E_s * s * beta1 + E_s * beta2 + E_d * b"""
    e_d, e_s, beta1, beta2 = _lighting_terms(mat, n, v, env, lut)
    return e_s * mat.tint * beta1 + e_s * beta2 + e_d * mat.basecolor


def shade_metallic_blend(mat: MaterialTensors, n: torch.Tensor, v: torch.Tensor, env: PrefilteredEnv, lut: BrdfLut) -> torch.Tensor:
    """L = E_s * (F0 * beta1 + beta2) + E_d * (1 - m) * b, with F0 = m * b + (1 - m) * 0.04"""
    e_d, e_s, beta1, beta2 = _lighting_terms(mat, n, v, env, lut)
    m = mat.metallic[..., None]
    f0 = m * mat.basecolor + (1.0 - m) * DIELECTRIC_F0
    return e_s * f0 * beta1 + e_s * beta2 + e_d * ((1.0 - m) * mat.basecolor)


def shade(model: str, mat: MaterialTensors, n, v, env: PrefilteredEnv, lut: BrdfLut) -> torch.Tensor:
    if model == "proposed":
        return shade_proposed(mat, n, v, env, lut)
    if model == "metallic":
        return shade_metallic_blend(mat, n, v, env, lut)
    raise InvalidArgumentError(f"Unknown shading model '{model}'")


# Post-processing

def _tonemap(x: torch.Tensor, tonemap: ToneMap) -> torch.Tensor:
    if tonemap == ToneMap.NONE:
        return x
    if tonemap == ToneMap.CLIP:
        return torch.clamp_max(x, 1.0)
    if tonemap == ToneMap.REINHARD:
        return x / (1.0 + x)
    c = ACES_COEFFICIENTS
    return torch.clamp((x * (c["a"] * x + c["b"])) / (x * (c["c"] * x + c["d"]) + c["e"]), 0.0, 1.0)


def postprocess(radiance: torch.Tensor, cfg: PostProcessConfig) -> torch.Tensor:
    """Tonemap, clamp to the displayable range, then gamma encode"""
    check = radiance.detach()
    if torch.any(torch.isnan(check)):
        raise InvalidArgumentError("postprocess received NaN radiance")
    if torch.any(check < 0):
        raise InvalidArgumentError(f"postprocess requires non-negative radiance, min was {float(check.min()):.3e}")

    display = torch.clamp(_tonemap(radiance, cfg.tonemap), 0.0, 1.0)
    if not cfg.gamma:
        return display
    # x ** (1 / 2.2) has an infinite slope at 0
    positive = display > 0
    encoded = torch.clamp_min(display, 1e-12) ** (1.0 / GAMMA)
    return torch.where(positive, encoded, torch.zeros_like(display))


def preprocess_hdr_for_config(cube: CubeMap, cfg: PostProcessConfig) -> CubeMap:
    """Unit-range configs read the map as LDR; non-negative configs take HDR maps as they are"""
    if cfg.range_mode == RangeMode.UNIT:
        return CubeMap(torch.clamp(cube.texels, 0.0, 1.0))
    return cube


def adapt_latlong_for_baseline(img: LatLongImage, convention: Literal["y_up_clip", "y_down_sigmoid"]) -> LatLongImage:
    """Reinterpret an HDR map for pipelines that store bounded or pre-activation lighting"""
    if convention == "y_up_clip":
        return LatLongImage(torch.clamp(img.texels, 0.0, 1.0))
    if convention == "y_down_sigmoid":
        flipped = torch.flip(img.texels, dims=(0,))
        bounded = torch.clamp(flipped, 1e-4, 1.0 - 1e-4)
        return LatLongImage(torch.logit(bounded))
    raise InvalidArgumentError(f"Unknown baseline convention '{convention}'")


def read_baseline_latlong(stored: LatLongImage, convention: Literal["y_up_clip", "y_down_sigmoid"]) -> LatLongImage:
    """Lighting as a pipeline with the given storage convention sees it"""
    if convention == "y_up_clip":
        return stored
    if convention == "y_down_sigmoid":
        return LatLongImage(torch.flip(torch.sigmoid(stored.texels), dims=(0,)))
    raise InvalidArgumentError(f"Unknown baseline convention '{convention}'")


# Regularizers

def loss_sat(tint: torch.Tensor, lambda_sat: float) -> torch.Tensor:
    """lambda * ||s - mean(s)||, averaged over points when tint is batched"""
    deviation = tint - tint.mean(dim=-1, keepdim=True)
    return lambda_sat * safe_norm(deviation).mean()


def loss_energy(tint: torch.Tensor, basecolor: torch.Tensor, lambda_ec: float) -> torch.Tensor:
    """Squared hinge on ||s|| + ||b|| <= 1"""
    excess = torch.relu(safe_norm(tint) + safe_norm(basecolor) - 1.0)
    return lambda_ec * (excess * excess).mean()
