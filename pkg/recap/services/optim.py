"""Image losses, quality metrics, Adam and finite-difference checks."""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Mapping, Optional, Union

import torch
import torch.nn.functional as F

from recap.config import ADAM_BETAS, ADAM_EPS, LAMBDA_SSIM, SSIM_SIGMA, SSIM_WINDOW
from recap.models.schemas import DivergenceError, InvalidArgumentError

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@lru_cache(maxsize=4)
def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise InvalidArgumentError(f"Image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over (H, W, C) images, per channel, 11x11 Gaussian window with zero padding"""
    _check_shapes(a, b)
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, a.dtype)
    x = a.permute(2, 0, 1)[:, None]
    y = b.permute(2, 0, 1)[:, None]
    pad = SSIM_WINDOW // 2

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, padding=pad)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov_xy = blur(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return (num / den).mean()


def image_loss(rendered: torch.Tensor, target: torch.Tensor, lambda_ssim: float = LAMBDA_SSIM) -> torch.Tensor:
    """(1 - lambda) * L1 + lambda * (1 - SSIM)"""
    _check_shapes(rendered, target)
    l1 = torch.abs(rendered - target).mean()
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim(rendered, target))


def metrics_psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    _check_shapes(a, b)
    mse = float(torch.mean((a.detach() - b.detach()) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def metrics_ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(ssim(a.detach(), b.detach()))


# Adam

@dataclass
class AdamState:
    """Moments and step counts per parameter name; a key only advances when it receives a gradient"""
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS
    steps: Dict[str, int] = field(default_factory=dict)
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


Projection = Callable[[torch.Tensor], torch.Tensor]


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, Optional[torch.Tensor]],
    state: AdamState,
    lr: Union[float, Mapping[str, float]],
    projections: Optional[Mapping[str, Projection]] = None,
) -> Dict[str, torch.Tensor]:
    """Bias-corrected Adam update followed by per-key domain projections.

    Keys whose gradient is None are returned untouched and their moments do not
    advance. Returns new tensors; inputs are not modified.
    """
    beta1, beta2 = state.betas
    projections = projections or {}
    updated = dict(params)

    for key, grad in grads.items():
        if grad is None:
            continue
        if key not in params:
            raise InvalidArgumentError(f"Gradient for unknown parameter '{key}'")
        param = params[key].detach()
        grad = grad.detach()
        if grad.shape != param.shape:
            raise InvalidArgumentError(f"Gradient shape {tuple(grad.shape)} does not match '{key}' {tuple(param.shape)}")
        if not torch.all(torch.isfinite(grad)):
            bad = int((~torch.isfinite(grad)).sum())
            raise DivergenceError(f"Non-finite gradient in '{key}' ({bad} entries)")

        t = state.steps.get(key, 0) + 1
        m = state.m.get(key, torch.zeros_like(param)) * beta1 + (1.0 - beta1) * grad
        v = state.v.get(key, torch.zeros_like(param)) * beta2 + (1.0 - beta2) * grad * grad
        state.steps[key], state.m[key], state.v[key] = t, m, v

        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        step_lr = lr[key] if isinstance(lr, Mapping) else lr
        new = param - step_lr * m_hat / (torch.sqrt(v_hat) + state.eps)
        if key in projections:
            new = projections[key](new)
        updated[key] = new
    return updated


def central_difference(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, index, h: float = 1e-4) -> float:
    """d fn / d x[index] by central differences; x is left unchanged"""
    with torch.no_grad():
        plus = x.detach().clone()
        minus = x.detach().clone()
        plus[index] += h
        minus[index] -= h
        return float((fn(plus) - fn(minus)) / (2.0 * h))


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
