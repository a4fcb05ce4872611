"""Low-discrepancy and importance sampling primitives shared by prefiltering, the LUT and the MC oracle."""
from typing import Optional, Tuple

import numpy as np
import torch

from recap.config import DTYPE


def radical_inverse_vdc(bits: np.ndarray) -> np.ndarray:
    bits = bits.astype(np.uint32)
    bits = (bits << np.uint32(16)) | (bits >> np.uint32(16))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    return bits.astype(np.float64) * 2.3283064365386963e-10


def hammersley(n: int, seed: Optional[int] = None) -> torch.Tensor:
    """(n, 2) Hammersley points; a seed applies a fixed Cranley-Patterson rotation"""
    i = np.arange(n, dtype=np.uint32)
    xi = np.stack([i.astype(np.float64) / n, radical_inverse_vdc(i)], axis=-1)
    if seed is not None:
        shift = np.random.default_rng(seed).random(2)
        xi = np.mod(xi + shift, 1.0)
    return torch.as_tensor(xi, dtype=DTYPE)


def tangent_frame(n: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Orthonormal tangent and bitangent for unit normals (..., 3)"""
    z_up = torch.tensor([0.0, 0.0, 1.0], dtype=n.dtype)
    x_up = torch.tensor([1.0, 0.0, 0.0], dtype=n.dtype)
    up = torch.where((n[..., 2:3].abs() < 0.999), z_up, x_up)
    tangent = torch.linalg.cross(up.expand_as(n), n)
    tangent = tangent / torch.linalg.norm(tangent, dim=-1, keepdim=True)
    bitangent = torch.linalg.cross(n, tangent)
    return tangent, bitangent


def to_world(local: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    """Rotate local (z-up) vectors into the frame of n; broadcasting over leading axes"""
    t, b = tangent_frame(n)
    return local[..., 0:1] * t + local[..., 1:2] * b + local[..., 2:3] * n


def ggx_half_vectors(xi: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """GGX-distributed half vectors in the local frame; alpha broadcasts against xi[..., 0]"""
    a2 = alpha * alpha
    phi = 2.0 * torch.pi * xi[..., 0]
    cos_theta = torch.sqrt((1.0 - xi[..., 1]) / (1.0 + (a2 - 1.0) * xi[..., 1]))
    sin_theta = torch.sqrt(torch.clamp_min(1.0 - cos_theta * cos_theta, 0.0))
    return torch.stack([torch.cos(phi) * sin_theta, torch.sin(phi) * sin_theta, cos_theta], dim=-1)


def cosine_hemisphere(xi: torch.Tensor) -> torch.Tensor:
    r = torch.sqrt(xi[..., 0])
    phi = 2.0 * torch.pi * xi[..., 1]
    z = torch.sqrt(torch.clamp_min(1.0 - xi[..., 0], 0.0))
    return torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], dim=-1)
