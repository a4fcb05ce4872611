"""Microfacet BRDF terms, the split-sum lookup table and the brute-force rendering-equation oracle.

GGX uses the "roughness squared" mapping alpha = r^2 (clamped to ALPHA_MIN so the
mirror limit stays finite) and the separable Schlick-GGX geometry term with
k = alpha / 2.
"""
import logging
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence, Tuple, Union

import torch

from recap.config import ALPHA_MIN, DIELECTRIC_F0, DTYPE, LUT_RESOLUTION, LUT_SAMPLES, LUT_SEED
from recap.models.schemas import InvalidArgumentError, MaterialParams
from recap.services.envmap import CubeMap, sample
from recap.utils.helpers import dot, safe_normalize, timing_decorator
from recap.utils.sampling import cosine_hemisphere, ggx_half_vectors, hammersley, to_world

logger = logging.getLogger(__name__)

BrdfModel = Literal["metallic", "proposed"]
Lobes = Literal["full", "diffuse", "specular"]


@dataclass(frozen=True)
class MaterialTensors:
    """Batched materials: basecolor (..., 3), tint (..., 3), roughness (...), metallic (...)"""
    basecolor: torch.Tensor
    tint: torch.Tensor
    roughness: torch.Tensor
    metallic: torch.Tensor

    @classmethod
    def from_params(cls, params: Union[MaterialParams, Sequence[MaterialParams]]) -> "MaterialTensors":
        items = [params] if isinstance(params, MaterialParams) else list(params)
        t = cls(
            basecolor=torch.tensor([p.basecolor for p in items], dtype=DTYPE),
            tint=torch.tensor([p.specular_tint for p in items], dtype=DTYPE),
            roughness=torch.tensor([p.roughness for p in items], dtype=DTYPE),
            metallic=torch.tensor([p.metallic for p in items], dtype=DTYPE),
        )
        return t.select(0) if isinstance(params, MaterialParams) else t

    def select(self, index) -> "MaterialTensors":
        return MaterialTensors(self.basecolor[index], self.tint[index], self.roughness[index], self.metallic[index])

    def to_params(self) -> list:
        return [
            MaterialParams(
                basecolor=tuple(float(c) for c in self.basecolor[i]),
                specular_tint=tuple(float(c) for c in self.tint[i]),
                roughness=float(self.roughness[i]),
                metallic=float(self.metallic[i]),
            )
            for i in range(self.basecolor.shape[0])
        ]


@dataclass(frozen=True)
class ShadingGeometry:
    n: torch.Tensor
    v: torch.Tensor
    l: torch.Tensor
    h: torch.Tensor

    @classmethod
    def from_vectors(cls, n: torch.Tensor, v: torch.Tensor, l: torch.Tensor) -> "ShadingGeometry":
        return cls(n=n, v=v, l=l, h=safe_normalize(v + l))


# Microfacet terms

def effective_alpha(r: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(r * r, ALPHA_MIN)


def ggx_ndf(r: torch.Tensor, n_dot_h: torch.Tensor) -> torch.Tensor:
    a2 = effective_alpha(r) ** 2
    d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (torch.pi * d * d)


def smith_g(r: torch.Tensor, n_dot_l: torch.Tensor, n_dot_v: torch.Tensor) -> torch.Tensor:
    k = effective_alpha(r) * 0.5
    g_l = n_dot_l / (n_dot_l * (1.0 - k) + k)
    g_v = n_dot_v / (n_dot_v * (1.0 - k) + k)
    return g_l * g_v


def fresnel_schlick(f0: torch.Tensor, v_dot_h: torch.Tensor) -> torch.Tensor:
    weight = (1.0 - torch.clamp(v_dot_h, 0.0, 1.0)) ** 5
    return f0 + (1.0 - f0) * weight[..., None]


def _lobe_inputs(mat: MaterialTensors, model: BrdfModel) -> Tuple[torch.Tensor, torch.Tensor]:
    """(diffuse albedo, F0) for the chosen parameterization"""
    if model == "metallic":
        m = mat.metallic[..., None]
        return (1.0 - m) * mat.basecolor, m * mat.basecolor + (1.0 - m) * DIELECTRIC_F0
    if model == "proposed":
        return mat.basecolor, mat.tint
    raise InvalidArgumentError(f"Unknown BRDF model '{model}'")


def eval_brdf(mat: MaterialTensors, geom: ShadingGeometry, model: BrdfModel = "metallic", lobes: Lobes = "full") -> torch.Tensor:
    """Lambert plus Cook-Torrance reflectance (per steradian); zero outside the upper hemisphere"""
    n_dot_l = dot(geom.n, geom.l)
    n_dot_v = dot(geom.n, geom.v)
    valid = (n_dot_l > 0) & (n_dot_v > 0)
    nl = torch.clamp_min(n_dot_l, 1e-12)
    nv = torch.clamp_min(n_dot_v, 1e-12)

    albedo, f0 = _lobe_inputs(mat, model)
    out = torch.zeros(torch.broadcast_shapes(albedo.shape, n_dot_l.shape + (3,)), dtype=nl.dtype)
    if lobes in ("full", "diffuse"):
        out = out + albedo / torch.pi
    if lobes in ("full", "specular"):
        d = ggx_ndf(mat.roughness, torch.clamp(dot(geom.n, geom.h), 0.0, 1.0))
        g = smith_g(mat.roughness, nl, nv)
        f = fresnel_schlick(f0, dot(geom.v, geom.h))
        out = out + f * (d * g / (4.0 * nl * nv))[..., None]
    return torch.where(valid[..., None], out, torch.zeros_like(out))


# Split-sum lookup table

@dataclass(frozen=True)
class BrdfLut:
    """Split-sum integrals indexed [mu, r] on nodes mu_i = max(i/(R-1), 1e-4), r_j = j/(R-1)"""
    table: torch.Tensor
    samples: int = LUT_SAMPLES
    seed: int = LUT_SEED

    def __post_init__(self):
        t = self.table
        if t.dim() != 3 or t.shape[0] != t.shape[1] or t.shape[2] != 2:
            raise InvalidArgumentError(f"LUT table must have shape (R, R, 2), got {tuple(t.shape)}")

    @property
    def resolution(self) -> int:
        return self.table.shape[0]

    @property
    def beta1(self) -> torch.Tensor:
        return self.table[..., 0]

    @property
    def beta2(self) -> torch.Tensor:
        return self.table[..., 1]

    def lookup(self, mu: torch.Tensor, r: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Bilinear (beta1, beta2) at (n.v, roughness); differentiable in both"""
        res = self.resolution
        mu, r = torch.broadcast_tensors(torch.as_tensor(mu, dtype=self.table.dtype),
                                        torch.as_tensor(r, dtype=self.table.dtype))
        pm = torch.clamp(mu, 0.0, 1.0) * (res - 1)
        pr = torch.clamp(r, 0.0, 1.0) * (res - 1)
        i0 = torch.clamp(torch.floor(pm.detach()), 0, res - 2).long()
        j0 = torch.clamp(torch.floor(pr.detach()), 0, res - 2).long()
        tm = (pm - i0)[..., None]
        tr = (pr - j0)[..., None]
        t = self.table
        value = (
            t[i0, j0] * (1 - tm) * (1 - tr)
            + t[i0 + 1, j0] * tm * (1 - tr)
            + t[i0, j0 + 1] * (1 - tm) * tr
            + t[i0 + 1, j0 + 1] * tm * tr
        )
        return value[..., 0], value[..., 1]


def lut_nodes(resolution: int, dtype: torch.dtype = DTYPE) -> Tuple[torch.Tensor, torch.Tensor]:
    grid = torch.linspace(0.0, 1.0, resolution, dtype=dtype)
    return torch.clamp_min(grid, 1e-4), grid


@timing_decorator
def integrate_brdf_lut(resolution: int = LUT_RESOLUTION, samples: int = LUT_SAMPLES, seed: int = LUT_SEED) -> BrdfLut:
    """GGX-importance-sampled split-sum integrals: beta1 scales F0, beta2 is the constant term"""
    if resolution < 16:
        raise InvalidArgumentError(f"LUT resolution must be >= 16, got {resolution}")
    if samples < 256:
        raise InvalidArgumentError(f"LUT samples must be >= 256, got {samples}")

    mus, rs = lut_nodes(resolution)
    xi = hammersley(samples, seed)
    table = torch.empty(resolution, resolution, 2, dtype=DTYPE)
    n_dot_v = mus[:, None]
    v = torch.stack([torch.sqrt(1.0 - mus * mus), torch.zeros_like(mus), mus], dim=-1)[:, None, :]

    with torch.no_grad():
        for j, r in enumerate(rs):
            h = ggx_half_vectors(xi, effective_alpha(r))[None, :, :]
            v_dot_h = dot(v, h)
            l = 2.0 * v_dot_h[..., None] * h - v
            n_dot_l = l[..., 2]
            n_dot_h = h[..., 2]
            valid = n_dot_l > 0
            g = smith_g(r, torch.clamp_min(n_dot_l, 0.0), n_dot_v)
            g_vis = g * v_dot_h / (torch.clamp_min(n_dot_h * n_dot_v, 1e-5))
            fc = (1.0 - torch.clamp(v_dot_h, 0.0, 1.0)) ** 5
            g_vis = torch.where(valid, g_vis, torch.zeros_like(g_vis))
            table[:, j, 0] = ((1.0 - fc) * g_vis).mean(dim=1)
            table[:, j, 1] = (fc * g_vis).mean(dim=1)

    logger.info(f"Integrated {resolution}x{resolution} BRDF LUT with {samples} samples per entry")
    return BrdfLut(table=table, samples=samples, seed=seed)


# Monte-Carlo oracle

class McEstimate(NamedTuple):
    value: torch.Tensor
    stderr: torch.Tensor


def render_equation_mc(
    mat: MaterialTensors,
    n: torch.Tensor,
    v: torch.Tensor,
    env: CubeMap,
    n_samples: int,
    seed: int = 0,
    model: BrdfModel = "metallic",
    lobes: Lobes = "full",
) -> McEstimate:
    """Outgoing radiance by a half-cosine, half-GGX sample mixture with balance-heuristic weights"""
    if n_samples < 16:
        raise InvalidArgumentError(f"n_samples must be >= 16, got {n_samples}")
    n = torch.as_tensor(n, dtype=DTYPE)
    v = torch.as_tensor(v, dtype=DTYPE)
    if dot(n, v) <= 0:
        raise InvalidArgumentError("render_equation_mc requires n.v > 0")

    gen = torch.Generator().manual_seed(seed)
    xi = torch.rand(n_samples, 2, generator=gen, dtype=DTYPE)
    n_cos = n_samples // 2
    frac_cos = n_cos / n_samples
    alpha = effective_alpha(mat.roughness)

    with torch.no_grad():
        l_cos = to_world(cosine_hemisphere(xi[:n_cos]), n)
        h_spec = to_world(ggx_half_vectors(xi[n_cos:], alpha), n)
        l_spec = 2.0 * dot(v, h_spec, keepdim=True) * h_spec - v
        l = torch.cat([l_cos, l_spec], dim=0)
        l = l / torch.linalg.norm(l, dim=-1, keepdim=True)

        n_dot_l = dot(n, l)
        h = safe_normalize(v + l)
        n_dot_h = torch.clamp(dot(n, h), 0.0, 1.0)
        v_dot_h = torch.clamp_min(dot(v, h).abs(), 1e-12)
        pdf_cos = torch.clamp_min(n_dot_l, 0.0) / torch.pi
        pdf_spec = ggx_ndf(mat.roughness, n_dot_h) * n_dot_h / (4.0 * v_dot_h)
        pdf = frac_cos * pdf_cos + (1.0 - frac_cos) * pdf_spec

        geom = ShadingGeometry(n=n.expand_as(l), v=v.expand_as(l), l=l, h=h)
        f = eval_brdf(mat, geom, model=model, lobes=lobes)
        radiance = sample(env, l, check=False)
        valid = (n_dot_l > 0) & (pdf > 0)
        contrib = f * radiance * (torch.clamp_min(n_dot_l, 0.0) / torch.clamp_min(pdf, 1e-300))[..., None]
        contrib = torch.where(valid[..., None], contrib, torch.zeros_like(contrib))

    value = contrib.mean(dim=0)
    stderr = contrib.std(dim=0) / (n_samples ** 0.5)
    return McEstimate(value=value, stderr=stderr)
