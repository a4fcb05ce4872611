"""Cube-map lighting: texel geometry, sampling, lat-long conversion and prefiltering.

Convention: right-handed, +y up. Faces are stored in the order +x, -x, +y, -y, +z, -z
as a (6, N, N, 3) tensor indexed [face, row, column]. A face is spanned by its
(forward, right, up) basis; the texel at column coordinate u and row coordinate v
(both in [0, 1), row 0 at the top) looks along

    forward + (2u - 1) * right + (1 - 2v) * up.

Lat-long images put the +y pole on row 0 and measure the azimuth from +x towards +z.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple

import torch

from recap.config import (
    DIFFUSE_SOURCE_MAX,
    DTYPE,
    SPECULAR_MIN_FACE_SIZE,
    SPECULAR_ROUGHNESS_LEVELS,
    SPECULAR_SAMPLES,
)
from recap.models.schemas import InvalidArgumentError
from recap.utils.helpers import dot, timing_decorator
from recap.utils.sampling import ggx_half_vectors, hammersley, to_world

logger = logging.getLogger(__name__)

FACE_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")

# (forward, right, up) per face
FACE_BASES = torch.tensor(
    [
        [[1, 0, 0], [0, 0, -1], [0, 1, 0]],
        [[-1, 0, 0], [0, 0, 1], [0, 1, 0]],
        [[0, 1, 0], [1, 0, 0], [0, 0, -1]],
        [[0, -1, 0], [1, 0, 0], [0, 0, 1]],
        [[0, 0, 1], [1, 0, 0], [0, 1, 0]],
        [[0, 0, -1], [-1, 0, 0], [0, 1, 0]],
    ],
    dtype=DTYPE,
)

UNIT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class CubeMap:
    texels: torch.Tensor

    def __post_init__(self):
        t = self.texels
        if t.dim() != 4 or t.shape[0] != 6 or t.shape[1] != t.shape[2] or t.shape[3] != 3:
            raise InvalidArgumentError(f"Cube map texels must have shape (6, N, N, 3), got {tuple(t.shape)}")

    @property
    def face_size(self) -> int:
        return self.texels.shape[1]

    @classmethod
    def constant(cls, face_size: int, value, dtype: torch.dtype = DTYPE) -> "CubeMap":
        rgb = torch.as_tensor(value, dtype=dtype)
        if rgb.dim() == 0:
            rgb = rgb.expand(3)
        return cls(rgb.expand(6, face_size, face_size, 3).clone())

    @classmethod
    def from_function(cls, face_size: int, fn: Callable[[torch.Tensor], torch.Tensor]) -> "CubeMap":
        """Evaluate an RGB radiance function of direction at every texel center"""
        return cls(fn(cube_directions(face_size)))

    def project_positive(self, upper: Optional[float] = None) -> "CubeMap":
        return CubeMap(torch.clamp(self.texels, min=0.0, max=upper))

    def scaled(self, a: float) -> "CubeMap":
        return CubeMap(self.texels * a)

    def detach(self) -> "CubeMap":
        return CubeMap(self.texels.detach())


@dataclass(frozen=True)
class LatLongImage:
    texels: torch.Tensor

    def __post_init__(self):
        t = self.texels
        if t.dim() != 3 or t.shape[2] != 3:
            raise InvalidArgumentError(f"Lat-long texels must have shape (H, W, 3), got {tuple(t.shape)}")
        if t.shape[1] != 2 * t.shape[0]:
            raise InvalidArgumentError(f"Lat-long width must be twice the height, got {t.shape[1]}x{t.shape[0]}")

    @property
    def height(self) -> int:
        return self.texels.shape[0]

    @property
    def width(self) -> int:
        return self.texels.shape[1]


@dataclass(frozen=True)
class PrefilteredEnv:
    diffuse: CubeMap
    specular: Tuple[Tuple[float, CubeMap], ...]

    def __post_init__(self):
        if not self.specular:
            raise InvalidArgumentError("Specular chain needs at least one level")
        roughness = [r for r, _ in self.specular]
        sizes = [m.face_size for _, m in self.specular]
        if roughness[0] != 0.0:
            raise InvalidArgumentError("Specular level 0 must have roughness 0")
        if any(b <= a for a, b in zip(roughness, roughness[1:])):
            raise InvalidArgumentError(f"Specular roughness levels must increase strictly: {roughness}")
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise InvalidArgumentError(f"Specular face sizes must not increase: {sizes}")

    @property
    def roughness_levels(self) -> Tuple[float, ...]:
        return tuple(r for r, _ in self.specular)

    def scaled(self, a: float) -> "PrefilteredEnv":
        return PrefilteredEnv(self.diffuse.scaled(a), tuple((r, m.scaled(a)) for r, m in self.specular))


# Texel geometry

def face_uv_to_direction(face: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    basis = FACE_BASES.to(u.dtype)[face]
    d = basis[..., 0, :] + (2.0 * u - 1.0)[..., None] * basis[..., 1, :] + (1.0 - 2.0 * v)[..., None] * basis[..., 2, :]
    return d / torch.linalg.norm(d, dim=-1, keepdim=True)


def texel_direction(face: int, u: float, v: float) -> torch.Tensor:
    if not 0 <= face < 6:
        raise InvalidArgumentError(f"Face index must be in 0..5, got {face}")
    return face_uv_to_direction(
        torch.tensor(face), torch.tensor(u, dtype=DTYPE), torch.tensor(v, dtype=DTYPE)
    )


def direction_to_texel(dirs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Inverse of face_uv_to_direction: the dominant axis picks the face (ties: x, then y, then z)"""
    axis = torch.argmax(dirs.abs(), dim=-1)
    major = torch.gather(dirs, -1, axis[..., None])[..., 0]
    face = 2 * axis + (major < 0).long()
    basis = FACE_BASES.to(dirs.dtype)[face]
    denom = major.abs()
    x = dot(dirs, basis[..., 1, :]) / denom
    y = dot(dirs, basis[..., 2, :]) / denom
    return face, (x + 1.0) * 0.5, (1.0 - y) * 0.5


def texel_centers(face_size: int, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    return (torch.arange(face_size, dtype=dtype) + 0.5) / face_size


@lru_cache(maxsize=32)
def _cube_directions(face_size: int, dtype: torch.dtype) -> torch.Tensor:
    c = texel_centers(face_size, dtype)
    v, u = torch.meshgrid(c, c, indexing="ij")
    face = torch.arange(6)[:, None, None].expand(6, face_size, face_size)
    return face_uv_to_direction(face, u.expand(6, -1, -1), v.expand(6, -1, -1))


def cube_directions(face_size: int, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Unit directions through every texel center, shape (6, N, N, 3)"""
    return _cube_directions(face_size, dtype)


@lru_cache(maxsize=32)
def _texel_solid_angles(face_size: int, dtype: torch.dtype) -> torch.Tensor:
    edges = torch.linspace(-1.0, 1.0, face_size + 1, dtype=dtype)

    def area(x, y):
        return torch.atan2(x * y, torch.sqrt(x * x + y * y + 1.0))

    x0, x1 = edges[None, :-1], edges[None, 1:]
    y0, y1 = edges[:-1, None], edges[1:, None]
    return area(x1, y1) - area(x0, y1) - area(x1, y0) + area(x0, y0)


def texel_solid_angles(face_size: int, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Exact solid angle of each texel of one face, shape (N, N); identical for all faces"""
    return _texel_solid_angles(face_size, dtype)


def rotate_faces(cube: CubeMap, turns: int = 1) -> CubeMap:
    """Rotate the map by turns * 90 degrees about +y (x -> z -> -x -> -z)"""
    rotation = torch.tensor([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]], dtype=cube.texels.dtype)
    rotation = torch.linalg.matrix_power(rotation, turns % 4)
    # new(d) = old(R^T d): look up each target texel's pre-image
    dirs = cube_directions(cube.face_size, cube.texels.dtype)
    source = dirs @ rotation
    face, u, v = direction_to_texel(source)
    n = cube.face_size
    col = torch.clamp(torch.floor(u * n), 0, n - 1).long()
    row = torch.clamp(torch.floor(v * n), 0, n - 1).long()
    return CubeMap(cube.texels[face, row, col])


# Sampling

def _check_unit(dirs: torch.Tensor):
    norms = torch.linalg.norm(dirs.detach(), dim=-1)
    if torch.any((norms - 1.0).abs() > UNIT_TOLERANCE):
        worst = (norms - 1.0).abs().max().item()
        raise InvalidArgumentError(f"Sample directions must be unit length (worst deviation {worst:.3e})")


def _bilinear_face(texels: torch.Tensor, face: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    n = texels.shape[1]
    px = u * n - 0.5
    py = v * n - 0.5
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    x0 = x0.long()
    y0 = y0.long()
    x1 = torch.clamp(x0 + 1, 0, n - 1)
    y1 = torch.clamp(y0 + 1, 0, n - 1)
    x0 = torch.clamp(x0, 0, n - 1)
    y0 = torch.clamp(y0, 0, n - 1)
    return (
        texels[face, y0, x0] * (1 - fx) * (1 - fy)
        + texels[face, y0, x1] * fx * (1 - fy)
        + texels[face, y1, x0] * (1 - fx) * fy
        + texels[face, y1, x1] * fx * fy
    )


def sample(cube: CubeMap, dirs: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Bilinear radiance lookup within the dominant-axis face; edges clamp, seams are not filtered"""
    if check:
        _check_unit(dirs)
    face, u, v = direction_to_texel(dirs.detach())
    return _bilinear_face(cube.texels, face, u, v)


def resample(cube: CubeMap, face_size: int) -> CubeMap:
    """Box-average when the size divides evenly, bilinear lookup otherwise"""
    n = cube.face_size
    if face_size == n:
        return cube
    if face_size < n and n % face_size == 0:
        f = n // face_size
        t = cube.texels.reshape(6, face_size, f, face_size, f, 3).mean(dim=(2, 4))
        return CubeMap(t)
    return CubeMap(sample(cube, cube_directions(face_size, cube.texels.dtype), check=False))


# Lat-long conversion

def latlong_directions(height: int, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    theta = (torch.arange(height, dtype=dtype) + 0.5) * torch.pi / height
    phi = (torch.arange(2 * height, dtype=dtype) + 0.5) * 2.0 * torch.pi / (2 * height)
    theta, phi = torch.meshgrid(theta, phi, indexing="ij")
    return torch.stack([torch.sin(theta) * torch.cos(phi), torch.cos(theta), torch.sin(theta) * torch.sin(phi)], dim=-1)


def sample_latlong(img: LatLongImage, dirs: torch.Tensor) -> torch.Tensor:
    h, w = img.height, img.width
    phi = torch.remainder(torch.atan2(dirs[..., 2], dirs[..., 0]), 2.0 * torch.pi)
    theta = torch.acos(torch.clamp(dirs[..., 1], -1.0, 1.0))
    px = phi / (2.0 * torch.pi) * w - 0.5
    py = theta / torch.pi * h - 0.5
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    x0 = x0.long()
    y0 = y0.long()
    x1 = torch.remainder(x0 + 1, w)
    x0 = torch.remainder(x0, w)
    y1 = torch.clamp(y0 + 1, 0, h - 1)
    y0 = torch.clamp(y0, 0, h - 1)
    t = img.texels
    return (
        t[y0, x0] * (1 - fx) * (1 - fy)
        + t[y0, x1] * fx * (1 - fy)
        + t[y1, x0] * (1 - fx) * fy
        + t[y1, x1] * fx * fy
    )


def latlong_to_cube(img: LatLongImage, face_size: int) -> CubeMap:
    """Supersampled so each texel averages the lat-long pixels it covers (up to 8x8 taps)"""
    if face_size < 1:
        raise InvalidArgumentError(f"face_size must be positive, got {face_size}")
    factor = int(min(8, max(1, -(-img.width // (4 * face_size)))))
    fine = CubeMap(sample_latlong(img, cube_directions(face_size * factor, img.texels.dtype)))
    return resample(fine, face_size)


def cube_to_latlong(cube: CubeMap, height: int) -> LatLongImage:
    if height < 1:
        raise InvalidArgumentError(f"height must be positive, got {height}")
    return LatLongImage(sample(cube, latlong_directions(height, cube.texels.dtype), check=False))


# Diffuse prefilter

@lru_cache(maxsize=8)
def _diffuse_operator(source_size: int, out_size: int, dtype: torch.dtype) -> torch.Tensor:
    """(6*out^2, 6*src^2) cosine-weighted averaging matrix with rows summing to one"""
    n_out = cube_directions(out_size, dtype).reshape(-1, 3)
    l_src = cube_directions(source_size, dtype).reshape(-1, 3)
    d_omega = texel_solid_angles(source_size, dtype).reshape(1, -1).repeat(1, 6)
    weights = torch.clamp_min(n_out @ l_src.T, 0.0) * d_omega
    return weights / weights.sum(dim=1, keepdim=True)


def prefilter_diffuse(cube: CubeMap, out_size: int) -> CubeMap:
    """Irradiance map E_d: per-direction cosine-weighted average of the source radiance.

    The row normalizer equals pi up to discretization, so E_d(n) is
    sum(L * max(n.l, 0) * dw) / pi with the constant-map case reproduced exactly.
    Differentiable; the operator is linear in the source texels.
    """
    if out_size < 4:
        raise InvalidArgumentError(f"Diffuse out_size must be >= 4, got {out_size}")
    source = cube
    if cube.face_size > DIFFUSE_SOURCE_MAX:
        source = resample(cube, DIFFUSE_SOURCE_MAX)
    op = _diffuse_operator(source.face_size, out_size, source.texels.dtype)
    radiance = source.texels.reshape(-1, 3)
    return CubeMap((op @ radiance).reshape(6, out_size, out_size, 3))


# Specular prefilter

def default_specular_levels(base_size: int) -> Tuple[Tuple[float, int], ...]:
    floor = min(base_size, SPECULAR_MIN_FACE_SIZE)
    return tuple((r, max(base_size >> i, floor)) for i, r in enumerate(SPECULAR_ROUGHNESS_LEVELS))


def _validate_levels(levels: Sequence[Tuple[float, int]]):
    if not levels:
        raise InvalidArgumentError("At least one specular level is required")
    roughness = [r for r, _ in levels]
    if roughness[0] != 0.0:
        raise InvalidArgumentError(f"Specular levels must start at roughness 0, got {roughness[0]}")
    if any(b <= a for a, b in zip(roughness, roughness[1:])):
        raise InvalidArgumentError(f"Specular roughness levels must increase strictly: {roughness}")
    if any(r > 1.0 for r in roughness):
        raise InvalidArgumentError(f"Specular roughness levels must lie in [0, 1]: {roughness}")


@torch.no_grad()
def _ggx_convolve(cube: CubeMap, roughness: float, face_size: int, samples: int, seed: int) -> CubeMap:
    from recap.services.brdf import effective_alpha

    normals = cube_directions(face_size, cube.texels.dtype).reshape(-1, 3)
    xi = hammersley(samples, seed).to(cube.texels.dtype)
    alpha = effective_alpha(torch.tensor(roughness, dtype=cube.texels.dtype))
    h_local = ggx_half_vectors(xi, alpha)

    out = torch.empty(normals.shape[0], 3, dtype=cube.texels.dtype)
    chunk = max(1, (1 << 21) // samples)
    for start in range(0, normals.shape[0], chunk):
        n = normals[start:start + chunk, None, :]
        h = to_world(h_local[None, :, :], n)
        n_dot_h = dot(n, h, keepdim=True)
        l = 2.0 * n_dot_h * h - n
        weight = torch.clamp_min(dot(n, l), 0.0)
        l = l / torch.linalg.norm(l, dim=-1, keepdim=True)
        radiance = sample(cube, l, check=False)
        out[start:start + chunk] = (radiance * weight[..., None]).sum(dim=1) / weight.sum(dim=1, keepdim=True)
    return CubeMap(out.reshape(6, face_size, face_size, 3))


def prefilter_specular(
    cube: CubeMap,
    levels: Optional[Sequence[Tuple[float, int]]] = None,
    samples_per_texel: int = SPECULAR_SAMPLES,
    seed: int = 0,
) -> Tuple[Tuple[float, CubeMap], ...]:
    """GGX-prefiltered chain with normal = view = reflection; level 0 is a resample of the source"""
    if samples_per_texel < 1:
        raise InvalidArgumentError(f"samples_per_texel must be >= 1, got {samples_per_texel}")
    levels = tuple(levels) if levels is not None else default_specular_levels(cube.face_size)
    _validate_levels(levels)

    chain = []
    source = cube.detach()
    for roughness, size in levels:
        if roughness == 0.0:
            chain.append((0.0, resample(source, size)))
        else:
            chain.append((float(roughness), _ggx_convolve(source, roughness, size, samples_per_texel, seed)))
    return tuple(chain)


@timing_decorator
def prefilter(
    cube: CubeMap,
    diffuse_size: int,
    levels: Optional[Sequence[Tuple[float, int]]] = None,
    samples_per_texel: int = SPECULAR_SAMPLES,
    seed: int = 0,
) -> PrefilteredEnv:
    return PrefilteredEnv(
        diffuse=prefilter_diffuse(cube, diffuse_size),
        specular=prefilter_specular(cube, levels, samples_per_texel, seed),
    )


def query_specular(env: PrefilteredEnv, dirs: torch.Tensor, roughness: torch.Tensor) -> torch.Tensor:
    """Sample the two bracketing roughness levels and interpolate linearly in roughness"""
    roughness = torch.as_tensor(roughness, dtype=dirs.dtype)
    if torch.any((roughness < 0.0) | (roughness > 1.0)):
        logger.debug("query_specular: roughness outside [0, 1] clamped")
    roughness = torch.clamp(roughness, 0.0, 1.0).expand(dirs.shape[:-1])

    levels = torch.tensor(env.roughness_levels, dtype=dirs.dtype)
    values = torch.stack([sample(m, dirs, check=False) for _, m in env.specular], dim=0)
    if len(env.specular) == 1:
        return values[0]

    idx = torch.clamp(torch.searchsorted(levels, roughness.detach(), right=True) - 1, 0, len(levels) - 2)
    lo = levels[idx]
    hi = levels[idx + 1]
    t = ((roughness - lo) / (hi - lo))[..., None]

    def gather(k: torch.Tensor) -> torch.Tensor:
        return torch.gather(values, 0, k[None, ..., None].expand(1, *k.shape, 3))[0]

    v_lo = gather(idx)
    v_hi = gather(idx + 1)
    blended = v_lo * (1.0 - t) + v_hi * t

    exact_idx = torch.searchsorted(levels, roughness.detach()).clamp(max=len(levels) - 1)
    exact = (levels[exact_idx] == roughness.detach())[..., None]
    return torch.where(exact, gather(exact_idx), blended)
