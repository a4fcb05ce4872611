import math

import pytest
import torch

from recap.config import DTYPE
from recap.services.brdf import MaterialTensors, integrate_brdf_lut
from recap.services.envmap import CubeMap, default_specular_levels, prefilter
from recap.services.splat import Camera


def smooth_sky(dirs: torch.Tensor) -> torch.Tensor:
    """Positive, slowly varying radiance"""
    base = torch.tensor([0.6, 0.55, 0.5], dtype=dirs.dtype)
    return base + 0.2 * dirs[..., 1:2] + 0.05 * dirs[..., 0:1]


@pytest.fixture(scope="session")
def small_lut():
    return integrate_brdf_lut(16, 256)


@pytest.fixture(scope="session")
def full_lut():
    return integrate_brdf_lut()


@pytest.fixture
def white_cube():
    return CubeMap.constant(8, 1.0)


@pytest.fixture
def sky_cube():
    return CubeMap.from_function(8, smooth_sky)


@pytest.fixture
def sky_env(sky_cube):
    return prefilter(sky_cube, 4, default_specular_levels(8), samples_per_texel=64)


@pytest.fixture
def white_env(white_cube):
    return prefilter(white_cube, 4, default_specular_levels(8), samples_per_texel=64)


@pytest.fixture
def front_camera():
    """16x16 camera on +z looking at the origin"""
    return Camera.look_at((0.0, 0.0, 2.0), (0.0, 0.0, 0.0), 16, 16, math.radians(40.0))


def make_materials(count: int, basecolor=0.5, tint=0.04, roughness=0.5, metallic=0.0) -> MaterialTensors:
    return MaterialTensors(
        basecolor=torch.full((count, 3), basecolor, dtype=DTYPE),
        tint=torch.full((count, 3), tint, dtype=DTYPE),
        roughness=torch.full((count,), roughness, dtype=DTYPE),
        metallic=torch.full((count,), metallic, dtype=DTYPE),
    )
