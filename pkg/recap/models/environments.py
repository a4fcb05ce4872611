from typing import Callable, Dict

import torch

from recap.config import DTYPE, SUPPORTED_ENVIRONMENTS
from recap.models.schemas import InvalidArgumentError
from recap.services.envmap import CubeMap, LatLongImage, cube_to_latlong, latlong_directions


def _rgb(*c: float) -> torch.Tensor:
    return torch.tensor(c, dtype=DTYPE)


def _lobe(dirs: torch.Tensor, axis, sharpness: float) -> torch.Tensor:
    a = torch.tensor(axis, dtype=DTYPE)
    a = a / torch.linalg.norm(a)
    return torch.exp(sharpness * ((dirs * a).sum(dim=-1, keepdim=True) - 1.0))


def _smoothstep(lo: float, hi: float, x: torch.Tensor) -> torch.Tensor:
    t = torch.clamp((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def sky_gradient(dirs: torch.Tensor) -> torch.Tensor:
    y = dirs[..., 1:2]
    sky = torch.lerp(_rgb(1.0, 0.85, 0.6), _rgb(0.3, 0.5, 1.2), torch.sqrt(torch.clamp(y, 0.0, 1.0)))
    return torch.lerp(_rgb(0.15, 0.12, 0.1).expand_as(dirs), sky, _smoothstep(-0.15, 0.15, y))


def three_point(dirs: torch.Tensor) -> torch.Tensor:
    return (
        _rgb(0.05, 0.05, 0.05)
        + _rgb(2.5, 2.3, 2.0) * _lobe(dirs, (1.0, 1.0, 1.0), 12.0)
        + _rgb(0.6, 0.7, 0.9) * _lobe(dirs, (-1.0, 0.3, 0.5), 6.0)
        + _rgb(1.5, 1.5, 1.8) * _lobe(dirs, (0.0, 0.5, -1.0), 10.0)
    )


def warm_sunset(dirs: torch.Tensor) -> torch.Tensor:
    y = dirs[..., 1:2]
    sky = _rgb(0.35, 0.2, 0.45) * (0.5 + 0.5 * torch.clamp(y, 0.0, 1.0))
    base = torch.lerp(_rgb(0.08, 0.05, 0.04).expand_as(dirs), sky, _smoothstep(-0.15, 0.1, y))
    return base + _rgb(6.0, 3.0, 1.0) * _lobe(dirs, (0.8, 0.15, 0.2), 40.0)


def cool_overcast(dirs: torch.Tensor) -> torch.Tensor:
    return _rgb(0.55, 0.65, 0.8) * (0.4 + 0.3 * (1.0 + dirs[..., 1:2]))


def constant_white(dirs: torch.Tensor) -> torch.Tensor:
    return torch.ones_like(dirs)


def black(dirs: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(dirs)


def single_hot_texel(face_size: int) -> CubeMap:
    """Faint ambient with one bright texel at the center of the +z face"""
    texels = torch.full((6, face_size, face_size, 3), 0.02, dtype=DTYPE)
    texels[4, face_size // 2, face_size // 2] = 50.0
    return CubeMap(texels)


RADIANCE_FUNCTIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "sky_gradient": sky_gradient,
    "three_point": three_point,
    "warm_sunset": warm_sunset,
    "cool_overcast": cool_overcast,
    "constant_white": constant_white,
    "black": black,
}


class EnvironmentConfig:
    """Named analytic lighting used by fixtures, tests and the validation suites"""

    @staticmethod
    def names():
        return list(SUPPORTED_ENVIRONMENTS.keys())

    @staticmethod
    def get_cube(name: str, face_size: int) -> CubeMap:
        EnvironmentConfig._check(name)
        if name == "single_hot_texel":
            return single_hot_texel(face_size)
        return CubeMap.from_function(face_size, RADIANCE_FUNCTIONS[name])

    @staticmethod
    def get_latlong(name: str, height: int) -> LatLongImage:
        EnvironmentConfig._check(name)
        if name == "single_hot_texel":
            return cube_to_latlong(single_hot_texel(max(4, height // 2)), height)
        return LatLongImage(RADIANCE_FUNCTIONS[name](latlong_directions(height)))

    @staticmethod
    def _check(name: str):
        if name not in SUPPORTED_ENVIRONMENTS:
            raise InvalidArgumentError(
                f"Unsupported environment '{name}'. Supported: {list(SUPPORTED_ENVIRONMENTS.keys())}"
            )
