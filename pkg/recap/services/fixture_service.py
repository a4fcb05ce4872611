"""Procedural toy scenes, camera rings and ground-truth views under named lighting."""
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import orjson
import torch

from recap.config import (
    CUBE_FACE_SIZE,
    DIFFUSE_FACE_SIZE,
    DTYPE,
    FIXTURE_HELDOUT_ENV,
    FIXTURE_IMAGE_SIZE,
    FIXTURE_TRAIN_ENVS,
    FIXTURE_VIEWS_PER_ENV,
)
from recap.models.environments import EnvironmentConfig
from recap.models.schemas import InvalidArgumentError, PostProcessConfig
from recap.models.training import TrainingSet
from recap.services.brdf import BrdfLut, MaterialTensors
from recap.services.envmap import CubeMap, LatLongImage, latlong_to_cube, prefilter
from recap.services.hdr_io import float_to_rgbe, read_png, read_transforms, rgbe_to_float, write_cameras, write_hdr, write_png, write_scene
from recap.services.splat import Camera, GaussianScene, render
from recap.utils.helpers import timing_decorator

logger = logging.getLogger(__name__)

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
SCENE_KINDS = ("sphere", "box", "plane")
GROUND_TRUTH_POSTPROCESS = "hdr_clip_gamma"


def quaternion_from_z(normals: torch.Tensor) -> torch.Tensor:
    """(N, 4) wxyz quaternions rotating +z onto each unit normal"""
    z = torch.tensor([0.0, 0.0, 1.0], dtype=normals.dtype).expand_as(normals)
    w = 1.0 + (normals * z).sum(dim=-1, keepdim=True)
    q = torch.cat([w, torch.linalg.cross(z, normals)], dim=-1)
    flipped = w[..., 0] < 1e-9
    q = torch.where(flipped[:, None], torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=normals.dtype), q)
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def _materials(positions: torch.Tensor, seed: int) -> MaterialTensors:
    """Smooth spatially varying materials with ||s|| + ||b|| < 1"""
    gen = torch.Generator().manual_seed(seed)
    phase = torch.rand(3, generator=gen, dtype=DTYPE) * 2.0 * math.pi
    wave = 0.5 + 0.5 * torch.sin(3.0 * positions + phase)
    basecolor = 0.1 + 0.35 * wave[:, [0, 1, 2]] * torch.tensor([1.0, 0.8, 0.6], dtype=DTYPE) + 0.05 * wave[:, [1, 2, 0]]
    tint_level = 0.04 + 0.08 * (0.5 + 0.5 * torch.cos(2.0 * positions[:, 1:2] + phase[0]))
    tint = tint_level * torch.tensor([1.0, 0.95, 0.9], dtype=DTYPE)
    roughness = 0.3 + 0.4 * (0.5 + 0.5 * torch.sin(2.5 * positions[:, 0] + 1.3 * positions[:, 2] + phase[1]))
    return MaterialTensors(basecolor, tint, roughness, torch.zeros_like(roughness))


def _flat_scene(positions: torch.Tensor, normals: torch.Tensor, tangent_sigma: float, opacity: float, seed: int) -> GaussianScene:
    n = positions.shape[0]
    scales = torch.tensor([tangent_sigma, tangent_sigma, 0.1 * tangent_sigma], dtype=DTYPE).expand(n, 3).clone()
    return GaussianScene(
        positions=positions,
        scales=scales,
        rotations=quaternion_from_z(normals),
        opacities=torch.full((n,), opacity, dtype=DTYPE),
        materials=_materials(positions, seed),
    )


def sphere_scene(n_points: int = 256, radius: float = 0.5, seed: int = 0) -> GaussianScene:
    i = torch.arange(n_points, dtype=DTYPE)
    y = 1.0 - 2.0 * (i + 0.5) / n_points
    r = torch.sqrt(1.0 - y * y)
    phi = i * GOLDEN_ANGLE
    normals = torch.stack([r * torch.cos(phi), y, r * torch.sin(phi)], dim=-1)
    sigma = 0.5 * radius * math.sqrt(4.0 * math.pi / n_points)
    return _flat_scene(radius * normals, normals, sigma, 0.95, seed)


def box_scene(points_per_edge: int = 6, half_size: float = 0.4, seed: int = 0) -> GaussianScene:
    grid = (torch.arange(points_per_edge, dtype=DTYPE) + 0.5) / points_per_edge * 2.0 - 1.0
    a, b = torch.meshgrid(grid, grid, indexing="ij")
    a, b = a.reshape(-1) * half_size, b.reshape(-1) * half_size
    positions, normals = [], []
    for axis in range(3):
        for sign in (1.0, -1.0):
            p = torch.zeros(a.shape[0], 3, dtype=DTYPE)
            p[:, axis] = sign * half_size
            p[:, (axis + 1) % 3] = a
            p[:, (axis + 2) % 3] = b
            nrm = torch.zeros_like(p)
            nrm[:, axis] = sign
            positions.append(p)
            normals.append(nrm)
    sigma = 0.8 * 2.0 * half_size / points_per_edge
    return _flat_scene(torch.cat(positions), torch.cat(normals), sigma, 0.95, seed)


def plane_scene(points_per_edge: int = 8, spacing: float = 0.1, z: float = 0.0, seed: int = 0) -> GaussianScene:
    """Coplanar flat Gaussians in the plane z = const, normals along +z"""
    grid = (torch.arange(points_per_edge, dtype=DTYPE) - (points_per_edge - 1) / 2.0) * spacing
    gx, gy = torch.meshgrid(grid, grid, indexing="ij")
    positions = torch.stack([gx.reshape(-1), gy.reshape(-1), torch.full_like(gx.reshape(-1), z)], dim=-1)
    normals = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE).expand_as(positions).clone()
    return _flat_scene(positions, normals, 0.8 * spacing, 0.99, seed)


def toy_scene(kind: str = "sphere", seed: int = 0, **kwargs) -> GaussianScene:
    builders = {"sphere": sphere_scene, "box": box_scene, "plane": plane_scene}
    if kind not in builders:
        raise InvalidArgumentError(f"Unknown scene kind '{kind}'. Supported: {list(SCENE_KINDS)}")
    return builders[kind](seed=seed, **kwargs)


def ring_cameras(
    n_views: int,
    radius: float = 2.0,
    elevation_deg: float = 20.0,
    size: int = FIXTURE_IMAGE_SIZE,
    fov_x_deg: float = 45.0,
    phase_deg: float = 0.0,
) -> List[Camera]:
    """Cameras evenly spaced in azimuth, all looking at the origin"""
    if n_views < 1:
        raise InvalidArgumentError(f"n_views must be >= 1, got {n_views}")
    elevation = math.radians(elevation_deg)
    cameras = []
    for i in range(n_views):
        azimuth = math.radians(phase_deg) + 2.0 * math.pi * i / n_views
        eye = (
            radius * math.cos(elevation) * math.cos(azimuth),
            radius * math.sin(elevation),
            radius * math.cos(elevation) * math.sin(azimuth),
        )
        cameras.append(Camera.look_at(eye, (0.0, 0.0, 0.0), size, size, math.radians(fov_x_deg)))
    return cameras


def quantize_rgbe(img: LatLongImage) -> LatLongImage:
    """The lighting exactly as it reads back from a Radiance file"""
    return LatLongImage(torch.as_tensor(rgbe_to_float(float_to_rgbe(img.texels.numpy())), dtype=DTYPE))


class FixtureService:
    """Builds self-contained multi-environment capture sets from known materials and lighting"""

    def __init__(
        self,
        lut: BrdfLut,
        image_size: int = FIXTURE_IMAGE_SIZE,
        face_size: int = CUBE_FACE_SIZE,
        diffuse_size: int = DIFFUSE_FACE_SIZE,
        prefilter_samples: int = 256,
        seed: int = 0,
    ):
        self.lut = lut
        self.image_size = image_size
        self.face_size = face_size
        self.diffuse_size = diffuse_size
        self.prefilter_samples = prefilter_samples
        self.seed = seed
        self.postprocess = PostProcessConfig.from_name(GROUND_TRUTH_POSTPROCESS)

    def environment(self, name: str) -> Tuple[LatLongImage, CubeMap]:
        latlong = quantize_rgbe(EnvironmentConfig.get_latlong(name, 4 * self.face_size))
        return latlong, latlong_to_cube(latlong, self.face_size)

    def render_views(self, scene: GaussianScene, cameras: Sequence[Camera], cube: CubeMap) -> List[torch.Tensor]:
        env = prefilter(cube, self.diffuse_size, samples_per_texel=self.prefilter_samples, seed=self.seed)
        with torch.no_grad():
            return [render(scene, cam, env, self.lut, self.postprocess).color for cam in cameras]

    @timing_decorator
    def training_set(
        self,
        scene: GaussianScene,
        env_names: Sequence[str],
        views_per_env: int = FIXTURE_VIEWS_PER_ENV,
        phase_deg: float = 0.0,
        elevation_deg: float = 20.0,
    ) -> TrainingSet:
        """Every environment is captured from the same ring of poses"""
        cameras = ring_cameras(views_per_env, elevation_deg=elevation_deg, size=self.image_size, phase_deg=phase_deg)
        views = []
        for name in env_names:
            _, cube = self.environment(name)
            views.append(list(zip(cameras, self.render_views(scene, cameras, cube))))
        logger.info(f"Rendered {len(env_names)} environment(s) x {views_per_env} views")
        return TrainingSet.from_lists(views, env_names)

    def heldout_set(self, scene: GaussianScene, env_name: str = FIXTURE_HELDOUT_ENV, n_views: int = 4) -> TrainingSet:
        """Poses between the training ring's, at a different elevation"""
        step = 360.0 / max(n_views, 1)
        return self.training_set(scene, [env_name], n_views, phase_deg=0.5 * step, elevation_deg=35.0)

    def write(
        self,
        out_dir: Union[str, Path],
        kind: str = "sphere",
        train_envs: Sequence[str] = FIXTURE_TRAIN_ENVS,
        heldout_env: Optional[str] = FIXTURE_HELDOUT_ENV,
        views_per_env: int = FIXTURE_VIEWS_PER_ENV,
    ) -> Dict[str, str]:
        """Scene file, per-environment view folders, HDR maps and a fixture.json index"""
        out = Path(out_dir)
        scene = toy_scene(kind, seed=self.seed)
        write_scene(scene, out / "scene.rcap")

        training = self.training_set(scene, train_envs, views_per_env)
        for i, views in enumerate(training.environments):
            self._write_views(out / "views" / f"env_{i}", views)
        for name in list(train_envs) + ([heldout_env] if heldout_env else []):
            write_hdr(self.environment(name)[0].texels, out / "envs" / f"{name}.hdr")

        index = {"scene": "scene.rcap", "views": "views", "train_envs": list(train_envs), "kind": kind, "seed": self.seed}
        if heldout_env:
            heldout = self.heldout_set(scene, heldout_env)
            self._write_views(out / "heldout", heldout.environments[0])
            index.update({"heldout_env": heldout_env, "heldout": "heldout"})
        (out / "fixture.json").write_bytes(orjson.dumps(index, option=orjson.OPT_INDENT_2))
        logger.info(f"Fixture written to {out}")
        return index

    @staticmethod
    def _write_views(folder: Path, views) -> None:
        names = [f"r_{i:03d}.png" for i in range(len(views))]
        for name, view in zip(names, views):
            write_png(view.target, folder / name)
        write_cameras([v.camera for v in views], folder / "transforms.json", names)


def load_view_folder(folder: Union[str, Path]) -> List[Tuple[Camera, torch.Tensor]]:
    folder = Path(folder)
    cameras, files = read_transforms(folder / "transforms.json")
    views = []
    for cam, name in zip(cameras, files):
        if name is None:
            raise InvalidArgumentError(f"{folder}: frame without file_path")
        image = read_png(folder / name)
        if image.shape[:2] != (cam.height, cam.width):
            raise InvalidArgumentError(f"{folder / name}: size {tuple(image.shape[:2])} does not match its camera")
        views.append((cam, image))
    return views


def load_training_set(views_dir: Union[str, Path], k: Optional[int] = None) -> TrainingSet:
    """Reads env_0 .. env_{k-1} under views_dir; all of them when k is None"""
    root = Path(views_dir)
    folders = sorted((p for p in root.glob("env_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
    if not folders:
        raise InvalidArgumentError(f"No env_<i> folders under {root}")
    if k is not None:
        if k < 1 or k > len(folders):
            raise InvalidArgumentError(f"Requested {k} environments but {root} holds {len(folders)}")
        folders = folders[:k]
    return TrainingSet.from_lists([load_view_folder(f) for f in folders], [f.name for f in folders])
