"""Dense software splatting: projection, depth-sorted alpha blending and geometric normals.

Cameras follow the OpenCV convention (x right, y down, z forward); pixel (row i,
column j) has its center at (j + 0.5, i + 0.5).
"""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from recap.config import (
    COVARIANCE_MAX_CONDITION,
    DEPTH_VALID_ALPHA,
    DTYPE,
    NEAR_PLANE,
    SCREEN_COV_FLOOR,
    TRANSMITTANCE_MIN,
    TRUNCATION_SIGMA,
)
from recap.models.schemas import (
    DegenerateCovarianceError,
    GaussianPoint,
    InvalidArgumentError,
    PostProcessConfig,
)
from recap.services.brdf import BrdfLut, MaterialTensors
from recap.services.envmap import PrefilteredEnv
from recap.services.shading import postprocess, shade
from recap.utils.helpers import dot, safe_normalize

logger = logging.getLogger(__name__)


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) quaternions in (w, x, y, z) order to (..., 3, 3) rotations"""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1),
    ], dim=-2)


def _check_conditioning(scales: torch.Tensor):
    s = scales.detach()
    condition = (s.max(dim=-1).values / s.min(dim=-1).values) ** 2
    if torch.any(condition > COVARIANCE_MAX_CONDITION):
        worst = float(condition.max())
        raise DegenerateCovarianceError(f"Covariance condition number {worst:.3e} exceeds {COVARIANCE_MAX_CONDITION:.0e}")


@dataclass(frozen=True)
class GaussianScene:
    """Column layout of a point cloud; row i of every tensor belongs to point i"""
    positions: torch.Tensor
    scales: torch.Tensor
    rotations: torch.Tensor
    opacities: torch.Tensor
    materials: MaterialTensors

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (self.positions, (n, 3)),
            "scales": (self.scales, (n, 3)),
            "rotations": (self.rotations, (n, 4)),
            "opacities": (self.opacities, (n,)),
            "basecolor": (self.materials.basecolor, (n, 3)),
            "tint": (self.materials.tint, (n, 3)),
            "roughness": (self.materials.roughness, (n,)),
            "metallic": (self.materials.metallic, (n,)),
        }
        for name, (tensor, expected) in shapes.items():
            if tuple(tensor.shape) != expected:
                raise InvalidArgumentError(f"Scene field '{name}' has shape {tuple(tensor.shape)}, expected {expected}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_points(cls, points: Sequence[GaussianPoint]) -> "GaussianScene":
        if not points:
            raise InvalidArgumentError("Scene must contain at least one point")
        return cls(
            positions=torch.tensor([p.position for p in points], dtype=DTYPE),
            scales=torch.tensor([p.scale for p in points], dtype=DTYPE),
            rotations=torch.tensor([p.rotation for p in points], dtype=DTYPE),
            opacities=torch.tensor([p.opacity for p in points], dtype=DTYPE),
            materials=MaterialTensors.from_params([p.material for p in points]),
        )

    def to_points(self) -> list:
        materials = self.materials.to_params()
        return [
            GaussianPoint(
                position=tuple(float(c) for c in self.positions[i]),
                scale=tuple(float(c) for c in self.scales[i]),
                rotation=tuple(float(c) for c in self.rotations[i] / torch.linalg.norm(self.rotations[i])),
                opacity=float(self.opacities[i]),
                material=materials[i],
            )
            for i in range(len(self))
        ]

    def with_materials(self, materials: MaterialTensors) -> "GaussianScene":
        return GaussianScene(self.positions, self.scales, self.rotations, self.opacities, materials)

    def permuted(self, order: torch.Tensor) -> "GaussianScene":
        return GaussianScene(
            self.positions[order], self.scales[order], self.rotations[order],
            self.opacities[order], self.materials.select(order),
        )

    def covariances(self) -> torch.Tensor:
        rot = quaternion_to_matrix(self.rotations)
        return rot @ torch.diag_embed(self.scales ** 2) @ rot.transpose(-1, -2)


@dataclass(frozen=True)
class Camera:
    """World-to-camera rigid transform plus pinhole intrinsics"""
    rotation: torch.Tensor
    translation: torch.Tensor
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        r = self.rotation
        if tuple(r.shape) != (3, 3) or tuple(self.translation.shape) != (3,):
            raise InvalidArgumentError("Camera rotation must be 3x3 and translation a 3-vector")
        if torch.max(torch.abs(r @ r.T - torch.eye(3, dtype=r.dtype))) > 1e-6:
            raise InvalidArgumentError("Camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError(f"Focal lengths must be positive, got ({self.fx}, {self.fy})")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError(f"Image size must be positive, got {self.width}x{self.height}")

    @property
    def center(self) -> torch.Tensor:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fov_x: float, up=(0.0, 1.0, 0.0)) -> "Camera":
        eye = torch.as_tensor(eye, dtype=DTYPE)
        forward = safe_normalize(torch.as_tensor(target, dtype=DTYPE) - eye)
        right = torch.linalg.cross(forward, torch.as_tensor(up, dtype=DTYPE))
        if torch.linalg.norm(right) < 1e-9:
            raise InvalidArgumentError("look_at: view direction is parallel to the up vector")
        right = right / torch.linalg.norm(right)
        down = torch.linalg.cross(forward, right)
        rotation = torch.stack([right, down, forward], dim=0)
        focal = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(rotation, -rotation @ eye, focal, focal, width / 2.0, height / 2.0, width, height)

    @classmethod
    def from_transform(cls, c2w_gl, fov_x: float, width: int, height: int) -> "Camera":
        """From a camera-to-world matrix in the OpenGL convention (looks down -z, +y up)"""
        c2w = torch.as_tensor(np.asarray(c2w_gl, dtype=np.float64), dtype=DTYPE)
        if tuple(c2w.shape) != (4, 4):
            raise InvalidArgumentError(f"transform_matrix must be 4x4, got {tuple(c2w.shape)}")
        c2w_cv = c2w[:3, :3] @ torch.diag(torch.tensor([1.0, -1.0, -1.0], dtype=DTYPE))
        rotation = c2w_cv.T
        focal = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(rotation, -rotation @ c2w[:3, 3], focal, focal, width / 2.0, height / 2.0, width, height)

    def to_transform(self) -> np.ndarray:
        c2w = np.eye(4)
        c2w[:3, :3] = (self.rotation.T @ torch.diag(torch.tensor([1.0, -1.0, -1.0], dtype=DTYPE))).numpy()
        c2w[:3, 3] = self.center.numpy()
        return c2w

    @property
    def fov_x(self) -> float:
        return 2.0 * math.atan(0.5 * self.width / self.fx)

    def pixel_centers(self) -> torch.Tensor:
        """(H, W, 2) pixel-center coordinates as (x, y)"""
        ys = torch.arange(self.height, dtype=DTYPE) + 0.5
        xs = torch.arange(self.width, dtype=DTYPE) + 0.5
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([gx, gy], dim=-1)


class Projection(NamedTuple):
    center: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor


class RenderedImage(NamedTuple):
    color: torch.Tensor
    depth: torch.Tensor
    alpha: torch.Tensor
    normal: torch.Tensor
    linear: torch.Tensor


# Single-point operations

def gaussian_weight(x, point: GaussianPoint) -> torch.Tensor:
    """exp(-d^2 / 2) with d the Mahalanobis distance of x from the mean"""
    scale = torch.tensor(point.scale, dtype=DTYPE)
    _check_conditioning(scale)
    rot = quaternion_to_matrix(torch.tensor(point.rotation, dtype=DTYPE))
    offset = torch.as_tensor(x, dtype=DTYPE) - torch.tensor(point.position, dtype=DTYPE)
    local = (rot.T @ offset) / scale
    return torch.exp(-0.5 * dot(local, local))


def _shortest_axes(rotations: torch.Tensor, scales: torch.Tensor, view_dirs: torch.Tensor) -> torch.Tensor:
    rot = quaternion_to_matrix(rotations)
    idx = torch.argmin(scales.detach(), dim=-1)
    axis = torch.gather(rot, 2, idx[:, None, None].expand(-1, 3, 1))[..., 0]
    facing = dot(axis, -view_dirs, keepdim=True) >= 0
    return torch.where(facing, axis, -axis)


def shortest_axis_normal(point: GaussianPoint, view_dir) -> torch.Tensor:
    """Rotated minimal-scale axis, oriented against view_dir (camera to point)"""
    normal = _shortest_axes(
        torch.tensor([point.rotation], dtype=DTYPE),
        torch.tensor([point.scale], dtype=DTYPE),
        torch.as_tensor(view_dir, dtype=DTYPE)[None],
    )
    return normal[0]


def _project(positions: torch.Tensor, covariances: torch.Tensor, cam: Camera):
    p = positions @ cam.rotation.T + cam.translation
    z = p[:, 2]
    visible = z > NEAR_PLANE
    zs = torch.where(visible, z, torch.ones_like(z))
    center = torch.stack([cam.fx * p[:, 0] / zs + cam.cx, cam.fy * p[:, 1] / zs + cam.cy], dim=-1)

    jac = torch.zeros(p.shape[0], 2, 3, dtype=p.dtype)
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * p[:, 0] / (zs * zs)
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * p[:, 1] / (zs * zs)
    t = jac @ cam.rotation
    cov2d = t @ covariances @ t.transpose(-1, -2) + SCREEN_COV_FLOOR * torch.eye(2, dtype=p.dtype)
    return center, cov2d, z, visible


def project(point: GaussianPoint, cam: Camera) -> Optional[Projection]:
    """Screen-space mean, regularized 2x2 covariance and camera depth; None when culled"""
    scene = GaussianScene.from_points([point])
    _check_conditioning(scene.scales)
    center, cov2d, z, visible = _project(scene.positions, scene.covariances(), cam)
    if not bool(visible[0]):
        return None
    return Projection(center[0], cov2d[0], z[0])


# Rasterization

def _blend_weights(scene: GaussianScene, cam: Camera):
    """Per (point, pixel) blending weights in front-to-back order, plus the order and depths"""
    _check_conditioning(scene.scales)
    center, cov2d, z, visible = _project(scene.positions, scene.covariances(), cam)

    order = torch.sort(torch.where(visible, z, torch.full_like(z, float("inf"))).detach(), stable=True).indices
    center, cov2d, z, visible = center[order], cov2d[order], z[order], visible[order]
    opacity = scene.opacities[order]

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    pixels = cam.pixel_centers().reshape(-1, 2)
    dx = pixels[None, :, 0] - center[:, None, 0]
    dy = pixels[None, :, 1] - center[:, None, 1]
    mahalanobis = (c[:, None] * dx * dx - 2.0 * b[:, None] * dx * dy + a[:, None] * dy * dy) / det[:, None]

    inside = (mahalanobis <= TRUNCATION_SIGMA ** 2) & visible[:, None]
    footprint = torch.where(inside, torch.exp(-0.5 * torch.clamp_max(mahalanobis, TRUNCATION_SIGMA ** 2)), torch.zeros_like(mahalanobis))
    alpha = opacity[:, None] * footprint

    ones = torch.ones_like(alpha[:1])
    transmittance = torch.cumprod(torch.cat([ones, 1.0 - alpha[:-1]], dim=0), dim=0)
    weights = alpha * transmittance
    weights = torch.where(transmittance.detach() >= TRANSMITTANCE_MIN, weights, torch.zeros_like(weights))
    return weights, order, z


def _camera_normals(scene: GaussianScene, cam: Camera, order: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """World-space normals facing the camera and unit vectors from each point to the camera, in sorted order"""
    positions = scene.positions[order]
    to_camera = safe_normalize(cam.center - positions)
    normals = _shortest_axes(scene.rotations[order], scene.scales[order], -to_camera)
    return normals, to_camera


def _geometry_images(weights: torch.Tensor, z: torch.Tensor, normals_world: torch.Tensor, cam: Camera):
    h, w = cam.height, cam.width
    alpha = weights.sum(dim=0)
    covered = alpha > 0
    depth = torch.where(covered, (weights * z[:, None]).sum(dim=0) / torch.where(covered, alpha, torch.ones_like(alpha)), torch.zeros_like(alpha))
    normals_cam = normals_world @ cam.rotation.T
    blended = weights.T @ normals_cam
    normal = torch.where(covered[:, None], safe_normalize(blended), torch.zeros_like(blended))
    return depth.reshape(h, w), alpha.reshape(h, w), normal.reshape(h, w, 3)


def render(
    scene: GaussianScene,
    cam: Camera,
    env: PrefilteredEnv,
    lut: BrdfLut,
    cfg: PostProcessConfig,
    shading_model: str = "proposed",
    materials: Optional[MaterialTensors] = None,
) -> RenderedImage:
    """Shade every point once, then composite front to back over a black background"""
    if len(scene) == 0:
        raise InvalidArgumentError("Cannot render an empty scene")
    weights, order, z = _blend_weights(scene, cam)
    normals, to_camera = _camera_normals(scene, cam, order)

    mat = (materials if materials is not None else scene.materials).select(order)
    colors = shade(shading_model, mat, normals, to_camera, env, lut)
    colors = torch.clamp_min(colors, 0.0)

    linear = (weights.T @ colors).reshape(cam.height, cam.width, 3)
    depth, alpha, normal = _geometry_images(weights, z, normals, cam)
    return RenderedImage(color=postprocess(linear, cfg), depth=depth, alpha=alpha, normal=normal, linear=linear)


def render_geometry(scene: GaussianScene, cam: Camera) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(depth, alpha, blended camera-space normal) without shading"""
    weights, order, z = _blend_weights(scene, cam)
    normals, _ = _camera_normals(scene, cam, order)
    return _geometry_images(weights, z, normals, cam)


# Depth-normal consistency

def depth_to_normal(
    depth: torch.Tensor,
    cam: Camera,
    alpha: Optional[torch.Tensor] = None,
    threshold: float = DEPTH_VALID_ALPHA,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Camera-space normals from central differences of the back-projected depth, with a validity mask"""
    h, w = depth.shape
    pix = cam.pixel_centers()
    rays = torch.stack([
        (pix[..., 0] - cam.cx) / cam.fx,
        (pix[..., 1] - cam.cy) / cam.fy,
        torch.ones_like(depth),
    ], dim=-1)
    points = rays * depth[..., None]

    normals = torch.zeros(h, w, 3, dtype=depth.dtype)
    valid = torch.zeros(h, w, dtype=torch.bool)
    if h < 3 or w < 3:
        return normals, valid

    tangent_x = points[1:-1, 2:] - points[1:-1, :-2]
    tangent_y = points[2:, 1:-1] - points[:-2, 1:-1]
    n = safe_normalize(torch.linalg.cross(tangent_x, tangent_y))
    facing = dot(n, -points[1:-1, 1:-1], keepdim=True) >= 0
    normals[1:-1, 1:-1] = torch.where(facing, n, -n)

    mask = alpha > threshold if alpha is not None else depth > 0
    interior = (
        mask[1:-1, 1:-1] & mask[1:-1, 2:] & mask[1:-1, :-2] & mask[2:, 1:-1] & mask[:-2, 1:-1]
    )
    valid[1:-1, 1:-1] = interior
    return normals, valid


def depth_normal_error(normal_image: torch.Tensor, derived: torch.Tensor, valid: torch.Tensor, lambda_dn: float) -> torch.Tensor:
    """lambda * mean over valid pixels of ||n - n_hat||^2"""
    if not bool(valid.any()):
        logger.warning("Depth-normal loss has no valid pixels; returning zero")
        return torch.zeros((), dtype=normal_image.dtype)
    diff = normal_image[valid] - derived[valid]
    return lambda_dn * dot(diff, diff).mean()


def loss_depth_normal(scene: GaussianScene, cam: Camera, lambda_dn: float) -> torch.Tensor:
    if lambda_dn == 0:
        return torch.zeros((), dtype=DTYPE)
    depth, alpha, normal = render_geometry(scene, cam)
    derived, valid = depth_to_normal(depth, cam, alpha)
    return depth_normal_error(normal, derived, valid, lambda_dn)
