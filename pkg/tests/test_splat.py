import math

import pytest
import torch

from recap.config import DTYPE
from recap.models.schemas import DegenerateCovarianceError, GaussianPoint, InvalidArgumentError, PostProcessConfig
from recap.services.brdf import MaterialTensors
from recap.services.envmap import CubeMap, PrefilteredEnv, default_specular_levels, prefilter, prefilter_diffuse
from recap.services.fixture_service import plane_scene
from recap.services.shading import postprocess, shade_proposed
from recap.services.splat import (
    Camera,
    GaussianScene,
    depth_normal_error,
    depth_to_normal,
    gaussian_weight,
    loss_depth_normal,
    project,
    render,
    render_geometry,
    shortest_axis_normal,
)
from tests.conftest import make_materials

HALF = math.sqrt(0.5)


def _scene(positions, scale=(0.3, 0.3, 0.03), opacity=0.9) -> GaussianScene:
    n = len(positions)
    return GaussianScene(
        positions=torch.tensor(positions, dtype=DTYPE),
        scales=torch.tensor([scale] * n, dtype=DTYPE),
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]] * n, dtype=DTYPE),
        opacities=torch.full((n,), opacity, dtype=DTYPE),
        materials=make_materials(n, basecolor=0.4, tint=0.05, roughness=0.5),
    )


class TestGaussianPoint:
    def test_weight_at_mean_and_one_sigma(self):
        point = GaussianPoint(position=(0.0, 0.0, 0.0), scale=(1.0, 2.0, 3.0))
        assert math.isclose(float(gaussian_weight((0.0, 0.0, 0.0), point)), 1.0)
        assert math.isclose(float(gaussian_weight((1.0, 0.0, 0.0), point)), math.exp(-0.5), rel_tol=1e-12)
        assert math.isclose(float(gaussian_weight((0.0, 2.0, 0.0), point)), math.exp(-0.5), rel_tol=1e-12)

    def test_degenerate_covariance_rejected(self):
        point = GaussianPoint(position=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 1e-7))
        with pytest.raises(DegenerateCovarianceError):
            gaussian_weight((0.0, 0.0, 0.0), point)

    def test_invalid_point_rejected(self):
        with pytest.raises(ValueError):
            GaussianPoint(position=(0.0, 0.0, 0.0), scale=(1.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            GaussianPoint(position=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0), rotation=(2.0, 0.0, 0.0, 0.0))

    def test_shortest_axis_faces_the_camera(self):
        point = GaussianPoint(position=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 0.1))
        toward_minus_z = shortest_axis_normal(point, (0.0, 0.0, -1.0))
        toward_plus_z = shortest_axis_normal(point, (0.0, 0.0, 1.0))
        assert torch.allclose(toward_minus_z, torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE))
        assert torch.allclose(toward_plus_z, torch.tensor([0.0, 0.0, -1.0], dtype=DTYPE))

    def test_shortest_axis_follows_rotation(self):
        point = GaussianPoint(position=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 0.1), rotation=(HALF, HALF, 0.0, 0.0))
        normal = shortest_axis_normal(point, (0.0, 1.0, 0.0))
        assert torch.allclose(normal, torch.tensor([0.0, -1.0, 0.0], dtype=DTYPE), atol=1e-12)


class TestCamera:
    def test_projection_on_axis(self):
        cam = Camera.look_at((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 32, 32, math.radians(60.0))
        sigma = 0.1
        proj = project(GaussianPoint(position=(0.0, 0.0, 2.0), scale=(sigma, sigma, sigma)), cam)
        focal = 16.0 / math.tan(math.radians(30.0))
        expected = (focal * sigma / 2.0) ** 2 + 0.3
        assert torch.allclose(proj.center, torch.tensor([16.0, 16.0], dtype=DTYPE), atol=1e-12)
        assert math.isclose(float(proj.cov2d[0, 0]), expected, rel_tol=1e-12)
        assert math.isclose(float(proj.cov2d[1, 1]), expected, rel_tol=1e-12)
        assert abs(float(proj.cov2d[0, 1])) < 1e-12
        assert math.isclose(float(proj.depth), 2.0, rel_tol=1e-12)

    def test_points_behind_the_camera_are_culled(self):
        cam = Camera.look_at((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 32, 32, math.radians(60.0))
        assert project(GaussianPoint(position=(0.0, 0.0, -1.0), scale=(0.1, 0.1, 0.1)), cam) is None

    def test_image_axes_follow_opencv(self, front_camera):
        """x right, y down, z forward"""
        rot = front_camera.rotation
        assert torch.allclose(rot[2], torch.tensor([0.0, 0.0, -1.0], dtype=DTYPE))
        assert torch.allclose(rot[1], torch.tensor([0.0, -1.0, 0.0], dtype=DTYPE))
        assert torch.allclose(front_camera.center, torch.tensor([0.0, 0.0, 2.0], dtype=DTYPE))

    def test_transform_round_trip(self, front_camera):
        c2w = front_camera.to_transform()
        again = Camera.from_transform(c2w, front_camera.fov_x, 16, 16)
        assert torch.allclose(again.rotation, front_camera.rotation, atol=1e-12)
        assert torch.allclose(again.translation, front_camera.translation, atol=1e-12)
        assert math.isclose(again.fx, front_camera.fx, rel_tol=1e-12)

    def test_look_at_along_up_rejected(self):
        with pytest.raises(InvalidArgumentError):
            Camera.look_at((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 8, 8, 1.0)

    def test_rotation_must_be_orthonormal(self):
        with pytest.raises(InvalidArgumentError):
            Camera(2.0 * torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), 10.0, 10.0, 4.0, 4.0, 8, 8)


class TestScene:
    def test_empty_scene_rejected(self):
        with pytest.raises(InvalidArgumentError):
            GaussianScene.from_points([])

    def test_field_shapes_validated(self):
        scene = _scene([(0.0, 0.0, 0.0)])
        with pytest.raises(InvalidArgumentError):
            GaussianScene(scene.positions, scene.scales[:, :2], scene.rotations, scene.opacities, scene.materials)

    def test_points_round_trip(self):
        scene = _scene([(0.0, 0.0, 0.0), (0.1, 0.2, 0.3)])
        again = GaussianScene.from_points(scene.to_points())
        assert torch.allclose(again.positions, scene.positions)
        assert torch.allclose(again.materials.basecolor, scene.materials.basecolor)


class TestRender:
    @pytest.fixture
    def env(self, sky_cube):
        return prefilter(sky_cube, 4, default_specular_levels(8), samples_per_texel=32)

    def test_single_point(self, front_camera, env, small_lut):
        image = render(_scene([(0.0, 0.0, 0.0)]), front_camera, env, small_lut, PostProcessConfig())
        assert tuple(image.color.shape) == (16, 16, 3)
        assert 0.85 < float(image.alpha.max()) <= 0.9 + 1e-12
        covered = image.alpha > 0
        assert torch.allclose(image.depth[covered], torch.full_like(image.depth[covered], 2.0), atol=1e-12)
        assert float(image.color.min()) >= 0.0 and float(image.color.max()) <= 1.0

    def test_footprint_is_truncated(self, front_camera, env, small_lut):
        image = render(_scene([(0.0, 0.0, 0.0)], scale=(0.01, 0.01, 0.001)), front_camera, env, small_lut, PostProcessConfig())
        assert float(image.alpha[0, 0]) == 0.0
        assert float(image.alpha[7:9, 7:9].max()) > 0.0

    def test_input_order_does_not_matter(self, front_camera, env, small_lut):
        scene = _scene([(0.0, 0.0, 0.2), (0.05, 0.02, -0.2), (-0.1, 0.0, 0.0)])
        reversed_scene = scene.permuted(torch.tensor([2, 1, 0]))
        a = render(scene, front_camera, env, small_lut, PostProcessConfig())
        b = render(reversed_scene, front_camera, env, small_lut, PostProcessConfig())
        assert torch.allclose(a.linear, b.linear, atol=1e-12)
        assert torch.allclose(a.depth, b.depth, atol=1e-12)

    def test_stacked_points_never_exceed_full_coverage(self, front_camera, env, small_lut):
        scene = _scene([(0.0, 0.0, 0.1 * i) for i in range(6)], opacity=0.99)
        image = render(scene, front_camera, env, small_lut, PostProcessConfig())
        assert float(image.alpha.max()) <= 1.0 + 1e-12

    def test_black_lighting_renders_black(self, front_camera, small_lut):
        env = prefilter(CubeMap.constant(4, 0.0), 4, default_specular_levels(4), samples_per_texel=16)
        image = render(_scene([(0.0, 0.0, 0.0)]), front_camera, env, small_lut, PostProcessConfig())
        assert float(image.color.abs().max()) == 0.0

    def test_gradients_reach_the_environment(self, front_camera, sky_cube, small_lut):
        raw = sky_cube.texels.clone().requires_grad_(True)
        env = prefilter(sky_cube, 4, default_specular_levels(8), samples_per_texel=32)
        env = PrefilteredEnv(prefilter_diffuse(CubeMap(raw), 4), env.specular)
        image = render(_scene([(0.0, 0.0, 0.0)]), front_camera, env, small_lut, PostProcessConfig.from_name("hdr_clip"))
        image.linear.sum().backward()
        assert raw.grad is not None and float(raw.grad.abs().sum()) > 0.0


class TestCompositing:
    @pytest.fixture
    def env(self, sky_cube):
        return prefilter(sky_cube, 4, default_specular_levels(8), samples_per_texel=32)

    @staticmethod
    def _wall(z: float, basecolor: float) -> GaussianScene:
        """One opaque Gaussian wide enough to cover the whole 16x16 view"""
        scene = _scene([(0.0, 0.0, z)], scale=(20.0, 20.0, 0.05), opacity=1.0)
        return scene.with_materials(make_materials(1, basecolor=basecolor, tint=0.05, roughness=0.5))

    def test_opaque_point_reproduces_its_shaded_color(self, front_camera, env, small_lut):
        wall = self._wall(0.0, 0.4)
        cfg = PostProcessConfig.from_name("hdr_clip_gamma")
        image = render(wall, front_camera, env, small_lut, cfg)
        up = torch.tensor([[0.0, 0.0, 1.0]], dtype=DTYPE)
        expected = postprocess(shade_proposed(wall.materials, up, up, env, small_lut), cfg)[0]
        for row, col in ((7, 7), (7, 8), (8, 7), (8, 8)):
            assert torch.allclose(image.color[row, col], expected, atol=1e-3)

    def test_opaque_front_point_hides_the_one_behind(self, front_camera, env, small_lut):
        front = self._wall(0.3, 0.1)
        back = self._wall(-0.3, 0.9)
        stacked = GaussianScene(
            torch.cat([back.positions, front.positions]),
            torch.cat([back.scales, front.scales]),
            torch.cat([back.rotations, front.rotations]),
            torch.cat([back.opacities, front.opacities]),
            MaterialTensors(
                torch.cat([back.materials.basecolor, front.materials.basecolor]),
                torch.cat([back.materials.tint, front.materials.tint]),
                torch.cat([back.materials.roughness, front.materials.roughness]),
                torch.cat([back.materials.metallic, front.materials.metallic]),
            ),
        )
        alone = render(front, front_camera, env, small_lut, PostProcessConfig())
        both = render(stacked, front_camera, env, small_lut, PostProcessConfig())
        assert torch.allclose(both.linear[6:10, 6:10], alone.linear[6:10, 6:10], atol=1e-12)
        assert torch.allclose(both.depth[6:10, 6:10], alone.depth[6:10, 6:10], atol=1e-12)


class TestDepthNormal:
    @pytest.fixture
    def plane(self):
        return plane_scene()

    def test_flat_depth_gives_camera_facing_normals(self, plane, front_camera):
        depth, alpha, _ = render_geometry(plane, front_camera)
        normals, valid = depth_to_normal(depth, front_camera, alpha)
        assert bool(valid.any())
        expected = torch.tensor([0.0, 0.0, -1.0], dtype=DTYPE).expand_as(normals[valid])
        assert torch.allclose(normals[valid], expected, atol=1e-9)

    def test_border_pixels_are_invalid(self, plane, front_camera):
        depth, alpha, _ = render_geometry(plane, front_camera)
        _, valid = depth_to_normal(depth, front_camera, alpha)
        assert not bool(valid[0].any()) and not bool(valid[:, -1].any())

    def test_consistent_plane_has_no_loss(self, plane, front_camera):
        assert float(loss_depth_normal(plane, front_camera, 1.0)) < 1e-12

    def test_zero_weight_skips_the_term(self, plane, front_camera):
        assert float(loss_depth_normal(plane, front_camera, 0.0)) == 0.0

    def test_empty_mask_gives_zero(self, front_camera):
        depth = torch.zeros(16, 16, dtype=DTYPE)
        _, valid = depth_to_normal(depth, front_camera)
        assert not bool(valid.any())

    def test_slanted_plane_normal(self, front_camera):
        """Camera-space plane z = 2 + 0.3 x sampled exactly at every pixel ray"""
        pix = front_camera.pixel_centers()
        x = (pix[..., 0] - front_camera.cx) / front_camera.fx
        depth = 2.0 / (1.0 - 0.3 * x)
        normals, valid = depth_to_normal(depth, front_camera)
        expected = torch.tensor([0.3, 0.0, -1.0], dtype=DTYPE) / math.sqrt(1.09)
        assert int(valid.sum()) == 14 * 14
        assert torch.allclose(normals[valid], expected.expand_as(normals[valid]), atol=1e-9)

    def test_perpendicular_normals_cost_twice_the_weight(self, plane, front_camera):
        depth, alpha, normal = render_geometry(plane, front_camera)
        derived, valid = depth_to_normal(depth, front_camera, alpha)
        sideways = torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE).expand_as(normal)
        assert math.isclose(float(depth_normal_error(sideways, derived, valid, 0.3)), 0.6, rel_tol=1e-9)
        assert float(depth_normal_error(normal, derived, valid, 0.3)) < 1e-12
