"""Oracle suites behind `recap validate`: every fast path is compared against an independent reference."""
import logging
import math
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from recap.config import DIELECTRIC_F0, DIFFUSE_FACE_SIZE, DTYPE, LAMBDA_DN, LAMBDA_EC, LAMBDA_SAT, NDOTV_FLOOR, SUPPORTED_SUITES
from recap.models.environments import EnvironmentConfig
from recap.models.schemas import InvalidArgumentError, PostProcessConfig, SuiteResult
from recap.services.brdf import BrdfLut, MaterialTensors, integrate_brdf_lut, render_equation_mc
from recap.services.envmap import (
    CubeMap,
    PrefilteredEnv,
    cube_directions,
    default_specular_levels,
    prefilter,
    prefilter_diffuse,
    prefilter_specular,
    query_specular,
    sample,
    texel_solid_angles,
)
from recap.services.fixture_service import sphere_scene
from recap.services.optim import central_difference, image_loss, relative_error
from recap.services.shading import loss_energy, loss_sat, shade_metallic_blend, shade_proposed
from recap.services.splat import Camera, GaussianScene, loss_depth_normal, render
from recap.agents.fit_agent import straight_through_chain
from recap.utils.helpers import dot, format_duration, safe_normalize

logger = logging.getLogger(__name__)

SPLIT_SUM_SAMPLES = 65536
SPLIT_SUM_ROUGHNESS = (0.1, 0.3, 0.5, 0.7, 0.9)
SPLIT_SUM_ELEVATIONS = (15.0, 30.0, 45.0, 60.0, 75.0)
SPLIT_SUM_MEAN_MAX = 0.05
SPLIT_SUM_WORST_MAX = 0.12
SPLIT_SUM_ENVIRONMENTS = ("smooth_gradient", "sky_gradient")

IDENTITY_CONFIGS = 1000
IDENTITY_TOLERANCE = 1e-12

PREFILTER_SOURCE_SIZE = 32
PREFILTER_OVERSAMPLE = 4
PREFILTER_TOLERANCE = 1e-3
SOLID_ANGLE_TOLERANCE = 1e-3

LUT_ENERGY_SLACK = 1e-3
LUT_MIRROR_TOLERANCE = 0.02
LUT_MONOTONE_TOLERANCE = 1e-4

SHADING_GRAD_TOLERANCE = 1e-4
RENDER_GRAD_TOLERANCE = 1e-3
STRAIGHT_THROUGH_TOLERANCE = 0.1
FD_STEP = 1e-4
GRAD_ENV_SIZE = 8
GRAD_DIFFUSE_SIZE = 4
GRAD_PREFILTER_SAMPLES = 64
GRAD_IMAGE_SIZE = 16
GRAD_CHECKS = 32
KINK_TOLERANCE = 1e-2
GRAD_FLOOR = 1e-5


def smooth_gradient(dirs: torch.Tensor) -> torch.Tensor:
    """Strictly positive radiance varying linearly with direction"""
    base = torch.tensor([0.7, 0.65, 0.6], dtype=dirs.dtype)
    up = torch.tensor([0.15, 0.15, 0.2], dtype=dirs.dtype)
    side = torch.tensor([0.05, 0.03, 0.0], dtype=dirs.dtype)
    return base + up * dirs[..., 1:2] + side * dirs[..., 0:1]


def _tangent(n: torch.Tensor) -> torch.Tensor:
    helper = torch.tensor([1.0, 0.0, 0.0], dtype=n.dtype) if abs(float(n[0])) < 0.9 else torch.tensor([0.0, 0.0, 1.0], dtype=n.dtype)
    t = torch.linalg.cross(n, helper)
    return t / torch.linalg.norm(t)


def _random_geometry(count: int, gen: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    n = torch.randn(count, 3, generator=gen, dtype=DTYPE)
    n = n / torch.linalg.norm(n, dim=-1, keepdim=True)
    v = torch.randn(count, 3, generator=gen, dtype=DTYPE)
    v = v / torch.linalg.norm(v, dim=-1, keepdim=True)
    cos = dot(n, v, keepdim=True)
    v = torch.where(cos < 0, v - 2.0 * cos * n, v)
    return n, v


def _cell_midpoints(lut: BrdfLut, levels: Tuple[float, ...], margin: float = 1e-3) -> torch.Tensor:
    """Roughness values away from LUT nodes and prefilter levels, where shading is smooth in r"""
    res = lut.resolution
    mids = [(j + 0.5) / (res - 1) for j in range(res - 1)]
    mids = [m for m in mids if min(abs(m - r) for r in levels) > margin]
    return torch.tensor(mids, dtype=DTYPE)


class ValidationAgent:
    """Runs the oracle suites and reports one SuiteResult per check"""

    def __init__(self, lut: Optional[BrdfLut] = None, seed: int = 0):
        self._lut = lut
        self.seed = seed

    @property
    def lut(self) -> BrdfLut:
        if self._lut is None:
            self._lut = integrate_brdf_lut()
        return self._lut

    def run(self, suite: str = "all") -> List[SuiteResult]:
        if suite not in SUPPORTED_SUITES:
            raise InvalidArgumentError(f"Unknown suite '{suite}'. Supported: {list(SUPPORTED_SUITES)}")
        suites: Dict[str, Callable[[], List[SuiteResult]]] = {
            "split_sum": self.split_sum,
            "shading_identities": self.shading_identities,
            "prefilter": self.diffuse_prefilter,
            "lut": self.lut_bounds,
            "gradients": self.gradients,
        }
        names = list(suites) if suite == "all" else [suite]
        results = []
        for name in names:
            start = time.perf_counter()
            rows = suites[name]()
            elapsed = time.perf_counter() - start
            for row in rows:
                row.seconds = elapsed
                status = "PASS" if row.passed else "FAIL"
                logger.info(f"{row.suite}: {status} metric={row.metric:.3e} threshold={row.threshold:.1e}")
            logger.info(f"Suite {name} finished in {format_duration(elapsed)}")
            results.extend(rows)
        return results

    # Split-sum against the rendering equation

    def split_sum(self) -> List[SuiteResult]:
        rows = []
        for name in SPLIT_SUM_ENVIRONMENTS:
            if name == "smooth_gradient":
                cube = CubeMap.from_function(PREFILTER_SOURCE_SIZE, smooth_gradient)
            else:
                cube = EnvironmentConfig.get_cube(name, PREFILTER_SOURCE_SIZE)
            rows.extend(self._split_sum_rows(name, cube))
        return rows

    def _split_sum_rows(self, name: str, cube: CubeMap) -> List[SuiteResult]:
        env = prefilter(cube, DIFFUSE_FACE_SIZE, default_specular_levels(PREFILTER_SOURCE_SIZE), seed=self.seed)
        n = torch.tensor([0.2, 1.0, 0.1], dtype=DTYPE)
        n = n / torch.linalg.norm(n)
        t = _tangent(n)

        errors = []
        for r in SPLIT_SUM_ROUGHNESS:
            mat = MaterialTensors(
                basecolor=torch.tensor([[0.3, 0.25, 0.2]], dtype=DTYPE),
                tint=torch.tensor([[0.5, 0.45, 0.4]], dtype=DTYPE),
                roughness=torch.tensor([r], dtype=DTYPE),
                metallic=torch.zeros(1, dtype=DTYPE),
            )
            for elevation in SPLIT_SUM_ELEVATIONS:
                e = math.radians(elevation)
                v = math.sin(e) * n + math.cos(e) * t
                with torch.no_grad():
                    fast = shade_proposed(mat, n[None], v[None], env, self.lut)[0]
                reference = render_equation_mc(mat.select(0), n, v, cube, SPLIT_SUM_SAMPLES, seed=self.seed, model="proposed").value
                err = float(torch.linalg.norm(fast - reference) / torch.linalg.norm(reference))
                errors.append(err)
                logger.debug(f"split-sum {name} r={r} elevation={elevation}: relative error {err:.4f}")

        mean_err = sum(errors) / len(errors)
        worst = max(errors)
        detail = f"{len(SPLIT_SUM_ROUGHNESS)}x{len(SPLIT_SUM_ELEVATIONS)} grid, {SPLIT_SUM_SAMPLES} samples"
        return [
            SuiteResult(suite=f"split_sum:{name}:mean", passed=mean_err < SPLIT_SUM_MEAN_MAX, metric=mean_err,
                        threshold=SPLIT_SUM_MEAN_MAX, detail=detail),
            SuiteResult(suite=f"split_sum:{name}:max", passed=worst < SPLIT_SUM_WORST_MAX, metric=worst,
                        threshold=SPLIT_SUM_WORST_MAX, detail=detail),
        ]

    # Metallic blend corner cases

    def shading_identities(self) -> List[SuiteResult]:
        gen = torch.Generator().manual_seed(self.seed)
        count = IDENTITY_CONFIGS
        cube = CubeMap(torch.rand(6, GRAD_ENV_SIZE, GRAD_ENV_SIZE, 3, generator=gen, dtype=DTYPE) * 2.0)
        env = prefilter(cube, GRAD_DIFFUSE_SIZE, default_specular_levels(GRAD_ENV_SIZE), GRAD_PREFILTER_SAMPLES, self.seed)
        n, v = _random_geometry(count, gen)
        b = torch.rand(count, 3, generator=gen, dtype=DTYPE)
        r = torch.rand(count, generator=gen, dtype=DTYPE)
        zeros = torch.zeros(count, dtype=DTYPE)
        ones = torch.ones(count, dtype=DTYPE)

        with torch.no_grad():
            dielectric = shade_proposed(MaterialTensors(b, torch.full_like(b, DIELECTRIC_F0), r, zeros), n, v, env, self.lut)
            blend_m0 = shade_metallic_blend(MaterialTensors(b, torch.rand(count, 3, generator=gen, dtype=DTYPE), r, zeros), n, v, env, self.lut)
            metal = shade_proposed(MaterialTensors(torch.zeros_like(b), b, r, zeros), n, v, env, self.lut)
            blend_m1 = shade_metallic_blend(MaterialTensors(b, torch.rand(count, 3, generator=gen, dtype=DTYPE), r, ones), n, v, env, self.lut)

            # textbook metallic blend at its two corners, straight from the lookups
            n_dot_v = dot(n, v)
            e_s = query_specular(env, safe_normalize(2.0 * n_dot_v[:, None] * n - v), r)
            e_d = sample(env.diffuse, n)
            beta1, beta2 = self.lut.lookup(torch.clamp_min(n_dot_v, NDOTV_FLOOR), r)
            beta1, beta2 = beta1[:, None], beta2[:, None]
            reference_m0 = e_s * (DIELECTRIC_F0 * beta1 + beta2) + e_d * b
            reference_m1 = e_s * (b * beta1 + beta2)

        gap_m0 = max(float((dielectric - reference_m0).abs().max()), float((blend_m0 - reference_m0).abs().max()))
        gap_m1 = max(float((metal - reference_m1).abs().max()), float((blend_m1 - reference_m1).abs().max()))
        detail = f"{count} random configurations, both models against direct lookups"
        return [
            SuiteResult(suite="shading_identities:m0", passed=gap_m0 <= IDENTITY_TOLERANCE, metric=gap_m0,
                        threshold=IDENTITY_TOLERANCE, detail=detail),
            SuiteResult(suite="shading_identities:m1", passed=gap_m1 <= IDENTITY_TOLERANCE, metric=gap_m1,
                        threshold=IDENTITY_TOLERANCE, detail=detail),
        ]

    # Diffuse prefilter against dense quadrature

    def diffuse_prefilter(self) -> List[SuiteResult]:
        size = PREFILTER_SOURCE_SIZE
        dense = size * PREFILTER_OVERSAMPLE
        source = CubeMap.from_function(size, smooth_gradient)
        fast = prefilter_diffuse(source, DIFFUSE_FACE_SIZE).texels.reshape(-1, 3)

        normals = cube_directions(DIFFUSE_FACE_SIZE).reshape(-1, 3)
        dirs = cube_directions(dense).reshape(-1, 3)
        d_omega = texel_solid_angles(dense).reshape(-1).repeat(6)
        # each dense texel carries the radiance of the source texel containing it
        radiance = source.texels.repeat_interleave(PREFILTER_OVERSAMPLE, dim=1)
        radiance = radiance.repeat_interleave(PREFILTER_OVERSAMPLE, dim=2).reshape(-1, 3)

        reference = torch.empty_like(fast)
        chunk = 64
        for start in range(0, normals.shape[0], chunk):
            w = torch.clamp_min(normals[start:start + chunk] @ dirs.T, 0.0) * d_omega
            reference[start:start + chunk] = (w @ radiance) / w.sum(dim=1, keepdim=True)

        worst = float(((fast - reference).abs() / reference.abs()).max())
        total = 6.0 * float(texel_solid_angles(size).sum())
        sphere_err = abs(total - 4.0 * math.pi) / (4.0 * math.pi)
        return [
            SuiteResult(suite="prefilter:diffuse", passed=worst < PREFILTER_TOLERANCE, metric=worst,
                        threshold=PREFILTER_TOLERANCE,
                        detail=f"6x{DIFFUSE_FACE_SIZE} output vs {PREFILTER_OVERSAMPLE}x quadrature"),
            SuiteResult(suite="prefilter:solid_angle", passed=sphere_err < SOLID_ANGLE_TOLERANCE, metric=sphere_err,
                        threshold=SOLID_ANGLE_TOLERANCE, detail=f"sum of texel solid angles at face {size}"),
        ]

    # LUT bounds

    def lut_bounds(self) -> List[SuiteResult]:
        lut = self.lut
        lowest = float(lut.table.min())
        energy = float((lut.beta1 + lut.beta2).max())
        mirror = abs(float(lut.beta1[-1, 0] + lut.beta2[-1, 0]) - 1.0)

        # non-increasing in mu where the Schlick weight dominates the masking term
        res = lut.resolution
        mus = torch.linspace(0.0, 1.0, res, dtype=DTYPE)
        rs = torch.linspace(0.0, 1.0, res, dtype=DTYPE)
        rows = mus >= 0.1
        cols = rs <= 0.5
        beta2 = lut.beta2[rows][:, cols]
        rise = float(torch.clamp_min(beta2[1:] - beta2[:-1], 0.0).max()) if beta2.shape[0] > 1 else 0.0

        detail = f"{res}x{res} entries, {lut.samples} samples"
        return [
            SuiteResult(suite="lut:nonnegative", passed=lowest >= 0.0, metric=lowest, threshold=0.0, detail=detail),
            SuiteResult(suite="lut:energy", passed=energy <= 1.0 + LUT_ENERGY_SLACK, metric=energy,
                        threshold=1.0 + LUT_ENERGY_SLACK, detail=detail),
            SuiteResult(suite="lut:mirror", passed=mirror < LUT_MIRROR_TOLERANCE, metric=mirror,
                        threshold=LUT_MIRROR_TOLERANCE, detail="mu=1, r=0"),
            SuiteResult(suite="lut:monotone", passed=rise <= LUT_MONOTONE_TOLERANCE, metric=rise,
                        threshold=LUT_MONOTONE_TOLERANCE, detail="beta2 over mu >= 0.1, r <= 0.5"),
        ]

    # Gradient checks

    def gradients(self) -> List[SuiteResult]:
        shading_err, shading_checks = self._shading_gradients()
        render_err, render_checks, bias = self._render_gradients()
        return [
            SuiteResult(suite="gradients:shading", passed=shading_err < SHADING_GRAD_TOLERANCE, metric=shading_err,
                        threshold=SHADING_GRAD_TOLERANCE,
                        detail=f"{shading_checks} entries of b, s, r and prefiltered texels"),
            SuiteResult(suite="gradients:render", passed=render_err < RENDER_GRAD_TOLERANCE, metric=render_err,
                        threshold=RENDER_GRAD_TOLERANCE,
                        detail=f"{render_checks} entries, 8 points, {GRAD_IMAGE_SIZE}x{GRAD_IMAGE_SIZE}, "
                               "image + sat + ec + dn, frozen specular"),
            SuiteResult(suite="gradients:straight_through", passed=bias < STRAIGHT_THROUGH_TOLERANCE, metric=bias,
                        threshold=STRAIGHT_THROUGH_TOLERANCE, detail="direction 1 + 0.1 l_y over raw texels"),
        ]

    def _check(self, objective: Callable[[Dict[str, torch.Tensor]], torch.Tensor], params: Dict[str, torch.Tensor],
               gen: torch.Generator, count: int = GRAD_CHECKS) -> Tuple[float, int]:
        """Worst relative error over `count` seeded entries spread evenly across the parameter keys.

        Each key draws first among entries with a non-zero autograd derivative, then among the rest.
        Errors are relative to the entry or, below GRAD_FLOOR of the largest derivative, to that floor.

        Entries whose central differences at h and h/2 disagree straddle a discontinuity
        (a footprint cutoff, a depth reorder or a validity mask flip) and are replaced
        by the next candidate of the same key.
        """
        leaves = {k: t.detach().clone().requires_grad_(True) for k, t in params.items()}
        grads = torch.autograd.grad(objective(leaves), list(leaves.values()), allow_unused=True)
        floor = GRAD_FLOOR * (max((float(g.abs().max()) for g in grads if g is not None), default=0.0) or 1.0)
        keys = list(params)
        quota = {key: count // len(keys) + (1 if i < count % len(keys) else 0) for i, key in enumerate(keys)}

        worst, checked = 0.0, 0
        for (key, base), grad in zip(params.items(), grads):
            if grad is None:
                grad = torch.zeros_like(base)

            def along(x: torch.Tensor, key=key) -> torch.Tensor:
                return objective({**params, key: x})

            perm = torch.randperm(base.numel(), generator=gen)
            live = grad.reshape(-1)[perm] != 0
            taken = 0
            for flat in torch.cat([perm[live], perm[~live]]).tolist():
                if taken == quota[key]:
                    break
                index = tuple(int(i) for i in np.unravel_index(flat, tuple(base.shape)))
                coarse = central_difference(along, base, index, FD_STEP)
                numeric = central_difference(along, base, index, 0.5 * FD_STEP)
                if relative_error(coarse, numeric, floor) > KINK_TOLERANCE:
                    logger.debug(f"gradient {key}{list(index)}: skipped, finite differences straddle a discontinuity")
                    continue
                err = relative_error(float(grad[index]), numeric, floor)
                if err > worst:
                    logger.debug(f"gradient {key}{list(index)}: autograd {float(grad[index]):.6e} vs fd {numeric:.6e}")
                worst = max(worst, err)
                taken += 1
            checked += taken
        return worst, checked

    def _shading_gradients(self) -> Tuple[float, int]:
        gen = torch.Generator().manual_seed(self.seed + 1)
        count = 16
        levels = default_specular_levels(GRAD_ENV_SIZE)
        cube = CubeMap.from_function(GRAD_ENV_SIZE, smooth_gradient)
        env = prefilter(cube, GRAD_DIFFUSE_SIZE, levels, GRAD_PREFILTER_SAMPLES, self.seed)
        n, v = _random_geometry(count, gen)
        mids = _cell_midpoints(self.lut, tuple(r for r, _ in levels))
        weights = torch.rand(count, 3, generator=gen, dtype=DTYPE)

        params = {
            "basecolor": 0.1 + 0.8 * torch.rand(count, 3, generator=gen, dtype=DTYPE),
            "tint": 0.1 + 0.8 * torch.rand(count, 3, generator=gen, dtype=DTYPE),
            "roughness": mids[torch.randint(0, len(mids), (count,), generator=gen)],
            "diffuse": env.diffuse.texels,
        }
        params.update({f"specular_{i}": m.texels for i, (_, m) in enumerate(env.specular)})

        def objective(p: Dict[str, torch.Tensor]) -> torch.Tensor:
            mat = MaterialTensors(p["basecolor"], p["tint"], p["roughness"], torch.zeros(count, dtype=DTYPE))
            chain = tuple((r, CubeMap(p[f"specular_{i}"])) for i, (r, _) in enumerate(levels))
            return (shade_proposed(mat, n, v, PrefilteredEnv(CubeMap(p["diffuse"]), chain), self.lut) * weights).sum()

        return self._check(objective, params, gen)

    def _render_gradients(self) -> Tuple[float, int, float]:
        gen = torch.Generator().manual_seed(self.seed + 2)
        size = GRAD_IMAGE_SIZE
        levels = default_specular_levels(GRAD_ENV_SIZE)
        scene = sphere_scene(n_points=8, radius=0.5, seed=self.seed)
        cam = Camera.look_at((0.3, 0.4, 2.0), (0.0, 0.0, 0.0), size, size, math.radians(40.0))
        cfg = PostProcessConfig.from_name("hdr_clip_gamma")
        raw = CubeMap.from_function(GRAD_ENV_SIZE, smooth_gradient).scaled(0.5).texels
        frozen = prefilter_specular(CubeMap(raw), levels, GRAD_PREFILTER_SAMPLES, self.seed)
        mids = _cell_midpoints(self.lut, tuple(r for r, _ in levels))
        # above every displayable value, so the L1 term never changes sign
        target = 1.05 + 0.05 * torch.rand(size, size, 3, generator=gen, dtype=DTYPE)

        params = {
            "basecolor": 0.2 + 0.4 * torch.rand(8, 3, generator=gen, dtype=DTYPE),
            "tint": 0.1 + 0.3 * torch.rand(8, 3, generator=gen, dtype=DTYPE),
            "roughness": mids[torch.randint(0, len(mids), (8,), generator=gen)],
            "env": raw,
            "positions": scene.positions,
            "rotations": scene.rotations,
        }

        def loss_with(p: Dict[str, torch.Tensor], specular) -> torch.Tensor:
            mat = MaterialTensors(p["basecolor"], p["tint"], p["roughness"], torch.zeros(8, dtype=DTYPE))
            env = PrefilteredEnv(prefilter_diffuse(CubeMap(p["env"]), GRAD_DIFFUSE_SIZE), specular)
            current = GaussianScene(p["positions"], scene.scales, p["rotations"], scene.opacities, mat)
            image = image_loss(render(current, cam, env, self.lut, cfg, "proposed").color, target)
            return (
                image
                + loss_sat(mat.tint, LAMBDA_SAT)
                + loss_energy(mat.tint, mat.basecolor, LAMBDA_EC)
                + loss_depth_normal(current, cam, LAMBDA_DN)
            )

        render_err, checked = self._check(lambda p: loss_with(p, frozen), params, gen)

        # straight-through backward against re-prefiltering the whole chain
        direction = 1.0 + 0.1 * cube_directions(GRAD_ENV_SIZE)[..., 1:2].expand(-1, -1, -1, 3)
        leaf = raw.detach().clone().requires_grad_(True)
        loss = loss_with({**params, "env": leaf}, straight_through_chain(leaf, frozen))
        (grad,) = torch.autograd.grad(loss, [leaf])
        approx = float((grad * direction).sum())

        def refreshed(x: torch.Tensor) -> torch.Tensor:
            return loss_with({**params, "env": x}, prefilter_specular(CubeMap(x), levels, GRAD_PREFILTER_SAMPLES, self.seed))

        with torch.no_grad():
            exact = float((refreshed(raw + FD_STEP * direction) - refreshed(raw - FD_STEP * direction)) / (2.0 * FD_STEP))
        bias = relative_error(approx, exact)
        logger.debug(f"straight-through directional derivative {approx:.6e} vs refreshed {exact:.6e}")
        return render_err, checked, bias
