import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch

from recap.config import DTYPE
from recap.models.schemas import DivergenceError, FitConfig, LossRecord, MetricRow, RangeMode, ShadingModel
from recap.models.training import TrainingSet
from recap.services.brdf import BrdfLut, MaterialTensors
from recap.services.envmap import CubeMap, PrefilteredEnv, default_specular_levels, prefilter, prefilter_diffuse, prefilter_specular, resample
from recap.services.hdr_io import write_float_dump, write_scene
from recap.services.optim import AdamState, adam_step, image_loss, metrics_psnr, metrics_ssim
from recap.services.shading import loss_energy, loss_sat
from recap.services.splat import GaussianScene, loss_depth_normal, render
from recap.utils.helpers import timing_decorator

logger = logging.getLogger(__name__)

LOGIT_LIMIT = 12.0
MATERIAL_KEYS = ("basecolor", "tint", "roughness", "metallic")
GEOMETRY_KEYS = ("positions", "log_scales", "rotations")
MATERIAL_INIT = {"basecolor": 0.5, "tint": 0.04, "roughness": 0.5, "metallic": 0.1}


@dataclass(frozen=True)
class FitResult:
    scene: GaussianScene
    envs: Tuple[CubeMap, ...]
    history: Tuple[LossRecord, ...]
    metrics: Tuple[MetricRow, ...]


def _logit(p: float, shape) -> torch.Tensor:
    return torch.full(shape, math.log(p / (1.0 - p)), dtype=DTYPE)


def _clamp_logit(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, -LOGIT_LIMIT, LOGIT_LIMIT)


def _unit_quaternion(q: torch.Tensor) -> torch.Tensor:
    return q / torch.clamp_min(torch.linalg.norm(q, dim=-1, keepdim=True), 1e-12)


def straight_through_chain(raw: torch.Tensor, cached: Tuple[Tuple[float, CubeMap], ...]) -> Tuple[Tuple[float, CubeMap], ...]:
    """Cached GGX levels in the forward pass, a plain resample of the raw texels in the backward pass"""
    chain = []
    for roughness, level in cached:
        proxy = resample(CubeMap(raw), level.face_size).texels
        if roughness == 0.0:
            chain.append((roughness, CubeMap(proxy)))
        else:
            chain.append((roughness, CubeMap(level.texels.detach() + proxy - proxy.detach())))
    return tuple(chain)


class FitAgent:
    """Jointly fits shared per-point materials and k independent environment maps"""

    def __init__(self, cfg: FitConfig, lut: BrdfLut, dump_dir: Optional[Path] = None):
        self.cfg = cfg
        self.lut = lut
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None
        self.levels = default_specular_levels(cfg.env_face_size)

    # Parameterization

    def init_params(self, scene: GaussianScene, k: int, init_materials: Optional[MaterialTensors] = None) -> Dict[str, torch.Tensor]:
        n = len(scene)
        if init_materials is not None:
            eps = 1e-6
            params = {
                "basecolor": torch.logit(torch.clamp(init_materials.basecolor, eps, 1 - eps)),
                "tint": torch.logit(torch.clamp(init_materials.tint, eps, 1 - eps)),
                "roughness": torch.logit(torch.clamp(init_materials.roughness, eps, 1 - eps)),
                "metallic": torch.logit(torch.clamp(init_materials.metallic, eps, 1 - eps)),
            }
        else:
            params = {
                "basecolor": _logit(MATERIAL_INIT["basecolor"], (n, 3)),
                "tint": _logit(MATERIAL_INIT["tint"], (n, 3)),
                "roughness": _logit(MATERIAL_INIT["roughness"], (n,)),
                "metallic": _logit(MATERIAL_INIT["metallic"], (n,)),
            }
        size = self.cfg.env_face_size
        for e in range(k):
            params[f"env_{e}"] = torch.full((6, size, size, 3), self.cfg.env_init, dtype=DTYPE)
        if self.cfg.optimize_geometry:
            params["positions"] = scene.positions.detach().clone()
            params["log_scales"] = torch.log(scene.scales.detach())
            params["rotations"] = _unit_quaternion(scene.rotations.detach())
        return params

    def geometry_from(self, params: Dict[str, torch.Tensor], scene: GaussianScene) -> GaussianScene:
        """The scene with fitted positions, scales and rotations; unchanged when geometry is frozen"""
        if "positions" not in params:
            return scene
        return GaussianScene(
            positions=params["positions"],
            scales=torch.exp(params["log_scales"]),
            rotations=params["rotations"],
            opacities=scene.opacities,
            materials=scene.materials,
        )

    def materials_from(self, params: Dict[str, torch.Tensor]) -> MaterialTensors:
        metallic = torch.sigmoid(params["metallic"])
        if self.cfg.shading_model != ShadingModel.METALLIC:
            metallic = metallic.detach()
        return MaterialTensors(
            basecolor=torch.sigmoid(params["basecolor"]),
            tint=torch.sigmoid(params["tint"]),
            roughness=torch.sigmoid(params["roughness"]),
            metallic=metallic,
        )

    def _env_projection(self, x: torch.Tensor) -> torch.Tensor:
        upper = 1.0 if self.cfg.postprocess.range_mode == RangeMode.UNIT else None
        return torch.clamp(x, min=0.0, max=upper)

    def _material_keys(self) -> List[str]:
        if not self.cfg.optimize_materials:
            return []
        keys = ["basecolor", "tint", "roughness"]
        if self.cfg.shading_model == ShadingModel.METALLIC:
            keys.append("metallic")
        return keys

    def prefiltered(self, raw: torch.Tensor) -> PrefilteredEnv:
        """Fresh, non-differentiable prefiltering of a fitted map"""
        return prefilter(
            CubeMap(raw.detach()),
            self.cfg.diffuse_face_size,
            self.levels,
            samples_per_texel=self.cfg.prefilter_samples,
            seed=self.cfg.seed,
        )

    # Main loop

    @timing_decorator
    def __call__(self, scene: GaussianScene, training: TrainingSet, init_materials: Optional[MaterialTensors] = None,
                 init_envs: Optional[List[CubeMap]] = None) -> FitResult:
        cfg = self.cfg
        k = training.k
        params = self.init_params(scene, k, init_materials)
        if init_envs is not None:
            for e, cube in enumerate(init_envs):
                params[f"env_{e}"] = resample(cube, cfg.env_face_size).texels.detach().clone()

        state = AdamState()
        lrs = {key: cfg.lr_material for key in MATERIAL_KEYS}
        lrs.update({f"env_{e}": cfg.lr_env for e in range(k)})
        lrs.update({key: cfg.lr_geometry for key in GEOMETRY_KEYS})
        projections = {key: _clamp_logit for key in MATERIAL_KEYS}
        projections.update({f"env_{e}": self._env_projection for e in range(k)})
        projections["rotations"] = _unit_quaternion

        chains: Dict[int, Tuple] = {}
        visits = [0] * k
        dn_cache: Dict[Tuple[int, int], torch.Tensor] = {}
        history: List[LossRecord] = []
        material_keys = self._material_keys()
        geometry_keys = list(GEOMETRY_KEYS) if cfg.optimize_geometry else []
        proposed = cfg.shading_model == ShadingModel.PROPOSED

        for t in range(cfg.iterations):
            e = t % k
            views = training.environments[e]
            j = (t // k) % len(views)
            view = views[j]

            key = f"env_{e}"
            raw = params[key].detach().requires_grad_(cfg.optimize_envs)
            if visits[e] % cfg.prefilter_cadence == 0 or e not in chains:
                chains[e] = prefilter_specular(CubeMap(raw.detach()), self.levels, cfg.prefilter_samples, cfg.seed)
            visits[e] += 1
            env = PrefilteredEnv(
                diffuse=prefilter_diffuse(CubeMap(raw), cfg.diffuse_face_size),
                specular=straight_through_chain(raw, chains[e]),
            )

            leaves = {name: params[name].detach().requires_grad_(name in material_keys or name in geometry_keys)
                      for name in MATERIAL_KEYS + (GEOMETRY_KEYS if cfg.optimize_geometry else ())}
            mat = self.materials_from(leaves)
            current = self.geometry_from(leaves, scene)

            rendered = render(current, view.camera, env, self.lut, cfg.postprocess, cfg.shading_model.value, materials=mat)
            l_image = image_loss(rendered.color, view.target)
            zero = torch.zeros((), dtype=DTYPE)
            l_sat = loss_sat(mat.tint, cfg.lambda_sat) if proposed else zero
            l_ec = loss_energy(mat.tint, mat.basecolor, cfg.lambda_ec) if proposed else zero
            if cfg.optimize_geometry:
                l_dn = loss_depth_normal(current, view.camera, cfg.lambda_dn)
            else:
                # frozen geometry: constant per view
                if (e, j) not in dn_cache:
                    with torch.no_grad():
                        dn_cache[(e, j)] = loss_depth_normal(scene, view.camera, cfg.lambda_dn)
                l_dn = dn_cache[(e, j)]
            total = l_image + l_sat + l_ec + l_dn

            if not torch.isfinite(total):
                self._divergence(t, params, scene, f"Loss became non-finite at iteration {t}")

            grads: Dict[str, Optional[torch.Tensor]] = {}
            names = material_keys + ([key] if cfg.optimize_envs else []) + geometry_keys
            targets = [raw if name == key else leaves[name] for name in names]
            if targets and total.requires_grad:
                values = torch.autograd.grad(total, targets, allow_unused=True)
                for name, g in zip(names, values):
                    grads[name] = g
            try:
                params = adam_step(params, grads, state, lrs, projections)
            except DivergenceError as err:
                self._divergence(t, params, scene, str(err))

            record = LossRecord(
                iteration=t, environment=e, image=float(l_image), sat=float(l_sat),
                ec=float(l_ec), dn=float(l_dn), total=float(total),
            )
            history.append(record)
            if t % cfg.log_every == 0 or t == cfg.iterations - 1:
                logger.info(
                    f"iter {t:5d} env {e} view {j}: total={record.total:.6f} image={record.image:.6f} "
                    f"sat={record.sat:.2e} ec={record.ec:.2e} dn={record.dn:.2e}"
                )

        fitted = self._detached_scene(params, scene)
        envs = tuple(CubeMap(params[f"env_{e}"].detach().clone()) for e in range(k))
        metrics = self.evaluate(fitted, envs, training)
        return FitResult(fitted, envs, tuple(history), tuple(metrics))

    def _detached_materials(self, params: Dict[str, torch.Tensor]) -> MaterialTensors:
        with torch.no_grad():
            mat = self.materials_from(params)
        return MaterialTensors(mat.basecolor.detach(), mat.tint.detach(), mat.roughness.detach(), mat.metallic.detach())

    def _detached_scene(self, params: Dict[str, torch.Tensor], scene: GaussianScene) -> GaussianScene:
        geometry = self.geometry_from({name: value.detach() for name, value in params.items()}, scene)
        return geometry.with_materials(self._detached_materials(params))

    def evaluate(self, scene: GaussianScene, envs: Tuple[CubeMap, ...], training: TrainingSet) -> List[MetricRow]:
        rows = []
        for e, views in enumerate(training.environments):
            env = self.prefiltered(envs[e].texels)
            psnrs, ssims, losses = [], [], []
            with torch.no_grad():
                for view in views:
                    color = render(scene, view.camera, env, self.lut, self.cfg.postprocess, self.cfg.shading_model.value).color
                    psnrs.append(metrics_psnr(color, view.target))
                    ssims.append(metrics_ssim(color, view.target))
                    losses.append(float(image_loss(color, view.target)))
            rows.append(MetricRow(
                environment=e, views=len(views), psnr=sum(psnrs) / len(psnrs),
                ssim=sum(ssims) / len(ssims), image_loss=sum(losses) / len(losses),
            ))
        return rows

    def _divergence(self, iteration: int, params: Dict[str, torch.Tensor], scene: GaussianScene, message: str):
        dump_path = None
        if self.dump_dir is not None:
            folder = self.dump_dir / "divergence"
            folder.mkdir(parents=True, exist_ok=True)
            try:
                mat = self._detached_materials(params)
                finite = torch.isfinite(mat.basecolor).all() and torch.isfinite(mat.tint).all()
                if finite:
                    write_scene(self._detached_scene(params, scene), folder / "scene.rcap")
                for name, value in params.items():
                    write_float_dump(value.detach(), folder / f"{name}.bin")
                dump_path = str(folder)
            except Exception as e:
                logger.error(f"Failed to write divergence dump: {str(e)}")
        logger.error(f"{message} (iteration {iteration})")
        raise DivergenceError(message, dump_path)
