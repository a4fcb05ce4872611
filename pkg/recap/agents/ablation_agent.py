import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from recap.config import FIXTURE_HELDOUT_ENV, FIXTURE_TRAIN_ENVS, FIXTURE_VIEWS_PER_ENV, SUPPORTED_POSTPROCESS
from recap.models.schemas import AblationRow, FitConfig, InvalidArgumentError, PostProcessConfig, ShadingModel
from recap.models.training import TrainingSet
from recap.services.brdf import BrdfLut
from recap.services.envmap import LatLongImage
from recap.services.fixture_service import FixtureService, toy_scene
from recap.services.optim import metrics_psnr
from recap.services.splat import GaussianScene, render
from recap.agents.fit_agent import FitAgent, FitResult
from recap.agents.relight_agent import RelightAgent
from recap.utils.helpers import timing_decorator

logger = logging.getLogger(__name__)

POSTPROCESS_ROWS = ("ldr", "ldr_gamma", "hdr_clip", "hdr_clip_gamma", "hdr_reinhard_gamma", "hdr_aces_gamma")
# (convention, adapted); baselines fit bounded lighting
BASELINE_ROWS = (("y_up_clip", True), ("y_down_sigmoid", True), ("y_down_sigmoid", False))
BASELINE_POSTPROCESS = "ldr_gamma"
SUPPORTED_STUDIES = ("postprocess", "shading", "envs")


@dataclass(frozen=True)
class AblationFixture:
    """Ground-truth scene, multi-environment captures, a held-out relighting set and a novel-view set"""
    scene: GaussianScene
    training: TrainingSet
    heldout: TrainingSet
    heldout_hdr: LatLongImage
    nvs: TrainingSet
    extra_views: Optional[TrainingSet] = None


def build_fixture(
    fixtures: FixtureService,
    kind: str = "sphere",
    train_envs: Sequence[str] = FIXTURE_TRAIN_ENVS,
    heldout_env: str = FIXTURE_HELDOUT_ENV,
    views_per_env: int = FIXTURE_VIEWS_PER_ENV,
    with_extra_views: bool = False,
) -> AblationFixture:
    if len(train_envs) < 2:
        raise InvalidArgumentError("An ablation fixture needs at least two training environments")
    scene = toy_scene(kind, seed=fixtures.seed)
    training = fixtures.training_set(scene, train_envs, views_per_env)
    heldout = fixtures.heldout_set(scene, heldout_env)
    nvs = fixtures.heldout_set(scene, train_envs[0])
    extra = None
    if with_extra_views:
        # the original ring plus as many new poses in between
        extra = fixtures.training_set(scene, [train_envs[0]], 2 * views_per_env)
    return AblationFixture(scene, training, heldout, fixtures.environment(heldout_env)[0], nvs, extra)


class AblationAgent:
    """Runs fit + relight per variant and tabulates relighting and novel-view quality"""

    def __init__(self, base_cfg: FitConfig, lut: BrdfLut, fixture: AblationFixture, fixtures: FixtureService):
        self.base_cfg = base_cfg
        self.lut = lut
        self.fixture = fixture
        self.fixtures = fixtures

    def _evaluate(self, study: str, variant: str, cfg: FitConfig, training: TrainingSet, details: Dict,
                  result: Optional[FitResult] = None, convention: Optional[str] = None, adapted: bool = True) -> AblationRow:
        if result is None:
            result = FitAgent(cfg, self.lut)(self.fixture.scene, training)
        relighter = RelightAgent(
            self.lut,
            face_size=self.fixtures.face_size,
            diffuse_size=self.fixtures.diffuse_size,
            samples=self.fixtures.prefilter_samples,
            seed=cfg.seed,
            shading_model=cfg.shading_model.value,
        )
        relit = relighter.score(result.scene, self.fixture.heldout_hdr, self.fixture.heldout.environments[0], cfg.postprocess,
                                convention, adapted)

        agent = FitAgent(cfg, self.lut)
        nvs_env = agent.prefiltered(result.envs[0].texels)
        nvs_scores = []
        with torch.no_grad():
            for view in self.fixture.nvs.environments[0]:
                color = render(result.scene, view.camera, nvs_env, self.lut, cfg.postprocess, cfg.shading_model.value).color
                nvs_scores.append(metrics_psnr(color, view.target))

        row = AblationRow(
            study=study,
            variant=variant,
            relight_psnr=relit["psnr"],
            relight_ssim=relit["ssim"],
            nvs_psnr=sum(nvs_scores) / len(nvs_scores),
            details={**details, "final_loss": result.history[-1].total if result.history else None},
        )
        logger.info(f"[{study}] {variant}: relight {row.relight_psnr:.2f} dB, NVS {row.nvs_psnr:.2f} dB")
        return row

    @timing_decorator
    def ablate_postprocess(self, configs: Sequence[str] = POSTPROCESS_ROWS,
                           baselines: Sequence[Tuple[str, bool]] = BASELINE_ROWS) -> List[AblationRow]:
        """One row per post-processing variant, then held-out HDR maps fed through baseline storage conventions"""
        rows = []
        fits: Dict[str, FitResult] = {}
        for name in configs:
            pp = PostProcessConfig.from_name(name)
            cfg = self.base_cfg.model_copy(update={"postprocess": pp})
            fits[name] = FitAgent(cfg, self.lut)(self.fixture.scene, self.fixture.training)
            rows.append(self._evaluate("postprocess", name, cfg, self.fixture.training, {
                "range_mode": pp.range_mode.value, "tonemap": pp.tonemap.value, "gamma": pp.gamma,
                "description": SUPPORTED_POSTPROCESS[name]["description"],
            }, result=fits[name]))

        if baselines:
            cfg = self.base_cfg.model_copy(update={"postprocess": PostProcessConfig.from_name(BASELINE_POSTPROCESS)})
            if BASELINE_POSTPROCESS not in fits:
                fits[BASELINE_POSTPROCESS] = FitAgent(cfg, self.lut)(self.fixture.scene, self.fixture.training)
            for convention, adapted in baselines:
                variant = f"baseline_{convention}" + ("" if adapted else "_unadapted")
                rows.append(self._evaluate("postprocess", variant, cfg, self.fixture.training, {
                    "convention": convention, "adapted": adapted, "postprocess": BASELINE_POSTPROCESS,
                }, result=fits[BASELINE_POSTPROCESS], convention=convention, adapted=adapted))
        return rows

    @timing_decorator
    def ablate_shading(self) -> List[AblationRow]:
        base = self.base_cfg
        variants = {
            "metallic": base.model_copy(update={"shading_model": ShadingModel.METALLIC, "lambda_sat": 0.0, "lambda_ec": 0.0}),
            "proposed": base.model_copy(update={"shading_model": ShadingModel.PROPOSED, "lambda_sat": 0.0, "lambda_ec": 0.0}),
            "proposed_sat": base.model_copy(update={"shading_model": ShadingModel.PROPOSED, "lambda_ec": 0.0}),
            "proposed_sat_ec": base.model_copy(update={"shading_model": ShadingModel.PROPOSED}),
        }
        return [
            self._evaluate("shading", name, cfg, self.fixture.training, {
                "shading_model": cfg.shading_model.value, "lambda_sat": cfg.lambda_sat, "lambda_ec": cfg.lambda_ec,
            })
            for name, cfg in variants.items()
        ]

    @timing_decorator
    def ablate_envs(self, counts: Sequence[int] = (1, 2, 3)) -> List[AblationRow]:
        rows = []
        available = self.fixture.training.k
        for k in counts:
            if k > available:
                logger.warning(f"Skipping k={k}: fixture has only {available} training environments")
                continue
            subset = self.fixture.training.subset(list(range(k)))
            rows.append(self._evaluate("envs", f"k{k}", self.base_cfg, subset, {"k": k, "views": subset.view_counts()}))
        if self.fixture.extra_views is not None:
            extra = self.fixture.extra_views
            rows.append(self._evaluate("envs", "k1_extra_views", self.base_cfg, extra, {"k": 1, "views": extra.view_counts()}))
        return rows

    def run(self, study: str) -> List[AblationRow]:
        if study == "postprocess":
            return self.ablate_postprocess()
        if study == "shading":
            return self.ablate_shading()
        if study == "envs":
            return self.ablate_envs()
        raise InvalidArgumentError(f"Unknown study '{study}'. Supported: {list(SUPPORTED_STUDIES)}")
