import logging
from typing import List, Optional, Sequence

import torch

from recap.config import CUBE_FACE_SIZE, DIFFUSE_FACE_SIZE, SPECULAR_SAMPLES
from recap.models.schemas import PostProcessConfig
from recap.services.brdf import BrdfLut
from recap.services.envmap import LatLongImage, PrefilteredEnv, latlong_to_cube, prefilter
from recap.services.optim import metrics_psnr, metrics_ssim
from recap.services.shading import adapt_latlong_for_baseline, preprocess_hdr_for_config, read_baseline_latlong
from recap.services.splat import Camera, GaussianScene, RenderedImage, render

logger = logging.getLogger(__name__)

RELIGHT_POSTPROCESS = "hdr_clip_gamma"


class RelightAgent:
    """Renders a fitted scene under HDR maps it never saw, with no rescaling of lighting or albedo"""

    def __init__(
        self,
        lut: BrdfLut,
        face_size: int = CUBE_FACE_SIZE,
        diffuse_size: int = DIFFUSE_FACE_SIZE,
        samples: int = SPECULAR_SAMPLES,
        seed: int = 0,
        shading_model: str = "proposed",
    ):
        self.lut = lut
        self.face_size = face_size
        self.diffuse_size = diffuse_size
        self.samples = samples
        self.seed = seed
        self.shading_model = shading_model

    def prepare(self, hdr: LatLongImage, cfg: Optional[PostProcessConfig] = None, convention: Optional[str] = None,
                adapted: bool = True) -> PrefilteredEnv:
        """Prefiltered lighting for a new map; with a convention, as a pipeline storing lighting that way reads it"""
        cfg = cfg or PostProcessConfig.from_name(RELIGHT_POSTPROCESS)
        if convention is not None:
            stored = adapt_latlong_for_baseline(hdr, convention) if adapted else hdr
            hdr = read_baseline_latlong(stored, convention)
        cube = preprocess_hdr_for_config(latlong_to_cube(hdr, self.face_size), cfg)
        return prefilter(cube, self.diffuse_size, samples_per_texel=self.samples, seed=self.seed)

    def relight(self, scene: GaussianScene, hdr: LatLongImage, cam: Camera, cfg: Optional[PostProcessConfig] = None) -> RenderedImage:
        cfg = cfg or PostProcessConfig.from_name(RELIGHT_POSTPROCESS)
        env = self.prepare(hdr, cfg)
        with torch.no_grad():
            return render(scene, cam, env, self.lut, cfg, self.shading_model)

    def relight_views(
        self,
        scene: GaussianScene,
        hdr: LatLongImage,
        cameras: Sequence[Camera],
        cfg: Optional[PostProcessConfig] = None,
        convention: Optional[str] = None,
        adapted: bool = True,
    ) -> List[RenderedImage]:
        cfg = cfg or PostProcessConfig.from_name(RELIGHT_POSTPROCESS)
        env = self.prepare(hdr, cfg, convention, adapted)
        with torch.no_grad():
            return [render(scene, cam, env, self.lut, cfg, self.shading_model) for cam in cameras]

    def score(self, scene: GaussianScene, hdr: LatLongImage, views, cfg: Optional[PostProcessConfig] = None,
              convention: Optional[str] = None, adapted: bool = True) -> dict:
        """Mean PSNR / SSIM against (camera, target) pairs"""
        images = self.relight_views(scene, hdr, [v.camera for v in views], cfg, convention, adapted)
        psnrs = [metrics_psnr(img.color, v.target) for img, v in zip(images, views)]
        ssims = [metrics_ssim(img.color, v.target) for img, v in zip(images, views)]
        result = {"psnr": sum(psnrs) / len(psnrs), "ssim": sum(ssims) / len(ssims)}
        logger.info(f"Relight score over {len(views)} views: PSNR {result['psnr']:.2f} dB, SSIM {result['ssim']:.4f}")
        return result
