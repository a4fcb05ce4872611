import os
from typing import Dict, Tuple

import torch
from dotenv import load_dotenv

load_dotenv()

# Runtime Configuration
RECAP_THREADS = int(os.getenv("RECAP_THREADS", str(os.cpu_count() or 1)))
LOG_LEVEL = os.getenv("RECAP_LOG_LEVEL", "INFO")

# All differentiable computation runs in double precision
DTYPE = torch.float64

# Lighting Configuration
CUBE_FACE_SIZE = 32
SPECULAR_MIN_FACE_SIZE = 8
DIFFUSE_FACE_SIZE = 16
DIFFUSE_SOURCE_MAX = 32
SPECULAR_ROUGHNESS_LEVELS: Tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
SPECULAR_SAMPLES = 1024
ENV_INIT_VALUE = 0.5

# BRDF Configuration
LUT_RESOLUTION = 64
LUT_SAMPLES = 1024
LUT_SEED = 0
ALPHA_MIN = 1e-4
NDOTV_FLOOR = 1e-4
DIELECTRIC_F0 = 0.04

# Post-processing Configuration
GAMMA = 2.2
ACES_COEFFICIENTS = {"a": 2.51, "b": 0.03, "c": 2.43, "d": 0.59, "e": 0.14}

# Splatting Configuration
NEAR_PLANE = 0.01
SCREEN_COV_FLOOR = 0.3
TRUNCATION_SIGMA = 3.0
TRANSMITTANCE_MIN = 1e-4
COVARIANCE_MAX_CONDITION = 1e12
DEPTH_VALID_ALPHA = 0.5

# Optimization Configuration
LAMBDA_SAT = 0.01
LAMBDA_EC = 0.01
LAMBDA_DN = 0.05
LAMBDA_SSIM = 0.2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Post-processing variants
SUPPORTED_POSTPROCESS: Dict[str, Dict[str, object]] = {
    "ldr": {
        "description": "Environment limited to [0, 1], no tonemap, no gamma",
        "range_mode": "unit", "tonemap": "none", "gamma": False,
    },
    "ldr_gamma": {
        "description": "Environment limited to [0, 1], no tonemap, gamma 2.2",
        "range_mode": "unit", "tonemap": "none", "gamma": True,
    },
    "hdr_clip": {
        "description": "Non-negative HDR environment, clip, no gamma",
        "range_mode": "nonneg", "tonemap": "clip", "gamma": False,
    },
    "hdr_clip_gamma": {
        "description": "Non-negative HDR environment, clip, gamma 2.2 (default)",
        "range_mode": "nonneg", "tonemap": "clip", "gamma": True,
    },
    "hdr_reinhard_gamma": {
        "description": "Non-negative HDR environment, Reinhard, gamma 2.2",
        "range_mode": "nonneg", "tonemap": "reinhard", "gamma": True,
    },
    "hdr_aces_gamma": {
        "description": "Non-negative HDR environment, ACES fit, gamma 2.2",
        "range_mode": "nonneg", "tonemap": "aces", "gamma": True,
    },
}

# Validation suites
SUPPORTED_SUITES: Dict[str, str] = {
    "split_sum": "Split-sum shading against the Monte-Carlo rendering equation",
    "shading_identities": "Proposed shading reduces to the metallic blend at m=0 and m=1",
    "prefilter": "Diffuse prefilter against dense brute-force quadrature",
    "lut": "BRDF lookup table energy bounds and mirror limit",
    "gradients": "Autograd against central finite differences",
    "all": "Every suite above",
}

# Analytic environments used by fixtures
SUPPORTED_ENVIRONMENTS: Dict[str, str] = {
    "sky_gradient": "Blue zenith fading to a warm horizon over a dark ground",
    "three_point": "Key, fill and rim lights on a dim ambient",
    "single_hot_texel": "One bright texel on a faint ambient",
    "warm_sunset": "Low orange sun with a purple sky",
    "cool_overcast": "Soft cool dome brighter towards the zenith",
    "constant_white": "Unit radiance in every direction",
    "black": "Zero radiance",
}

# Fixture Configuration
FIXTURE_IMAGE_SIZE = 32
FIXTURE_VIEWS_PER_ENV = 8
FIXTURE_TRAIN_ENVS = ("sky_gradient", "three_point", "warm_sunset")
FIXTURE_HELDOUT_ENV = "cool_overcast"
