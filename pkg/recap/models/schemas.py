from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator

from recap.config import (
    DIFFUSE_FACE_SIZE,
    ENV_INIT_VALUE,
    LAMBDA_DN,
    LAMBDA_EC,
    LAMBDA_SAT,
    LUT_RESOLUTION,
    LUT_SAMPLES,
    SUPPORTED_POSTPROCESS,
)


# Errors
class RecapError(Exception):
    """Base class for every error raised by the toolkit"""


class InvalidArgumentError(RecapError, ValueError):
    pass


class DegenerateCovarianceError(RecapError):
    pass


class HdrParseError(RecapError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SceneFormatError(RecapError):
    pass


class DivergenceError(RecapError):
    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message if dump_path is None else f"{message}; state dumped to {dump_path}")
        self.dump_path = dump_path


class AcceptanceError(RecapError):
    pass


# Enums
class RangeMode(str, Enum):
    UNIT = "unit"
    NONNEG = "nonneg"


class ToneMap(str, Enum):
    NONE = "none"
    CLIP = "clip"
    REINHARD = "reinhard"
    ACES = "aces"


class ShadingModel(str, Enum):
    PROPOSED = "proposed"
    METALLIC = "metallic"


class StatusEnum(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"


RGB = Tuple[float, float, float]


class MaterialParams(BaseModel):
    """Per-point material: basecolor, specular tint, roughness and the ablation-only metallic"""
    model_config = ConfigDict(frozen=True)

    basecolor: RGB = (0.5, 0.5, 0.5)
    specular_tint: RGB = (0.04, 0.04, 0.04)
    roughness: float = Field(0.5, ge=0.0, le=1.0)
    metallic: float = Field(0.0, ge=0.0, le=1.0)

    @field_validator("basecolor", "specular_tint")
    @classmethod
    def validate_rgb(cls, v):
        if any(c < 0.0 or c > 1.0 for c in v):
            raise ValueError("RGB components must lie in [0, 1]")
        return v


class GaussianPoint(BaseModel):
    """One splat: mean, per-axis std-dev, unit quaternion (w, x, y, z), opacity and material"""
    model_config = ConfigDict(frozen=True)

    position: Tuple[float, float, float]
    scale: Tuple[float, float, float]
    rotation: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    opacity: float = Field(0.99, gt=0.0, le=1.0)
    material: MaterialParams = Field(default_factory=MaterialParams)

    @field_validator("scale")
    @classmethod
    def validate_scale(cls, v):
        if any(c <= 0.0 for c in v):
            raise ValueError("scale components must be positive")
        return v

    @field_validator("rotation")
    @classmethod
    def validate_rotation(cls, v):
        if abs(sum(c * c for c in v) ** 0.5 - 1.0) > 1e-6:
            raise ValueError("rotation must be a unit quaternion")
        return v


class PostProcessConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    range_mode: RangeMode = RangeMode.NONNEG
    tonemap: ToneMap = ToneMap.CLIP
    gamma: bool = True

    @classmethod
    def from_name(cls, name: str) -> "PostProcessConfig":
        if name not in SUPPORTED_POSTPROCESS:
            raise InvalidArgumentError(
                f"Unsupported postprocess '{name}'. Supported: {list(SUPPORTED_POSTPROCESS.keys())}"
            )
        entry = SUPPORTED_POSTPROCESS[name]
        return cls(range_mode=entry["range_mode"], tonemap=entry["tonemap"], gamma=entry["gamma"])

    @classmethod
    def from_flags(cls, range_mode: str, tonemap: str, gamma: str) -> "PostProcessConfig":
        """Build from the CLI spelling: --range {unit,nonneg} --tonemap ... --gamma {on,off}"""
        if gamma not in ("on", "off"):
            raise InvalidArgumentError(f"--gamma must be 'on' or 'off', got '{gamma}'")
        return cls(range_mode=RangeMode(range_mode), tonemap=ToneMap(tonemap), gamma=gamma == "on")

    @property
    def name(self) -> str:
        for key, entry in SUPPORTED_POSTPROCESS.items():
            if (entry["range_mode"], entry["tonemap"], entry["gamma"]) == (
                self.range_mode.value, self.tonemap.value, self.gamma
            ):
                return key
        return f"{self.range_mode.value}_{self.tonemap.value}_{'gamma' if self.gamma else 'linear'}"


class FitConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    iterations: int = Field(1000, gt=0)
    lr_material: float = Field(0.01, gt=0.0)
    lr_env: float = Field(0.05, gt=0.0)
    lr_geometry: float = Field(1e-3, gt=0.0)
    lambda_sat: float = Field(LAMBDA_SAT, ge=0.0)
    lambda_ec: float = Field(LAMBDA_EC, ge=0.0)
    lambda_dn: float = Field(LAMBDA_DN, ge=0.0)
    postprocess: PostProcessConfig = Field(default_factory=PostProcessConfig)
    prefilter_cadence: int = Field(8, ge=1)
    prefilter_samples: int = Field(128, ge=1)
    env_face_size: int = Field(32, ge=1)
    diffuse_face_size: int = Field(DIFFUSE_FACE_SIZE, ge=4)
    env_init: float = Field(ENV_INIT_VALUE, ge=0.0)
    lut_resolution: int = Field(LUT_RESOLUTION, ge=16)
    lut_samples: int = Field(LUT_SAMPLES, ge=256)
    shading_model: ShadingModel = ShadingModel.PROPOSED
    optimize_materials: bool = True
    optimize_envs: bool = True
    optimize_geometry: bool = False
    log_every: int = Field(100, ge=1)
    seed: int = 0

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "FitConfig":
        """Parse the flat KEY=VALUE config format; keys mirror the field names"""
        path = Path(path)
        if not path.exists():
            raise InvalidArgumentError(f"Config file not found: {path}")
        raw = {k.lower(): v for k, v in dotenv_values(path).items() if v is not None}

        postprocess = None
        if "postprocess" in raw:
            postprocess = PostProcessConfig.from_name(raw.pop("postprocess"))
        flags = {k: raw.pop(k) for k in ("range_mode", "tonemap", "gamma") if k in raw}
        if flags:
            base = postprocess or PostProcessConfig()
            postprocess = PostProcessConfig(
                range_mode=flags.get("range_mode", base.range_mode),
                tonemap=flags.get("tonemap", base.tonemap),
                gamma=_parse_bool(flags["gamma"]) if "gamma" in flags else base.gamma,
            )

        unknown = set(raw) - set(cls.model_fields)
        if unknown:
            raise InvalidArgumentError(f"Unknown config keys: {sorted(unknown)}")

        values: Dict[str, Any] = dict(raw)
        for key in ("optimize_materials", "optimize_envs", "optimize_geometry"):
            if key in values:
                values[key] = _parse_bool(values[key])
        if postprocess is not None:
            values["postprocess"] = postprocess
        return cls(**values)

    def to_flat(self) -> Dict[str, Any]:
        data = self.model_dump(mode="json")
        data["postprocess"] = self.postprocess.name
        return data


def _parse_bool(value: str) -> bool:
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise InvalidArgumentError(f"Cannot interpret '{value}' as a boolean")


class RunManifest(BaseModel):
    """Written beside every command's outputs"""
    command: str
    seed: int
    config_hash: str
    config: Dict[str, Any] = Field(default_factory=dict)
    arguments: Dict[str, Any] = Field(default_factory=dict)
    versions: Dict[str, str] = Field(default_factory=dict)
    status: StatusEnum = StatusEnum.COMPLETED
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat())


class SuiteResult(BaseModel):
    suite: str
    passed: bool
    metric: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0


class MetricRow(BaseModel):
    environment: int
    views: int
    psnr: float
    ssim: float
    image_loss: float


class LossRecord(BaseModel):
    iteration: int
    environment: int
    image: float
    sat: float
    ec: float
    dn: float
    total: float


class AblationRow(BaseModel):
    study: str
    variant: str
    relight_psnr: float
    relight_ssim: float
    nvs_psnr: float
    details: Dict[str, Any] = Field(default_factory=dict)


def rows_to_records(rows: List[BaseModel]) -> List[Dict[str, Any]]:
    return [row.model_dump() for row in rows]
