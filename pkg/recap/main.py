import logging
import sys
import time
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import click
from pydantic import ValidationError

from recap.config import (
    CUBE_FACE_SIZE,
    DIFFUSE_FACE_SIZE,
    FIXTURE_HELDOUT_ENV,
    FIXTURE_TRAIN_ENVS,
    FIXTURE_VIEWS_PER_ENV,
    LOG_LEVEL,
    LUT_RESOLUTION,
    LUT_SAMPLES,
    LUT_SEED,
    SPECULAR_SAMPLES,
    SUPPORTED_POSTPROCESS,
    SUPPORTED_SUITES,
)
from recap.models.schemas import (
    AcceptanceError,
    DegenerateCovarianceError,
    DivergenceError,
    FitConfig,
    HdrParseError,
    InvalidArgumentError,
    PostProcessConfig,
    RecapError,
    RunManifest,
    SceneFormatError,
    StatusEnum,
)
from recap.services.brdf import BrdfLut, integrate_brdf_lut
from recap.services.envmap import default_specular_levels, latlong_to_cube, prefilter
from recap.services.file_service import FileService
from recap.services.fixture_service import SCENE_KINDS, FixtureService, load_training_set
from recap.services.hdr_io import read_hdr, read_lut, read_scene, read_transforms, write_lut, write_scene
from recap.agents.ablation_agent import SUPPORTED_STUDIES, AblationAgent, build_fixture
from recap.agents.fit_agent import FitAgent
from recap.agents.relight_agent import RELIGHT_POSTPROCESS, RelightAgent
from recap.agents.validation_agent import ValidationAgent
from recap.utils.helpers import config_hash, configure_threads, format_duration, package_versions

logger = logging.getLogger(__name__)

EXIT_NUMERICAL = 1
EXIT_USAGE = 2

USAGE_ERRORS = (InvalidArgumentError, HdrParseError, SceneFormatError, ValidationError, FileNotFoundError)
NUMERICAL_ERRORS = (DivergenceError, AcceptanceError, DegenerateCovarianceError)


def handle_errors(func):
    """Map typed failures onto the stable exit codes"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except USAGE_ERRORS as e:
            logger.error(f"{func.__name__}: {str(e)}")
            click.echo(f"Error: {str(e)}", err=True)
            sys.exit(EXIT_USAGE)
        except NUMERICAL_ERRORS as e:
            logger.error(f"{func.__name__}: {str(e)}")
            click.echo(f"Error: {str(e)}", err=True)
            if isinstance(e, DivergenceError) and e.dump_path:
                click.echo(f"State dumped to {e.dump_path}", err=True)
            sys.exit(EXIT_NUMERICAL)
        except RecapError as e:
            logger.error(f"{func.__name__}: {str(e)}")
            click.echo(f"Error: {str(e)}", err=True)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


def _manifest(files: FileService, command: str, seed: int, config: Dict[str, Any], arguments: Dict[str, Any],
              status: StatusEnum = StatusEnum.COMPLETED, filename: str = "manifest.json") -> Path:
    manifest = RunManifest(
        command=command,
        seed=seed,
        config_hash=config_hash(config),
        config=config,
        arguments={k: (str(v) if isinstance(v, Path) else v) for k, v in arguments.items()},
        versions=package_versions(),
        status=status,
    )
    return files.write_manifest(manifest, filename)


def _load_lut(path: Optional[Path], resolution: int = LUT_RESOLUTION, samples: int = LUT_SAMPLES) -> BrdfLut:
    if path is not None:
        lut = read_lut(path)
        logger.info(f"Loaded {lut.resolution}x{lut.resolution} BRDF LUT from {path}")
        return lut
    return integrate_brdf_lut(resolution, samples)


def parse_levels(text: str, base_size: int) -> Tuple[Tuple[float, int], ...]:
    """'default' or comma-separated roughness:face_size pairs, e.g. '0:64,0.25:32,0.5:16'"""
    if text == "default":
        return default_specular_levels(base_size)
    levels = []
    for item in text.split(","):
        try:
            r, size = item.split(":")
            levels.append((float(r), int(size)))
        except ValueError as e:
            raise InvalidArgumentError(f"Bad level '{item}' in --levels; expected roughness:size") from e
    return tuple(levels)


@click.group()
@click.option("--threads", type=int, default=None, help="Worker threads (default: RECAP_THREADS or all cores)")
@click.option("--log-level", default=LOG_LEVEL, show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(threads: Optional[int], log_level: str):
    """Cross-environment Gaussian relighting: prefilter, fit, relight, ablate and validate."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    count = configure_threads(threads)
    logger.debug(f"Using {count} threads")


@cli.command("prefilter")
@click.option("--in", "hdr_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--size", default=CUBE_FACE_SIZE, show_default=True, type=click.IntRange(min=1), help="Cube face size")
@click.option("--diffuse-size", default=DIFFUSE_FACE_SIZE, show_default=True, type=click.IntRange(min=4))
@click.option("--levels", default="default", show_default=True, help="'default' or roughness:size pairs")
@click.option("--samples", default=SPECULAR_SAMPLES, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@handle_errors
def cmd_prefilter(hdr_path: Path, out_dir: Path, size: int, diffuse_size: int, levels: str, samples: int, seed: int):
    """Convert a lat-long HDR to a cube map and write its diffuse map and specular chain."""
    levels_parsed = parse_levels(levels, size)
    cube = latlong_to_cube(read_hdr(hdr_path), size)
    env = prefilter(cube, diffuse_size, levels_parsed, samples_per_texel=samples, seed=seed)

    files = FileService(out_dir)
    files.save_cube(cube, "source")
    written = files.save_prefiltered(env, "env")
    config = {"size": size, "diffuse_size": diffuse_size, "levels": [list(l) for l in levels_parsed], "samples": samples}
    _manifest(files, "prefilter", seed, config, {"in": hdr_path, "out": out_dir})
    click.echo(f"Wrote {len(written)} prefiltered maps to {out_dir}")


@cli.command("lut")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--resolution", default=LUT_RESOLUTION, show_default=True, type=int)
@click.option("--samples", default=LUT_SAMPLES, show_default=True, type=int)
@click.option("--seed", default=LUT_SEED, show_default=True, type=int)
@handle_errors
def cmd_lut(out_dir: Path, resolution: int, samples: int, seed: int):
    """Integrate the split-sum BRDF table."""
    lut = integrate_brdf_lut(resolution, samples, seed)
    files = FileService(out_dir)
    path = write_lut(lut, files.path("brdf_lut.bin"))
    _manifest(files, "lut", seed, {"resolution": resolution, "samples": samples}, {"out": out_dir})
    click.echo(f"Wrote {resolution}x{resolution} LUT to {path}")


@cli.command("render")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--hdr", "hdr_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--camera", "camera_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--postprocess", default=RELIGHT_POSTPROCESS, show_default=True, type=click.Choice(list(SUPPORTED_POSTPROCESS)))
@click.option("--shading-model", default="proposed", show_default=True, type=click.Choice(["proposed", "metallic"]))
@click.option("--face-size", default=CUBE_FACE_SIZE, show_default=True, type=click.IntRange(min=1))
@click.option("--lut", "lut_path", default=None, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", default=0, show_default=True, type=int)
@handle_errors
def cmd_render(scene_path: Path, hdr_path: Path, camera_path: Path, out_dir: Path, postprocess: str,
               shading_model: str, face_size: int, lut_path: Optional[Path], seed: int):
    """Render every frame of a camera file under one HDR map."""
    scene = read_scene(scene_path)
    cameras, _ = read_transforms(camera_path)
    cfg = PostProcessConfig.from_name(postprocess)
    agent = RelightAgent(_load_lut(lut_path), face_size=face_size, seed=seed, shading_model=shading_model)
    images = agent.relight_views(scene, read_hdr(hdr_path), cameras, cfg)

    files = FileService(out_dir)
    for i, image in enumerate(images):
        files.save_image(image.color, f"render_{i:03d}", linear=image.linear)
    config = {"postprocess": postprocess, "shading_model": shading_model, "face_size": face_size}
    _manifest(files, "render", seed, config, {"scene": scene_path, "hdr": hdr_path, "camera": camera_path})
    click.echo(f"Rendered {len(images)} view(s) to {out_dir}")


@cli.command("fit")
@click.option("--scene", "scene_path", default=None, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--views", "views_dir", default=None, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--envs", "k", default=None, type=click.IntRange(min=1), help="Number of environment slots to use")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--make-fixture", "fixture_kind", default=None, type=click.Choice(list(SCENE_KINDS)),
              help="Generate a toy scene with ground-truth views under --out/fixture and fit it")
@click.option("--lut", "lut_path", default=None, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@handle_errors
def cmd_fit(scene_path: Optional[Path], views_dir: Optional[Path], k: Optional[int], config_path: Optional[Path],
            out_dir: Path, fixture_kind: Optional[str], lut_path: Optional[Path]):
    """Jointly fit shared materials and k environment maps to multi-environment captures."""
    start = time.time()
    cfg = FitConfig.from_file(config_path) if config_path else FitConfig()
    lut = _load_lut(lut_path, cfg.lut_resolution, cfg.lut_samples)
    files = FileService(out_dir)

    if fixture_kind is not None:
        fixture_dir = files.path("fixture", "fixture.json").parent
        fixtures = FixtureService(lut, seed=cfg.seed)
        train_envs = FIXTURE_TRAIN_ENVS[:k] if k else FIXTURE_TRAIN_ENVS[:2]
        fixtures.write(fixture_dir, fixture_kind, train_envs, FIXTURE_HELDOUT_ENV, FIXTURE_VIEWS_PER_ENV)
        scene_path = fixture_dir / "scene.rcap"
        views_dir = fixture_dir / "views"
    if scene_path is None or views_dir is None:
        raise InvalidArgumentError("fit needs --scene and --views, or --make-fixture")

    scene = read_scene(scene_path)
    training = load_training_set(views_dir, k)
    logger.info(f"Fitting {len(scene)} points to {training.k} environment(s) with views {training.view_counts()}")

    result = FitAgent(cfg, lut, dump_dir=out_dir)(scene, training)

    write_scene(result.scene, files.path("scene.rcap"))
    for e, cube in enumerate(result.envs):
        files.save_cube(cube, f"env_{e}")
    files.save_loss_history(result.history)
    files.save_metrics(result.metrics)
    arguments = {"scene": scene_path, "views": views_dir, "envs": training.k, "config": config_path,
                 "make_fixture": fixture_kind}
    _manifest(files, "fit", cfg.seed, cfg.to_flat(), arguments)
    for row in result.metrics:
        click.echo(f"env {row.environment}: PSNR {row.psnr:.2f} dB, SSIM {row.ssim:.4f}")
    click.echo(f"Fit finished in {format_duration(time.time() - start)}; artifacts in {out_dir}")


@cli.command("relight")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--hdr", "hdr_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--camera", "camera_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Output PNG")
@click.option("--frame", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--shading-model", default="proposed", show_default=True, type=click.Choice(["proposed", "metallic"]))
@click.option("--face-size", default=CUBE_FACE_SIZE, show_default=True, type=click.IntRange(min=1))
@click.option("--lut", "lut_path", default=None, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", default=0, show_default=True, type=int)
@handle_errors
def cmd_relight(scene_path: Path, hdr_path: Path, camera_path: Path, out_path: Path, frame: int,
                shading_model: str, face_size: int, lut_path: Optional[Path], seed: int):
    """Render a fitted scene under a new HDR map with clip + gamma display encoding."""
    scene = read_scene(scene_path)
    cameras, _ = read_transforms(camera_path)
    if frame >= len(cameras):
        raise InvalidArgumentError(f"--frame {frame} out of range; {camera_path} has {len(cameras)} frame(s)")
    agent = RelightAgent(_load_lut(lut_path), face_size=face_size, seed=seed, shading_model=shading_model)
    image = agent.relight(scene, read_hdr(hdr_path), cameras[frame])

    files = FileService(out_path.parent)
    files.save_image(image.color, out_path.stem, linear=image.linear)
    config = {"postprocess": RELIGHT_POSTPROCESS, "shading_model": shading_model, "face_size": face_size}
    arguments = {"scene": scene_path, "hdr": hdr_path, "camera": camera_path, "frame": frame, "out": out_path}
    _manifest(files, "relight", seed, config, arguments, filename=f"{out_path.stem}_manifest.json")
    click.echo(f"Wrote {files.path(out_path.stem + '.png')}")


@cli.command("ablate")
@click.option("--study", required=True, type=click.Choice(list(SUPPORTED_STUDIES)))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--kind", default="sphere", show_default=True, type=click.Choice(list(SCENE_KINDS)))
@click.option("--views-per-env", default=FIXTURE_VIEWS_PER_ENV, show_default=True, type=click.IntRange(min=1))
@click.option("--lut", "lut_path", default=None, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@handle_errors
def cmd_ablate(study: str, out_dir: Path, config_path: Optional[Path], kind: str, views_per_env: int,
               lut_path: Optional[Path]):
    """Fit and relight one variant per row of a study on the bundled toy fixture."""
    cfg = FitConfig.from_file(config_path) if config_path else FitConfig()
    lut = _load_lut(lut_path, cfg.lut_resolution, cfg.lut_samples)
    fixtures = FixtureService(lut, seed=cfg.seed)
    fixture = build_fixture(fixtures, kind, FIXTURE_TRAIN_ENVS, FIXTURE_HELDOUT_ENV, views_per_env,
                            with_extra_views=study == "envs")
    rows = AblationAgent(cfg, lut, fixture, fixtures).run(study)

    files = FileService(out_dir)
    files.save_table(rows, f"ablation_{study}.csv")
    _manifest(files, "ablate", cfg.seed, cfg.to_flat(), {"study": study, "kind": kind, "views_per_env": views_per_env})
    for row in rows:
        click.echo(f"{row.variant:<20} relight PSNR {row.relight_psnr:6.2f} dB  SSIM {row.relight_ssim:.4f}  "
                   f"NVS PSNR {row.nvs_psnr:6.2f} dB")


@cli.command("validate")
@click.option("--suite", default="all", show_default=True, help=f"One of {', '.join(SUPPORTED_SUITES)}")
@click.option("--lut", "lut_path", default=None, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", default=0, show_default=True, type=int)
@handle_errors
def cmd_validate(suite: str, lut_path: Optional[Path], out_dir: Optional[Path], seed: int):
    """Run the oracle suites and print a pass/fail table."""
    lut = read_lut(lut_path) if lut_path else None
    results = ValidationAgent(lut, seed).run(suite)

    click.echo(f"{'check':<30} {'status':<6} {'metric':>12} {'threshold':>12}")
    for row in results:
        click.echo(f"{row.suite:<30} {'PASS' if row.passed else 'FAIL':<6} {row.metric:>12.4e} {row.threshold:>12.2e}")
    failed = [row.suite for row in results if not row.passed]

    if out_dir is not None:
        files = FileService(out_dir)
        files.save_table(results, "validation.csv")
        status = StatusEnum.FAILED if failed else StatusEnum.COMPLETED
        _manifest(files, "validate", seed, {"suite": suite}, {"lut": lut_path}, status=status)
    if failed:
        raise AcceptanceError(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    click.echo(f"All {len(results)} checks passed")


if __name__ == "__main__":
    cli()
