import orjson
import pandas as pd
import pytest
from click.testing import CliRunner

from recap.main import cli, parse_levels
from recap.models.environments import EnvironmentConfig
from recap.models.schemas import InvalidArgumentError
from recap.services.brdf import BrdfLut
from recap.services.fixture_service import FixtureService, ring_cameras, sphere_scene
from recap.services.hdr_io import read_lut, write_cameras, write_hdr, write_lut, write_scene

FIT_CONFIG = (
    "ITERATIONS=2\n"
    "ENV_FACE_SIZE=8\n"
    "DIFFUSE_FACE_SIZE=4\n"
    "PREFILTER_SAMPLES=16\n"
    "LUT_RESOLUTION=16\n"
    "LUT_SAMPLES=256\n"
)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def assets(tmp_path, small_lut):
    paths = {
        "scene": write_scene(sphere_scene(n_points=64), tmp_path / "scene.rcap"),
        "camera": write_cameras(ring_cameras(2, size=16), tmp_path / "transforms.json"),
        "hdr": write_hdr(EnvironmentConfig.get_latlong("sky_gradient", 16).texels, tmp_path / "sky.hdr"),
        "lut": write_lut(small_lut, tmp_path / "lut.bin"),
    }
    config = tmp_path / "fit.env"
    config.write_text(FIT_CONFIG)
    paths["config"] = config
    return {k: str(v) for k, v in paths.items()}


class TestLevelsOption:
    def test_default(self):
        assert parse_levels("default", 16)[0] == (0.0, 16)

    def test_explicit(self):
        assert parse_levels("0:8,0.5:4", 8) == ((0.0, 8), (0.5, 4))

    def test_malformed(self):
        with pytest.raises(InvalidArgumentError):
            parse_levels("0:8,half", 8)


class TestCommands:
    def test_lut(self, runner, tmp_path):
        out = tmp_path / "lut"
        result = runner.invoke(cli, ["lut", "--out", str(out), "--resolution", "16", "--samples", "256"])
        assert result.exit_code == 0, result.output
        assert read_lut(out / "brdf_lut.bin").resolution == 16
        manifest = orjson.loads((out / "manifest.json").read_bytes())
        assert manifest["command"] == "lut"
        assert manifest["config"] == {"resolution": 16, "samples": 256}
        assert len(manifest["config_hash"]) == 16

    def test_prefilter(self, runner, tmp_path, assets):
        out = tmp_path / "pre"
        result = runner.invoke(cli, ["prefilter", "--in", assets["hdr"], "--out", str(out), "--size", "8",
                                     "--diffuse-size", "4", "--levels", "0:8,0.5:4", "--samples", "16"])
        assert result.exit_code == 0, result.output
        assert (out / "source.bin").exists()
        assert (out / "env_diffuse.bin").exists()
        assert (out / "env_specular_1_r0.50.bin").exists()
        assert (out / "env_specular_1_r0.50.png").exists()

    def test_render(self, runner, tmp_path, assets):
        out = tmp_path / "render"
        result = runner.invoke(cli, ["render", "--scene", assets["scene"], "--hdr", assets["hdr"],
                                     "--camera", assets["camera"], "--out", str(out), "--face-size", "8",
                                     "--lut", assets["lut"], "--postprocess", "hdr_reinhard_gamma"])
        assert result.exit_code == 0, result.output
        assert (out / "render_000.png").exists() and (out / "render_001.png").exists()
        assert (out / "render_001.bin").exists()

    def test_relight(self, runner, tmp_path, assets):
        out = tmp_path / "relit" / "view.png"
        result = runner.invoke(cli, ["relight", "--scene", assets["scene"], "--hdr", assets["hdr"],
                                     "--camera", assets["camera"], "--out", str(out), "--frame", "1",
                                     "--face-size", "8", "--lut", assets["lut"]])
        assert result.exit_code == 0, result.output
        assert out.exists()
        manifest = orjson.loads((out.parent / "view_manifest.json").read_bytes())
        assert manifest["config"]["postprocess"] == "hdr_clip_gamma"

    def test_fit_on_written_views(self, runner, tmp_path, assets, small_lut):
        fixture_dir = tmp_path / "fixture"
        FixtureService(small_lut, image_size=16, face_size=8, diffuse_size=4, prefilter_samples=16).write(
            fixture_dir, "sphere", ("sky_gradient", "three_point"), None, views_per_env=2)
        out = tmp_path / "fit"
        result = runner.invoke(cli, ["fit", "--scene", str(fixture_dir / "scene.rcap"), "--views", str(fixture_dir / "views"),
                                     "--envs", "2", "--config", assets["config"], "--out", str(out), "--lut", assets["lut"]])
        assert result.exit_code == 0, result.output
        for name in ("scene.rcap", "env_0.bin", "env_1.bin", "env_1.png", "metrics.csv", "manifest.json"):
            assert (out / name).exists(), name
        history = pd.read_csv(out / "loss_history.csv")
        assert list(history.columns) == ["iteration", "term", "value"]
        assert set(history["term"]) == {"image", "sat", "ec", "dn", "total"}
        assert len(history) == 2 * 5

    def test_validate_writes_table(self, runner, tmp_path, assets):
        out = tmp_path / "val"
        result = runner.invoke(cli, ["validate", "--suite", "shading_identities", "--lut", assets["lut"], "--out", str(out)])
        assert result.exit_code == 0, result.output
        table = pd.read_csv(out / "validation.csv")
        assert list(table["suite"]) == ["shading_identities:m0", "shading_identities:m1"]
        assert "PASS" in result.output

    @pytest.mark.slow
    def test_fit_with_generated_fixture(self, runner, tmp_path, assets):
        out = tmp_path / "fit"
        result = runner.invoke(cli, ["fit", "--make-fixture", "sphere", "--envs", "2", "--config", assets["config"],
                                     "--out", str(out), "--lut", assets["lut"]])
        assert result.exit_code == 0, result.output
        assert (out / "fixture" / "fixture.json").exists()
        assert len(pd.read_csv(out / "metrics.csv")) == 2


class TestExitCodes:
    def test_missing_input_is_a_usage_error(self, runner, tmp_path, assets):
        result = runner.invoke(cli, ["relight", "--scene", str(tmp_path / "absent.rcap"), "--hdr", assets["hdr"],
                                     "--camera", assets["camera"], "--out", str(tmp_path / "x.png")])
        assert result.exit_code == 2

    def test_unknown_suite_is_a_usage_error(self, runner):
        result = runner.invoke(cli, ["validate", "--suite", "speed"])
        assert result.exit_code == 2

    def test_frame_out_of_range(self, runner, tmp_path, assets):
        result = runner.invoke(cli, ["relight", "--scene", assets["scene"], "--hdr", assets["hdr"],
                                     "--camera", assets["camera"], "--out", str(tmp_path / "x.png"),
                                     "--frame", "5", "--lut", assets["lut"]])
        assert result.exit_code == 2

    def test_corrupt_scene(self, runner, tmp_path, assets):
        bad = tmp_path / "bad.rcap"
        bad.write_bytes(b"RCAPSCN1" + bytes(4))
        result = runner.invoke(cli, ["relight", "--scene", str(bad), "--hdr", assets["hdr"],
                                     "--camera", assets["camera"], "--out", str(tmp_path / "x.png"), "--lut", assets["lut"]])
        assert result.exit_code == 2

    def test_corrupt_hdr(self, runner, tmp_path, assets):
        bad = tmp_path / "bad.hdr"
        bad.write_bytes(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 4 +X 8\n\x02\x02")
        result = runner.invoke(cli, ["prefilter", "--in", str(bad), "--out", str(tmp_path / "pre")])
        assert result.exit_code == 2

    def test_bad_levels(self, runner, tmp_path, assets):
        result = runner.invoke(cli, ["prefilter", "--in", assets["hdr"], "--out", str(tmp_path / "pre"),
                                     "--size", "8", "--levels", "0.3:8,0.5:4"])
        assert result.exit_code == 2

    def test_fit_needs_inputs(self, runner, tmp_path, assets):
        result = runner.invoke(cli, ["fit", "--out", str(tmp_path / "fit"), "--config", assets["config"], "--lut", assets["lut"]])
        assert result.exit_code == 2

    def test_failed_check_is_a_numerical_error(self, runner, tmp_path, small_lut):
        inflated = write_lut(BrdfLut(small_lut.table * 1.5, small_lut.samples, small_lut.seed), tmp_path / "inflated.bin")
        out = tmp_path / "val"
        result = runner.invoke(cli, ["validate", "--suite", "lut", "--lut", str(inflated), "--out", str(out)])
        assert result.exit_code == 1
        assert "check(s) failed: lut:energy" in result.stderr
        manifest = orjson.loads((out / "manifest.json").read_bytes())
        assert manifest["status"] == "failed"
