import logging

import pytest
from pydantic import ValidationError

from recap.config import DIFFUSE_FACE_SIZE
from recap.models.schemas import FitConfig, InvalidArgumentError, MaterialParams, RangeMode, ShadingModel, ToneMap
from recap.utils.helpers import config_hash, format_duration, timing_decorator


class TestFitConfig:
    def test_defaults(self):
        cfg = FitConfig()
        assert cfg.postprocess.name == "hdr_clip_gamma"
        assert cfg.shading_model == ShadingModel.PROPOSED
        assert cfg.diffuse_face_size == DIFFUSE_FACE_SIZE
        assert cfg.optimize_geometry is False

    def test_from_file(self, tmp_path):
        path = tmp_path / "fit.env"
        path.write_text(
            "ITERATIONS=50\n"
            "LR_ENV=0.1\n"
            "POSTPROCESS=ldr_gamma\n"
            "SHADING_MODEL=metallic\n"
            "OPTIMIZE_ENVS=false\n"
        )
        cfg = FitConfig.from_file(path)
        assert cfg.iterations == 50
        assert cfg.lr_env == 0.1
        assert cfg.postprocess.range_mode == RangeMode.UNIT
        assert cfg.postprocess.gamma is True
        assert cfg.shading_model == ShadingModel.METALLIC
        assert cfg.optimize_envs is False

    def test_flags_override_named_postprocess(self, tmp_path):
        path = tmp_path / "fit.env"
        path.write_text("POSTPROCESS=hdr_clip_gamma\nTONEMAP=reinhard\nGAMMA=off\n")
        cfg = FitConfig.from_file(path)
        assert cfg.postprocess.tonemap == ToneMap.REINHARD
        assert cfg.postprocess.gamma is False
        assert cfg.postprocess.range_mode == RangeMode.NONNEG

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "fit.env"
        path.write_text("LEARNING_SPEED=3\n")
        with pytest.raises(InvalidArgumentError):
            FitConfig.from_file(path)

    def test_bad_boolean_rejected(self, tmp_path):
        path = tmp_path / "fit.env"
        path.write_text("OPTIMIZE_MATERIALS=maybe\n")
        with pytest.raises(InvalidArgumentError):
            FitConfig.from_file(path)

    def test_out_of_range_value_rejected(self, tmp_path):
        path = tmp_path / "fit.env"
        path.write_text("ITERATIONS=0\n")
        with pytest.raises(ValidationError):
            FitConfig.from_file(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            FitConfig.from_file(tmp_path / "absent.env")

    def test_flat_form_names_the_postprocess(self):
        assert FitConfig().to_flat()["postprocess"] == "hdr_clip_gamma"


class TestMaterialParams:
    def test_rgb_range_checked(self):
        with pytest.raises(ValidationError):
            MaterialParams(basecolor=(1.2, 0.0, 0.0))

    def test_roughness_range_checked(self):
        with pytest.raises(ValidationError):
            MaterialParams(roughness=-0.1)


class TestHelpers:
    def test_config_hash_ignores_key_order(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    @pytest.mark.parametrize("seconds, expected", [
        (0.25, "250 ms"),
        (5, "5.0 s"),
        (245, "4m 05s"),
        (3720, "1h 02m"),
    ])
    def test_format_duration(self, seconds, expected):
        assert format_duration(seconds) == expected

    def test_timing_decorator_logs_success_and_failure(self, caplog):
        @timing_decorator
        def square(x):
            if x < 0:
                raise InvalidArgumentError("negative")
            return x * x

        with caplog.at_level(logging.INFO, logger="recap.utils.helpers"):
            assert square(3) == 9
            with pytest.raises(InvalidArgumentError):
                square(-1)
        messages = [r.getMessage() for r in caplog.records]
        assert any("square took" in m for m in messages)
        assert any("square raised InvalidArgumentError" in m for m in messages)
        assert square.__name__ == "square"
