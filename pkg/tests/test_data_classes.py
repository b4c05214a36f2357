import os
from dataclasses import replace

import pytest

from helpers.errors import ConfigError
from triplane_data_classes import (DatasetManifest, LossReport, Perturbation, PrimitiveType, ShapeClass, TrainConfig,
                                   Variant)

DEFAULTS_FILE = os.path.join(os.path.dirname(__file__), "..", "paper-defaults.cfg")


def test_from_text_skips_comments_and_blank_lines():
    config = TrainConfig.from_text("# run\n\nbatch_size = 4   # small\nlearning_rate=2e-3\nno_dist = true\n")
    assert config.batch_size == 4
    assert config.learning_rate == pytest.approx(2e-3)
    assert config.no_dist is True
    assert config.epochs == TrainConfig().epochs


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="lambda_perceptual"):
        TrainConfig.from_text("lambda_perceptual = 1.0\n", source="run.cfg")


def test_line_without_equals_sign():
    with pytest.raises(ConfigError, match="run.cfg:2"):
        TrainConfig.from_text("seed = 1\nbatch_size 4\n", source="run.cfg")


def test_overrides_replace_file_values():
    config = TrainConfig.from_text("seed = 1\nepochs = 3\n", overrides={"seed": "9"})
    assert (config.seed, config.epochs) == (9, 3)


def test_text_round_trip():
    config = replace(TrainConfig(), teacher_checkpoint="", no_triplane=True, learning_rate=3e-5, data_fraction=0.25)
    assert TrainConfig.from_text(config.to_text()) == config


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        TrainConfig.from_text("lambda_depth = -1\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("batch_size = many\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("data_fraction = 0\n")


def test_published_defaults_parse():
    with open(DEFAULTS_FILE) as config_file:
        config = TrainConfig.from_text(config_file.read(), source=DEFAULTS_FILE)
    assert config.learning_rate == pytest.approx(1e-4)
    assert (config.batch_size, config.epochs) == (16, 10)
    assert (config.lambda_rgb, config.lambda_depth, config.lambda_dist, config.lambda_norm) == (0.1, 1.0, 1.0, 1e-3)
    assert config.total_samples() == 16
    assert config.triplane_config().upsample_blocks == 2


def test_scratch_and_no_dist_switch_distillation_off():
    assert TrainConfig().loss_weights().dist == 1.0
    assert replace(TrainConfig(), from_scratch=True).loss_weights().dist == 0.0
    assert replace(TrainConfig(), no_dist=True).loss_weights().dist == 0.0


def test_no_triplane_skips_triplane_validation():
    replace(TrainConfig(), plane_resolution=12, no_triplane=True).validate()
    with pytest.raises(ConfigError):
        replace(TrainConfig(), plane_resolution=12).validate()


def test_loss_report_finiteness():
    assert LossReport(rgb=0.1, depth=0.2, dist=0.0, norm=0.0, total=0.3).is_finite()
    assert not LossReport(rgb=float("nan"), depth=0.2, dist=0.0, norm=0.0, total=0.3).is_finite()


def test_enums_compare_by_name():
    assert ShapeClass.Sphere == PrimitiveType.Sphere
    assert ShapeClass.Box != ShapeClass.Sphere
    assert Perturbation("texture-swap") == Perturbation.TextureSwap
    assert Variant("data_1/16") == Variant.DataSixteenth
    assert len({Variant.Full, Variant.Full}) == 1


def test_vocabularies():
    assert len(DatasetManifest.shape_vocabulary()) == 8
    textures = DatasetManifest.texture_vocabulary()
    assert len(textures) == 8
    assert textures[0] == "checker-warm" and textures[-1] == "solid-cool"
