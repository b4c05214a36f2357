import csv
import os

import numpy as np
import pytest

from conftest import tiny_train_config
from helpers.diffmath import Parameter
from helpers.encoder import Encoder
from helpers.errors import ConfigError, NonFiniteError, TrainingAborted
from helpers.evalkit import feature_drift
from helpers.file_helper import FileHelper
from helpers.scenegen import SceneDataset, SceneGenerator
from helpers.trainer import (Adam, ConvDecoder, Trainer, adam_step, augment, build_model, init_teacher, load_encoder,
                             load_model)
from triplane_data_classes import LossReport, TrainConfig


def test_adam_first_step_by_hand():
    params = {"p": np.array([1.0])}
    moments = ({"p": np.zeros(1)}, {"p": np.zeros(1)})
    adam_step(params, {"p": np.array([0.5])}, moments, t=1, lr=0.1)
    assert params["p"][0] == pytest.approx(0.9, abs=1e-6)
    assert moments[0]["p"][0] == pytest.approx(0.05)
    assert moments[1]["p"][0] == pytest.approx(0.00025)


def test_adam_refuses_non_finite_gradients():
    param = Parameter(np.ones(3))
    param.grad = np.array([0.1, np.nan, 0.2])
    optimizer = Adam([("p", param)], lr=0.1)
    with pytest.raises(NonFiniteError, match="'p'"):
        optimizer.step()
    np.testing.assert_array_equal(param.data, 1.0)
    assert optimizer.t == 0


def test_augment_identity_and_flip():
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    depth = rng.uniform(1.7, 3.7, size=(8, 8)).astype(np.float32)
    same_image, same_depth = augment(image, depth, rng, flip=False, crop=False)
    np.testing.assert_array_equal(same_image, image)
    np.testing.assert_array_equal(same_depth, depth)
    flipped_image, flipped_depth = augment(image, depth, rng, flip=True, crop=False)
    np.testing.assert_array_equal(flipped_image, image[:, ::-1])
    np.testing.assert_array_equal(flipped_depth, depth[:, ::-1])


def test_augment_crop_keeps_size_and_depth_values():
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    depth = rng.uniform(1.7, 3.7, size=(16, 16)).astype(np.float32)
    cropped_image, cropped_depth = augment(image, depth, rng)
    assert cropped_image.shape == image.shape and cropped_depth.shape == depth.shape
    # nearest-neighbour resizing never invents depth values
    assert set(np.unique(cropped_depth)) <= set(np.unique(depth))


def test_train_step_updates_parameters(dataset_root, tmp_path):
    trainer = Trainer(tiny_train_config(dataset_root, str(tmp_path)))
    before = {name: param.data.copy() for name, param in trainer.model.named_parameters()}
    images, depths = trainer.load_batch(0)
    assert images.shape == (2, 16, 16, 3) and depths.shape == (2, 16, 16)
    report = trainer.train_step(images, depths, np.random.default_rng(0))
    assert isinstance(report, LossReport) and report.is_finite()
    assert report.dist == 0.0
    changed = [name for name, param in trainer.model.named_parameters() if not np.array_equal(param.data,
                                                                                               before[name])]
    assert "encoder.patch_embed.weight" in changed
    assert "radiance.fc2.bias" in changed


def test_teacher_stays_frozen(dataset_root, teacher_checkpoint, tmp_path):
    config = tiny_train_config(dataset_root, str(tmp_path), from_scratch=False, teacher_checkpoint=teacher_checkpoint)
    trainer = Trainer(config)
    fingerprint = trainer.teacher.fingerprint()
    np.testing.assert_array_equal(trainer.model.encoder.patch_embed.weight.data,
                                  trainer.teacher.state_dict()["patch_embed.weight"])
    images, depths = trainer.load_batch(0)
    report = trainer.train_step(images, depths, np.random.default_rng(0))
    # the student starts as a copy of the teacher
    assert report.dist == pytest.approx(0.0, abs=1e-10)
    assert trainer.teacher.fingerprint() == fingerprint
    assert not np.array_equal(trainer.model.encoder.patch_embed.weight.data,
                              trainer.teacher.state_dict()["patch_embed.weight"])


def test_teacher_configuration_errors(dataset_root, teacher_checkpoint, tmp_path):
    assert init_teacher(tiny_train_config(dataset_root, str(tmp_path))) is None
    with pytest.raises(ConfigError):
        init_teacher(tiny_train_config(dataset_root, str(tmp_path), from_scratch=False))
    with pytest.raises(ConfigError):
        init_teacher(tiny_train_config(dataset_root, str(tmp_path), from_scratch=False,
                                       teacher_checkpoint=str(tmp_path / "missing.tpck")))
    with pytest.raises(ConfigError, match="does not match"):
        init_teacher(tiny_train_config(dataset_root, str(tmp_path), from_scratch=False,
                                       teacher_checkpoint=teacher_checkpoint, encoder_width=16))


def test_conv_decoder(dataset_root, tmp_path):
    config = tiny_train_config(dataset_root, str(tmp_path), no_triplane=True)
    model = build_model(config, np.random.default_rng(0))
    assert isinstance(model, ConvDecoder)
    reconstruction = model.reconstruct(model.encoder(np.zeros((1, 16, 16, 3))))
    assert reconstruction.image.shape == (8, 8, 3) and reconstruction.depth.shape == (8, 8)
    assert reconstruction.sigma is None
    depth = reconstruction.depth.numpy()
    assert np.all((depth >= config.camera().near) & (depth <= config.camera().far))
    with pytest.raises(ConfigError):
        build_model(tiny_train_config(dataset_root, str(tmp_path), no_triplane=True, render_resolution=12),
                    np.random.default_rng(0))


def _checkpoint_bytes(path):
    with open(path, "rb") as checkpoint_file:
        return checkpoint_file.read()


def test_resume_matches_uninterrupted_run(dataset_root, tmp_path):
    straight = Trainer(tiny_train_config(dataset_root, str(tmp_path / "straight"), max_steps=4)).train()
    interrupted_dir = str(tmp_path / "interrupted")
    Trainer(tiny_train_config(dataset_root, interrupted_dir, max_steps=2)).train()
    resumed = Trainer(tiny_train_config(dataset_root, interrupted_dir, max_steps=4)).train()
    assert _checkpoint_bytes(resumed) == _checkpoint_bytes(straight)
    with open(os.path.join(interrupted_dir, FileHelper.METRICS_FILE), newline="") as metrics_file:
        steps = [row["step"] for row in csv.DictReader(metrics_file)]
    assert steps == ["0", "1", "2", "3"]


def test_resume_rejects_changed_configuration(dataset_root, tmp_path):
    Trainer(tiny_train_config(dataset_root, str(tmp_path), max_steps=1)).train()
    with pytest.raises(ConfigError):
        Trainer(tiny_train_config(dataset_root, str(tmp_path), max_steps=2, learning_rate=5e-3)).train()


def test_training_writes_run_files(dataset_root, tmp_path):
    path = Trainer(tiny_train_config(dataset_root, str(tmp_path), max_steps=3)).train()
    assert path == os.path.join(str(tmp_path), FileHelper.CHECKPOINT_FILE)
    with open(tmp_path / FileHelper.METRICS_FILE, newline="") as metrics_file:
        rows = list(csv.DictReader(metrics_file))
    assert len(rows) == 3
    assert list(rows[0]) == FileHelper.METRICS_COLUMNS
    assert all(float(row["total"]) >= 0 for row in rows)
    assert os.path.exists(tmp_path / FileHelper.CONFIG_FILE)
    step, _, _ = FileHelper.read_checkpoint(path)
    assert step == 3


def test_data_fraction_keeps_the_step_count(dataset_root, tmp_path):
    full = Trainer(tiny_train_config(dataset_root, str(tmp_path / "full")))
    quarter = Trainer(tiny_train_config(dataset_root, str(tmp_path / "quarter"), data_fraction=0.25))
    assert len(full.train_indices) == 12 and len(quarter.train_indices) == 3
    assert quarter.steps_per_epoch == full.steps_per_epoch == 6
    seen = np.concatenate([quarter.batch_indices(step) for step in range(quarter.steps_per_epoch)])
    assert len(seen) == 12 and set(seen) <= set(quarter.train_indices)


def test_non_finite_loss_aborts_with_a_checkpoint(dataset_root, tmp_path):
    trainer = Trainer(tiny_train_config(dataset_root, str(tmp_path), no_triplane=True, max_steps=2))
    trainer.model.out_conv.bias.data[:] = np.nan
    with pytest.raises(TrainingAborted) as aborted:
        trainer.train()
    assert aborted.value.checkpoint_path == os.path.join(str(tmp_path), FileHelper.LAST_GOOD_CHECKPOINT_FILE)
    assert os.path.exists(aborted.value.checkpoint_path)


def test_encoder_and_model_load_from_a_run(dataset_root, tmp_path):
    trainer = Trainer(tiny_train_config(dataset_root, str(tmp_path), max_steps=1))
    path = trainer.train()
    encoder = load_encoder(path)
    assert isinstance(encoder, Encoder)
    for name, param in trainer.model.encoder.named_parameters():
        np.testing.assert_array_equal(dict(encoder.named_parameters())[name].data, param.data, err_msg=name)
    model, config = load_model(path)
    assert config.render_resolution == 8
    np.testing.assert_array_equal(model.radiance.fc1.weight.data, trainer.model.radiance.fc1.weight.data)


def test_adam_leaves_parameters_without_gradient_alone():
    param = Parameter(np.full(2, 0.5))
    optimizer = Adam([("p", param)], lr=0.1)
    optimizer.step()
    np.testing.assert_array_equal(param.data, 0.5)
    assert optimizer.t == 1


def _losses(out_dir):
    with open(os.path.join(out_dir, FileHelper.METRICS_FILE), newline="") as metrics_file:
        rows = list(csv.DictReader(metrics_file))
    return {name: np.array([float(row[name]) for row in rows]) for name in ("rgb", "depth", "total")}


@pytest.mark.slow
def test_single_scene_overfit(tmp_path):
    root = str(tmp_path / "data")
    SceneGenerator(resolution=16).make_dataset(8, seed=0, root=root)
    out_dir = str(tmp_path / "run")
    Trainer(tiny_train_config(root, out_dir, val_fraction=0.0, data_fraction=0.125, batch_size=1, epochs=500,
                              max_steps=500, checkpoint_every=500, render_resolution=16)).train()
    losses = _losses(out_dir)
    assert len(losses["total"]) == 500 and np.all(np.isfinite(losses["total"]))
    for name in ("rgb", "depth"):
        assert losses[name][-20:].mean() < 0.1 * losses[name][0]


@pytest.mark.slow
def test_training_smoke_with_published_constants(tmp_path):
    root = str(tmp_path / "data")
    SceneGenerator(resolution=64).make_dataset(256, seed=0, root=root)
    with open(os.path.join(os.path.dirname(__file__), "..", "paper-defaults.cfg")) as config_file:
        text = config_file.read()
    out_dir = str(tmp_path / "run")
    overrides = {"dataset_root": root, "out_dir": out_dir, "max_steps": "1000", "from_scratch": "true"}
    config = TrainConfig.from_text(text, overrides)
    assert config.total_samples() == 16 and config.learning_rate == pytest.approx(1e-4)
    Trainer(config).train()
    losses = _losses(out_dir)
    assert len(losses["total"]) == 1000 and np.all(np.isfinite(losses["total"]))
    for name in ("rgb", "depth"):
        assert losses[name][-50:].mean() <= 0.5 * losses[name][0]


def test_first_step_reaches_every_parameter(dataset_root, tmp_path):
    trainer = Trainer(tiny_train_config(dataset_root, str(tmp_path)))
    images, depths = trainer.load_batch(0)
    trainer.train_step(images, depths, np.random.default_rng(0))
    silent = [name for name, param in trainer.model.named_parameters()
              if param.grad is None or not np.any(param.grad != 0)]
    assert not silent


def test_interrupt_inside_a_step_keeps_the_last_boundary(dataset_root, tmp_path, monkeypatch):
    straight = Trainer(tiny_train_config(dataset_root, str(tmp_path / "straight"), max_steps=3)).train()
    config = tiny_train_config(dataset_root, str(tmp_path / "interrupted"), max_steps=3)
    trainer = Trainer(config)
    update = trainer.optimizer.step
    updates = []

    def update_then_interrupt():
        update()
        updates.append(trainer.step)
        if len(updates) == 2:
            raise KeyboardInterrupt

    monkeypatch.setattr(trainer.optimizer, "step", update_then_interrupt)
    with pytest.raises(KeyboardInterrupt):
        trainer.train()
    step, _, _ = FileHelper.read_checkpoint(trainer.checkpoint_path)
    assert step == 1
    resumed = Trainer(config).train()
    assert _checkpoint_bytes(resumed) == _checkpoint_bytes(straight)


def test_distillation_weight_limits_feature_drift(dataset_root, teacher_checkpoint, tmp_path):
    teacher = load_encoder(teacher_checkpoint)
    images = SceneDataset(dataset_root).images(np.arange(8))
    drifts = []
    for lambda_dist in (0.0, 100.0):
        config = tiny_train_config(dataset_root, str(tmp_path / f"dist_{lambda_dist:g}"), from_scratch=False,
                                   teacher_checkpoint=teacher_checkpoint, lambda_dist=lambda_dist, max_steps=8,
                                   epochs=2, checkpoint_every=8)
        drifts.append(feature_drift(load_encoder(Trainer(config).train()), teacher, images))
    assert drifts[0] > drifts[1] >= 0.0
