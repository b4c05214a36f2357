import os

import numpy as np
import pandas as pd
import pytest

from conftest import tiny_encoder_config, tiny_train_config
from helpers.encoder import Encoder
from helpers.errors import ContractViolation, DatasetError
from helpers.evalkit import (ABLATION_FILE, SUMMARY_FILE, LinearProbe, ablate, depth_probe, directional_claims,
                             evaluate_encoder, extract_features, feature_drift, fit_linear_probe, perturb,
                             pretrain_teacher, shape_bias, shape_bias_from_counts, shape_bias_of_predictions,
                             variant_config, write_ablation)
from helpers.file_helper import FileHelper
from helpers.scenegen import NUM_SHAPE_CLASSES, SceneDataset, SceneGenerator
from helpers.trainer import FrozenTeacher, load_encoder
from triplane_data_classes import AblationRow, Perturbation, TrainConfig, Variant


@pytest.fixture(scope="module")
def encoder():
    return Encoder(tiny_encoder_config(), np.random.default_rng(0))


def test_shape_bias_from_counts():
    assert shape_bias_from_counts(3, 1, 6).bias == pytest.approx(0.75)
    undefined = shape_bias_from_counts(0, 0, 5)
    assert undefined.bias is None and not undefined.defined and undefined.total == 5


def test_shape_bias_of_predictions():
    result = shape_bias_of_predictions(np.array([0, 1, 2, 3]), np.array([0, 0, 2, 1]), np.array([1, 1, 3, 2]))
    assert (result.shape_matches, result.texture_matches, result.other) == (2, 1, 1)
    assert result.bias == pytest.approx(2 / 3)


def _blobs(seed):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    labels = np.repeat(np.arange(3), 30)
    return centers[labels] + rng.normal(scale=0.5, size=(90, 2)), labels


def test_linear_probe_separates_blobs():
    features, labels = _blobs(0)
    probe = LinearProbe.fit(features, labels, num_classes=3, seed=0)
    held_out, held_out_labels = _blobs(1)
    assert np.mean(probe.predict(held_out) == held_out_labels) == 1.0
    top = probe.top_k(held_out, k=2)
    assert top.shape == (90, 2)
    np.testing.assert_array_equal(top[:, 0], probe.predict(held_out))


def test_linear_probe_needs_two_classes():
    with pytest.raises(DatasetError):
        LinearProbe.fit(np.zeros((4, 2)), np.zeros(4, dtype=int), num_classes=3, seed=0)


def test_shape_bias_on_cue_conflict(encoder, dataset_root, cue_root):
    dataset = SceneDataset(dataset_root)
    probe = LinearProbe.fit(extract_features(encoder, dataset.images(range(len(dataset)))), dataset.shape_labels(), 8,
                            seed=0)
    assert probe.num_classes == 8
    result = shape_bias(encoder, probe, SceneDataset(cue_root))
    assert result.total == 16
    assert result.bias is None or 0.0 <= result.bias <= 1.0


@pytest.mark.parametrize("perturbation", [Perturbation.Identity, Perturbation.Grayscale, Perturbation.ColorNoise,
                                          Perturbation.LowLight, Perturbation.Blur])
def test_pixel_perturbations(perturbation):
    image = np.random.default_rng(4).uniform(size=(16, 16, 3)).astype(np.float32)
    out = perturb(image, perturbation, np.random.default_rng(5))
    assert out.shape == image.shape
    assert np.all((out >= 0.0) & (out <= 1.0))
    if perturbation == Perturbation.Identity:
        np.testing.assert_array_equal(out, image)
    if perturbation == Perturbation.Grayscale:
        np.testing.assert_array_equal(out[..., 0], out[..., 2])
    if perturbation == Perturbation.LowLight:
        np.testing.assert_allclose(out, 0.4 * image, rtol=1e-6)


def test_blur_keeps_constant_images():
    image = np.full((16, 16, 3), 0.3, dtype=np.float32)
    np.testing.assert_allclose(perturb(image, Perturbation.Blur, np.random.default_rng(0)), 0.3, rtol=1e-5)


@pytest.mark.parametrize("perturbation", [Perturbation.TextureSwap, Perturbation.SizeShift])
def test_rerendering_perturbations(perturbation):
    generator = SceneGenerator(resolution=16)
    spec = generator.make_spec(3, 3, seed=6)
    image, _ = generator.render(spec)
    with pytest.raises(ContractViolation):
        perturb(image, perturbation, np.random.default_rng(0))
    out = perturb(image, perturbation, np.random.default_rng(0), spec, generator)
    assert out.shape == image.shape
    assert not np.array_equal(out, image)


def test_feature_drift(encoder):
    images = np.random.default_rng(7).uniform(size=(3, 16, 16, 3))
    assert feature_drift(encoder, encoder, images) == 0.0
    assert feature_drift(encoder, FrozenTeacher(encoder), images) == pytest.approx(0.0, abs=1e-12)
    other = Encoder(tiny_encoder_config(), np.random.default_rng(8))
    assert feature_drift(encoder, other, images) > 0.0


def test_depth_probe_is_finite(encoder, dataset_root):
    rmse = depth_probe(encoder, SceneDataset(dataset_root), seed=0, val_fraction=0.25)
    assert np.isfinite(rmse) and rmse >= 0.0


def test_evaluate_encoder(encoder, dataset_root, cue_root):
    report = evaluate_encoder(encoder, "random", SceneDataset(dataset_root), SceneDataset(cue_root), seed=0,
                              val_fraction=0.25, teacher=encoder)
    assert report.encoder == "random"
    assert report.probe.val_size == 4 and report.probe.train_size == 12
    assert 0.0 <= report.probe.accuracy <= 1.0
    assert set(report.robustness) == {p.value for p in Perturbation}
    assert report.feature_drift == 0.0
    assert len(report.top_predictions) == 5 and all(len(row) == 5 for row in report.top_predictions)
    assert report.shape_bias.total == 16


def test_pretraining_never_sees_held_out_items(dataset_root, tmp_path, monkeypatch):
    dataset = SceneDataset(dataset_root)
    seen = set()
    load = dataset.image

    def recording_image(index):
        seen.add(index)
        return load(index)

    monkeypatch.setattr(dataset, "image", recording_image)
    pretrain_teacher(dataset, tiny_encoder_config(), epochs=1, seed=7, out_path=str(tmp_path / "teacher.tpck"),
                     val_fraction=0.25)
    _, held_out = SceneDataset(dataset_root).split(0.25)
    assert seen and seen.isdisjoint(int(i) for i in held_out)


def test_linear_probe_on_shuffled_labels_is_at_chance():
    rng = np.random.default_rng(13)
    features = rng.normal(size=(1200, 16))
    labels = rng.permutation(np.arange(1200) % NUM_SHAPE_CLASSES)
    result, _ = fit_linear_probe(features[:600], labels[:600], features[600:], labels[600:], NUM_SHAPE_CLASSES,
                                 seed=0)
    chance = 1.0 / NUM_SHAPE_CLASSES
    assert abs(result.accuracy - chance) < 3.0 * np.sqrt(chance * (1.0 - chance) / 600)


def test_pretrain_teacher(dataset_root, tmp_path):
    path = pretrain_teacher(SceneDataset(dataset_root), tiny_encoder_config(), epochs=1, seed=0,
                            out_path=str(tmp_path / "teacher.tpck"), val_fraction=0.25)
    assert load_encoder(path).config == tiny_encoder_config()


def _claim_frame(values):
    rows = []
    for (variant, metric), value in values.items():
        rows.extend(AblationRow(variant.value, metric, seed, value + 0.01 * seed) for seed in range(3))
    return pd.DataFrame([row.__dict__ for row in rows])


def test_directional_claims():
    texture = f"robustness_{Perturbation.TextureSwap.value}"
    frame = _claim_frame({(Variant.Teacher, "probe_accuracy"): 0.8, (Variant.Teacher, "shape_bias"): 0.4,
                          (Variant.Full, "probe_accuracy"): 0.9, (Variant.Full, "shape_bias"): 0.6,
                          (Variant.Full, "feature_drift"): 0.1, (Variant.Full, texture): 0.7,
                          (Variant.NoDist, "probe_accuracy"): 0.5, (Variant.NoDist, "feature_drift"): 0.4,
                          (Variant.NoTriplane, texture): 0.5, (Variant.FromScratch, "probe_accuracy"): 0.3,
                          (Variant.DataSixteenth, "probe_accuracy"): 0.85,
                          (Variant.DataQuarter, "probe_accuracy"): 0.88})
    claims = directional_claims(frame)
    assert len(claims) == 6
    assert all(claim.passed for claim in claims)
    partial = directional_claims(frame[frame["variant"] != Variant.NoDist.value])
    assert len(partial) == 3


def test_failed_claim_is_reported():
    frame = _claim_frame({(Variant.Teacher, "probe_accuracy"): 0.2, (Variant.FromScratch, "probe_accuracy"): 0.3})
    (claim,) = directional_claims(frame)
    assert not claim.passed


def test_write_ablation(tmp_path):
    rows = [AblationRow("full", "probe_accuracy", 0, 0.5), AblationRow("full", "probe_accuracy", 1, 0.7)]
    csv_path, summary_path = write_ablation(str(tmp_path), rows)
    assert csv_path == str(tmp_path / ABLATION_FILE) and summary_path == str(tmp_path / SUMMARY_FILE)
    frame = pd.read_csv(csv_path)
    assert list(frame.columns) == ["variant", "metric", "seed", "value"]
    with open(summary_path) as summary_file:
        summary = summary_file.read()
    assert "0.6000" in summary and "directional claims" in summary


def test_variant_config(tmp_path):
    config = variant_config(TrainConfig(), Variant.DataSixteenth, 2, str(tmp_path))
    assert config.data_fraction == pytest.approx(1 / 16) and config.seed == 2
    assert config.out_dir.endswith("data_1_16_seed2")
    assert variant_config(TrainConfig(), Variant.NoTriplane, 0, str(tmp_path)).no_triplane
    with pytest.raises(ContractViolation):
        variant_config(TrainConfig(), Variant.Teacher, 0, str(tmp_path))


def test_ablation_logs_failed_entries(dataset_root, tmp_path):
    base = tiny_train_config(dataset_root, str(tmp_path / "base"), from_scratch=False, max_steps=1)
    rows = ablate(base, str(tmp_path), variants=[Variant.Teacher, Variant.Full, Variant.FromScratch], seeds=[0])
    assert {row.variant for row in rows} == {Variant.FromScratch.value}
    error_files = os.listdir(tmp_path / FileHelper.ERROR_FOLDER)
    assert len(error_files) == 1
    with open(tmp_path / FileHelper.ERROR_FOLDER / error_files[0]) as error_log:
        content = error_log.read()
    assert "ConfigError" in content and "DatasetError" in content
    assert os.path.exists(tmp_path / ABLATION_FILE)


@pytest.fixture(scope="module")
def ablation_grid(tmp_path_factory):
    """
    Three-seed grid of every variant on 128 small scenes, starting from a pretrained teacher
    """
    root = tmp_path_factory.mktemp("grid")
    data = str(root / "data")
    generator = SceneGenerator(resolution=16)
    generator.make_dataset(128, seed=5, root=data)
    generator.make_cue_conflict(32, seed=5, root=data)
    teacher = pretrain_teacher(SceneDataset(data), tiny_encoder_config(), epochs=30, seed=0,
                               out_path=str(root / "teacher.tpck"))
    base = tiny_train_config(data, str(root / "base"), from_scratch=False, teacher_checkpoint=teacher,
                             batch_size=8, epochs=5, max_steps=60, checkpoint_every=60, val_fraction=0.2)
    out_dir = root / "ablation"
    rows = ablate(base, str(out_dir))
    return out_dir, rows


@pytest.mark.slow
def test_full_ablation_grid(ablation_grid):
    out_dir, rows = ablation_grid
    frame = pd.read_csv(out_dir / ABLATION_FILE)
    assert len(frame) == len(rows)
    assert set(frame["variant"]) == {variant.value for variant in Variant}
    assert set(frame["seed"]) == {0, 1, 2}
    assert not os.path.exists(out_dir / FileHelper.ERROR_FOLDER)


@pytest.mark.slow
def test_pretrained_teacher_beats_chance(ablation_grid):
    out_dir, _ = ablation_grid
    frame = pd.read_csv(out_dir / ABLATION_FILE)
    accuracy = frame[(frame["variant"] == Variant.Teacher.value) & (frame["metric"] == "probe_accuracy")]["value"]
    assert accuracy.mean() > 1.0 / NUM_SHAPE_CLASSES


@pytest.mark.slow
def test_ablation_reproduces_every_direction(ablation_grid):
    out_dir, _ = ablation_grid
    claims = directional_claims(pd.read_csv(out_dir / ABLATION_FILE))
    assert len(claims) == 6
    failed = [f"{claim.name} ({claim.detail})" for claim in claims if not claim.passed]
    assert not failed
