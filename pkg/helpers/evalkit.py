"""
Evaluation protocols for encoders: teacher pretraining, linear probing, shape bias on cue-conflict
scenes, robustness to appearance shifts, a linear depth probe, feature drift and the ablation grid.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import pandas as pd
from scipy import linalg
from tqdm import tqdm

from helpers import diffmath as dm
from helpers.diffmath import Graph
from helpers.encoder import Encoder
from helpers.errors import ContractViolation, DatasetError
from helpers.file_helper import FileHelper
from helpers.layers import Linear
from helpers.scenegen import NUM_SHAPE_CLASSES, NUM_TEXTURE_CLASSES, SceneDataset, SceneGenerator, rescale, \
    swap_texture
from helpers.trainer import Adam, FrozenTeacher, augment, load_encoder, save_encoder, train
from triplane_data_classes import (AblationRow, EncoderConfig, EvalReport, Perturbation, ProbeResult,
                                   SceneSpec, ShapeBiasResult, TrainConfig, Variant)

logger = logging.getLogger(__name__)

TEACHER_LEARNING_RATE = 1e-3
TEACHER_BATCH_SIZE = 32
SIZE_SHIFT_FACTOR = 0.7
COLOR_NOISE_STD = 0.1
LOW_LIGHT_GAIN = 0.4
BLUR_KERNEL = (5, 5)
ABLATION_SEEDS = (0, 1, 2)
ABLATION_FILE = "ablation.csv"
SUMMARY_FILE = "summary.txt"


# -- features ---------------------------------------------------------------------------------------------------------

def extract_features(encoder: Encoder, images: np.ndarray, batch_size: int = 32, grid: bool = False) -> np.ndarray:
    """
    Frozen features of a stack of images
    @param grid: return the (N, g, g, D) grid instead of the pooled (N, D) vectors
    """
    chunks = []
    with dm.no_grad():
        for start in range(0, images.shape[0], batch_size):
            features = encoder(images[start:start + batch_size])
            chunks.append((features.grid if grid else features.pooled).data.copy())
    return np.concatenate(chunks, axis=0)


def pretrain_teacher(dataset: SceneDataset, config: EncoderConfig, epochs: int, seed: int, out_path: str,
                     learning_rate: float = TEACHER_LEARNING_RATE, batch_size: int = TEACHER_BATCH_SIZE,
                     val_fraction: float = 0.2) -> str:
    """
    Trains an encoder with a linear head on shape classification, discards the head and saves the encoder
    @return: path of the encoder checkpoint
    """
    train_indices, _ = dataset.split(val_fraction)
    rng = np.random.default_rng([seed, 6])
    encoder = Encoder(config, rng)
    head = Linear(config.feature_dim, NUM_SHAPE_CLASSES, rng)
    optimizer = Adam(encoder.named_parameters("encoder.") + head.named_parameters("head."), learning_rate)
    labels = dataset.shape_labels()
    steps_per_epoch = -(-len(train_indices) // batch_size)
    progress = tqdm(total=epochs * steps_per_epoch, desc="pretrain-teacher")
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch, 7]).permutation(train_indices)
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            images = np.stack([augment(dataset.image(int(i)), dataset.depth(int(i)),
                                       np.random.default_rng([seed, epoch, int(i)]))[0] for i in batch])
            encoder.zero_grad()
            head.zero_grad()
            loss = dm.cross_entropy(head(encoder(images).pooled), labels[batch])
            dm.backward(Graph.trace(loss), loss)
            optimizer.step()
            progress.update(1)
            progress.set_postfix(loss=f"{loss.item():.4f}")
    progress.close()
    save_encoder(out_path, encoder)
    print("Save teacher to", out_path)
    return out_path


# -- linear probe -----------------------------------------------------------------------------------------------------

class LinearProbe:
    """
    Standardized features followed by one linear layer, fitted by full-batch gradient descent with momentum.
    Features are scaled to unit squared norm on average so one learning rate suits any feature width
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray, weight: np.ndarray, bias: np.ndarray):
        self.mean = mean
        self.std = std
        self.weight = weight
        self.bias = bias

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    @staticmethod
    def fit(features: np.ndarray, labels: np.ndarray, num_classes: int, seed: int, steps: int = 500,
            learning_rate: float = 1.0, momentum: float = 0.9, weight_decay: float = 1e-4) -> LinearProbe:
        labels = np.asarray(labels, dtype=np.int64)
        if len(np.unique(labels)) < 2:
            raise DatasetError("linear probe needs at least two classes in its training data")
        mean = features.mean(axis=0)
        std = (features.std(axis=0) + 1e-6) * np.sqrt(features.shape[1])
        x = dm.Tensor((features - mean) / std)
        layer = Linear(features.shape[1], num_classes, np.random.default_rng([seed, 8]))
        velocity = {id(p): np.zeros_like(p.data) for p in layer.parameters()}
        for _ in range(steps):
            layer.zero_grad()
            loss = dm.cross_entropy(layer(x), labels)
            dm.backward(Graph.trace(loss), loss)
            for param in layer.parameters():
                grad = param.grad + weight_decay * param.data
                velocity[id(param)] = momentum * velocity[id(param)] + grad
                param.data -= learning_rate * velocity[id(param)]
        return LinearProbe(mean, std, layer.weight.data.copy(), layer.bias.data.copy())

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.std) @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=-1)

    def top_k(self, features: np.ndarray, k: int = 5) -> np.ndarray:
        """
        Class indices ranked by score, best first, (N, k)
        """
        return np.argsort(-self.logits(features), axis=-1, kind="stable")[:, :k]


def fit_linear_probe(train_features: np.ndarray, train_labels: np.ndarray, val_features: np.ndarray,
                     val_labels: np.ndarray, num_classes: int, seed: int) -> Tuple[ProbeResult, LinearProbe]:
    probe = LinearProbe.fit(train_features, train_labels, num_classes, seed)
    correct = probe.predict(val_features) == val_labels
    per_class = [float(correct[val_labels == c].mean()) if np.any(val_labels == c) else float("nan")
                 for c in range(num_classes)]
    result = ProbeResult(accuracy=float(correct.mean()) if correct.size else float("nan"),
                         per_class_accuracy=per_class, train_size=int(train_labels.shape[0]),
                         val_size=int(val_labels.shape[0]), seed=seed)
    return result, probe


def linear_probe(encoder: Encoder, dataset: SceneDataset, seed: int,
                 val_fraction: float = 0.2) -> Tuple[ProbeResult, LinearProbe]:
    """
    Shape-class probe on pooled frozen features, scored on the seeded held-out split
    """
    train_indices, val_indices = dataset.split(val_fraction)
    if len(val_indices) == 0:
        raise DatasetError(f"{dataset.root}: no held-out items for the probe")
    labels = dataset.shape_labels()
    return fit_linear_probe(extract_features(encoder, dataset.images(train_indices)), labels[train_indices],
                            extract_features(encoder, dataset.images(val_indices)), labels[val_indices],
                            NUM_SHAPE_CLASSES, seed)


# -- shape bias and robustness ----------------------------------------------------------------------------------------

def shape_bias_from_counts(shape_matches: int, texture_matches: int, other: int) -> ShapeBiasResult:
    decided = shape_matches + texture_matches
    bias = shape_matches / decided if decided > 0 else None
    return ShapeBiasResult(shape_matches=shape_matches, texture_matches=texture_matches, other=other, bias=bias)


def shape_bias_of_predictions(predictions: np.ndarray, shape_labels: np.ndarray,
                              texture_labels: np.ndarray) -> ShapeBiasResult:
    shape_hits = predictions == shape_labels
    texture_hits = (predictions == texture_labels) & ~shape_hits
    return shape_bias_from_counts(int(shape_hits.sum()), int(texture_hits.sum()),
                                  int((~shape_hits & ~texture_hits).sum()))


def shape_bias(encoder: Encoder, probe: LinearProbe, cue_dataset: SceneDataset) -> ShapeBiasResult:
    """
    Classifies cue-conflict scenes and counts predictions that follow the shape or the texture label
    """
    indices = np.arange(len(cue_dataset))
    predictions = probe.predict(extract_features(encoder, cue_dataset.images(indices)))
    return shape_bias_of_predictions(predictions, cue_dataset.shape_labels(), cue_dataset.texture_labels())


def perturb(image: np.ndarray, perturbation: Perturbation, rng: np.random.Generator,
            spec: Optional[SceneSpec] = None, generator: Optional[SceneGenerator] = None) -> np.ndarray:
    """
    Applies an appearance shift. texture-swap and size-shift re-render the scene and need its spec
    """
    if perturbation == Perturbation.Identity:
        return image
    if perturbation in (Perturbation.TextureSwap, Perturbation.SizeShift):
        if spec is None or generator is None:
            raise ContractViolation(f"{perturbation.value} re-renders the scene and needs its spec and generator")
        if perturbation == Perturbation.TextureSwap:
            texture = (spec.texture_class + 1 + int(rng.integers(NUM_TEXTURE_CLASSES - 1))) % NUM_TEXTURE_CLASSES
            return generator.render(swap_texture(spec, texture))[0]
        return generator.render(rescale(spec, SIZE_SHIFT_FACTOR))[0]
    if perturbation == Perturbation.Grayscale:
        gray = cv2.cvtColor(image.astype(np.float32), cv2.COLOR_RGB2GRAY)
        return np.repeat(gray[..., None], 3, axis=-1)
    if perturbation == Perturbation.ColorNoise:
        return np.clip(image + rng.normal(0.0, COLOR_NOISE_STD, size=image.shape), 0.0, 1.0).astype(np.float32)
    if perturbation == Perturbation.LowLight:
        return (image * LOW_LIGHT_GAIN).astype(np.float32)
    if perturbation == Perturbation.Blur:
        return cv2.GaussianBlur(image.astype(np.float32), BLUR_KERNEL, 1.0)
    raise ContractViolation(f"unknown perturbation {perturbation}")


def robustness_eval(encoder: Encoder, probe: LinearProbe, dataset: SceneDataset, perturbation: Perturbation,
                    seed: int, val_fraction: float = 0.2) -> float:
    """
    Probe accuracy on perturbed held-out scenes
    """
    _, val_indices = dataset.split(val_fraction)
    images = []
    for index in val_indices:
        rng = np.random.default_rng([seed, int(index), 9])
        spec = dataset.spec(int(index)) if perturbation in (Perturbation.TextureSwap, Perturbation.SizeShift) else None
        images.append(perturb(dataset.image(int(index)), perturbation, rng, spec, dataset.generator))
    predictions = probe.predict(extract_features(encoder, np.stack(images)))
    return float(np.mean(predictions == dataset.shape_labels(val_indices)))


# -- representation metrics -------------------------------------------------------------------------------------------

def feature_drift(student: Encoder, teacher: Union[Encoder, FrozenTeacher], images: np.ndarray,
                  batch_size: int = 32) -> float:
    """
    Mean over items of the per-element mean squared grid difference
    """
    drifts = []
    with dm.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = images[start:start + batch_size]
            student_grid = student(batch).grid.data
            teacher_grid = teacher(batch) if isinstance(teacher, FrozenTeacher) else teacher(batch).grid
            diff = (student_grid.astype(np.float64) - teacher_grid.data) ** 2
            drifts.append(diff.reshape(diff.shape[0], -1).mean(axis=1))
    return float(np.concatenate(drifts).mean())


def depth_probe(encoder: Encoder, dataset: SceneDataset, seed: int, val_fraction: float = 0.2,
                alpha: float = 1e-2) -> float:
    """
    Ridge regression from per-patch grid features to the patch-mean oracle depth
    @return: RMSE in scene units on the held-out split
    """
    train_indices, val_indices = dataset.split(val_fraction)
    if len(val_indices) == 0:
        raise DatasetError(f"{dataset.root}: no held-out items for the depth probe")
    g = encoder.config.grid_size

    def _design(indices):
        grid = extract_features(encoder, dataset.images(indices), grid=True).astype(np.float64)
        targets = np.stack([cv2.resize(dataset.depth(int(i)), (g, g), interpolation=cv2.INTER_AREA)
                            for i in indices]).astype(np.float64)
        return grid.reshape(-1, grid.shape[-1]), targets.reshape(-1)

    x_train, y_train = _design(train_indices)
    x_val, y_val = _design(val_indices)
    mean, std = x_train.mean(axis=0), x_train.std(axis=0) + 1e-6
    x_train, x_val = (x_train - mean) / std, (x_val - mean) / std
    offset = y_train.mean()
    gram = x_train.T @ x_train + alpha * len(y_train) * np.eye(x_train.shape[1])
    weights = linalg.solve(gram, x_train.T @ (y_train - offset), assume_a="pos")
    prediction = x_val @ weights + offset
    return float(np.sqrt(np.mean((prediction - y_val) ** 2)))


def evaluate_encoder(encoder: Encoder, name: str, dataset: SceneDataset, cue_dataset: Optional[SceneDataset],
                     seed: int, val_fraction: float = 0.2, teacher: Optional[Encoder] = None,
                     perturbations: Iterable[Perturbation] = tuple(Perturbation)) -> EvalReport:
    probe_result, probe = linear_probe(encoder, dataset, seed, val_fraction)
    if cue_dataset is not None:
        bias = shape_bias(encoder, probe, cue_dataset)
        shown = np.arange(min(5, len(cue_dataset)))
        top = probe.top_k(extract_features(encoder, cue_dataset.images(shown)), 5).tolist()
    else:
        bias, top = shape_bias_from_counts(0, 0, 0), []
    robustness = {p.value: robustness_eval(encoder, probe, dataset, p, seed, val_fraction) for p in perturbations}
    drift = None
    if teacher is not None:
        _, val_indices = dataset.split(val_fraction)
        drift = feature_drift(encoder, teacher, dataset.images(val_indices))
    return EvalReport(encoder=name, probe=probe_result, shape_bias=bias, robustness=robustness,
                      depth_rmse=depth_probe(encoder, dataset, seed, val_fraction), feature_drift=drift,
                      top_predictions=top)


# -- ablation grid ----------------------------------------------------------------------------------------------------

@dataclass
class DirectionalClaim:
    name: str
    passed: bool
    detail: str


def variant_config(base: TrainConfig, variant: Variant, seed: int, out_dir: str) -> TrainConfig:
    flags = {Variant.Full: {}, Variant.NoTriplane: {"no_triplane": True}, Variant.NoDist: {"no_dist": True},
             Variant.FromScratch: {"from_scratch": True}, Variant.DataSixteenth: {"data_fraction": 1.0 / 16.0},
             Variant.DataQuarter: {"data_fraction": 0.25}}
    if variant not in flags:
        raise ContractViolation(f"variant {variant.value} is not a training run")
    run_dir = os.path.join(out_dir, "runs", f"{FileHelper.clean_string(variant.value)}_seed{seed}")
    config = replace(base, seed=seed, out_dir=run_dir, **flags[variant])
    config.validate()
    return config


def report_rows(variant: Variant, seed: int, report: EvalReport) -> List[AblationRow]:
    rows = [AblationRow(variant.value, "probe_accuracy", seed, report.probe.accuracy),
            AblationRow(variant.value, "shape_bias", seed,
                        report.shape_bias.bias if report.shape_bias.defined else float("nan")),
            AblationRow(variant.value, "depth_rmse", seed, report.depth_rmse)]
    rows.extend(AblationRow(variant.value, f"robustness_{name}", seed, value)
                for name, value in report.robustness.items())
    if report.feature_drift is not None:
        rows.append(AblationRow(variant.value, "feature_drift", seed, report.feature_drift))
    return rows


def directional_claims(frame: pd.DataFrame) -> List[DirectionalClaim]:
    """
    Ordering checks on seed means. Claims whose variants are missing are left out
    """
    means = frame.groupby(["variant", "metric"])["value"].mean()

    def value(variant: Variant, metric: str) -> Optional[float]:
        key = (variant.value, metric)
        return float(means[key]) if key in means.index and not np.isnan(means[key]) else None

    claims: List[DirectionalClaim] = []

    def add(name: str, left: Optional[float], right: Optional[float], strict: bool = False) -> None:
        if left is None or right is None:
            return
        passed = left > right if strict else left >= right
        claims.append(DirectionalClaim(name, passed, f"{left:.4f} {'>' if strict else '>='} {right:.4f}"))

    probe = "probe_accuracy"
    add("distillation keeps probe accuracy: full >= no_dist", value(Variant.Full, probe), value(Variant.NoDist, probe))
    add("distillation limits drift: no_dist > full", value(Variant.NoDist, "feature_drift"),
        value(Variant.Full, "feature_drift"), strict=True)
    texture = f"robustness_{Perturbation.TextureSwap.value}"
    add("triplane helps under texture shift: full >= no_triplane", value(Variant.Full, texture),
        value(Variant.NoTriplane, texture))
    add("shape bias grows: full >= teacher", value(Variant.Full, "shape_bias"), value(Variant.Teacher, "shape_bias"))
    add("from scratch is worse: teacher > from_scratch", value(Variant.Teacher, probe),
        value(Variant.FromScratch, probe), strict=True)
    fractions = [value(v, probe) for v in (Variant.DataSixteenth, Variant.DataQuarter, Variant.Full)]
    gap_parts = (value(Variant.Full, probe), value(Variant.NoDist, probe))
    if all(f is not None for f in fractions) and all(g is not None for g in gap_parts):
        spread, gap = max(fractions) - min(fractions), gap_parts[0] - gap_parts[1]
        claims.append(DirectionalClaim("data amount matters little: spread < full - no_dist gap", spread < gap,
                                       f"{spread:.4f} < {gap:.4f}"))
    return claims


def write_ablation(out_dir: str, rows: Sequence[AblationRow]) -> Tuple[str, str]:
    """
    Writes ablation.csv and the plain-text summary of seed means and directional claims
    """
    FileHelper.create_folder(out_dir)
    frame = pd.DataFrame([asdict(row) for row in rows], columns=["variant", "metric", "seed", "value"])
    csv_path = os.path.join(out_dir, ABLATION_FILE)
    frame.to_csv(csv_path, index=False)
    summary_path = os.path.join(out_dir, SUMMARY_FILE)
    FileHelper.write_text(summary_path, summarize_ablation(frame))
    return csv_path, summary_path


def summarize_ablation(frame: pd.DataFrame) -> str:
    if frame.empty:
        return "no ablation results\n"
    table = frame.pivot_table(index="metric", columns="variant", values="value", aggfunc="mean")
    lines = ["mean over seeds", table.to_string(float_format=lambda v: f"{v:.4f}"), "", "directional claims"]
    lines.extend(f"[{'PASS' if c.passed else 'FAIL'}] {c.name} ({c.detail})" for c in directional_claims(frame))
    return "\n".join(lines) + "\n"


def ablate(base: TrainConfig, out_dir: str, variants: Sequence[Variant] = tuple(Variant),
           seeds: Sequence[int] = ABLATION_SEEDS) -> List[AblationRow]:
    """
    Trains and evaluates every variant for every seed. Failed entries are logged and skipped
    """
    dataset = SceneDataset(base.dataset_root)
    cue_root = os.path.join(base.dataset_root, FileHelper.CUE_CONFLICT_FOLDER)
    cue_dataset = SceneDataset(cue_root) if os.path.exists(cue_root) else None
    teacher = load_encoder(base.teacher_checkpoint) if base.teacher_checkpoint else None
    rows: List[AblationRow] = []
    for seed in seeds:
        for variant in variants:
            try:
                if variant == Variant.Teacher:
                    if teacher is None:
                        raise DatasetError("the teacher variant needs teacher_checkpoint")
                    encoder = teacher
                else:
                    encoder = load_encoder(train(variant_config(base, variant, seed, out_dir)))
                report = evaluate_encoder(encoder, variant.value, dataset, cue_dataset, seed, base.val_fraction,
                                          teacher=teacher)
                rows.extend(report_rows(variant, seed, report))
                logger.info("%s seed %d: probe accuracy %.4f", variant.value, seed, report.probe.accuracy)
            except Exception as err:
                logger.error("ablation entry %s seed %d failed: %s", variant.value, seed, err)
                FileHelper.log_error(out_dir, "ablation_failures", f"{variant.value} seed {seed}", repr(err))
    write_ablation(out_dir, rows)
    return rows


