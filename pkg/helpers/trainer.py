"""
End-to-end fine-tuning of the encoder through the triplane and volume-rendering bottleneck.

Each step augments a batch, encodes it, decodes triplanes, renders image and depth and minimizes
the weighted reconstruction, density and distillation losses with Adam over every trainable
parameter. Items are forwarded one at a time and their gradients accumulated, which equals the
batch gradient of the per-element mean losses.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np
from tqdm import tqdm

from helpers import diffmath as dm
from helpers.diffmath import Graph, Parameter, Tensor
from helpers.encoder import Encoder, FeatureMap
from helpers.errors import ConfigError, ContractViolation, DatasetError, NonFiniteError, TrainingAborted
from helpers.file_helper import FileHelper
from helpers.layers import Conv3x3, Module
from helpers.objective import density_norm_loss, depth_loss, distillation_loss, rgb_loss, total_loss
from helpers.renderer import RadianceMLP, generate_rays, render
from helpers.scenegen import SceneDataset
from helpers.triplane import TriplaneDecoder
from triplane_data_classes import EncoderConfig, LossReport, TrainConfig

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CROP_SCALE = (0.8, 1.0)
FLIP_PROBABILITY = 0.5
# keys that say where and how long to run; they stay out of checkpoints so resumed runs match
RUN_CONTROL_KEYS = ("out_dir", "resume", "max_steps", "checkpoint_every")


@dataclass
class Reconstruction:
    image: Tensor
    depth: Tensor
    sigma: Optional[Tensor]


class TriplanePriorModel(Module):
    """
    Encoder, triplane decoder and radiance MLP trained jointly
    """
    kind = "prior"

    def __init__(self, config: TrainConfig, rng: np.random.Generator):
        encoder_config = config.encoder_config()
        self.encoder = Encoder(encoder_config, rng)
        self.decoder = TriplaneDecoder(config.triplane_config(), encoder_config.feature_dim, rng)
        self.radiance = RadianceMLP(config.plane_channels, config.radiance_hidden, rng)
        self.camera = config.camera()
        self.resolution = config.render_resolution
        self.n_coarse = config.coarse_samples
        self.n_fine = config.fine_samples
        self.rays = generate_rays(self.camera, self.resolution)

    def reconstruct(self, features: FeatureMap, rng: Optional[np.random.Generator] = None) -> Reconstruction:
        triplane = self.decoder(features)[0]
        result = render(triplane, self.camera, self.resolution, self.radiance, self.n_coarse, self.n_fine, rng,
                        rays=self.rays)
        return Reconstruction(image=result.image, depth=result.depth, sigma=result.sigma)


class ConvDecoder(Module):
    """
    The reconstruction model without a 3D representation: upsampling convolutions predict image and depth
    straight from the grid
    """
    kind = "conv"

    def __init__(self, config: TrainConfig, rng: np.random.Generator):
        encoder_config = config.encoder_config()
        grid = encoder_config.grid_size
        ratio = config.render_resolution // grid
        blocks = int(round(math.log2(ratio))) if ratio > 0 else 0
        if blocks < 1 or grid * 2 ** blocks != config.render_resolution:
            raise ConfigError(f"render_resolution {config.render_resolution} is not grid size {grid} times 2^k")
        channels = config.plane_channels
        self.encoder = Encoder(encoder_config, rng)
        self.in_conv = Conv3x3(encoder_config.feature_dim, channels, rng)
        self.up_convs = [Conv3x3(channels, channels, rng) for _ in range(blocks)]
        self.out_conv = Conv3x3(channels, 4, rng)
        self.camera = config.camera()

    def reconstruct(self, features: FeatureMap, rng: Optional[np.random.Generator] = None) -> Reconstruction:
        x = dm.gelu(self.in_conv(features.grid))
        for conv in self.up_convs:
            x = dm.gelu(conv(dm.upsample2x(x)))
        out = self.out_conv(x)[0]
        image = dm.sigmoid(out[..., 0:3])
        span = self.camera.far - self.camera.near
        depth = dm.sigmoid(out[..., 3]) * span + self.camera.near
        return Reconstruction(image=image, depth=depth, sigma=None)


def build_model(config: TrainConfig, rng: np.random.Generator) -> Module:
    return ConvDecoder(config, rng) if config.no_triplane else TriplanePriorModel(config, rng)


class FrozenTeacher:
    """
    Immutable copy of an encoder used as distillation target
    """

    def __init__(self, encoder: Encoder):
        self._encoder = Encoder(encoder.config, np.random.default_rng(0))
        self._encoder.load_state_dict(encoder.state_dict())
        for param in self._encoder.parameters():
            param.requires_grad = False
            param.data.setflags(write=False)

    @property
    def config(self) -> EncoderConfig:
        return self._encoder.config

    def state_dict(self) -> Dict[str, np.ndarray]:
        return self._encoder.state_dict()

    def __call__(self, images) -> Tensor:
        with dm.no_grad():
            return self._encoder(images).grid.detach()

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, param in self._encoder.named_parameters():
            digest.update(name.encode("utf8"))
            digest.update(np.ascontiguousarray(param.data, dtype="<f4").tobytes())
        return digest.hexdigest()


# -- checkpoints ------------------------------------------------------------------------------------------------------

def config_echo(config: TrainConfig) -> dict:
    echo = config.to_dict()
    for key in RUN_CONTROL_KEYS:
        echo.pop(key, None)
    return echo


def save_encoder(path: str, encoder: Encoder) -> None:
    tensors = OrderedDict((f"encoder.{name}", param.data) for name, param in encoder.named_parameters())
    FileHelper.write_checkpoint(path, 0, {"kind": "encoder", "config": encoder.config.to_dict()}, tensors)


def save_checkpoint(path: str, step: int, model: Module, optimizer: Adam, config: TrainConfig) -> None:
    tensors = OrderedDict((f"model.{name}", param.data) for name, param in model.named_parameters())
    tensors.update(optimizer.state_tensors())
    FileHelper.write_checkpoint(path, step, {"kind": model.kind, "config": config_echo(config)}, tensors)


def load_checkpoint(path: str) -> Tuple[int, dict, Dict[str, np.ndarray]]:
    return FileHelper.read_checkpoint(path)


def _with_prefix(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return OrderedDict((name[len(prefix):], value) for name, value in tensors.items() if name.startswith(prefix))


def load_encoder(path: str) -> Encoder:
    """
    Loads the encoder from a teacher checkpoint or from a trained model checkpoint
    """
    _, header, tensors = load_checkpoint(path)
    kind = header.get("kind")
    if kind == "encoder":
        config = EncoderConfig.from_dict(header["config"])
        state = _with_prefix(tensors, "encoder.")
    elif kind in (TriplanePriorModel.kind, ConvDecoder.kind):
        config = TrainConfig.from_dict(header["config"]).encoder_config()
        state = _with_prefix(tensors, "model.encoder.")
    else:
        raise DatasetError(f"{path}: unknown checkpoint kind '{kind}'")
    encoder = Encoder(config, np.random.default_rng(0))
    encoder.load_state_dict(state)
    return encoder


def load_model(path: str) -> Tuple[Module, TrainConfig]:
    _, header, tensors = load_checkpoint(path)
    if header.get("kind") not in (TriplanePriorModel.kind, ConvDecoder.kind):
        raise DatasetError(f"{path}: checkpoint holds no reconstruction model")
    config = TrainConfig.from_dict(header["config"])
    model = build_model(config, np.random.default_rng(0))
    model.load_state_dict(_with_prefix(tensors, "model."))
    return model, config


def init_teacher(config: TrainConfig) -> Optional[FrozenTeacher]:
    """
    Loads the frozen teacher. from_scratch runs have none and train without distillation
    """
    if config.from_scratch:
        if config.lambda_dist > 0:
            logger.warning("from_scratch forces lambda_dist = 0 (configured %s)", config.lambda_dist)
        return None
    if not config.teacher_checkpoint:
        raise ConfigError("teacher_checkpoint is required unless from_scratch is set")
    if not os.path.exists(config.teacher_checkpoint):
        raise ConfigError(f"teacher_checkpoint '{config.teacher_checkpoint}' does not exist")
    encoder = load_encoder(config.teacher_checkpoint)
    if encoder.config != config.encoder_config():
        raise ConfigError(f"teacher encoder {encoder.config} does not match the configured encoder")
    return FrozenTeacher(encoder)


# -- augmentation and optimisation ------------------------------------------------------------------------------------

def augment(image: np.ndarray, depth: np.ndarray, rng: np.random.Generator, flip: Optional[bool] = None,
            crop: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    Random crop with scale in [0.8, 1] resized back to full size, then a horizontal flip with
    probability 0.5. Image and depth get the same transform; depth is resized with nearest neighbours
    @param flip: forces the flip decision when set
    @param crop: disables the crop when False
    """
    size_y, size_x = depth.shape
    if crop:
        scale = rng.uniform(*CROP_SCALE)
        crop_y, crop_x = max(2, int(round(scale * size_y))), max(2, int(round(scale * size_x)))
        top = int(rng.integers(0, size_y - crop_y + 1))
        left = int(rng.integers(0, size_x - crop_x + 1))
        image = cv2.resize(np.ascontiguousarray(image[top:top + crop_y, left:left + crop_x]), (size_x, size_y),
                           interpolation=cv2.INTER_LINEAR)
        depth = cv2.resize(np.ascontiguousarray(depth[top:top + crop_y, left:left + crop_x]), (size_x, size_y),
                           interpolation=cv2.INTER_NEAREST)
    do_flip = bool(rng.random() < FLIP_PROBABILITY) if flip is None else flip
    if do_flip:
        image, depth = image[:, ::-1], depth[:, ::-1]
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(depth, dtype=np.float32)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              moments: Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]], t: int, lr: float,
              betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """
    Bias-corrected Adam update, applied in place to params and moments
    @param t: 1-based step count after this update
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    beta1, beta2 = betas
    m, v = moments
    for name, value in params.items():
        grad = grads[name]
        m[name] *= beta1
        m[name] += (1.0 - beta1) * grad
        v[name] *= beta2
        v[name] += (1.0 - beta2) * grad * grad
        m_hat = m[name] / (1.0 - beta1 ** t)
        v_hat = v[name] / (1.0 - beta2 ** t)
        value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, named_parameters: List[Tuple[str, Parameter]], lr: float):
        self.params = OrderedDict(named_parameters)
        self.lr = lr
        self.t = 0
        self.m = OrderedDict((name, np.zeros_like(p.data)) for name, p in self.params.items())
        self.v = OrderedDict((name, np.zeros_like(p.data)) for name, p in self.params.items())

    def step(self) -> None:
        grads = OrderedDict((name, p.grad if p.grad is not None else np.zeros_like(p.data))
                            for name, p in self.params.items())
        adam_step(OrderedDict((name, p.data) for name, p in self.params.items()), grads, (self.m, self.v),
                  self.t + 1, self.lr)
        self.t += 1

    def state_tensors(self) -> Dict[str, np.ndarray]:
        tensors = OrderedDict((f"adam.m.{name}", value) for name, value in self.m.items())
        tensors.update((f"adam.v.{name}", value) for name, value in self.v.items())
        return tensors

    def load_state(self, tensors: Dict[str, np.ndarray], t: int) -> None:
        for name in self.params:
            self.m[name] = tensors[f"adam.m.{name}"].astype(self.m[name].dtype)
            self.v[name] = tensors[f"adam.v.{name}"].astype(self.v[name].dtype)
        self.t = t


# -- training loop ----------------------------------------------------------------------------------------------------

class Trainer:
    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        self.dataset = SceneDataset(config.dataset_root)
        if self.dataset.resolution and self.dataset.resolution != config.image_resolution:
            raise DatasetError(f"{config.dataset_root}: images are {self.dataset.resolution}px, "
                               f"config expects image_resolution = {config.image_resolution}")
        train_indices, self.val_indices = self.dataset.split(config.val_fraction)
        if len(train_indices) == 0:
            raise DatasetError(f"{config.dataset_root}: no training items after the split")
        self.train_indices = SceneDataset.subset(train_indices, config.data_fraction, config.seed)
        # data-fraction runs keep the step count of the full run
        self.steps_per_epoch = -(-len(train_indices) // config.batch_size)
        self.epoch_slots = len(train_indices)
        self.total_steps = config.epochs * self.steps_per_epoch
        if config.max_steps > 0:
            self.total_steps = min(self.total_steps, config.max_steps)
        self.model = build_model(config, np.random.default_rng([config.seed, 4]))
        self.teacher = init_teacher(config)
        if self.teacher is not None:
            self.model.encoder.load_state_dict(self.teacher.state_dict())
        self.weights = config.loss_weights()
        self.optimizer = Adam(self.model.named_parameters(), config.learning_rate)
        self.step = 0
        self.out_dir = FileHelper.create_folder(config.out_dir)
        self.checkpoint_path = os.path.join(self.out_dir, FileHelper.CHECKPOINT_FILE)
        self.metrics_path = os.path.join(self.out_dir, FileHelper.METRICS_FILE)

    def batch_indices(self, step: int) -> np.ndarray:
        """
        Dataset indices of the batch at step. Each epoch walks a seeded order of the training items,
        cycling it when the data fraction leaves fewer items than the epoch has slots
        """
        epoch, position = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.config.seed, epoch, 5]).permutation(len(self.train_indices))
        batch = self.config.batch_size
        slots = np.arange(position * batch, min((position + 1) * batch, self.epoch_slots))
        return self.train_indices[order[slots % len(order)]]

    def load_batch(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        epoch = step // self.steps_per_epoch
        images, depths = [], []
        for idx in self.batch_indices(step):
            rng = np.random.default_rng([self.config.seed, epoch, int(idx)])
            image, depth = augment(self.dataset.image(int(idx)), self.dataset.depth(int(idx)), rng)
            images.append(image)
            depths.append(depth)
        return np.stack(images), np.stack(depths)

    def _targets(self, image: np.ndarray, depth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        size = self.config.render_resolution
        if image.shape[0] == size:
            return image, depth
        return (cv2.resize(image, (size, size), interpolation=cv2.INTER_AREA),
                cv2.resize(depth, (size, size), interpolation=cv2.INTER_NEAREST))

    def train_step(self, images: np.ndarray, depths: np.ndarray, rng: np.random.Generator) -> LossReport:
        """
        One optimisation step on a batch. Parameters are untouched when the loss is not finite
        """
        batch = images.shape[0]
        self.model.zero_grad()
        reports: List[LossReport] = []
        use_teacher = self.teacher is not None and self.weights.dist > 0
        for b in range(batch):
            image = images[b:b + 1]
            features = self.model.encoder(image)
            reconstruction = self.model.reconstruct(features, rng)
            target_image, target_depth = self._targets(images[b], depths[b])
            terms = {"rgb": rgb_loss(target_image, reconstruction.image),
                     "depth": depth_loss(target_depth, reconstruction.depth)}
            if reconstruction.sigma is not None:
                terms["norm"] = density_norm_loss(reconstruction.sigma)
            if use_teacher:
                terms["dist"] = distillation_loss(features.grid, self.teacher(image))
            total, report = total_loss(terms, self.weights)
            if not report.is_finite():
                raise NonFiniteError(f"non-finite loss {report}")
            scaled = total * (1.0 / batch)
            dm.backward(Graph.trace(scaled), scaled)
            reports.append(report)
        self.optimizer.step()
        return LossReport(**{name: float(np.mean([getattr(r, name) for r in reports]))
                             for name in ("rgb", "depth", "dist", "norm", "total")})

    def save(self, path: Optional[str] = None) -> str:
        path = path or self.checkpoint_path
        save_checkpoint(path, self.step, self.model, self.optimizer, self.config)
        return path

    def restore(self, path: str) -> None:
        step, header, tensors = load_checkpoint(path)
        if header.get("kind") != self.model.kind:
            raise DatasetError(f"{path}: checkpoint kind '{header.get('kind')}' does not match '{self.model.kind}'")
        if header.get("config") != config_echo(self.config):
            raise ConfigError(f"{path}: checkpoint was written with a different configuration")
        self.model.load_state_dict(_with_prefix(tensors, "model."))
        self.optimizer.load_state(tensors, step)
        self.step = step

    def train(self) -> str:
        """
        Runs until total_steps, resuming from the checkpoint in out_dir when config.resume is set
        @return: path of the final checkpoint
        """
        if self.config.resume and os.path.exists(self.checkpoint_path):
            print("Load checkpoint from", self.checkpoint_path)
            self.restore(self.checkpoint_path)
            FileHelper.start_metrics(self.metrics_path, keep_until_step=self.step - 1)
        else:
            FileHelper.start_metrics(self.metrics_path)
        FileHelper.write_text(os.path.join(self.out_dir, FileHelper.CONFIG_FILE), self.config.to_text())
        if self.teacher is not None:
            teacher_hash = self.teacher.fingerprint()
        progress = tqdm(total=self.total_steps, initial=self.step, desc="train")
        # False while parameters and moments are ahead of self.step
        at_boundary = True
        try:
            while self.step < self.total_steps:
                at_boundary = False
                epoch = self.step // self.steps_per_epoch
                images, depths = self.load_batch(self.step)
                started = time.perf_counter()
                try:
                    report = self.train_step(images, depths, np.random.default_rng([self.config.seed, self.step, 1]))
                except NonFiniteError as err:
                    path = self.save(os.path.join(self.out_dir, FileHelper.LAST_GOOD_CHECKPOINT_FILE))
                    logger.error("step %d: %s", self.step, err)
                    raise TrainingAborted(f"training stopped at step {self.step}: {err}", path) from err
                wall_ms = (time.perf_counter() - started) * 1000.0
                FileHelper.append_metrics(self.metrics_path, [self.step, epoch, report.rgb, report.depth, report.dist,
                                                              report.norm, report.total, round(wall_ms, 3)])
                self.step += 1
                at_boundary = True
                progress.update(1)
                progress.set_postfix(total=f"{report.total:.4f}")
                if self.step % self.config.checkpoint_every == 0:
                    self.save()
            self.save()
        except KeyboardInterrupt:
            if at_boundary:
                print("Interrupted, save checkpoint to", self.checkpoint_path)
                self.save()
            else:
                logger.warning("interrupted inside step %d, keeping the last saved checkpoint", self.step)
            raise
        finally:
            progress.close()
        if self.teacher is not None and self.teacher.fingerprint() != teacher_hash:
            raise ContractViolation("teacher weights changed during training")
        return self.checkpoint_path


def train(config: TrainConfig) -> str:
    return Trainer(config).train()
