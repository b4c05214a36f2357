from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np
from dataclass_wizard import JSONWizard, fromdict

from helpers.errors import ConfigError
from triplane_data_classes.data_enums import PrimitiveType, TextureFamily, ShapeClass


@dataclass
class EncoderConfig(JSONWizard):
    """
    DataClass to encapsulate the shape of the Vision-Transformer representation function
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    image_size: int = 64
    patch_size: int = 8
    depth: int = 6
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 2

    # Number of final blocks whose tokens form the grid representation
    TAPPED_LAYERS = 4

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def feature_dim(self) -> int:
        """
        Channel count D of the grid: per tapped layer the patch token and the broadcast class token
        """
        return EncoderConfig.TAPPED_LAYERS * 2 * self.width

    def validate(self) -> None:
        if self.patch_size <= 0 or self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.depth < EncoderConfig.TAPPED_LAYERS:
            raise ConfigError(f"encoder depth {self.depth} is smaller than {EncoderConfig.TAPPED_LAYERS} tapped layers")
        if self.width % self.heads != 0:
            raise ConfigError(f"encoder width {self.width} is not divisible by {self.heads} heads")


@dataclass
class TriplaneConfig(JSONWizard):
    """
    DataClass to encapsulate the triplane decoder sizes
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    embedding_resolution: int = 8
    embedding_dim: int = 64
    plane_resolution: int = 32
    channels: int = 32
    heads: int = 4

    @property
    def upsample_blocks(self) -> int:
        """
        Number of (upsample, conv) blocks between the embedding resolution r and the plane resolution R
        @return: k with R = r * 2^k
        """
        r, big_r = self.embedding_resolution, self.plane_resolution
        if r <= 0 or big_r % r != 0:
            raise ConfigError(f"plane resolution {big_r} is not r * 2^k for r = {r}")
        ratio = big_r // r
        k = int(round(math.log2(ratio))) if ratio > 0 else 0
        if k < 1 or 2 ** k != ratio:
            raise ConfigError(f"plane resolution {big_r} is not r * 2^k (k >= 1) for r = {r}")
        return k

    def validate(self) -> None:
        _ = self.upsample_blocks
        if self.embedding_dim % self.heads != 0:
            raise ConfigError(f"embedding_dim {self.embedding_dim} is not divisible by {self.heads} heads")


@dataclass
class Camera(JSONWizard):
    """
    DataClass for the fixed pinhole camera. It sits at distance `distance` on -Z and looks at the origin.
    Depth is measured along the optical axis (+Z), so near/far bound z-depth
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    fov_y_degrees: float = 45.0
    distance: float = 2.7
    near: float = 1.7
    far: float = 3.7

    def validate(self) -> None:
        if not 0.0 < self.near < self.far:
            raise ConfigError(f"camera needs 0 < near < far, got near={self.near}, far={self.far}")

    def focal_length(self, resolution: int) -> float:
        return 0.5 * resolution / math.tan(math.radians(self.fov_y_degrees) / 2.0)

    @staticmethod
    def principal_point(resolution: int) -> Tuple[float, float]:
        return 0.5 * resolution, 0.5 * resolution

    def position(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.distance])

    @staticmethod
    def rotation() -> np.ndarray:
        """
        Camera-to-world rotation. Camera x is world x, camera y (up) is world y, the optical axis is world +Z
        """
        return np.eye(3)


@dataclass
class LossWeights(JSONWizard):
    """
    DataClass for the weights of the four training losses
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    rgb: float = 0.1
    depth: float = 1.0
    dist: float = 1.0
    norm: float = 1e-3

    def validate(self) -> None:
        for name in ("rgb", "depth", "dist", "norm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight lambda_{name} must be nonnegative, got {getattr(self, name)}")


@dataclass
class LossReport(JSONWizard):
    """
    DataClass for the per-batch loss values of one training step
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    rgb: float
    depth: float
    dist: float
    norm: float
    total: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.rgb, self.depth, self.dist, self.norm, self.total))


@dataclass
class TrainConfig(JSONWizard):
    """
    DataClass holding every hyperparameter of a run. Serialized as flat `key = value` text
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    dataset_root: str = "data"
    out_dir: str = "runs/train"
    teacher_checkpoint: str = ""
    seed: int = 0
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 10
    max_steps: int = 0
    checkpoint_every: int = 100
    resume: bool = True
    lambda_rgb: float = 0.1
    lambda_depth: float = 1.0
    lambda_dist: float = 1.0
    lambda_norm: float = 1e-3
    coarse_samples: int = 8
    fine_samples: int = 8
    render_resolution: int = 64
    image_resolution: int = 64
    patch_size: int = 8
    encoder_depth: int = 6
    encoder_width: int = 64
    encoder_heads: int = 4
    mlp_ratio: int = 2
    embedding_resolution: int = 8
    embedding_dim: int = 64
    plane_resolution: int = 32
    plane_channels: int = 32
    attention_heads: int = 4
    radiance_hidden: int = 64
    no_triplane: bool = False
    no_dist: bool = False
    from_scratch: bool = False
    data_fraction: float = 1.0
    val_fraction: float = 0.2

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(image_size=self.image_resolution, patch_size=self.patch_size,
                             depth=self.encoder_depth, width=self.encoder_width, heads=self.encoder_heads,
                             mlp_ratio=self.mlp_ratio)

    def triplane_config(self) -> TriplaneConfig:
        return TriplaneConfig(embedding_resolution=self.embedding_resolution, embedding_dim=self.embedding_dim,
                              plane_resolution=self.plane_resolution, channels=self.plane_channels,
                              heads=self.attention_heads)

    def loss_weights(self) -> LossWeights:
        """
        The weights actually used. no_dist and from_scratch both switch distillation off
        """
        dist = 0.0 if (self.no_dist or self.from_scratch) else self.lambda_dist
        return LossWeights(rgb=self.lambda_rgb, depth=self.lambda_depth, dist=dist, norm=self.lambda_norm)

    @staticmethod
    def camera() -> Camera:
        return Camera()

    def total_samples(self) -> int:
        return self.coarse_samples + self.fine_samples

    def validate(self) -> None:
        self.encoder_config().validate()
        if not self.no_triplane:
            self.triplane_config().validate()
        LossWeights(rgb=self.lambda_rgb, depth=self.lambda_depth, dist=self.lambda_dist,
                    norm=self.lambda_norm).validate()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.coarse_samples < 1 or self.fine_samples < 0:
            raise ConfigError("coarse_samples must be >= 1 and fine_samples >= 0")
        if self.render_resolution < 2:
            raise ConfigError(f"render_resolution must be >= 2, got {self.render_resolution}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    @staticmethod
    def keys() -> List[str]:
        return [f.name for f in fields(TrainConfig)]

    @staticmethod
    def from_text(text: str, overrides: Optional[Dict[str, str]] = None, source: str = "<config>") -> TrainConfig:
        """
        Parses flat `key = value` text. Blank lines and `#` comments are skipped
        @param text: The config file content
        @param overrides: key/value pairs that replace file keys (CLI flags)
        @param source: Name used in error messages
        @return: The parsed TrainConfig
        """
        values: Dict[str, str] = {}
        for line_number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{line_number}: expected 'key = value', got '{raw.strip()}'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        values.update(overrides or {})
        known = set(TrainConfig.keys())
        for key in values:
            if key not in known:
                raise ConfigError(f"{source}: unknown config key '{key}'")
        try:
            config = fromdict(TrainConfig, values)
        except Exception as err:
            raise ConfigError(f"{source}: {err}") from err
        config.validate()
        return config

    def to_text(self) -> str:
        lines = []
        for name in TrainConfig.keys():
            value = getattr(self, name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"


@dataclass
class Primitive:
    """
    DataClass for one scene primitive. Spheres use size[0] as radius, boxes use size as half extents,
    planes use center as a point on the plane and normal as its normal
    """
    kind: PrimitiveType
    center: List[float]
    size: List[float]
    texture: TextureFamily
    color_a: List[float]
    color_b: List[float]
    texture_scale: float = 4.0
    normal: List[float] = field(default_factory=lambda: [0.0, 0.0, 1.0])


@dataclass
class SceneSpec(JSONWizard):
    """
    DataClass describing one procedural scene with its labels
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    primitives: List[Primitive]
    shape_class: int
    texture_class: int
    seed: int
    # Index of the first primitive after the labeled foreground object
    foreground_count: int = 0


@dataclass
class ManifestRow:
    """
    One line of manifest.tsv
    """
    idx: int
    shape_class: int
    texture_class: int
    seed: int


@dataclass
class DatasetManifest(JSONWizard):
    """
    DataClass describing a generated dataset directory
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    count: int
    train_size: int
    val_size: int
    seed: int
    resolution: int
    layout: str
    shape_classes: List[str]
    texture_classes: List[str]
    cue_conflict: bool = False
    rows: List[ManifestRow] = field(default_factory=list)

    @staticmethod
    def shape_vocabulary() -> List[str]:
        return [shape.name for shape in ShapeClass]

    @staticmethod
    def texture_vocabulary() -> List[str]:
        palettes = ("warm", "cool")
        return [f"{TextureFamily(t % len(TextureFamily)).name.lower()}-{palettes[t // len(TextureFamily)]}"
                for t in range(len(TextureFamily) * len(palettes))]


@dataclass
class ProbeResult(JSONWizard):
    """
    DataClass for the held-out accuracy of a linear probe
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    accuracy: float
    per_class_accuracy: List[float]
    train_size: int
    val_size: int
    seed: int


@dataclass
class ShapeBiasResult(JSONWizard):
    """
    DataClass for shape-bias counts on a cue-conflict set. bias is None when no prediction matched either cue
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    shape_matches: int
    texture_matches: int
    other: int
    bias: Optional[float]

    @property
    def total(self) -> int:
        return self.shape_matches + self.texture_matches + self.other

    @property
    def defined(self) -> bool:
        return self.bias is not None


@dataclass
class EvalReport(JSONWizard):
    """
    DataClass collecting every evaluation of one encoder
    """

    class _(JSONWizard.Meta):
        key_transform_with_dump = 'SNAKE'

    encoder: str
    probe: ProbeResult
    shape_bias: ShapeBiasResult
    robustness: Dict[str, float]
    depth_rmse: float
    feature_drift: Optional[float] = None
    top_predictions: List[List[int]] = field(default_factory=list)


@dataclass
class AblationRow:
    """
    One line of ablation.csv
    """
    variant: str
    metric: str
    seed: int
    value: float
