import os
from dataclasses import replace

import pytest

from helpers.evalkit import pretrain_teacher
from helpers.scenegen import SceneDataset, SceneGenerator
from triplane_data_classes import EncoderConfig, TrainConfig

TINY_RESOLUTION = 16


def tiny_encoder_config() -> EncoderConfig:
    return EncoderConfig(image_size=TINY_RESOLUTION, patch_size=8, depth=4, width=8, heads=2, mlp_ratio=2)


def tiny_train_config(dataset_root: str, out_dir: str, **changes) -> TrainConfig:
    config = TrainConfig(dataset_root=dataset_root, out_dir=out_dir, seed=0, batch_size=2, learning_rate=1e-3,
                         epochs=1, max_steps=0, checkpoint_every=1, resume=True, coarse_samples=4, fine_samples=4,
                         render_resolution=8, image_resolution=TINY_RESOLUTION, patch_size=8, encoder_depth=4,
                         encoder_width=8, encoder_heads=2, mlp_ratio=2, embedding_resolution=2, embedding_dim=8,
                         plane_resolution=8, plane_channels=4, attention_heads=2, radiance_hidden=8,
                         from_scratch=True, val_fraction=0.25)
    return replace(config, **changes)


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory) -> str:
    """
    16 scenes at 16x16 plus 16 cue-conflict scenes
    """
    root = str(tmp_path_factory.mktemp("scenes"))
    generator = SceneGenerator(resolution=TINY_RESOLUTION)
    generator.make_dataset(16, seed=3, root=root, val_fraction=0.25)
    generator.make_cue_conflict(16, seed=3, root=root)
    return root


@pytest.fixture(scope="session")
def cue_root(dataset_root) -> str:
    return os.path.join(dataset_root, "cueconflict")


@pytest.fixture(scope="session")
def teacher_checkpoint(dataset_root, tmp_path_factory) -> str:
    """
    Tiny encoder pretrained on shape classification of the session dataset
    """
    path = os.path.join(str(tmp_path_factory.mktemp("teacher")), "teacher.tpck")
    return pretrain_teacher(SceneDataset(dataset_root), tiny_encoder_config(), epochs=4, seed=0, out_path=path,
                            val_fraction=0.25)
