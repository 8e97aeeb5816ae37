import numpy as np
import pytest

from sfdet.config import RunConfig
from sfdet.data import build_split


def tiny_run_config() -> RunConfig:
    """Small geometry and short schedules for fast loop-level tests."""
    cfg = RunConfig()
    cfg.data.num_classes = 2
    cfg.data.image_size = 16
    cfg.data.max_objects = 2
    cfg.data.box_min = 0.3
    cfg.data.box_max = 0.5
    cfg.detector.embed_dim = 8
    cfg.detector.num_queries = 4
    cfg.detector.decoder_layers = 2
    cfg.detector.ffn_dim = 16
    cfg.contrast.bank_capacity = 20
    cfg.train.pretrain_epochs = 2
    cfg.train.pretrain_batch = 4
    cfg.train.adapt_epochs = 2
    cfg.train.adapt_batch = 4
    cfg.train.log_interval = 1
    return cfg


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_run_config()


@pytest.fixture
def tiny_target_samples(tiny_cfg):
    return build_split(tiny_cfg.data.seed, 8, tiny_cfg.scene_config(),
                       tiny_cfg.shift_profile(), "target")


@pytest.fixture
def tiny_source_samples(tiny_cfg):
    return build_split(tiny_cfg.data.seed, 8, tiny_cfg.scene_config(), None, "source")
