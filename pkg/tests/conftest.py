import os

import pytest
import torch

from controllab.backbone import BackboneConfig, build_backbone
from controllab.config import BenchConfig, CompareConfig, DiffusionConfig, RunConfig, SampleConfig
from controllab.control import ControlExtractorConfig
from controllab.datagen import DatasetConfig
from controllab.diffusion import make_schedule
from controllab.finetune import TrainConfig


def pytest_collection_modifyitems(config, items):
    if os.environ.get("CONTROLLAB_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set CONTROLLAB_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_backbone_cfg():
    return BackboneConfig(
        in_channels=1,
        base_channels=8,
        channel_multipliers=[1, 2],
        mid_channels=16,
        num_res_blocks_per_level=1,
        time_embed_dim=16,
        image_size=16,
    )


@pytest.fixture
def tiny_extractor_cfg():
    return ControlExtractorConfig(
        in_channels=1,
        num_blocks=1,
        channels_per_stage=[4, 8],
        downsample_to=8,
        out_channels=16,
        input_size=16,
    )


@pytest.fixture
def tiny_backbone(tiny_backbone_cfg):
    backbone, _, _ = build_backbone(tiny_backbone_cfg, seed=0)
    return backbone


@pytest.fixture
def tiny_schedule():
    return make_schedule(50, 1e-4, 0.02)


@pytest.fixture
def tiny_run_cfg(tiny_backbone_cfg, tiny_extractor_cfg, tmp_path):
    """A complete run config small enough to train in well under a second."""
    return RunConfig(
        run_name="tiny",
        seed=0,
        outdir=str(tmp_path / "runs"),
        backbone=tiny_backbone_cfg,
        extractor=tiny_extractor_cfg,
        diffusion=DiffusionConfig(T=50, beta_start=1e-4, beta_end=0.02),
        dataset=DatasetConfig(size=16, train_count=16, heldout_count=4),
        train=TrainConfig(steps=4, batch_size=4, eval_every=2, eval_count=4, sample_steps=2),
        pretrain=TrainConfig(
            steps=2,
            batch_size=4,
            learning_rate=1e-3,
            architecture="base",
            selector=["*"],
            optimizer="adam",
            eval_every=2,
            eval_count=4,
            sample_steps=2,
        ),
        compare=CompareConfig(seeds=[0], architectures=["controlnext", "controlnet"]),
        bench=BenchConfig(iters=100, warmup=10, batch_size=1, timestep=10),
        sample=SampleConfig(count=2, steps=2, seed=0),
    )


@pytest.fixture
def random_maps():
    generator = torch.Generator().manual_seed(1234)
    return lambda *shape: torch.randn(shape, generator=generator)
