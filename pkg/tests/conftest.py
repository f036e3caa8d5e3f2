import numpy as np
import pytest

from sta_reid import harness
from sta_reid.config import RunConfig
from sta_reid.data import SynthConfig, synth_generate


def tiny_synth_config(**overrides):
    base = dict(num_identities=6, tracklets_per_identity=4, frames_per_tracklet=6,
                image_h=16, image_w=8, occlusion_prob=0.0, noise_std=0.02,
                shift_amplitude=1, seed=0)
    base.update(overrides)
    return SynthConfig(**base)


def tiny_run_config(**overrides):
    base = dict(n_frames=3, k_regions=4, p=3, k_per_id=2, embed_dim=16, feat_channels=8,
                backbone_widths="8", backbone_strides="2,2", epochs=30, lr=3e-3,
                lr_decay="", flip_prob=0.0, seed=0, steps_per_epoch=8)
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth_generate(tiny_synth_config())


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_run(tiny_cfg, tiny_dataset):
    """One trained run shared by the read-only integration tests."""
    return harness.train(tiny_cfg, dataset=tiny_dataset)


def occlusion_synth_config(**overrides):
    """Occlusion world at an image size where a band spans a full region."""
    base = dict(num_identities=10, tracklets_per_identity=4, frames_per_tracklet=6,
                image_h=32, image_w=16, occlusion_prob=0.4, occlusion_value=0.1,
                noise_std=0.03, shift_amplitude=2, seed=0)
    base.update(overrides)
    return SynthConfig(**base)


def occlusion_run_config(**overrides):
    base = dict(n_frames=4, k_regions=4, p=4, k_per_id=2, embed_dim=16, feat_channels=8,
                backbone_widths="8", backbone_strides="2,2", epochs=12, lr=3e-3,
                lr_decay="", flip_prob=0.0, seed=0, steps_per_epoch=4)
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def occlusion_run():
    cfg = occlusion_run_config()
    dataset = synth_generate(occlusion_synth_config())
    return cfg, harness.train(cfg, dataset=dataset)
