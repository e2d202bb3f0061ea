import numpy as np
import pytest

from tbloc.dataio import SynthConfig, generate_dataset, read_manifest
from tbloc.network import ModelConfig


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


# Strides that line up with the bare backbone so a 32px input is enough to
# exercise every pyramid level; keeps whole-model tests cheap.
TINY_STRIDES = (2, 4, 8, 16, 32)
TINY_BASES = (4, 8, 16, 32, 64)


def tiny_model_config(**overrides):
    kwargs = dict(image_size=32, backbone_widths=(2, 2, 2, 2, 2),
                  fpn_channels=2, head_depth=1, strides=TINY_STRIDES,
                  base_sizes=TINY_BASES)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def small_model_config(**overrides):
    """Default strides at the smallest legal image size."""
    kwargs = dict(image_size=128, backbone_widths=(4, 8, 8, 8, 8),
                  fpn_channels=8, head_depth=1)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture(scope="session")
def dataset16(tmp_path_factory):
    """8 tb + 8 healthy synthetic studies at 128px, shared across tests."""
    out = tmp_path_factory.mktemp("dataset16")
    records = generate_dataset(
        SynthConfig(n_tb=8, n_healthy=8, image_size=128, seed=7), out)
    return records


@pytest.fixture(scope="session")
def dataset4_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset4")
    generate_dataset(SynthConfig(n_tb=2, n_healthy=2, image_size=128, seed=11),
                     out)
    return out


@pytest.fixture(scope="session")
def dataset4(dataset4_dir):
    return read_manifest(dataset4_dir / "manifest.jsonl")
