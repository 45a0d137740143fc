"""
Shared fixtures: a tiny configuration, a small generated dataset and a pipeline over it.
"""
import numpy as np
import pytest

from hiedit.config import PipelineConfig, config_from_flat
from hiedit.dataset_builder import build_dataset, load_dataset
from hiedit.pipeline import EditingPipeline

TINY = {
    "seed": 7,
    "threads": 2,
    "image.height": 32,
    "image.width": 32,
    "image.patch_sizes": [8, 16],
    "encoder.d_enc": 8,
    "encoder.max_text_len": 12,
    "model.d_llm": 16,
    "model.d_diff": 8,
    "model.heads": 2,
    "lm.n_layers": 1,
    "lm.r": 4,
    "lora.rank": 2,
    "lora.alpha": 4.0,
    "qformer.n_queries": 4,
    "qformer.n_layers": 1,
    "cme.n_e": 3,
    "diffusion.t_steps": 20,
    "diffusion.sample_steps": 4,
    "train.batch_size": 2,
    "train.steps": 3,
    "train.checkpoint_every": 2,
    "train.log_every": 1,
    "data.count": 8,
    "data.candidates_m": 4,
    "data.val_fraction": 0.25,
}


def tiny_config(flat=None) -> PipelineConfig:
    """TINY updated with dotted-key overrides."""
    merged = dict(TINY)
    merged.update(flat or {})
    return config_from_flat(merged)


@pytest.fixture
def config() -> PipelineConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def make_config():
    """Factory: ``make_config({"cme.n_e": 5})``."""
    return tiny_config


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    build_dataset(tiny_config(), out)
    return out


@pytest.fixture(scope="session")
def dataset(dataset_dir):
    return load_dataset(dataset_dir, image_shape=(32, 32, 3))


@pytest.fixture
def pipeline(dataset) -> EditingPipeline:
    return EditingPipeline(tiny_config(), dataset.vocab)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
