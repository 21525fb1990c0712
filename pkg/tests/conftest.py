import json

import numpy as np
import pytest

from vadd_lab.diffgraph import ParamStore
from vadd_lab.models import Architecture, DiffusionModel, build_model
from vadd_lab.rng import RandomStreams, make_generator

SMALL = dict(
    vocab_size=100,
    seq_len=2,
    latent_dim=2,
    width=16,
    time_features=16,
    readout_depth=2,
    trunk_depth=2,
)


@pytest.fixture
def arch():
    return Architecture(**SMALL)


@pytest.fixture
def streams():
    return RandomStreams(1234)


@pytest.fixture
def vadd_model(arch):
    return build_model(arch, "vadd", make_generator(7))


@pytest.fixture
def mdlm_model(arch):
    return build_model(arch, "mdlm", make_generator(7))


def last_layer(prefix: str, arch: Architecture) -> str:
    depth = {
        "den.out": len(arch.readout_widths) - 1,
        "rec.head": len(arch.head_widths) - 1,
    }[prefix]
    return f"{prefix}.{depth - 1}"


def make_uniform(model: DiffusionModel) -> DiffusionModel:
    """Zero the readout's last layer: mu is uniform over the V classes."""
    layer = last_layer("den.out", model.arch)
    model.params[f"{layer}.W"][...] = 0.0
    model.params[f"{layer}.b"][...] = 0.0
    return model


def pin_recognizer(model: DiffusionModel, mean: float = 0.0) -> DiffusionModel:
    """Recognizer outputs (mean, std=1) regardless of input."""
    layer = last_layer("rec.head", model.arch)
    d = model.arch.latent_dim
    model.params[f"{layer}.W"][...] = 0.0
    model.params[f"{layer}.b"][...] = 0.0
    model.params[f"{layer}.b"][:d] = mean
    return model


def cut_latent(model: DiffusionModel) -> DiffusionModel:
    for name in model.params.names("den.z."):
        model.params[name][...] = 0.0
    return model


def mdlm_from_vadd(model: DiffusionModel) -> DiffusionModel:
    """Baseline sharing every denoiser weight except the z pathway."""
    store = ParamStore()
    for name in model.params.names("den."):
        if not name.startswith("den.z."):
            store.add(name, model.params[name])
    return DiffusionModel(arch=model.arch, params=store, kind="mdlm")


@pytest.fixture
def small_config(tmp_path):
    cfg = {
        "dataset": {"name": "checkerboard", "n": 1000, "seed": 1, "truth_n": 2000},
        "model": dict(SMALL),
        "training": {"epochs": 1, "batch_size": 256, "anneal_epochs": 1, "log_every": 1},
        "sampling": {"steps": [1, 5], "n_samples": 2000, "chunk_size": 512},
        "eval": {"K": 4, "n_time_pairs": 2, "n_sequences": 20},
        "seed": 3,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def tokens_of(rng: np.random.Generator, n: int, vocab_size: int = 100, seq_len: int = 2):
    return rng.integers(0, vocab_size, size=(n, seq_len))
