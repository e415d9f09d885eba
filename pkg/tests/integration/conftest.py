"""
Session fixtures that train small models on toy mixtures.

Training takes a little while, so every model is trained once per seed and
shared by all integration tests that need it.
"""

from dataclasses import replace
from functools import lru_cache

import pytest

from jem_lab.config import ModelConfig
from jem_lab.data import DatasetSpec, generate, preprocess
from jem_lab.energy import JemModel
from jem_lab.rng import Rng
from jem_lab.sampler import SamplerConfig
from jem_lab.trainer import JemTrainer, TrainConfig

SEED = 0

GMM_SPEC = DatasetSpec(generator="gauss_mixture", num_classes=4, num_points=500, scale=1.0, std=0.1, seed=SEED)

# Chains run at temperature sigma^2 / (2 alpha) ~ 0.2 with a small step, so the
# learned log p~ keeps its contrast and slopes steeply away from the data.
TOY_SAMPLER = SamplerConfig(alpha=0.0005, sigma=0.014, eta=20, rho=0.05, buffer_size=1000, clamp=1.5)

TOY_TRAIN = TrainConfig(lr=1e-3, decay_epochs=(100, 130), epochs=150, batch_size=40, sampler=TOY_SAMPLER,
                        val_fraction=0.2)

# Overlapping classes; decision boundaries run through populated regions.
OVERLAP_SPEC = replace(GMM_SPEC, std=0.4)

# The low-temperature recipe (sigma = 0.01) the objectives are compared under.
ABLATION_SAMPLER = SamplerConfig(alpha=0.005, sigma=0.01, eta=20, rho=0.05, buffer_size=1000, clamp=1.5)

ABLATION_TRAIN = TrainConfig(lr=1e-3, decay_epochs=(40, 55), epochs=60, batch_size=40, sampler=ABLATION_SAMPLER,
                             val_fraction=0.2)

HELD_OUT_POINTS = 2000


def _dataset(spec: DatasetSpec, seed: int):
    """The spec drawn with `seed`, in model space and re-noised per batch."""
    rng = Rng(seed)
    raw = generate(replace(spec, seed=seed), rng.substream("data"))
    return preprocess(raw, rng.substream("preprocess"), noise_std=0.03, renoise=True)


def _held_out(spec: DatasetSpec, seed: int, dataset):
    """A fresh draw from the same distribution, scaled like `dataset`, without noise."""
    raw = generate(replace(spec, seed=seed + 1000, num_points=HELD_OUT_POINTS))
    return preprocess(raw, Rng(seed), noise_std=0.0, normalization=dataset.normalization)


def _train(config: TrainConfig, dataset, seed: int = SEED):
    rng = Rng(seed)
    model = JemModel(ModelConfig(hidden=(64, 64)).build(dataset.dim, dataset.num_classes, rng.substream("init")))
    return JemTrainer(config).train(model, dataset, rng.substream("train"))


@lru_cache(maxsize=None)
def _gmm(seed: int):
    return _dataset(GMM_SPEC, seed)


@lru_cache(maxsize=None)
def _joint(seed: int):
    return _train(TOY_TRAIN, _gmm(seed), seed)


@lru_cache(maxsize=None)
def _noisy_baseline(seed: int):
    """Plain classifier on the same points with 10% of the labels flipped."""
    dataset = _dataset(replace(GMM_SPEC, label_noise=0.1), seed)
    return _train(replace(TOY_TRAIN, gen_weight=0.0), dataset, seed)


@lru_cache(maxsize=None)
def _overlap(seed: int):
    return _dataset(OVERLAP_SPEC, seed)


@lru_cache(maxsize=None)
def _ablation(seed: int, objective: str):
    return _train(replace(ABLATION_TRAIN, objective=objective), _overlap(seed), seed)


@pytest.fixture(scope="session")
def gmm_dataset():
    """The mixture in model space, re-noised per batch."""
    return _gmm(SEED)


@pytest.fixture(scope="session")
def jem_run():
    return _joint(SEED)


@pytest.fixture(scope="session")
def baseline_run(gmm_dataset):
    return _train(replace(TOY_TRAIN, gen_weight=0.0), gmm_dataset)


@pytest.fixture(scope="session")
def joint_runs():
    """Seed -> joint model on the mixture drawn with that seed."""
    return _joint


@pytest.fixture(scope="session")
def noisy_baseline_runs():
    """Seed -> plain classifier trained on noisy labels of the same draw."""
    return _noisy_baseline


@pytest.fixture(scope="session")
def ablation_runs():
    """(seed, objective) -> model trained on the overlapping mixture."""
    return _ablation


@pytest.fixture(scope="session")
def overlap_held_out():
    """Seed -> large held-out draw of the overlapping mixture, scaled like that seed's training data."""
    return lambda seed: _held_out(OVERLAP_SPEC, seed, _overlap(seed))


@pytest.fixture(scope="session")
def toy_train():
    return TOY_TRAIN


@pytest.fixture(scope="session")
def toy_sampler():
    return TOY_SAMPLER
