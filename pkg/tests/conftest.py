import numpy as np
import pytest

from autolabel3d.network import ModelConfig, init_parameters
from autolabel3d.sampling import build_sample
from autolabel3d.synth import synth_scene


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig(d=16, layers=2, heads=2, n_prime=8, m=6, conv_channels=(6, 6))


@pytest.fixture(scope="session")
def toy_params(toy_config):
    return init_parameters(toy_config, seed=0)


@pytest.fixture(scope="session")
def toy_frame():
    return synth_scene(11, n_objects=1, sparsity=(40, 60))


@pytest.fixture(scope="session")
def toy_sample(toy_frame, toy_config):
    return build_sample(toy_frame, 0, toy_config.n_prime, toy_config.m,
                        toy_config.patch_k, rng_seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
