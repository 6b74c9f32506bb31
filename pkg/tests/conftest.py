import numpy as np
import pytest
import torch

from cpcmil import SyntheticSpec, generate_synthetic_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_spec() -> SyntheticSpec:
    return SyntheticSpec(n_images=8, image_size=64, patch_size=32, seed=11)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return generate_synthetic_corpus(small_spec)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
