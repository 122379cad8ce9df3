import numpy as np
import pytest

import lowrank
import synth
from models import SynthSpec


def random_pair(rng, d=6, k=5, r=2, scale=1.0):
    return lowrank.LowRankPair(
        a=rng.standard_normal((r, k)) * scale,
        b=rng.standard_normal((d, r)) * scale,
    )


def random_repo(rng, n=4, layers=("layer0",), d=6, k=5, r=2):
    adapters = tuple({name: random_pair(rng, d, k, r) for name in layers} for _ in range(n))
    return lowrank.AdapterRepository(adapters=adapters, layer_names=tuple(layers))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_spec():
    return SynthSpec(
        input_dim=8,
        class_count=4,
        rank=2,
        n_adapters=4,
        n_relevant=2,
        noise_level=0.3,
        n_val=64,
        seed=3,
    )


@pytest.fixture
def small_world(small_spec):
    return synth.generate_world(small_spec)
