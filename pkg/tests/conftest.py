import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `synth` importable

from milattn.embeddings import EmbeddingStore
from milattn.model import Bag, init_params
from milattn.numerics import RngStream


@pytest.fixture
def rng():
    return RngStream(123)


@pytest.fixture
def small_params(rng):
    return init_params(4, 8, 4, rng)


@pytest.fixture
def random_bag(rng):
    return Bag(slide_id="s0", label=2, embeddings=rng.normal(0.0, 1.0, (5, 8)))


@pytest.fixture
def tiny_store():
    gen = np.random.default_rng(42)
    coords = np.array([(x * 16, y * 16) for y in range(4) for x in range(5)],
                      dtype=np.uint32)
    values = gen.normal(0, 1, (20, 8)).astype(np.float32)
    return EmbeddingStore("tiny", 8, coords, values)
