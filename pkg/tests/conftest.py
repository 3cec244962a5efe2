from __future__ import annotations

import numpy as np
import pytest

from eomae import specs
from eomae.synthetic import generate, load_recipe


@pytest.fixture()
def treesat():
    return specs.load_preset("treesatai_ts")


@pytest.fixture()
def pastis():
    return specs.load_preset("pastis_hd")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small synthetic dataset shared across tests (16 tiles)."""
    root = tmp_path_factory.mktemp("tiny_data")
    recipe = load_recipe("pretrain")
    recipe.num_tiles = 16
    dataset, _, _ = specs.load_preset("synthetic_pretrain")
    manifest = generate(recipe, dataset, root)
    return manifest


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
