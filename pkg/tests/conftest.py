import numpy as np
import pytest

from ecgfusion.synthdata import generate_dataset


@pytest.fixture(scope="session")
def small_db(tmp_path_factory):
    """Four short synthetic records covering five beat classes."""
    root = tmp_path_factory.mktemp("smalldb")
    names = generate_dataset(
        root, n_records=4, beats_per_record=60,
        class_weights={"N": 3, "L": 1, "R": 1, "V": 1, "/": 1},
        seed=11,
    )
    return root, names


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
