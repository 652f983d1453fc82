import numpy as np
import pytest

from vxadapt.config import TrainConfig
from vxadapt.dataset import build_dataset
from vxadapt.networks import build_network, network_configs
from vxadapt.params import ParameterSet

# -----------------------------------------------------------------------------


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def desk_configs():
    return network_configs("desk")


@pytest.fixture
def g2(desk_configs):
    return build_network(desk_configs["G2"], 1)


@pytest.fixture
def d2(desk_configs):
    return build_network(desk_configs["D2"], 2)


@pytest.fixture
def g3(desk_configs):
    return build_network(desk_configs["G3"], 3)


@pytest.fixture
def d3(desk_configs):
    return build_network(desk_configs["D3"], 4)


@pytest.fixture
def images(rng):
    return rng.uniform(size=(2, 1, 16, 16))


@pytest.fixture
def voxels(rng):
    return (rng.uniform(size=(2, 16, 16, 16)) > 0.7).astype(float)


@pytest.fixture(scope="session")
def dataset():
    return build_dataset(6, 4, 0.7, seed=0)


@pytest.fixture
def train_config():
    return TrainConfig(
        batch_size=2,
        steps_stage1=2,
        steps_stage2=2,
        steps_joint=2,
        shapes=6,
        views=4,
        prefetch=0,
        checkpoint_every=0,
    )


@pytest.fixture
def make_params():
    def make(trainable=None, **arrays):
        return ParameterSet(
            arrays, trainable if trainable is not None else list(arrays)
        )

    return make
