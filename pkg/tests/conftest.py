import numpy as np
import pytest

from taskfuse import ClassifierSpec, ParamVector


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def linear_spec():
    return ClassifierSpec(input_dim=4, hidden_dim=0, num_classes=2)


@pytest.fixture
def mlp_spec():
    return ClassifierSpec(input_dim=3, hidden_dim=4, num_classes=3)


@pytest.fixture
def random_params(rng):
    def make(spec, scale=0.5):
        return ParamVector(spec.layout(), scale * rng.normal(size=spec.param_count))

    return make
