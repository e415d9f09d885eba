import numpy as np
import pytest

from jem_lab.diffcore import Network
from jem_lab.energy import JemModel


def build_linear_model(weight, bias) -> JemModel:
    weight = np.asarray(weight, dtype=np.float64)
    net = Network.mlp(weight.shape[1], (), weight.shape[0])
    net.parameters[0].data = weight
    net.parameters[1].data = np.asarray(bias, dtype=np.float64)
    return JemModel(net)


@pytest.fixture
def linear_model():
    """Factory for a single affine layer with fixed weights, logits = W x + b."""
    return build_linear_model
