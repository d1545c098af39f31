import numpy as np
import pytest

from sdq.gradcore import Tensor
from sdq.models import Dense, Model, ModelSpec


class TwoLayer(Model):
    """Unpinned pair: A (20 -> 50, 1000 weights) feeding B (50 -> 2, 100 weights)."""

    def __init__(self, seed=0, scale=0.5):
        super().__init__(ModelSpec("mlp", sizes=(20, 50, 2), classes=2))
        rng = np.random.default_rng(seed)
        self.layers = [Dense("A", 20, 50, rng), Dense("B", 50, 2, rng)]
        for layer in self.layers:
            # identical weight distributions regardless of fan-in
            layer.weight = Tensor(rng.normal(0, scale, layer.weight.shape), requires_grad=True,
                                  name=f"{layer.name}.weight")
        self.pinned = set()

    def forward(self, x, quant):
        a, b = self.layers
        h = self._act(a(x, quant.weight(a)), quant)
        out = b(h, quant.weight(b))
        self._track("B", out)
        return out


def two_layer_data(n=256, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 20))
    y = (x[:, :10].sum(axis=1) > x[:, 10:].sum(axis=1)).astype(np.int64)
    return x, y


@pytest.fixture
def two_layer():
    return TwoLayer()
