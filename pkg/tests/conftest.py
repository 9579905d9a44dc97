import json
from pathlib import Path

import numpy as np
import pytest

from tiltgen import DiagGaussian, GaussianMixture
from tiltgen.flows import AffineDiagonalLayer, FlowModel
from tiltgen.tuner import TunedModel

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def oracle_values():
    return json.loads((FIXTURES / "oracle_values.json").read_text())


@pytest.fixture
def std_normal_1d():
    return DiagGaussian.standard(1)


@pytest.fixture
def std_normal_2d():
    return DiagGaussian.standard(2)


@pytest.fixture
def mixture_pm2():
    """Half-half mixture of N(-2, 1) and N(2, 1)."""
    return GaussianMixture(
        [0.5, 0.5], [DiagGaussian([-2.0], [1.0]), DiagGaussian([2.0], [1.0])]
    )


def exact_shift_model(base, shift, beta=0.0) -> TunedModel:
    """Tuned model whose flow is an exact shift; the tilt of a Gaussian by a
    linear criterion is such a shift, so this is the closed-form solution."""
    shift = np.atleast_1d(np.asarray(shift, dtype=float))
    layer = AffineDiagonalLayer(base.dim, shift=shift)
    return TunedModel(base, FlowModel(base.dim, [layer]), beta)


def finite_diff_grad(fn, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g
