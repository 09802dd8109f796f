from typing import Optional

import numpy as np
import pytest

from data_lqr_synth.data_gen import NoiseSpec, build_data_matrices, simulate
from data_lqr_synth.lti_core import DiscreteLtiSystem, spectral_radius
from data_lqr_synth.synthesis.backends import CvxpyBackend


def make_plant(seed: int, n: int = 3, m: int = 1, radius: Optional[float] = 1.2) -> DiscreteLtiSystem:
    """Gaussian plant rescaled to a fixed spectral radius, or left as drawn with ``radius=None``."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    if radius is not None:
        A *= radius / spectral_radius(A)
    return DiscreteLtiSystem(A, rng.standard_normal((n, m)))


def make_data(sys: DiscreteLtiSystem, seed: int, T: int = 20, noise: str = "none"):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(sys.n)
    u = rng.standard_normal((T, sys.m))
    traj = simulate(sys, x0, u, NoiseSpec.parse(noise), T, rng)
    return build_data_matrices(traj)


@pytest.fixture
def backend():
    return CvxpyBackend()


@pytest.fixture
def plant():
    return make_plant(0)


@pytest.fixture
def clean_data(plant):
    return make_data(plant, 1)


@pytest.fixture(params=[3, 5, 9, 17])
def unscaled_plant(request):
    return make_plant(request.param, radius=None)


@pytest.fixture
def scalar_plant():
    return DiscreteLtiSystem([[0.5]], [[1.0]])
