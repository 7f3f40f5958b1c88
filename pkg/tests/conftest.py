import numpy as np
import pytest

from moed.config import load_config, build_problem
from moed.forward import AdvectionDiffusion, ObservationSetup, PDEMaps
from moed.grids import SpaceGrid, TimeGrid
from moed.oracle import random_problem
from moed.posterior import precompute_CD
from moed.priors import PriorPair, SpatialPrior, build_time_prior


class Desk:
    """The desk preset, assembled once per session."""

    def __init__(self):
        self.cfg = load_config(None, "desk")
        self.time, self.space, self.maps, self.priors = build_problem(self.cfg)
        self.kernels = precompute_CD(self.maps, self.priors)
        self.sigma = self.cfg.sensors["noise_sigma"]
        self.prior_trace = self.priors.m.trace()


@pytest.fixture(scope="session")
def desk():
    return Desk()


@pytest.fixture(scope="session")
def small_pde():
    """A coarse advection-diffusion setup for fast operator tests."""
    time = TimeGrid(0.0, 1.0, 21)
    space = SpaceGrid(9, 9)
    pde = AdvectionDiffusion(space, time)
    xs = np.linspace(0.2, 0.8, 3)
    X, Y = np.meshgrid(xs, xs)
    maps = PDEMaps(pde, ObservationSetup(np.c_[X.ravel(), Y.ravel()]))
    priors = PriorPair(build_time_prior(time), SpatialPrior(space))
    return pde, maps, priors


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def tiny_problems(seed, count, n_m=(3, 12), n_b=(3, 12), n_d=(1, 6)):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        yield random_problem(rng, int(rng.integers(*n_m)), int(rng.integers(*n_b)),
                             int(rng.integers(*n_d)))


def random_design(rng, n_d, zeros=True):
    w = rng.uniform(0, 1, n_d)
    if zeros:
        w[rng.uniform(size=n_d) < 0.3] = 0.0
    return w
