"""Marginalized A-optimal sensor placement for linear Bayesian inverse problems
whose forward model carries a secondary uncertain parameter."""

__version__ = "0.1.0"

from .errors import CacheError, ConfigError, FactorizationError, GuardError, MoedError, ParameterError
from .grids import SpaceGrid, TimeGrid
from .priors import MatrixPrior, PriorPair, SpatialPrior, TimePrior, build_time_prior, matern32
from .forward import (AdvectionDiffusion, MatrixMaps, ObservationSetup, PDEConfig, PDEMaps,
                      assemble_dense)
from .posterior import (DesignWeights, KernelMatrices, MarginalCovariance, classical_post_m,
                        map_estimate, marginal_post_m, posterior_blocks, precompute_CD, q_solve)
from .oed import (Criterion, bisect_gamma, box_solver, greedy_cost, greedy_select, grad_psi,
                  phi_marginal, psi_classical, psi_marginal, sparsify_l0, sparsify_l1)
from .config import ExperimentConfig, build_problem, load_config

__all__ = [name for name in dir() if not name.startswith("_")]
