"""Probabilistic Myers-criterion machinery on 2-D Riemannian manifolds.

A Monte Carlo engine (h-Brownian motion, Hessian flow, Feynman-Kac weights)
and a deterministic spectral engine (weighted Laplacians on grids and
icospheres) evaluate the curvature floor ``rho^h``, the potential kernel
``U1`` and the spectral condition ``Delta^h - rho^h < 0``, and cross-check
each other.
"""
from .criterion import MyersReport, NumericsConfig, bakry_inequality_check, check, decay_rate_fit
from .errors import (ChartBoundary, ConfigError, CriterionFails, DomainError, ExcludedPathsError,
                     ExprSyntaxError, InsufficientDecayWindow, MeshTooCoarse, MyersError,
                     NoConvergence, NonSPDMetric, StepOutOfAtlas, UnknownIdentifier)
from .expr import ScalarFieldExpr, evaluate, parse
from .geometry import (ExpressionMetric, FlatTorus, ManifoldModel, PointOnManifold, Sphere,
                       curvature_pack, h_volume, hessian_h, make_manifold, metric_jet, rho_h, ricci)
from .sde import SamplerConfig, drift, sample_functionals, step
from .spectral import (build_operator, potential_resolvent, semigroup_apply, top_eigen,
                       witten_check)

__version__ = "0.1.0"
