"""Learned KKL observers with certified estimation-error bounds."""

from .certificate import (Certificate, CertifiedQuantities, epsilon_grid_check, ez_transient,
                          ez_ultimate, make_certificate, x_ultimate, x_ultimate_noisy)
from .certify import (BabConfig, LinearBounds, Region, RegionSpec, bound_jacobian, build_region,
                      certify_all, certify_lipschitz, certify_reconstruction,
                      certify_residual_sup, crown_bounds, enclose_image, ibp_forward)
from .dynamics import (Box, SystemModel, Trajectory, integrate_backward, integrate_forward,
                       linear_system, make_system, reverse_duffing, van_der_pol)
from .estimator import KKLObserver
from .kkl import LearnedObserver, NoiseSpec, exact_linear_observer, pde_residual
from .linalg import ObserverDesign, solve_lyapunov
from .net import Mlp
from .training import TrainingConfig, fit_observer

__version__ = "0.1.0"
