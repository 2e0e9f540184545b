"""scikit-learn style wrapper around the learn-then-certify pipeline."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .certificate import CertifiedQuantities, make_certificate
from .certify import BabConfig, RegionSpec, build_region, certify_all
from .dynamics import make_system
from .kkl import NoiseSpec, empirical_error_envelope, simulate_observer
from .linalg import ObserverDesign
from .training import TrainingConfig, fit_observer


class KKLObserver(TransformerMixin, BaseEstimator):
    """Learned KKL observer for one of the benchmark systems.

    ``fit(X)`` takes initial states ``X`` of shape ``(n, n_x)``: the bounding
    box of ``X`` is the initial-condition box for data generation and for the
    certification region, and ``n`` sets the number of training trajectories.
    ``transform`` maps states to observer coordinates, ``inverse_transform``
    maps back.  ``training_options`` passes any further ``TrainingConfig``
    fields (pool size, L-BFGS iterations, ...).
    """

    def __init__(self, system="reverse_duffing", mu=1.0, eigenvalues=(1.0, 2.0, 3.0, 4.0, 5.0),
                 hidden_layers=3, width=64, horizon=20.0, dt=1e-3, epochs=15, nu=1.0,
                 finetune_rounds=10, inverse_epochs=30, region_mode="energy",
                 region_margin=0.3, region_cell=0.2, training_options=None, seed=0):
        self.system = system
        self.mu = mu
        self.eigenvalues = eigenvalues
        self.hidden_layers = hidden_layers
        self.width = width
        self.horizon = horizon
        self.dt = dt
        self.epochs = epochs
        self.nu = nu
        self.finetune_rounds = finetune_rounds
        self.inverse_epochs = inverse_epochs
        self.region_mode = region_mode
        self.region_margin = region_margin
        self.region_cell = region_cell
        self.training_options = training_options
        self.seed = seed

    def _system(self):
        if self.system == "van_der_pol":
            return make_system(self.system, mu=self.mu)
        return make_system(self.system)

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=1)
        system = self._system()
        if X.shape[1] != system.state_dim:
            raise ValueError(f"expected {system.state_dim} state columns, got {X.shape[1]}")
        design = ObserverDesign.diagonal(self.eigenvalues)
        config = TrainingConfig(p=len(X), horizon=self.horizon, dt=self.dt, epochs=self.epochs,
                                nu=self.nu, hidden_layers=self.hidden_layers, width=self.width,
                                finetune_rounds=self.finetune_rounds,
                                inverse_epochs=self.inverse_epochs, seed=self.seed,
                                **(self.training_options or {}))
        lo, hi = X.min(axis=0), X.max(axis=0)
        self.region_spec_ = RegionSpec(mode=self.region_mode, x0_lower=lo.tolist(),
                                       x0_upper=hi.tolist(), margin=self.region_margin,
                                       cell=self.region_cell)
        self.region_ = build_region(system, self.region_spec_)
        result = fit_observer(system, design, config, lambda n, s: X if n == len(X) else
                              self.region_.sample(n, s), self.region_)
        self.system_ = system
        self.observer_ = result.observer
        self.history_ = {"forward": result.forward_history, "finetune": result.finetune_history,
                         "inverse": result.inverse_history}
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "observer_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return self.observer_.forward_net(X)

    def inverse_transform(self, Z):
        check_is_fitted(self, "observer_")
        Z = check_array(Z)
        return self.observer_.inverse_net(Z)

    def residual(self, X):
        """PDE residual of the learned map at states ``X``."""
        from .kkl import pde_residual
        check_is_fitted(self, "observer_")
        return pde_residual(self.observer_, self.system_, check_array(X))

    def certify(self, bab=None, noise_bound=0.0):
        """Certify the three quantities and return the resulting certificate."""
        check_is_fitted(self, "observer_")
        report, _ = certify_all(self.observer_, self.system_, self.region_, bab or BabConfig())
        self.certification_ = report
        q = CertifiedQuantities.from_report(report, noise_bound)
        self.certificate_ = make_certificate(self.observer_.design, q)
        return self.certificate_

    def simulate(self, x0, horizon=20.0, dt=None, noise_bound=0.0, seed=0):
        check_is_fitted(self, "observer_")
        noise = NoiseSpec(noise_bound, seed) if noise_bound > 0 else None
        return simulate_observer(self.observer_, self.system_, np.asarray(x0, float), dt or self.dt,
                                 horizon, noise)

    def error_envelope(self, n_trajectories=50, horizon=20.0, noise_bound=0.0, seed=0):
        """Empirical ``sup_{t >= 5 / lambda_min} ||xhat - x||`` from the initial box."""
        check_is_fitted(self, "observer_")
        from .dynamics import Box
        spec = self.region_spec_
        noise = NoiseSpec(noise_bound, seed) if noise_bound > 0 else None
        return empirical_error_envelope(self.observer_, self.system_,
                                        Box(spec.x0_lower, spec.x0_upper), n_trajectories,
                                        self.dt, horizon, 5.0 / self.observer_.design.lambda_min,
                                        noise, seed)
