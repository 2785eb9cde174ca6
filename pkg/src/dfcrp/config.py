"""Model hyperparameters, named presets, and chain configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

LOG_DIAMETER_FLOOR = math.log(18.0)


@dataclass(frozen=True)
class Hyperparams:
    """Fixed constants of the mixture model and its samplers.

    The within-cluster variance priors are Gamma with mean
    ``kappa * ld**eta`` (shape ``tau * kappa * ld**eta``, rate ``tau``),
    conditioned on the cluster's log diameter ``ld``.  The
    coordinate-diameter covariance is parameterized through a scaled
    Beta on the ratio of the covariance to its positive semi-definite
    maximum.  ``s_proposal`` holds the diagonal proposal variances of
    the covariance Metropolis step, ordered (var_x, var_d, cov_xd);
    ``tau_alpha`` is the precision of the lognormal proposal for the
    concentration parameter.  ``rho`` is the neighborhood radius in
    pixels; ``inf`` disables the neighborhood restriction.
    """

    kappa_x: float = 0.08
    kappa_d: float = 0.124
    eta_x: float = 4.5
    eta_d: float = -0.8
    tau_x: float = 1.0
    tau_d: float = 100.0
    a_lambda: float = 100.0
    b_lambda: float = 100.0
    mu0: tuple[float, float, float] = (2068.2, -1105.5, 3.8)
    sigma0_diag: tuple[float, float, float] = (920.0**2, 600.0**2, 0.65**2)
    a_alpha: float = 3.0
    b_alpha: float = 0.04
    tau_alpha: float = 100.0
    s_proposal: tuple[float, float, float] = (3000.0, 0.9, 0.2)
    rho: float = 75.0

    def __post_init__(self):
        for name in ("kappa_x", "kappa_d", "tau_x", "tau_d", "a_lambda",
                     "b_lambda", "a_alpha", "b_alpha", "tau_alpha"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        object.__setattr__(self, "mu0", tuple(float(v) for v in self.mu0))
        object.__setattr__(self, "sigma0_diag", tuple(float(v) for v in self.sigma0_diag))
        object.__setattr__(self, "s_proposal", tuple(float(v) for v in self.s_proposal))
        if len(self.mu0) != 3 or len(self.sigma0_diag) != 3 or len(self.s_proposal) != 3:
            raise ValueError("mu0, sigma0_diag and s_proposal must have 3 entries")
        if any(not v > 0 for v in self.sigma0_diag):
            raise ValueError("sigma0_diag entries must be positive")
        if any(not v > 0 for v in self.s_proposal):
            raise ValueError("s_proposal entries must be positive")
        if not (self.rho >= 0 or math.isinf(self.rho)):
            raise ValueError(f"rho must be >= 0 or infinite, got {self.rho}")

    @property
    def mu0_array(self) -> np.ndarray:
        return np.asarray(self.mu0, dtype=float)

    @property
    def sigma0_matrix(self) -> np.ndarray:
        return np.diag(self.sigma0_diag)

    def with_overrides(self, **kwargs) -> "Hyperparams":
        return replace(self, **kwargs)


# Defaults above suit the full 4107 x 2218 px annotation set.  "reduced"
# re-centers the mean prior for the top-center subimage used for radius
# calibration; "simulation" matches the synthetic-data study box.
PRESETS: dict[str, dict] = {
    "full": {},
    "reduced": {
        "mu0": (2050.0, -150.0, 3.2),
        "sigma0_diag": (200.0**2, 110.0**2, 0.5**2),
        "a_alpha": 1.0,
        "b_alpha": 0.01,
    },
    "simulation": {
        "mu0": (350.0, 250.0, 3.9),
        "sigma0_diag": (300.0**2, 225.0**2, 0.45**2),
        "a_alpha": 1.0,
        "b_alpha": 0.01,
    },
}


def preset_hyperparams(name: str = "full") -> Hyperparams:
    """Hyperparameters for a named preset ("full", "reduced", "simulation")."""
    try:
        overrides = PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; expected one of {sorted(PRESETS)}"
        ) from None
    return Hyperparams(**overrides)


@dataclass(frozen=True)
class ChainConfig:
    """Length, thinning, seed and hyperparameters of one sampler run."""

    num_scans: int = 10_000
    burn_in_scans: int = 5_000
    thin_every: int = 10
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        if self.num_scans < 1:
            raise ValueError(f"num_scans must be >= 1, got {self.num_scans}")
        if not 0 <= self.burn_in_scans < self.num_scans:
            raise ValueError(
                f"burn_in_scans must be in [0, num_scans), got "
                f"{self.burn_in_scans} with num_scans={self.num_scans}"
            )
        if self.thin_every < 1:
            raise ValueError(f"thin_every must be >= 1, got {self.thin_every}")

    def with_overrides(self, **kwargs) -> "ChainConfig":
        return replace(self, **kwargs)
