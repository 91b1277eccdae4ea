"""Parametric conditional average structural function (CASF) models."""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimMismatch

THETA_PAPER = (0.0, 1.0, 1.0 / 3.0, 1.0, -1.0, -0.5, 1.0)
FEATURE_NAMES = ("const", "d", "d*n*z", "s", "s^2", "s*z", "s*n")


def default_features(d, s, z, n):
    """Regressors (1, d, d*n*z, s, s^2, s*z, s*n), broadcast over the inputs."""
    d, s, z, n = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (d, s, z, n)))
    return np.stack([np.ones_like(d), d, d * n * z, s, s * s, s * z, s * n], axis=-1)


@dataclass(frozen=True)
class CasfModel:
    """m*(d, s, z, n; theta).

    With ``linear=True`` the model is ``features(d, s, z, n) @ theta`` and
    ``value_fn`` is ignored. A nonlinear model supplies ``value_fn`` and
    optionally ``jac_fn`` (returning the derivative in theta with a trailing
    axis of length ``dim``); without it the solver differences numerically.
    """

    features: Callable = default_features
    dim: int = 7
    linear: bool = True
    value_fn: Callable | None = None
    jac_fn: Callable | None = None
    names: tuple = FEATURE_NAMES

    def check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DimMismatch(f"theta has shape {theta.shape}, model expects ({self.dim},)")
        return theta

    def value(self, d, s, z, n, theta):
        theta = self.check(theta)
        if self.linear:
            return self.features(d, s, z, n) @ theta
        return np.asarray(self.value_fn(d, s, z, n, theta), dtype=float)

    def jacobian(self, d, s, z, n, theta):
        theta = self.check(theta)
        if self.linear:
            return self.features(d, s, z, n)
        if self.jac_fn is not None:
            return np.asarray(self.jac_fn(d, s, z, n, theta), dtype=float)
        base = self.value(d, s, z, n, theta)
        out = np.empty(base.shape + (self.dim,))
        for k in range(self.dim):
            step = 1e-6 * (1.0 + abs(theta[k]))
            tp, tm = theta.copy(), theta.copy()
            tp[k] += step
            tm[k] -= step
            out[..., k] = (self.value(d, s, z, n, tp) - self.value(d, s, z, n, tm)) / (2 * step)
        return out


DEFAULT_MODEL = CasfModel()
