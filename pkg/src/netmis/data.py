"""The observed-data container passed between estimation stages."""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadArgs


@dataclass(frozen=True)
class Sample:
    """Per-unit observations with two network proxies.

    ``z`` is always two-dimensional ``(n, q)``; ``z_continuous`` flags which
    columns are smoothed by the kernel. ``s_star`` / ``deg_star`` carry the
    latent exposure when the data are simulated and are ignored by every
    feasible estimator.
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    s1: np.ndarray
    deg1: np.ndarray
    s2: np.ndarray
    deg2: np.ndarray
    z_continuous: tuple = ()
    positions: np.ndarray | None = None
    cluster: np.ndarray | None = None
    s_star: np.ndarray | None = None
    deg_star: np.ndarray | None = None
    z_names: tuple = field(default=("z",))

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=np.int64))
        for name in ("s1", "deg1", "s2", "deg2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if not self.z_continuous:
            object.__setattr__(self, "z_continuous", (False,) * z.shape[1])
        if len(self.z_continuous) != z.shape[1]:
            raise BadArgs("z_continuous must flag every covariate column")
        if len(self.z_names) != z.shape[1]:
            object.__setattr__(self, "z_names", tuple(f"z{k + 1}" for k in range(z.shape[1])))
        n = len(self.y)
        for name in ("d", "z", "s1", "deg1", "s2", "deg2"):
            if len(getattr(self, name)) != n:
                raise BadArgs(f"column {name} has length {len(getattr(self, name))}, expected {n}")

    @property
    def n(self):
        return len(self.y)

    def proxy(self, k):
        """``(s, deg)`` for proxy 1 or 2."""
        if k == 1:
            return self.s1, self.deg1
        if k == 2:
            return self.s2, self.deg2
        raise BadArgs(f"proxy must be 1 or 2, got {k!r}")

    @property
    def scalar_z(self):
        return self.z[:, 0]

    def with_y(self, y):
        return replace(self, y=np.asarray(y, dtype=float))
