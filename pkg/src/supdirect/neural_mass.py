"""Jansen-style neural mass model with two unknown synaptic gains.

State ``x = (x11, x12, x21, x22, x31, x32)``; measured output
``y = x21 - x31``; unknown parameter ``p = (p1, p2)``.  All field functions
broadcast over leading axes, so a whole observer bank is evaluated in one
call with ``x`` of shape ``(N, 6)`` and ``p`` of shape ``(N, 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_X = 6
N_P = 2
PARAM_BOX = ((2.0, 8.0), (22.0, 28.0))
C_ROW = np.array([0.0, 0.0, 1.0, 0.0, -1.0, 0.0])


@dataclass(frozen=True)
class NeuralMassConstants:
    a: float = 100.0
    b: float = 50.0
    c1: float = 135.0
    c2: float = 108.0
    c3: float = 33.75
    c4: float = 33.75
    e0: float = 2.5
    v0: float = 6.0
    r: float = 0.56
    # row 4 of the input matrix scales u by p1*a; set to 1 to use p2*a instead
    input_param: int = 0

    def __post_init__(self):
        for name in ("a", "b", "c1", "c2", "c3", "c4", "e0", "v0", "r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.input_param not in (0, 1):
            raise ValueError("input_param must be 0 or 1")


@dataclass(frozen=True)
class ObserverGains:
    """Output injection ``L`` (6,) and innovation gain ``K`` (2,) inside the sigmoid."""

    L: tuple[float, ...] = (0.0,) * N_X
    K: tuple[float, ...] = (0.0, 0.0)

    def __post_init__(self):
        if len(self.L) != N_X or len(self.K) != 2:
            raise ValueError("L must have 6 entries and K 2 entries")
        if not (np.all(np.isfinite(self.L)) and np.all(np.isfinite(self.K))):
            raise ValueError("gains must be finite")

    @property
    def is_zero(self) -> bool:
        return not any(self.L) and not any(self.K)


DEFAULT_CONSTANTS = NeuralMassConstants()
# Open-loop copy driven by the measured output.  The pyramidal block sees the
# measured y directly and the remaining blocks are Hurwitz, so the matched
# error decays at the slower pole rate b.
DEFAULT_GAINS = ObserverGains()
DEFAULT_SETTLE_TIME = 1.0


def sigmoid(v, consts: NeuralMassConstants = DEFAULT_CONSTANTS):
    """Firing-rate sigmoid ``2 e0 / (1 + exp(r (v0 - v)))``."""
    return 2.0 * consts.e0 / (1.0 + np.exp(consts.r * (consts.v0 - np.asarray(v, dtype=float))))


def output(x):
    x = np.asarray(x)
    return x[..., 2] - x[..., 4]


def _rhs(x, p, u, y, v1, v3, consts):
    a, b = consts.a, consts.b
    p = np.asarray(p, dtype=float)
    p1 = p[..., 0]
    p2 = p[..., 1]
    pin = p[..., consts.input_param]
    dx = np.empty(np.broadcast_shapes(x.shape, p.shape[:-1] + (N_X,)))
    dx[..., 0] = x[..., 1]
    dx[..., 1] = -a * a * x[..., 0] - 2.0 * a * x[..., 1] + p1 * a * sigmoid(y, consts)
    dx[..., 2] = x[..., 3]
    dx[..., 3] = -a * a * x[..., 2] - 2.0 * a * x[..., 3] + p1 * a * consts.c2 * sigmoid(v1, consts) + pin * a * u
    dx[..., 4] = x[..., 5]
    dx[..., 5] = -b * b * x[..., 4] - 2.0 * b * x[..., 5] + p2 * b * consts.c4 * sigmoid(v3, consts)
    return dx


def plant_field(x, p, u, consts: NeuralMassConstants = DEFAULT_CONSTANTS):
    """``A x + G(p) gamma(H x) + B(p) phi(u, C x)``."""
    x = np.asarray(x, dtype=float)
    return _rhs(x, p, u, output(x), consts.c1 * x[..., 0], consts.c3 * x[..., 0], consts)


def observer_field(xh, p, u, y, gains: ObserverGains = DEFAULT_GAINS,
                   consts: NeuralMassConstants = DEFAULT_CONSTANTS):
    """``A xh + G(p) gamma(H xh + K e) + B(p) phi(u, y) + L e`` with ``e = y - C xh``."""
    xh = np.asarray(xh, dtype=float)
    e = np.asarray(y, dtype=float) - output(xh)
    v1 = consts.c1 * xh[..., 0] + gains.K[0] * e
    v3 = consts.c3 * xh[..., 0] + gains.K[1] * e
    dx = _rhs(xh, p, u, y, v1, v3, consts)
    if any(gains.L):
        dx = dx + np.multiply.outer(e, np.asarray(gains.L))
    return dx


def system_matrices(p, consts: NeuralMassConstants = DEFAULT_CONSTANTS):
    """``(A, G, B, H, C)`` for a single parameter vector."""
    a, b = consts.a, consts.b
    p1, p2 = float(p[0]), float(p[1])
    A = np.zeros((N_X, N_X))
    for i, rate in ((0, a), (2, a), (4, b)):
        A[i, i + 1] = 1.0
        A[i + 1, i] = -rate * rate
        A[i + 1, i + 1] = -2.0 * rate
    G = np.zeros((N_X, 2))
    G[3, 0] = p1 * a * consts.c2
    G[5, 1] = p2 * b * consts.c4
    B = np.zeros((N_X, 2))
    B[1, 0] = p1 * a
    B[3, 1] = (p1, p2)[consts.input_param] * a
    H = np.zeros((2, N_X))
    H[0, 0] = consts.c1
    H[1, 0] = consts.c3
    return A, G, B, H, C_ROW.reshape(1, N_X).copy()


@dataclass
class NeuralMassModel:
    """Plant/observer pair in the form the supervisor drives."""

    consts: NeuralMassConstants = DEFAULT_CONSTANTS
    gains: ObserverGains = DEFAULT_GAINS
    n_x: int = N_X
    n_p: int = N_P
    param_box: tuple = field(default=PARAM_BOX)

    def plant(self, x, p, u):
        return plant_field(x, p, u, self.consts)

    def observer(self, xh, p, u, y):
        return observer_field(xh, p, u, y, self.gains, self.consts)

    def output(self, x):
        return output(x)
