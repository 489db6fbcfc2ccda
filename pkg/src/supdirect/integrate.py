"""Fixed-step RK4 integration, excitation inputs and trajectory recording."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class NumericalBlowupError(FloatingPointError):
    """Raised when a derivative or state becomes non-finite."""

    def __init__(self, t: float, where: str = "state"):
        super().__init__(f"non-finite {where} at t={t!r}")
        self.t = t
        self.where = where


class VectorField(Protocol):
    """``field(x, t, u) -> dx/dt``.  Must not mutate its arguments."""

    dim: int

    def __call__(self, x: np.ndarray, t: float, u) -> np.ndarray: ...


@dataclass
class FunctionField:
    """Adapter turning a plain function into a :class:`VectorField`."""

    fn: Callable[[np.ndarray, float, object], np.ndarray]
    dim: int

    def __call__(self, x, t, u):
        return self.fn(x, t, u)


def _sample(u, t):
    return u(t) if callable(u) else u


def rk4_step(field: VectorField, x: np.ndarray, t: float, dt: float, u=None) -> np.ndarray:
    """Classical RK4 step; ``u`` is a constant or a callable sampled at t, t+dt/2, t+dt."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != field.dim:
        raise ValueError(f"state has dimension {x.shape[-1]}, field expects {field.dim}")
    h2 = 0.5 * dt
    um = _sample(u, t + h2)
    k1 = field(x, t, _sample(u, t))
    k2 = field(x + h2 * k1, t + h2, um)
    k3 = field(x + h2 * k2, t + h2, um)
    k4 = field(x + dt * k3, t + dt, _sample(u, t + dt))
    if not (np.all(np.isfinite(k1)) and np.all(np.isfinite(k4))):
        raise NumericalBlowupError(t, "derivative")
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericalBlowupError(t + dt)
    return out


@dataclass
class InputSignal:
    """Bounded excitation input.

    ``multisine``: ``offset + amplitude * mean_m sin(w_m t + phi_m)`` with
    seeded phases.  ``random``: piecewise constant, uniform in
    ``offset +/- amplitude``, redrawn every ``hold`` seconds.  ``constant``:
    ``offset + amplitude``.
    """

    kind: str = "multisine"
    amplitude: float = 1.0
    offset: float = 0.0
    frequencies: Sequence[float] = (1.0,)  # rad/s
    hold: float = 1.0
    seed: int = 0
    _phases: np.ndarray = field(init=False, repr=False)
    _levels: list = field(init=False, repr=False, default_factory=list)

    KINDS = ("multisine", "random", "constant")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown input kind {self.kind!r}; expected one of {self.KINDS}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.kind == "random" and not self.hold > 0:
            raise ValueError("hold must be > 0")
        rng = np.random.default_rng(self.seed)
        self._w = np.asarray(self.frequencies, dtype=float)
        self._phases = rng.uniform(0.0, 2.0 * np.pi, size=self._w.size)
        self._rng = rng

    @property
    def bound(self) -> float:
        """Upper bound on |u(t)|."""
        return abs(self.offset) + self.amplitude

    def _level(self, i: int) -> float:
        while len(self._levels) <= i:
            self._levels.append(float(self._rng.uniform(-1.0, 1.0)))
        return self._levels[i]

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.offset + self.amplitude
        if self.kind == "random":
            return self.offset + self.amplitude * self._level(int(math.floor(t / self.hold)))
        s = np.sin(self._w * t + self._phases)
        return self.offset + self.amplitude * float(s.mean())


@dataclass
class Trajectory:
    """Uniform-grid record of named signals."""

    dt: float
    t: np.ndarray
    signals: dict[str, np.ndarray]
    bound_exceeded_at: float | None = None

    def __len__(self) -> int:
        return self.t.size

    def columns(self) -> list[tuple[str, np.ndarray]]:
        cols = [("t", self.t)]
        for name, arr in self.signals.items():
            if arr.ndim == 1:
                cols.append((name, arr))
            else:
                cols.extend((f"{name}_{i + 1}", arr[:, i]) for i in range(arr.shape[1]))
        return cols

    def to_csv(self, path: str | Path, decimate: int = 1) -> None:
        write_csv(path, self.columns(), decimate)


def write_csv(path: str | Path, columns: list[tuple[str, np.ndarray]], decimate: int = 1) -> None:
    """Header row of names, then rows at full double precision."""
    if decimate < 1:
        raise ValueError("decimate must be >= 1")
    names = [c[0] for c in columns]
    data = np.column_stack([np.asarray(c[1], dtype=float) for c in columns])[::decimate]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in data:
            w.writerow([format(v, ".17g") for v in row])


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def grid_steps(horizon: float, dt: float) -> int:
    """Number of steps; ``horizon`` must be an integer multiple of ``dt``."""
    n = round(horizon / dt)
    if n <= 0 or not math.isclose(n * dt, horizon, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"horizon {horizon} is not a positive multiple of dt {dt}")
    return n


def simulate(
    field: VectorField,
    x0,
    u,
    horizon: float,
    dt: float,
    state_bound: float | None = None,
) -> Trajectory:
    """Integrate ``field`` from ``x0`` over ``[0, horizon]``.

    States with infinity norm above ``state_bound`` are flagged on the
    returned trajectory, not raised.
    """
    n = grid_steps(horizon, dt)
    x = np.asarray(x0, dtype=float).copy()
    xs = np.empty((n + 1, x.size))
    us = np.empty(n + 1)
    t = np.arange(n + 1) * dt
    xs[0] = x
    us[0] = _sample(u, 0.0)
    flagged = None
    for i in range(n):
        x = rk4_step(field, x, t[i], dt, u)
        xs[i + 1] = x
        us[i + 1] = _sample(u, t[i + 1])
        if state_bound is not None and flagged is None and np.max(np.abs(x)) > state_bound:
            flagged = float(t[i + 1])
            logger.warning("state bound %g exceeded at t=%g", state_bound, flagged)
    return Trajectory(dt, t, {"x": xs, "u": us}, bound_exceeded_at=flagged)
