"""Supervisory observer driven by the DIRECT sampling policy.

A growing bank of state observers runs alongside the plant.  Each observer
carries an exponentially forgetting monitor of its squared output error;
the one with the smallest monitor supplies the state and parameter
estimates.  Every ``T_d`` seconds the monitors over the finished window are
handed to the DIRECT partition as costs, new sample points become new
observers, and the monitors restart from zero.  From iteration ``k_star``
on only the selected observer is kept.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from . import direct
from .integrate import FunctionField, NumericalBlowupError, rk4_step

logger = logging.getLogger(__name__)

MULTI = "multi"
SINGLE = "single"


class ScheduleError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ParamBox:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("lower and upper must have the same nonzero length")
        for lo, hi in zip(self.lower, self.upper):
            if not hi > lo:
                raise ValueError(f"upper bound {hi} must exceed lower bound {lo}")

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]]) -> "ParamBox":
        return cls(tuple(float(p[0]) for p in pairs), tuple(float(p[1]) for p in pairs))

    @property
    def n_p(self) -> int:
        return len(self.lower)

    def contains(self, p) -> bool:
        return all(lo <= float(v) <= hi for v, lo, hi in zip(p, self.lower, self.upper))


def denormalize(p_norm, box: ParamBox) -> np.ndarray:
    """Map a point of the unit cube to physical parameter units."""
    if len(p_norm) != box.n_p:
        raise DomainError(f"expected {box.n_p} coordinates, got {len(p_norm)}")
    out = np.empty(box.n_p)
    for d, (v, lo, hi) in enumerate(zip(p_norm, box.lower, box.upper)):
        if not 0 <= v <= 1:
            raise DomainError(f"coordinate {d} = {v} lies outside [0, 1]")
        out[d] = lo + float(v) * (hi - lo)
    return out


def normalize(p, box: ParamBox) -> np.ndarray:
    """Inverse of :func:`denormalize`."""
    if len(p) != box.n_p:
        raise DomainError(f"expected {box.n_p} coordinates, got {len(p)}")
    out = np.empty(box.n_p)
    for d, (v, lo, hi) in enumerate(zip(p, box.lower, box.upper)):
        if not lo <= v <= hi:
            raise DomainError(f"parameter {d} = {v} lies outside [{lo}, {hi}]")
        out[d] = (float(v) - lo) / (hi - lo)
    return out


def _monitor_weights(lam: float, dt: float) -> tuple[float, float, float]:
    """Decay factor and weights of the previous/current squared error.

    The squared error is taken linear between the two samples and the
    forgetting integral over one step is evaluated exactly.
    """
    x = lam * dt
    decay = math.exp(-x)
    total = dt * (-math.expm1(-x)) / x
    if x < 1e-2:
        phi = 0.5 - x / 6 + x**2 / 24 - x**3 / 120 + x**4 / 720
    else:
        phi = (x + math.expm1(-x)) / x**2
    w_cur = dt * phi
    return decay, total - w_cur, w_cur


def monitor_update(mu, y_err, lam: float, dt: float, y_err_prev=None):
    """Advance ``dmu/dt = -lam mu + |y_err|^2`` by one step of length ``dt``.

    ``|.|`` is the infinity norm over the last axis when ``y_err`` has one.
    ``y_err_prev`` is the error at the start of the step; it defaults to
    ``y_err`` (error held constant over the step).
    """
    if not lam > 0 or not dt > 0:
        raise ValueError("lam and dt must be positive")
    decay, w_prev, w_cur = _monitor_weights(lam, dt)
    g1 = _sq_norm(y_err)
    g0 = g1 if y_err_prev is None else _sq_norm(y_err_prev)
    out = decay * np.asarray(mu, dtype=float) + w_prev * g0 + w_cur * g1
    if not np.all(np.isfinite(out)):
        raise NumericalBlowupError(float("nan"), "monitor")
    return out if np.ndim(out) else float(out)


def _sq_norm(err):
    err = np.asarray(err, dtype=float)
    if err.ndim >= 2:
        err = np.max(np.abs(err), axis=-1)
    return err * err


def select(mu: Sequence[float], previous: int | None = None) -> int:
    """Index of the smallest monitor; a tie keeps ``previous``, else the lowest index."""
    mu = np.asarray(mu, dtype=float)
    if mu.size == 0:
        raise ValueError("cannot select from an empty bank")
    best = int(np.argmin(mu))
    if previous is not None and 0 <= previous < mu.size and mu[previous] == mu[best]:
        return previous
    return best


@dataclass
class ObserverInstance:
    p_norm: direct.GridPoint
    p: np.ndarray
    spawn_time: float
    rect_id: int | None = None


@dataclass
class SupervisorConfig:
    T_d: float = 10.0
    lam: float = 0.05
    k_star: int = 6
    eps: float = direct.DEFAULT_EPS
    dt: float = 1e-3
    reinit_all: bool = False
    state_bound: float | None = None


@dataclass
class StepRecord:
    t: float
    u: float
    y: float
    y_hat: float
    x: np.ndarray
    x_hat: np.ndarray
    p_hat: np.ndarray
    sigma: int
    n_obs: int


class Supervisor:
    """Plant plus observer bank, advanced together on a fixed RK4 grid.

    ``model`` provides ``plant(x, p, u)``, ``observer(xh, P, u, y)``,
    ``output(x)`` and ``n_x``; ``u`` is a callable of time.
    """

    def __init__(self, model, box: ParamBox, p_star, x0, xh0, u, config: SupervisorConfig | None = None):
        self.model = model
        self.box = box
        self.cfg = config or SupervisorConfig()
        cfg = self.cfg
        self.steps_per_window = round(cfg.T_d / cfg.dt)
        if self.steps_per_window < 1 or not math.isclose(self.steps_per_window * cfg.dt, cfg.T_d, rel_tol=1e-9):
            raise ScheduleError(f"T_d={cfg.T_d} is not a multiple of dt={cfg.dt}")
        if not cfg.lam > 0:
            raise ValueError("lam must be positive")
        if cfg.k_star < 0:
            raise ValueError("k_star must be >= 0")
        self.p_star = np.asarray(p_star, dtype=float)
        if not box.contains(self.p_star):
            raise DomainError(f"true parameter {self.p_star} lies outside the parameter box")
        self.u = u
        self.field = FunctionField(self._stacked_field, model.n_x)

        self.step_index = 0
        self.k = 0
        self.mode = MULTI
        self.sigma = 0
        self.partition = direct.init_partition(box.n_p, cfg.eps)
        self.bank: list[ObserverInstance] = []
        self.x = np.asarray(x0, dtype=float).copy()
        xh0 = np.asarray(xh0, dtype=float)
        self.xh = np.empty((0, model.n_x))
        self.P = np.empty((0, box.n_p))
        self.mu = np.empty(0)
        self.events: list[dict[str, Any]] = []
        self.snapshots: list[tuple[int, str]] = []
        self.discarded: list[dict[str, Any]] = []
        self.bound_exceeded_at: float | None = None
        self.window_history: list[int] = []

        for req in self.partition.pending:
            self._spawn(req.point, req.rect_id, xh0)
        self._g_prev = self._sq_errors()
        event = self._event_base()
        event["new_points"] = [self._point_entry(o) for o in self.bank]
        if cfg.k_star == 0:
            self._enter_single(event)
            event["n_obs"] = self.n_obs
        self.window_history.append(self.n_obs)
        self.events.append(event)

    @property
    def t(self) -> float:
        return self.step_index * self.cfg.dt

    @property
    def n_obs(self) -> int:
        return len(self.bank)

    def _spawn(self, p_norm, rect_id, xh):
        p = denormalize(p_norm, self.box)
        self.bank.append(ObserverInstance(p_norm, p, self.t, rect_id))
        self.xh = np.vstack([self.xh, np.asarray(xh, dtype=float)[None, :]])
        self.P = np.vstack([self.P, p[None, :]])
        self.mu = np.append(self.mu, 0.0)

    def _stacked_field(self, Z, t, u):
        x = Z[0]
        y = self.model.output(x)
        out = np.empty_like(Z)
        out[0] = self.model.plant(x, self.p_star, u)
        out[1:] = self.model.observer(Z[1:], self.P, u, y)
        return out

    def _sq_errors(self):
        return _sq_norm(self.model.output(self.xh) - self.model.output(self.x))

    def advance(self) -> StepRecord:
        """Integrate plant and bank over one step, update monitors and selection."""
        dt = self.cfg.dt
        t = self.t
        Z = np.vstack([self.x[None, :], self.xh])
        try:
            Z = rk4_step(self.field, Z, t, dt, self.u)
        except NumericalBlowupError as exc:
            raise NumericalBlowupError(exc.t, self._blowup_culprit(Z, t)) from exc
        self.x, self.xh = Z[0], Z[1:]
        self.step_index += 1
        g = self._sq_errors()
        decay, w_prev, w_cur = _monitor_weights(self.cfg.lam, dt)
        self.mu = decay * self.mu + w_prev * self._g_prev + w_cur * g
        self._g_prev = g
        self.sigma = select(self.mu, self.sigma)
        if self.cfg.state_bound is not None and self.bound_exceeded_at is None:
            if np.max(np.abs(self.x)) > self.cfg.state_bound:
                self.bound_exceeded_at = self.t
                logger.warning("plant state exceeded bound %g at t=%g", self.cfg.state_bound, self.t)
        if self.step_index % self.steps_per_window == 0:
            self.on_update_instant(self.t)
        return self.record()

    def _blowup_culprit(self, Z, t) -> str:
        d = self.field(Z, t, self.u(t) if callable(self.u) else self.u)
        bad = [i for i in range(Z.shape[0]) if not np.all(np.isfinite(d[i]))]
        if bad and bad[0] == 0:
            return "plant state"
        return f"observer {bad[0] - 1 if bad else '?'}"

    def record(self) -> StepRecord:
        u = self.u(self.t) if callable(self.u) else self.u
        s = self.sigma
        return StepRecord(
            t=self.t,
            u=float(u),
            y=float(self.model.output(self.x)),
            y_hat=float(self.model.output(self.xh[s])),
            x=self.x.copy(),
            x_hat=self.xh[s].copy(),
            p_hat=self.P[s].copy(),
            sigma=s,
            n_obs=self.n_obs,
        )

    def on_update_instant(self, t_k: float) -> dict[str, Any]:
        """Read the finished window, run one DIRECT iteration and respawn."""
        m = round(t_k / self.cfg.T_d)
        if not math.isclose(m * self.cfg.T_d, t_k, rel_tol=1e-9, abs_tol=1e-9) or m < 1:
            raise ScheduleError(f"t={t_k} is not an update instant")
        if self.step_index != m * self.steps_per_window:
            raise ScheduleError(f"t={t_k} does not match the integrator clock t={self.t}")
        self.k = m
        event = self._event_base()
        event["window_mu"] = [
            {"point": _fmt(o.p_norm), "p": o.p.tolist(), "mu": float(mu)}
            for o, mu in zip(self.bank, self.mu)
        ]
        if self.mode == MULTI:
            costs = {o.p_norm: float(mu) for o, mu in zip(self.bank, self.mu)}
            if m >= self.cfg.k_star:
                direct.complete_pending_divisions(self.partition, costs)
                self.snapshots.append((m, direct.snapshot(self.partition)))
                self._enter_single(event)
            else:
                rec = direct.direct_iteration(self.partition, costs)
                self.snapshots.append((m, direct.snapshot(self.partition)))
                seed_state = self.xh[self.sigma].copy()
                known = {o.p_norm for o in self.bank}
                spawned = []
                for p_norm in rec.new_points:
                    if p_norm in known:
                        continue
                    rect_id = next(r.rect_id for r in self.partition.pending if r.point == p_norm)
                    self._spawn(p_norm, rect_id, seed_state)
                    known.add(p_norm)
                    spawned.append(self.bank[-1])
                if self.cfg.reinit_all:
                    self.xh[:] = seed_state
                event["mu_hat"] = rec.mu_hat
                event["optimal"] = rec.optimal
                event["fallback"] = rec.fallback
                event["new_points"] = [self._point_entry(o) for o in spawned]
        self.mu = np.zeros(self.n_obs)
        self._g_prev = self._sq_errors()
        event["n_obs"] = self.n_obs
        event["sigma"] = self.sigma
        self.window_history.append(self.n_obs)
        self.events.append(event)
        return event

    def _enter_single(self, event):
        keep = self.sigma
        for i, o in enumerate(self.bank):
            if i != keep:
                self.discarded.append({
                    "t": self.t, "point": _fmt(o.p_norm), "p": o.p.tolist(),
                    "x_hat": self.xh[i].tolist(), "mu": float(self.mu[i]),
                })
        event["discarded"] = [d["point"] for d in self.discarded if d["t"] == self.t]
        event["transition"] = f"{MULTI}->{SINGLE}"
        self.bank = [self.bank[keep]]
        self.xh = self.xh[keep:keep + 1].copy()
        self.P = self.P[keep:keep + 1].copy()
        self.mu = self.mu[keep:keep + 1].copy()
        self._g_prev = self._g_prev[keep:keep + 1] if np.ndim(self._g_prev) else self._g_prev
        self.sigma = 0
        self.mode = SINGLE
        event["retained"] = self._point_entry(self.bank[0])

    def _event_base(self) -> dict[str, Any]:
        return {"k": self.k, "t": self.t, "mode": self.mode, "sigma": self.sigma, "n_obs": self.n_obs}

    def _point_entry(self, o: ObserverInstance) -> dict[str, Any]:
        return {"point": _fmt(o.p_norm), "p": o.p.tolist(), "rect_id": o.rect_id}

    def estimates(self) -> tuple[np.ndarray, np.ndarray]:
        """Selected observer's physical parameter and state estimate."""
        return self.P[self.sigma].copy(), self.xh[self.sigma].copy()


def _fmt(p: Sequence[Fraction]) -> str:
    return ",".join(str(c) for c in p)


@dataclass
class RunRecords:
    """Per-step arrays over the whole run (undecimated)."""

    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    y_hat: np.ndarray
    x: np.ndarray
    x_hat: np.ndarray
    p_hat: np.ndarray
    sigma: np.ndarray
    n_obs: np.ndarray
    extra: dict = field(default_factory=dict)


def run(sup: Supervisor, t_f: float) -> RunRecords:
    """Advance ``sup`` to ``t_f`` and collect every step."""
    n = round(t_f / sup.cfg.dt)
    if n < 1 or not math.isclose(n * sup.cfg.dt, t_f, rel_tol=1e-9):
        raise ScheduleError(f"t_f={t_f} is not a multiple of dt={sup.cfg.dt}")
    n_x, n_p = sup.model.n_x, sup.box.n_p
    rec = RunRecords(
        t=np.empty(n + 1), u=np.empty(n + 1), y=np.empty(n + 1), y_hat=np.empty(n + 1),
        x=np.empty((n + 1, n_x)), x_hat=np.empty((n + 1, n_x)), p_hat=np.empty((n + 1, n_p)),
        sigma=np.empty(n + 1, dtype=int), n_obs=np.empty(n + 1, dtype=int),
    )

    def store(i, r: StepRecord):
        rec.t[i], rec.u[i], rec.y[i], rec.y_hat[i] = r.t, r.u, r.y, r.y_hat
        rec.x[i], rec.x_hat[i], rec.p_hat[i] = r.x, r.x_hat, r.p_hat
        rec.sigma[i], rec.n_obs[i] = r.sigma, r.n_obs

    store(0, sup.record())
    for i in range(1, n + 1):
        store(i, sup.advance())
    return rec
