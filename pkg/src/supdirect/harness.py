"""Scenario configuration, end-to-end runs, metrics and static DIRECT runs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import direct
from .integrate import FunctionField, InputSignal, rk4_step, write_csv
from .neural_mass import (
    DEFAULT_SETTLE_TIME,
    NeuralMassConstants,
    NeuralMassModel,
    ObserverGains,
)
from .supervisor import ParamBox, Supervisor, SupervisorConfig, normalize, run

logger = logging.getLogger(__name__)

TRAJECTORY_SCHEMA = "supdirect.trajectory/1"
EVENTS_SCHEMA = "supdirect.events/1"
METRICS_SCHEMA = "supdirect.metrics/1"

TRAJECTORY_COLUMNS = tuple(
    ["t", "u", "y", "y_hat", "sigma", "n_obs", "p_hat_1", "p_hat_2", "p_err", "x_err"]
    + [f"x_{i}" for i in range(1, 7)]
    + [f"x_hat_{i}" for i in range(1, 7)]
)

MODELS = {"neural_mass"}


class ConfigError(ValueError):
    pass


@dataclass
class Scenario:
    model: str = "neural_mass"
    param_box: list = field(default_factory=lambda: [[2.0, 8.0], [22.0, 28.0]])
    p_star: list = field(default_factory=lambda: [5.0, 25.0])
    x0: list = field(default_factory=lambda: [0.1, 0.0, 20.0, 0.0, 15.0, 0.0])
    xhat0: list = field(default_factory=lambda: [0.0] * 6)
    T_d: float = 10.0
    lam: float = 0.05
    eps: float = direct.DEFAULT_EPS
    d_star: float = 0.8
    k_star: int | None = 6
    dt: float = 1e-3
    t_f: float = 100.0
    seed: int = 1
    state_bound: float = 1e4
    decimate: int = 10
    threshold: float = 0.72
    reinit_all: bool = False
    input: dict = field(default_factory=lambda: {
        "kind": "multisine",
        "amplitude": 100.0,
        "offset": 220.0,
        "frequencies": [3.1, 7.3, 13.7, 29.3, 53.1],
        "hold": 0.5,
    })
    gains: dict = field(default_factory=lambda: {
        "L": [0.0] * 6,
        "K": [0.0, 0.0],
        "settle_time": DEFAULT_SETTLE_TIME,
    })
    output_dir: str = "run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        try:
            box = self.box
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.p_star) != box.n_p or not box.contains(self.p_star):
            raise ConfigError(f"p_star {self.p_star} lies outside the parameter box")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        for name in ("T_d", "t_f"):
            value = getattr(self, name)
            n = round(value / self.dt)
            if n < 1 or not math.isclose(n * self.dt, value, rel_tol=1e-9):
                raise ConfigError(f"{name}={value} is not a positive multiple of dt={self.dt}")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if self.k_star is None and not self.d_star > 0:
            raise ConfigError("d_star must be positive")
        if self.k_star is not None and self.k_star < 0:
            raise ConfigError("k_star must be >= 0")
        if len(self.x0) != 6 or len(self.xhat0) != 6:
            raise ConfigError("x0 and xhat0 need 6 entries")
        if self.decimate < 1:
            raise ConfigError("decimate must be >= 1")
        try:
            self.make_input()
            self.make_gains()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def box(self) -> ParamBox:
        return ParamBox.from_pairs(self.param_box)

    @property
    def iterations(self) -> int:
        """k*: explicit value if configured, else derived from d*."""
        if self.k_star is not None:
            return int(self.k_star)
        return direct.termination_iterations(self.box.n_p, self.d_star)

    def make_input(self) -> InputSignal:
        opts = dict(self.input)
        return InputSignal(
            kind=opts.get("kind", "multisine"),
            amplitude=float(opts.get("amplitude", 1.0)),
            offset=float(opts.get("offset", 0.0)),
            frequencies=tuple(opts.get("frequencies", (1.0,))),
            hold=float(opts.get("hold", 1.0)),
            seed=int(opts.get("seed", self.seed)),
        )

    def make_gains(self) -> ObserverGains:
        return ObserverGains(L=tuple(self.gains.get("L", [0.0] * 6)), K=tuple(self.gains.get("K", [0.0, 0.0])))

    @property
    def settle_time(self) -> float:
        return float(self.gains.get("settle_time", DEFAULT_SETTLE_TIME))

    def supervisor(self) -> Supervisor:
        model = NeuralMassModel(NeuralMassConstants(), self.make_gains())
        cfg = SupervisorConfig(
            T_d=self.T_d, lam=self.lam, k_star=self.iterations, eps=self.eps,
            dt=self.dt, reinit_all=self.reinit_all, state_bound=self.state_bound,
        )
        return Supervisor(model, self.box, self.p_star, self.x0, self.xhat0, self.make_input(), cfg)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_KEY_ALIASES = {"lambda": "lam", "x_hat0": "xhat0"}


def scenario_from_dict(data: Mapping[str, Any]) -> Scenario:
    known = {f.name for f in fields(Scenario)}
    kwargs = {}
    for key, value in data.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[name] = value
    # TOML has no null, so "auto" asks for k* derived from d*
    if kwargs.get("k_star") == "auto":
        kwargs["k_star"] = None
    defaults = Scenario()
    for section in ("input", "gains"):
        if section in kwargs:
            merged = dict(getattr(defaults, section))
            merged.update(kwargs[section])
            kwargs[section] = merged
    return Scenario(**kwargs)


def load_scenario(path: str | Path) -> Scenario:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(data)


@dataclass
class RunMetrics:
    convergence_time: float | None
    average_observers: float
    final_param_error: float
    normalized_state_error: float

    def to_text(self, extra: Mapping[str, Any] | None = None) -> str:
        items = {"schema": METRICS_SCHEMA}
        items.update({k: ("none" if v is None else repr(v)) for k, v in asdict(self).items()})
        for k, v in (extra or {}).items():
            items[k] = "none" if v is None else (repr(v) if isinstance(v, float) else str(v))
        return "".join(f"{k}={v}\n" for k, v in items.items())


def read_metrics(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def convergence_time(t: np.ndarray, p_err: np.ndarray, threshold: float) -> float | None:
    """Earliest recorded time after which ``p_err`` stays at or below ``threshold``."""
    bad = np.flatnonzero(p_err > threshold)
    if bad.size == 0:
        return float(t[0])
    if bad[-1] == t.size - 1:
        return None
    return float(t[bad[-1] + 1])


def compute_metrics(
    stream: Mapping[str, np.ndarray],
    events: Sequence[Mapping[str, Any]],
    threshold: float = 0.72,
    T_d: float | None = None,
    t_f: float | None = None,
) -> RunMetrics:
    """Table-style metrics from an undecimated run stream and its event log.

    ``stream`` holds ``t``, ``p_err`` (infinity norm, physical units),
    ``x`` (plant states) and ``x_err`` (infinity norm of the selected
    state error).  ``events`` carry ``t`` and ``n_obs`` per update instant.
    """
    t = np.asarray(stream["t"], dtype=float)
    if t.size == 0:
        raise ValueError("empty trajectory")
    p_err = np.asarray(stream["p_err"], dtype=float)
    x_err = np.asarray(stream["x_err"], dtype=float)
    xnorm = np.max(np.abs(np.asarray(stream["x"], dtype=float)), axis=-1)
    t_f = float(t[-1]) if t_f is None else t_f
    if T_d is None:
        times = [e["t"] for e in events]
        T_d = times[1] - times[0] if len(times) > 1 else t_f
    n_windows = math.ceil(t_f / T_d - 1e-9)
    counts = [e["n_obs"] for e in events if e["t"] < t_f - 1e-9][:n_windows]
    spread = float(xnorm.max() - xnorm.min())
    return RunMetrics(
        convergence_time=convergence_time(t, p_err, threshold),
        average_observers=float(sum(counts)) / n_windows,
        final_param_error=float(p_err[-1]),
        normalized_state_error=float(x_err[-1] / spread) if spread > 0 else float("inf"),
    )


@dataclass
class RunResult:
    metrics: RunMetrics
    output_dir: Path
    supervisor: Supervisor
    stream: dict[str, np.ndarray]


def _events_lines(sup: Supervisor) -> list[str]:
    header = {"schema": EVENTS_SCHEMA, "k_star": sup.cfg.k_star, "T_d": sup.cfg.T_d,
              "lambda": sup.cfg.lam, "eps": sup.cfg.eps, "n_p": sup.box.n_p}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(e, sort_keys=True) for e in sup.events]
    if sup.discarded:
        lines.append(json.dumps({"discarded_observers": sup.discarded}, sort_keys=True))
    return lines


def read_events(path: str | Path) -> tuple[dict, list[dict]]:
    lines = [json.loads(s) for s in Path(path).read_text().splitlines() if s.strip()]
    header, body = lines[0], lines[1:]
    return header, [e for e in body if "k" in e]


def run_scenario(scenario: Scenario | str | Path, output_dir: str | Path | None = None) -> RunResult:
    """Run the supervisory observer to ``t_f`` and write all artifacts."""
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    out = Path(output_dir if output_dir is not None else scenario.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    sup = scenario.supervisor()
    rec = run(sup, scenario.t_f)
    p_star = np.asarray(scenario.p_star, dtype=float)
    p_err = np.max(np.abs(rec.p_hat - p_star), axis=1)
    x_err = np.max(np.abs(rec.x_hat - rec.x), axis=1)
    stream = {"t": rec.t, "p_err": p_err, "x": rec.x, "x_err": x_err,
              "p_hat": rec.p_hat, "n_obs": rec.n_obs, "sigma": rec.sigma}
    metrics = compute_metrics(stream, sup.events, scenario.threshold, scenario.T_d, scenario.t_f)

    columns = [("t", rec.t), ("u", rec.u), ("y", rec.y), ("y_hat", rec.y_hat),
               ("sigma", rec.sigma), ("n_obs", rec.n_obs),
               ("p_hat_1", rec.p_hat[:, 0]), ("p_hat_2", rec.p_hat[:, 1]),
               ("p_err", p_err), ("x_err", x_err)]
    columns += [(f"x_{i + 1}", rec.x[:, i]) for i in range(6)]
    columns += [(f"x_hat_{i + 1}", rec.x_hat[:, i]) for i in range(6)]
    write_csv(out / "trajectory.csv", columns, scenario.decimate)
    (out / "events.log").write_text("\n".join(_events_lines(sup)) + "\n")
    for k, text in sup.snapshots:
        (out / f"partition_{k}.snapshot").write_text(text)
    np.savez(out / "stream.npz", **stream)
    (out / "scenario.json").write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n")
    extra = {
        "k_star": sup.cfg.k_star,
        "threshold": scenario.threshold,
        "p_hat_final": ",".join(repr(float(v)) for v in rec.p_hat[-1]),
        "bound_exceeded_at": sup.bound_exceeded_at,
    }
    (out / "metrics.txt").write_text(metrics.to_text(extra))
    return RunResult(metrics, out, sup, stream)


def metrics_from_run_dir(run_dir: str | Path, threshold: float | None = None) -> RunMetrics:
    """Recompute metrics from the artifacts of a finished run."""
    run_dir = Path(run_dir)
    scenario = json.loads((run_dir / "scenario.json").read_text())
    with np.load(run_dir / "stream.npz") as data:
        stream = {k: data[k] for k in data.files}
    _, events = read_events(run_dir / "events.log")
    if threshold is None:
        threshold = scenario["threshold"]
    return compute_metrics(stream, events, threshold, scenario["T_d"], scenario["t_f"])


# static DIRECT test mode

def _default_target(n_p: int) -> tuple[float, ...]:
    return tuple(0.9 if d % 2 == 0 else 0.1 for d in range(n_p))


def _sq_dist(p, q) -> float:
    """Exact squared Euclidean distance of two rational points, rounded once."""
    num, den = 0, 1
    for a, b in zip(p, q):
        an, ad = a.numerator, a.denominator
        bn, bd = b.numerator, b.denominator
        # (a - b)^2 over a common denominator, accumulated exactly
        dn = an * bd - bn * ad
        dd = ad * bd
        dd *= dd
        num, den = num * dd + dn * dn * den, den * dd
    return num / den


def _inf_dist(p, q) -> float:
    return float(max(abs(a - b) for a, b in zip(p, q)))


def static_cost(name: str, p_star: Sequence[float]) -> Callable[[direct.GridPoint], float]:
    """Test cost on the unit cube, evaluated exactly and rounded once.

    Exact evaluation keeps distinct sample points from collapsing onto
    equal float costs once rect sides drop below double resolution.
    """
    target = tuple(Fraction(v) for v in p_star)
    if name == "sphere":
        return lambda p: _sq_dist(p, target)
    if name == "shifted-inf":
        return lambda p: _inf_dist(p, target)
    if name == "constant":
        return lambda p: 1.0
    if name == "opposite-corner":
        corner = tuple(Fraction(1) if v < Fraction(1, 2) else Fraction(0) for v in target)
        return lambda p: _sq_dist(p, corner)
    raise KeyError(f"unknown test function {name!r}; known: {', '.join(STATIC_FUNCTIONS)}")


STATIC_FUNCTIONS = ("sphere", "shifted-inf", "constant", "opposite-corner")


@dataclass
class StaticResult:
    log: list[dict[str, Any]]
    best_point: direct.GridPoint
    best_cost: float
    distance: float
    partition: direct.Partition


def direct_static(
    name: str,
    n_p: int,
    d_star: float | None = None,
    iterations: int | None = None,
    p_star: Sequence[float] | None = None,
    eps: float = direct.DEFAULT_EPS,
) -> StaticResult:
    """DIRECT against an instantaneous test cost, logging every iteration."""
    if name not in STATIC_FUNCTIONS:
        raise KeyError(f"unknown test function {name!r}; known: {', '.join(STATIC_FUNCTIONS)}")
    if (d_star is None) == (iterations is None):
        raise ValueError("give exactly one of d_star and iterations")
    if iterations is None:
        iterations = direct.termination_iterations(n_p, d_star)
    p_star = _default_target(n_p) if p_star is None else tuple(p_star)
    cost = static_cost(name, p_star)
    log: list[dict[str, Any]] = []
    state = {"n": 0, "distance": math.inf}

    def on_iter(part: direct.Partition, rec: direct.IterationRecord):
        if rec.k == 1:
            fresh = part.sample_points()
        else:
            fresh = rec.new_points
        state["n"] += len(fresh)
        if fresh:
            state["distance"] = min(state["distance"], direct.min_distance_to_samples(p_star, fresh))
        log.append({
            "k": rec.k,
            "optimal": rec.optimal,
            "new_points": [direct.format_point(p) for p in rec.new_points],
            "n_samples": state["n"],
            "distance": state["distance"],
            "fallback": rec.fallback,
        })

    part = direct.run_static(cost, n_p, iterations, eps, on_iter)
    samples = part.sample_points()
    costs = {p: cost(p) for p in samples}
    best = min(costs, key=lambda p: (costs[p], p))
    dist = direct.min_distance_to_samples(p_star, samples)
    return StaticResult(log, best, costs[best], dist, part)


def pe_table(
    scenario: Scenario,
    mismatches: Sequence[float] = (0.05, 0.1, 0.2, 0.4),
    window: float = 2.0,
    horizon: float = 6.0,
) -> list[dict[str, float]]:
    """Windowed output-error energy of mismatched single observers.

    For each normalized mismatch ``r`` and each sign pattern along the
    coordinate axes and diagonals, an observer at ``p* + r`` (clipped to the
    box) runs from the plant's initial state; the smallest
    ``int_{t-window}^t |y_err|^2`` over ``t in [window, horizon]`` is
    reported.  Diagnostic only.
    """
    box = scenario.box
    pn = normalize(scenario.p_star, box)
    model = NeuralMassModel(NeuralMassConstants(), scenario.make_gains())
    u = scenario.make_input()
    dirs = [np.array(v, dtype=float) for v in ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))]
    probes = []
    for r in mismatches:
        for v in dirs:
            q = np.clip(pn + r * v / np.max(np.abs(v)), 0.0, 1.0)
            p = np.asarray(box.lower) + q * (np.asarray(box.upper) - np.asarray(box.lower))
            probes.append((r, p))
    P = np.array([p for _, p in probes])
    p_star = np.asarray(scenario.p_star, dtype=float)

    def stacked(Z, t, uu):
        out = np.empty_like(Z)
        y = model.output(Z[0])
        out[0] = model.plant(Z[0], p_star, uu)
        out[1:] = model.observer(Z[1:], P, uu, y)
        return out

    fld = FunctionField(stacked, model.n_x)
    Z = np.tile(np.asarray(scenario.x0, dtype=float), (len(P) + 1, 1))
    n = round(horizon / scenario.dt)
    n_win = round(window / scenario.dt)
    energy = np.zeros((n + 1, len(P)))
    g_prev = np.zeros(len(P))
    for i in range(n):
        Z = rk4_step(fld, Z, i * scenario.dt, scenario.dt, u)
        e = model.output(Z[1:]) - model.output(Z[0])
        g = e * e
        energy[i + 1] = energy[i] + 0.5 * scenario.dt * (g + g_prev)
        g_prev = g
    windowed = energy[n_win:] - energy[:-n_win]
    rows = []
    for j, (r, p) in enumerate(probes):
        rows.append({"mismatch": float(r), "p1": float(p[0]), "p2": float(p[1]),
                     "p_err": float(np.max(np.abs(p - p_star))),
                     "min_window_energy": float(windowed[:, j].min())})
    return rows
