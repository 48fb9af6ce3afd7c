"""Swing-equation scenario simulator.

Generators follow the classical second-order model on the Kron-reduced
network; load buses are algebraic and their active-power demand is pulsed at
t = 0. The output is a PMU-rate series of per-bus frequency and voltage
magnitude, optionally corrupted by calibrated Gaussian noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import (
    BadRange,
    DivergedSimulation,
    EquilibriumNotFound,
    RateMismatch,
    SeriesTooShort,
    ValidationError,
    ZeroSignal,
)
from .grid import PowerGraph, classify_load_buses, hops_to_nearest_generator

log = logging.getLogger(__name__)

NOMINAL_FREQ = 60.0
PULSE_WIDTH = 0.25
PMU_RATE = 50.0
SNR_DB = 85.0
DT = 1e-3
FREQ_BAND = 5.0

# fraction of nominal bus load, applied with a random sign
MAGNITUDE_CLASSES = {
    "Low": (0.01, 0.03),
    "Medium": (0.03, 0.07),
    "High": (0.07, 0.12),
}


@dataclass(frozen=True)
class LoadPulseEvent:
    bus: int
    magnitude: float
    start_time: float = 0.0
    width: float = PULSE_WIDTH

    def __post_init__(self):
        if not self.width > 0:
            raise ValidationError("pulse width must be positive")


@dataclass(frozen=True)
class Scenario:
    events: tuple[LoadPulseEvent, ...]
    case_index: int
    magnitude_class: str
    seed: int
    snr_db: Optional[float] = SNR_DB
    index: int = 0
    split: str = "test"

    @property
    def name(self) -> str:
        return f"c{self.case_index}_{self.magnitude_class}_{self.split}_{self.index:03d}"

    def to_dict(self) -> dict:
        return {
            "case_index": self.case_index,
            "magnitude_class": self.magnitude_class,
            "events": [
                {"bus": e.bus, "magnitude": e.magnitude, "start_time": e.start_time, "width": e.width}
                for e in self.events
            ],
            "seed": self.seed,
            "snr_db": self.snr_db,
            "index": self.index,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            events=tuple(LoadPulseEvent(**e) for e in d.get("events", [])),
            case_index=int(d["case_index"]),
            magnitude_class=str(d["magnitude_class"]),
            seed=int(d["seed"]),
            snr_db=None if d.get("snr_db") is None else float(d["snr_db"]),
            index=int(d.get("index", 0)),
            split=str(d.get("split", "test")),
        )


@dataclass(frozen=True)
class MeasurementSeries:
    """Uniformly sampled measurements; rows are time, columns are channels."""

    sample_rate: float
    times: np.ndarray
    values: np.ndarray
    channel_labels: tuple[str, ...]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.times.shape[0]:
            raise ValidationError("values must be (T, channels) and match times")
        if self.values.shape[1] != len(self.channel_labels):
            raise ValidationError("one label per channel required")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("measurement values must be finite")

    def __len__(self) -> int:
        return self.values.shape[0]

    def channels(self, prefix: str) -> np.ndarray:
        cols = [i for i, c in enumerate(self.channel_labels) if c.startswith(prefix + "_")]
        return self.values[:, cols]

    @property
    def frequencies(self) -> np.ndarray:
        return self.channels("freq")

    @property
    def voltages(self) -> np.ndarray:
        return self.channels("vmag")

    @property
    def bus_ids(self) -> list[int]:
        return [int(c.split("_", 1)[1]) for c in self.channel_labels if c.startswith("freq_")]


def channel_labels(bus_ids: Sequence[int]) -> tuple[str, ...]:
    return tuple(f"freq_{b}" for b in bus_ids) + tuple(f"vmag_{b}" for b in bus_ids)


@dataclass
class SwingParams:
    """Machine, line and load data; arrays follow graph order of generators,
    edges (sorted) and loads respectively."""

    inertia: np.ndarray
    damping: np.ndarray
    susceptance: np.ndarray
    base_load: np.ndarray
    dispatch: Optional[np.ndarray] = None
    mechanical_power: Optional[np.ndarray] = None
    nominal_freq: float = NOMINAL_FREQ
    v0: Optional[np.ndarray] = None
    voltage_sensitivity: float = 0.2
    voltage_tau: float = 0.5
    flow_voltage_gain: float = 0.05


def default_params(g: PowerGraph) -> SwingParams:
    """Deterministic desk-scale parameters for any graph.

    Inertia and damping cycle through fixed lists so the machines are not
    identical. Every line gets the same susceptance; loads are 3 p.u. and the
    dispatch is skewed towards the first machines so the operating angles
    (and hence the angle-to-voltage coupling) are not negligible.
    """
    ng, nl = len(g.generators), len(g.loads)
    M = np.array([0.10, 0.08, 0.06, 0.09, 0.07])[np.arange(ng) % 5]
    dm = np.array([0.45, 0.55, 0.40, 0.50, 0.60])[np.arange(ng) % 5]
    hops = hops_to_nearest_generator(g)
    v0 = np.array([1.02 if k == "G" else 1.0 - 0.01 * hops[b] for b, k in g.buses])
    return SwingParams(
        inertia=M,
        damping=dm * M,
        susceptance=np.full(len(g.edges), 5.0),
        base_load=np.full(nl, 3.0),
        dispatch=_dispatch(ng),
        v0=v0,
    )


def _dispatch(ng: int) -> np.ndarray:
    w = 1.0 / np.arange(2, ng + 2)
    if ng == 3:
        w = np.array([0.5, 0.3, 0.2])
    return w / w.sum()


class SwingNetwork:
    """Kron-reduced network matrices derived once from (graph, params)."""

    def __init__(self, g: PowerGraph, params: SwingParams):
        self.g = g
        self.params = params
        n = g.n
        gen_idx = np.array([g.index(b) for b in g.generators], dtype=int)
        load_idx = np.array([g.index(b) for b in g.loads], dtype=int)
        self.gen_idx, self.load_idx = gen_idx, load_idx
        ng, nl = gen_idx.size, load_idx.size
        edges = sorted(g.edges)
        self.edges = edges
        Bv = np.asarray(params.susceptance, dtype=float)
        if Bv.shape != (len(edges),) or np.any(Bv <= 0):
            raise ValidationError("one positive susceptance per edge required")
        for name, arr, size in (
            ("inertia", params.inertia, ng),
            ("damping", params.damping, ng),
            ("base_load", params.base_load, nl),
        ):
            if np.asarray(arr).shape != (size,):
                raise ValidationError(f"{name} must have length {size}")
        if np.any(np.asarray(params.inertia) <= 0) or np.any(np.asarray(params.damping) < 0):
            raise ValidationError("inertia must be positive and damping non-negative")

        Lb = np.zeros((n, n))
        self.edge_i = np.array([g.index(a) for a, _ in edges], dtype=int)
        self.edge_j = np.array([g.index(b) for _, b in edges], dtype=int)
        for (i, j), b in zip(zip(self.edge_i, self.edge_j), Bv):
            Lb[i, j] -= b
            Lb[j, i] -= b
            Lb[i, i] += b
            Lb[j, j] += b
        self.Lb = Lb
        self.edge_b = Bv
        Lgg = Lb[np.ix_(gen_idx, gen_idx)]
        if nl:
            Lll = Lb[np.ix_(load_idx, load_idx)]
            Llg = Lb[np.ix_(load_idx, gen_idx)]
            try:
                self.Lll_inv = np.linalg.inv(Lll)
            except np.linalg.LinAlgError as exc:
                raise ValidationError("load buses must connect to a generator") from exc
            # load-bus angle = R @ gen angles - Lll^{-1} @ load demand
            self.R = -self.Lll_inv @ Llg
            Lred = Lgg + Llg.T @ self.R
        else:
            self.Lll_inv = np.zeros((0, 0))
            self.R = np.zeros((0, ng))
            Lred = Lgg
        self.W = self.R.T  # share of each load's demand seen by each generator
        self.b_red = -Lred.copy()
        np.fill_diagonal(self.b_red, 0.0)

        self.M = np.asarray(params.inertia, dtype=float)
        self.D = np.asarray(params.damping, dtype=float)
        self.base_load = np.asarray(params.base_load, dtype=float)
        self.infinite = ~np.isfinite(self.M)
        self.ref = int(np.flatnonzero(self.infinite)[0]) if self.infinite.any() else 0
        if params.mechanical_power is not None:
            self.Pm = np.asarray(params.mechanical_power, dtype=float)
        else:
            share = params.dispatch if params.dispatch is not None else np.full(ng, 1.0 / ng)
            self.Pm = np.asarray(share, dtype=float) * self.base_load.sum()
        # bus frequency = convex combination of generator speeds
        self.freq_map = np.zeros((n, ng))
        self.freq_map[gen_idx, np.arange(ng)] = 1.0
        if nl:
            self.freq_map[load_idx] = self.R
        # voltage response to load changes decays with electrical distance
        bbar = Bv.mean()
        G = np.linalg.inv(np.eye(n) + Lb / bbar)
        self.S = -params.voltage_sensitivity * G[:, load_idx]
        self.v0 = np.ones(n) if params.v0 is None else np.asarray(params.v0, dtype=float)
        self.delta0 = self.equilibrium()
        theta0 = self.bus_angles(self.delta0[None], self.base_load[None])[0]
        self.cos0 = np.cos(theta0[self.edge_i] - theta0[self.edge_j])

    @property
    def ng(self) -> int:
        return self.gen_idx.size

    def electrical_power(self, delta: np.ndarray, load: np.ndarray) -> np.ndarray:
        """Generator electrical output for batched angles (B, ng) and load
        demand (B, nl)."""
        diff = delta[:, :, None] - delta[:, None, :]
        flow = (self.b_red[None] * np.sin(diff)).sum(axis=-1)
        return flow + (self.W[None] * load[:, None, :]).sum(axis=-1)

    def equilibrium(self, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
        """Newton iteration for the rotor angles balancing mechanical and
        electrical power, with the reference machine pinned at angle 0."""
        ng = self.ng
        delta = np.zeros(ng)
        free = np.array([i for i in range(ng) if i != self.ref], dtype=int)
        load = self.base_load[None]

        def mismatch(d):
            return self.Pm - self.electrical_power(d[None], load)[0]

        for _ in range(max_iter):
            f = mismatch(delta)
            if np.max(np.abs(f[free]), initial=0.0) < tol:
                break
            c = self.b_red * np.cos(delta[:, None] - delta[None, :])
            J = np.diag(c.sum(axis=1)) - c  # d(P_e)/d(delta)
            step = np.linalg.solve(J[np.ix_(free, free)], f[free])
            delta[free] += step
        f = mismatch(delta)
        if not np.all(np.isfinite(delta)) or np.max(np.abs(f[free]), initial=0.0) > 1e-9:
            raise EquilibriumNotFound("Newton iteration did not converge")
        if not self.infinite.any() and abs(f[self.ref]) > 1e-9:
            raise EquilibriumNotFound(
                f"mechanical power and load are unbalanced by {f[self.ref]:.3g} p.u."
            )
        return delta

    def bus_angles(self, delta: np.ndarray, load: np.ndarray) -> np.ndarray:
        """All bus angles (B, n) from generator angles and load demand."""
        theta = np.empty((delta.shape[0], self.g.n))
        theta[:, self.gen_idx] = delta
        if self.load_idx.size:
            theta[:, self.load_idx] = (self.R[None] * delta[:, None, :]).sum(-1) - (
                self.Lll_inv[None] * load[:, None, :]
            ).sum(-1)
        return theta

    def energy(self, delta: np.ndarray, omega: np.ndarray) -> np.ndarray:
        """Conserved quantity of the undamped, unforced swing dynamics."""
        kinetic = 0.5 * (self.M[None] * omega**2).sum(-1)
        diff = delta[:, :, None] - delta[:, None, :]
        potential = -0.5 * (self.b_red[None] * np.cos(diff)).sum(axis=(-1, -2))
        pnet = self.Pm - (self.W * self.base_load[None]).sum(-1)
        return kinetic + potential - (pnet[None] * delta).sum(-1)


@dataclass
class Trajectory:
    """Integrator-rate states for one scenario."""

    network: SwingNetwork
    dt: float
    delta: np.ndarray
    omega: np.ndarray
    lag: np.ndarray
    load: np.ndarray = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.delta.shape[0]) * self.dt

    @property
    def rate(self) -> float:
        return 1.0 / self.dt

    def bus_frequencies(self, idx=slice(None)) -> np.ndarray:
        net = self.network
        w = self.omega[idx]
        return net.params.nominal_freq + (net.freq_map[None] * w[:, None, :]).sum(-1) / (2 * np.pi)

    def bus_voltages(self, idx=slice(None)) -> np.ndarray:
        net = self.network
        theta = net.bus_angles(self.delta[idx], self.load[idx])
        cos = np.cos(theta[:, net.edge_i] - theta[:, net.edge_j])
        drop = net.edge_b[None] * (net.cos0[None] - cos)
        flow_term = np.zeros_like(theta)
        np.add.at(flow_term.T, net.edge_i, drop.T)
        np.add.at(flow_term.T, net.edge_j, drop.T)
        return net.v0[None] + self.lag[idx] - net.params.flow_voltage_gain * flow_term


def _load_schedule(net: SwingNetwork, events_batch, n_steps: int, dt: float) -> np.ndarray:
    """Per-step load demand, shape (B, n_steps, nl); pulses are held over whole
    integrator steps."""
    B = len(events_batch)
    sched = np.broadcast_to(net.base_load, (B, n_steps, net.load_idx.size)).copy()
    col = {b: i for i, b in enumerate(net.g.loads)}
    for k, events in enumerate(events_batch):
        for e in events:
            if e.bus not in col:
                raise ValidationError(f"event bus {e.bus} is not a load bus")
            k0 = int(round(e.start_time / dt))
            k1 = int(round((e.start_time + e.width) / dt))
            sched[k, max(k0, 0):max(k1, 0), col[e.bus]] += e.magnitude
    return sched


def simulate_batch(
    net: SwingNetwork,
    events_batch: Sequence[Sequence[LoadPulseEvent]],
    duration: float,
    dt: float = DT,
    initial_offset: Optional[np.ndarray] = None,
) -> list[Trajectory]:
    """Fixed-step RK4 integration of several scenarios at once.

    Every operation is a per-row broadcast so a scenario's trajectory does not
    depend on which batch it was simulated in.
    """
    if dt > 1e-3 + 1e-15:
        raise ValidationError("dt must be at most 1e-3 s")
    n_steps = int(round(duration / dt))
    B = len(events_batch)
    ng, n = net.ng, net.g.n
    sched = _load_schedule(net, events_batch, n_steps + 1, dt)
    dP = sched - net.base_load[None, None]
    M, D, Pm, tau = net.M, net.D, net.Pm, net.params.voltage_tau
    S = net.S
    moving = (~net.infinite).astype(float)

    def rhs(delta, omega, lag, load, dload):
        pe = net.electrical_power(delta, load)
        acc = np.where(net.infinite, 0.0, (Pm - pe - D * omega) / np.where(net.infinite, 1.0, M))
        target = (S[None] * dload[:, None, :]).sum(-1)
        return omega * moving, acc, (target - lag) / tau

    delta = np.broadcast_to(net.delta0, (B, ng)).copy()
    if initial_offset is not None:
        delta = delta + np.asarray(initial_offset, dtype=float)[None]
    omega = np.zeros((B, ng))
    lag = np.zeros((B, n))
    out_d = np.empty((B, n_steps + 1, ng))
    out_w = np.empty((B, n_steps + 1, ng))
    out_u = np.empty((B, n_steps + 1, n))
    out_d[:, 0], out_w[:, 0], out_u[:, 0] = delta, omega, lag
    limit = 2 * np.pi * FREQ_BAND
    for k in range(n_steps):
        load, dl = sched[:, k], dP[:, k]
        k1 = rhs(delta, omega, lag, load, dl)
        k2 = rhs(delta + 0.5 * dt * k1[0], omega + 0.5 * dt * k1[1], lag + 0.5 * dt * k1[2], load, dl)
        k3 = rhs(delta + 0.5 * dt * k2[0], omega + 0.5 * dt * k2[1], lag + 0.5 * dt * k2[2], load, dl)
        k4 = rhs(delta + dt * k3[0], omega + dt * k3[1], lag + dt * k3[2], load, dl)
        delta = delta + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        omega = omega + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        lag = lag + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        out_d[:, k + 1], out_w[:, k + 1], out_u[:, k + 1] = delta, omega, lag
        if k % 100 == 99 or k == n_steps - 1:
            if not np.all(np.isfinite(omega)) or np.max(np.abs(omega)) > limit:
                raise DivergedSimulation(f"bus frequency left the +/-{FREQ_BAND} Hz band at t={(k + 1) * dt:.3f} s")
    return [Trajectory(net, dt, out_d[b], out_w[b], out_u[b], sched[b]) for b in range(B)]


def simulate_swing(
    g: PowerGraph,
    params: SwingParams,
    events: Sequence[LoadPulseEvent],
    duration: float,
    dt: float = DT,
    initial_offset: Optional[np.ndarray] = None,
) -> Trajectory:
    """Integrate one scenario from the solved equilibrium."""
    return simulate_batch(SwingNetwork(g, params), [list(events)], duration, dt, initial_offset)[0]


def lhs_sample(n_scenarios: int, n_dims: int, ranges, seed: int) -> np.ndarray:
    """Latin hypercube sample: one point per equal-width stratum per dimension."""
    ranges = np.asarray(ranges, dtype=float).reshape(n_dims, 2)
    if n_scenarios < 1 or n_dims < 1:
        raise BadRange("need at least one sample and one dimension")
    if np.any(ranges[:, 0] >= ranges[:, 1]):
        raise BadRange("every range needs lo < hi")
    unit = qmc.LatinHypercube(d=n_dims, seed=np.random.default_rng(seed)).random(n_scenarios)
    return qmc.scale(unit, ranges[:, 0], ranges[:, 1])


def scenario_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([master, *path]).generate_state(1, dtype=np.uint64)[0])


def generate_scenarios(
    g: PowerGraph,
    case_index: int,
    magnitude_class: str,
    n_scenarios: int,
    seed: int,
    snr_db: Optional[float] = SNR_DB,
    params: Optional[SwingParams] = None,
    class_ranges: dict = MAGNITUDE_CLASSES,
) -> list[Scenario]:
    """One scenario per LHS row; each classified load bus gets a pulse whose
    signed size is a fraction of its nominal load drawn from the class range."""
    buses = classify_load_buses(g, case_index)
    params = default_params(g) if params is None else params
    base_load = dict(zip(g.loads, np.asarray(params.base_load, dtype=float)))
    if magnitude_class not in class_ranges:
        raise ValidationError(f"unknown magnitude class {magnitude_class!r}")
    lo, hi = class_ranges[magnitude_class]
    classes = list(class_ranges)
    u = lhs_sample(n_scenarios, len(buses), [(-1.0, 1.0)] * len(buses),
                   scenario_seed(seed, case_index, classes.index(magnitude_class)))
    frac = np.sign(u) * (lo + (hi - lo) * np.abs(u))
    out = []
    for i in range(n_scenarios):
        events = tuple(
            LoadPulseEvent(b, float(frac[i, j] * base_load[b]), 0.0, PULSE_WIDTH)
            for j, b in enumerate(buses)
        )
        out.append(Scenario(events, case_index, magnitude_class,
                            scenario_seed(seed, case_index, classes.index(magnitude_class), i), snr_db, i))
    return out


def generate_grid(
    g: PowerGraph,
    n_per_cell: int,
    seed: int,
    n_train: int = 0,
    snr_db: Optional[float] = SNR_DB,
    params: Optional[SwingParams] = None,
    cases: Sequence[int] = (1, 2, 3, 4, 5),
    classes: Sequence[str] = tuple(MAGNITUDE_CLASSES),
) -> list[Scenario]:
    """Scenarios for every (case, magnitude) cell; the first ``n_train`` of
    each cell are labelled ``train`` and the rest ``test``."""
    if n_per_cell < 1 or not 0 <= n_train <= n_per_cell:
        raise ValidationError(f"need 0 <= n_train <= n_per_cell and n_per_cell >= 1, got {n_train}, {n_per_cell}")
    out = []
    for c in cases:
        for m in classes:
            for sc in generate_scenarios(g, c, m, n_per_cell, seed, snr_db, params):
                out.append(replace(sc, split="train" if sc.index < n_train else "test"))
    return out


def sample_pmu(traj: Trajectory, rate: float = PMU_RATE, duration: Optional[float] = None) -> MeasurementSeries:
    """Decimate an integrator-rate trajectory to a PMU-rate series starting at
    the disturbance onset."""
    ratio = traj.rate / rate
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * ratio:
        raise RateMismatch(f"rate {rate} does not divide integrator rate {traj.rate}")
    available = (traj.delta.shape[0] - 1) // stride + 1
    T = available if duration is None else int(round(duration * rate))
    if T > available:
        raise SeriesTooShort(f"trajectory has {available} samples at {rate}/s, {T} requested")
    idx = np.arange(T) * stride
    values = np.hstack([traj.bus_frequencies(idx), traj.bus_voltages(idx)])
    return MeasurementSeries(float(rate), np.arange(T) / rate, values, channel_labels(traj.network.g.bus_ids))


def add_measurement_noise(series: MeasurementSeries, snr_db: Optional[float], seed: int) -> MeasurementSeries:
    """Add zero-mean Gaussian noise to every channel at the requested SNR.

    The signal power of a channel is the mean square of its deviation from the
    channel mean. Each noise column is centred and rescaled so its realised
    power matches the target exactly.
    """
    if snr_db is None or np.isinf(snr_db):
        return series
    x = series.values
    dev = x - x.mean(axis=0)
    rms = np.sqrt(np.mean(dev**2, axis=0))
    scale = np.max(np.abs(x), axis=0)
    flat = rms <= 1e-14 * np.maximum(scale, 1.0)
    if np.any(flat):
        bad = [series.channel_labels[i] for i in np.flatnonzero(flat)]
        raise ZeroSignal(f"constant channels have undefined SNR: {bad}")
    std = rms * 10.0 ** (-snr_db / 20.0)
    z = np.random.default_rng(seed).standard_normal(x.shape)
    if x.shape[0] > 1:
        z -= z.mean(axis=0)
        z /= np.sqrt(np.mean(z**2, axis=0))
    return replace(series, values=x + z * std)


def empirical_snr_db(clean: np.ndarray, noisy: np.ndarray) -> np.ndarray:
    dev = clean - clean.mean(axis=0)
    noise = noisy - clean
    return 10.0 * np.log10(np.sum(dev**2, axis=0) / np.sum(noise**2, axis=0))


def simulate_scenarios(
    g: PowerGraph,
    params: SwingParams,
    scenarios: Sequence[Scenario],
    duration: float,
    rate: float = PMU_RATE,
    dt: float = DT,
    chunk: int = 32,
    noisy: bool = True,
) -> list[MeasurementSeries]:
    """Simulate, decimate and (if the scenario asks for it) add noise."""
    net = SwingNetwork(g, params)
    sim_duration = (int(round(duration * rate)) - 1) / rate
    out = []
    for start in range(0, len(scenarios), chunk):
        part = scenarios[start:start + chunk]
        trajs = simulate_batch(net, [s.events for s in part], sim_duration, dt)
        for s, tr in zip(part, trajs):
            series = sample_pmu(tr, rate, duration)
            if noisy and s.snr_db is not None:
                series = add_measurement_noise(series, s.snr_db, s.seed)
            out.append(series)
        log.debug("simulated %d/%d scenarios", min(start + chunk, len(scenarios)), len(scenarios))
    return out
