"""Slotted-time simulation of devices, edge servers and one cloud.

Each slot: tasks arrive at the slot start, the policy places them, their
transmission delay and device energy are charged, their cycles join the
target's FIFO queue, and every node serves up to ``capacity * slot_length``
cycles.

Random streams are keyed by ``(seed, slot)`` only, so every strategy and
every arrival rate sees the same underlying draws. Poisson counts are taken
by inverting the CDF of a fixed uniform per device and slot, and task sizes
come in per-device blocks, so a higher rate adds tasks on top of the ones
a lower rate would produce instead of reshuffling them.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .model import (
    BITS_PER_KB,
    ChannelModel,
    ConfigurationError,
    NodeClass,
    NodeProfile,
    OffloadError,
    Task,
    dbm_to_watts,
)
from .strategies import NodeView, Policy, SlotSnapshot, make_policy, rate_matrix

ARRIVAL_STREAM = 0
POLICY_STREAM = 1
GAIN_STREAM = 2
_FIT_RTOL = 1e-12


class InvariantViolation(OffloadError, AssertionError):
    """Task conservation or backlog nonnegativity broke during a run."""


@dataclass(frozen=True)
class SimConfig:
    num_devices: int = 100
    num_edges: int = 3
    slot_length: float = 0.1
    num_slots: int = 1000
    arrival_rate: float = 0.5
    data_size_min: int = 1
    data_size_max: int = 500
    seed: int = 0
    arrival_process: str = "poisson"
    deadline: float = 1.0
    energy_budget: float = 0.5
    # device
    device_capacity: float = 1e9
    device_cycles_per_bit: float = 1000.0
    device_compute_power: float = 0.5
    device_upload_power: float = 0.1
    device_download_power: float = 0.15
    # edge
    edge_capacity: float = 10e9
    edge_cycles_per_bit: float = 200.0
    edge_upload_power: float = 0.2
    edge_download_power: float = 0.3
    # cloud
    cloud_capacity: float = 100e9
    cloud_cycles_per_bit: float = 50.0
    # network
    num_channels: int = 50
    bandwidth: float = 50e6
    fiber_rate: float = 1e9
    fiber_latency: float = 0.015
    noise_dbm: float = -100.0
    gain_min: float = 1e-7
    gain_max: float = 1e-5
    # strategy parameters
    gamma1: float = 0.5
    epsilon: float | None = None
    epsilon_scale: float = 0.05
    tol: float = 1e-6
    max_iter: int = 10_000
    capacity_horizon: float | str | None = "auto"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        def require(ok: bool, name: str, msg: str) -> None:
            if not ok:
                raise ConfigurationError(f"{name}: {msg}", name)

        require(self.num_devices >= 1, "num_devices", "must be >= 1")
        require(self.num_edges >= 0, "num_edges", "must be >= 0")
        require(self.slot_length > 0, "slot_length", "must be > 0")
        require(self.num_slots > 0, "num_slots", "must be > 0")
        require(self.arrival_rate >= 0, "arrival_rate", "must be >= 0")
        require(self.data_size_min > 0, "data_size_min", "must be > 0")
        require(self.data_size_min <= self.data_size_max, "data_size_max", "must be >= data_size_min")
        require(self.arrival_process in ("poisson", "periodic"), "arrival_process", "poisson or periodic")
        require(self.deadline > 0, "deadline", "must be > 0")
        require(self.energy_budget > 0, "energy_budget", "must be > 0")
        for name in ("device_capacity", "edge_capacity", "cloud_capacity",
                     "device_cycles_per_bit", "edge_cycles_per_bit", "cloud_cycles_per_bit",
                     "bandwidth", "fiber_rate", "gain_min"):
            require(getattr(self, name) > 0, name, "must be > 0")
        for name in ("device_compute_power", "device_upload_power", "device_download_power",
                     "edge_upload_power", "edge_download_power", "fiber_latency"):
            require(getattr(self, name) >= 0, name, "must be >= 0")
        require(self.num_channels >= 1, "num_channels", "must be >= 1")
        require(self.gain_max >= self.gain_min, "gain_max", "must be >= gain_min")
        require(0.0 <= self.gamma1 <= 1.0, "gamma1", "must lie in [0, 1]")
        require(self.epsilon is None or self.epsilon > 0, "epsilon", "must be > 0")
        require(self.epsilon_scale > 0, "epsilon_scale", "must be > 0")
        require(self.tol > 0, "tol", "must be > 0")
        require(self.max_iter >= 1, "max_iter", "must be >= 1")
        require(self.capacity_horizon in (None, "auto") or float(self.capacity_horizon) > 0, "capacity_horizon", "must be > 0")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def policy(self, strategy: str) -> Policy:
        return make_policy(
            strategy,
            gamma1=self.gamma1,
            epsilon=self.epsilon,
            epsilon_scale=self.epsilon_scale,
            tol=self.tol,
            max_iter=self.max_iter,
            capacity_horizon=self.capacity_horizon,
        )


def desk_scale(config: SimConfig | None = None) -> SimConfig:
    """The small CI scenario: 20 devices, 3 edge servers, 1 cloud."""
    return (config or SimConfig()).replace(num_devices=20, num_edges=3)


@dataclass(frozen=True)
class SimMetrics:
    avg_task_delay: float = 0.0
    completed_tasks: int = 0
    processing_rate: float = 0.0
    peak_blocking_queue: float = 0.0
    final_blocking_queue: float = 0.0
    total_energy: float = 0.0
    offload_success_rate: float = 0.0
    generated_tasks: int = 0
    deadline_failures: int = 0
    ot_iterations_mean: float = 0.0
    ot_fallback_count: int = 0


@dataclass
class Scenario:
    profiles: list[NodeProfile]
    channel: ChannelModel
    serving: list[int] = field(default_factory=list)  # cloud-path station per device

    def __post_init__(self) -> None:
        if not self.serving:
            self.serving = np.argmax(self.channel.channel_gain, axis=1).tolist()

    @property
    def cloud_id(self) -> int:
        return len(self.profiles) - 1


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, *keys])


def build_scenario(config: SimConfig) -> Scenario:
    d, e = config.num_devices, config.num_edges
    profiles = [
        NodeProfile(
            id=k,
            node_class=NodeClass.DEVICE,
            compute_capacity=config.device_capacity,
            cycles_per_bit=config.device_cycles_per_bit,
            compute_power=config.device_compute_power,
            upload_power=config.device_upload_power,
            download_power=config.device_download_power,
        )
        for k in range(d)
    ]
    profiles += [
        NodeProfile(
            id=d + k,
            node_class=NodeClass.EDGE,
            compute_capacity=config.edge_capacity,
            cycles_per_bit=config.edge_cycles_per_bit,
            upload_power=config.edge_upload_power,
            download_power=config.edge_download_power,
        )
        for k in range(e)
    ]
    profiles.append(
        NodeProfile(
            id=d + e,
            node_class=NodeClass.CLOUD,
            compute_capacity=config.cloud_capacity,
            cycles_per_bit=config.cloud_cycles_per_bit,
        )
    )
    rng = _stream(config.seed, GAIN_STREAM)
    lo, hi = math.log10(config.gain_min), math.log10(config.gain_max)
    gains = 10.0 ** rng.uniform(lo, hi, size=(d, max(e, 1)))
    channel = ChannelModel(
        bandwidth=config.bandwidth,
        num_channels=config.num_channels,
        noise_power=dbm_to_watts(config.noise_dbm),
        tx_power=np.full(d, config.device_upload_power),
        channel_gain=gains,
        fiber_rate=config.fiber_rate,
        fiber_latency=config.fiber_latency,
    )
    return Scenario(profiles, channel)


@lru_cache(maxsize=256)
def _poisson_cdf(rate: float) -> np.ndarray:
    k_max = int(rate + 12.0 * math.sqrt(rate) + 20.0)
    k = np.arange(k_max + 1)
    log_pmf = k * math.log(rate) - rate - np.array([math.lgamma(x + 1.0) for x in k])
    cdf = np.cumsum(np.exp(log_pmf))
    cdf[-1] = 1.0
    return cdf


def arrival_counts(config: SimConfig, slot: int, rng: np.random.Generator) -> np.ndarray:
    """Tasks per device in ``slot``; always consumes one uniform per device."""
    u = rng.random(config.num_devices)
    lam = config.arrival_rate
    if lam == 0:
        return np.zeros(config.num_devices, dtype=int)
    if config.arrival_process == "periodic":
        # deterministic: floor((slot+1)·λ) − floor(slot·λ) tasks per device
        return np.full(config.num_devices, math.floor((slot + 1) * lam) - math.floor(slot * lam))
    return np.searchsorted(_poisson_cdf(lam), u, side="right")


def generate_arrivals(
    config: SimConfig, slot: int, rng: np.random.Generator, first_id: int = 0
) -> list[Task]:
    """New tasks of one slot, ordered by device then per-device index."""
    counts = arrival_counts(config, slot, rng)
    depth = int(counts.max()) if counts.size else 0
    sizes = [rng.integers(config.data_size_min, config.data_size_max + 1, size=config.num_devices)
             for _ in range(depth)]
    tasks = []
    next_id = first_id
    for d in np.flatnonzero(counts):
        for k in range(counts[d]):
            tasks.append(
                Task(
                    id=next_id,
                    data_size=float(sizes[k][d]),
                    deadline=config.deadline,
                    energy_budget=config.energy_budget,
                    origin_device=int(d),
                    created_slot=slot,
                )
            )
            next_id += 1
    return tasks


@dataclass
class _Job:
    task: Task
    remaining: float  # cycles
    transmit: float  # seconds
    energy: float  # joules


@dataclass
class NodeState:
    profile: NodeProfile
    queue: deque = field(default_factory=deque)
    backlog_cycles: float = 0.0
    served_log: list = field(default_factory=list)  # cycles served per slot

    def waiting_kb(self) -> float:
        return self.backlog_cycles / self.profile.cycles_per_bit / BITS_PER_KB


@dataclass
class SlotRecord:
    slot: int
    generated: int
    completed: int
    energy: float
    blocking_kb: float
    cloud_offloaders: int
    delays: list = field(default_factory=list)


@dataclass
class SimState:
    config: SimConfig
    scenario: Scenario
    nodes: list[NodeState]
    generated: int = 0
    completed: int = 0
    successes: int = 0
    deadline_failures: int = 0
    energy: float = 0.0
    delay_sum: float = 0.0
    peak_blocking: float = 0.0
    last_blocking: float = 0.0
    prev_cloud_offloaders: int = 0
    prev_transmitting: frozenset = frozenset()
    ot_iterations: list = field(default_factory=list)
    ot_fallbacks: int = 0
    next_task_id: int = 0

    @classmethod
    def initial(cls, config: SimConfig) -> "SimState":
        scenario = build_scenario(config)
        return cls(config, scenario, [NodeState(p) for p in scenario.profiles])

    def queued(self) -> int:
        return sum(len(n.queue) for n in self.nodes)

    def snapshot(self, tasks: list[Task]) -> SlotSnapshot:
        return SlotSnapshot(
            pending_tasks=tasks,
            nodes=[NodeView(n.profile, n.backlog_cycles) for n in self.nodes],
            channel=self.scenario.channel,
            active_offloaders=max(self.prev_cloud_offloaders, 1),
            transmitting=self.prev_transmitting,
            slot_length=self.config.slot_length,
        )

    def check_invariants(self, slot: int) -> None:
        if self.generated != self.completed + self.queued():
            raise InvariantViolation(
                f"slot {slot}: generated {self.generated} != completed {self.completed} + queued {self.queued()}"
            )
        for n in self.nodes:
            if n.backlog_cycles < 0:
                raise InvariantViolation(f"slot {slot}: node {n.profile.id} backlog {n.backlog_cycles} < 0")


def _dispatch(state: SimState, tasks: list[Task], mapping: dict[int, int]) -> tuple[float, int]:
    """Charge transmission and device energy, enqueue cycles; returns (energy, cloud offloaders)."""
    if len(mapping) != len(tasks) or any(t.id not in mapping for t in tasks):
        raise InvariantViolation("policy returned a partial assignment")
    channel = state.scenario.channel
    nodes = state.nodes
    n_dev = state.config.num_devices
    cloud = state.scenario.cloud_id
    targets = [mapping[t.id] for t in tasks]
    if any(not 0 <= n < len(nodes) for n in targets):
        raise InvariantViolation("policy targeted an unknown node")
    transmitting = frozenset(t.origin_device for t, n in zip(tasks, targets) if n != t.origin_device)
    n_cloud = sum(1 for n in targets if n == cloud)
    rates = rate_matrix(channel, transmitting).tolist() if transmitting else None
    serving = state.scenario.serving

    energy = 0.0
    for task, node_id in zip(tasks, targets):
        node = nodes[node_id]
        prof = node.profile
        cycles = task.cycles_on(prof)
        compute = cycles / prof.compute_capacity
        device = nodes[task.origin_device].profile
        if node_id == task.origin_device:
            transmit = 0.0
            e = device.compute_power * compute
        else:
            if node_id < n_dev:
                raise InvariantViolation(f"task {task.id} sent to foreign device {node_id}")
            if node_id == cloud:
                station = serving[task.origin_device]
            else:
                station = node_id - n_dev
            rate = rates[task.origin_device][station]
            if node_id == cloud:
                transmit = (task.bits / rate * max(n_cloud, 1)
                            + task.bits / channel.fiber_rate + channel.fiber_latency)
            else:
                transmit = task.bits / rate
            e = device.upload_power * (compute + transmit)
        node.queue.append(_Job(task, cycles, transmit, e))
        node.backlog_cycles += cycles
        energy += e
    state.prev_transmitting = transmitting
    state.prev_cloud_offloaders = n_cloud
    return energy, n_cloud


def _drain(state: SimState, slot: int) -> list[float]:
    length = state.config.slot_length
    slot_start = slot * length
    delays = []
    for node in state.nodes:
        if not node.queue:
            node.served_log.append(0.0)
            continue
        cap = node.profile.compute_capacity
        budget = cap * length
        served = 0.0
        while node.queue and served < budget:
            job = node.queue[0]
            left = budget - served
            if job.remaining <= left * (1.0 + _FIT_RTOL):
                served += min(job.remaining, left)
                node.queue.popleft()
                finish = slot_start + served / cap
                delay = job.transmit + finish - job.task.created_slot * length
                delays.append(delay)
                state.completed += 1
                state.delay_sum += delay
                if delay <= job.task.deadline and job.energy <= job.task.energy_budget:
                    state.successes += 1
                elif delay > job.task.deadline:
                    state.deadline_failures += 1
            else:
                job.remaining -= left
                served = budget
        node.served_log.append(served)
        if node.queue:
            node.backlog_cycles = max(node.backlog_cycles - served, 0.0)
        else:
            node.backlog_cycles = 0.0
    return delays


def step(
    state: SimState,
    policy: Policy,
    slot: int,
    arrival_rng: np.random.Generator,
    policy_rng: np.random.Generator,
) -> tuple[SimState, SlotRecord]:
    tasks = generate_arrivals(state.config, slot, arrival_rng, state.next_task_id)
    state.next_task_id += len(tasks)
    state.generated += len(tasks)
    energy, n_cloud = 0.0, 0
    if tasks:
        assignment = policy(state.snapshot(tasks), policy_rng)
        if assignment.solver_iterations is not None:
            state.ot_iterations.append(assignment.solver_iterations)
        if assignment.fell_back:
            state.ot_fallbacks += 1
        energy, n_cloud = _dispatch(state, tasks, assignment.mapping)
    else:
        state.prev_transmitting = frozenset()
        state.prev_cloud_offloaders = 0
    state.energy += energy
    delays = _drain(state, slot)
    blocking = sum(n.waiting_kb() for n in state.nodes)
    state.peak_blocking = max(state.peak_blocking, blocking)
    state.last_blocking = blocking
    state.check_invariants(slot)
    return state, SlotRecord(slot, len(tasks), len(delays), energy, blocking, n_cloud, delays)


def strategy_key(strategy: str) -> int:
    return zlib.crc32(strategy.encode())


def run(config: SimConfig, strategy: str | Policy, records: list | None = None) -> SimMetrics:
    """Simulate ``config.num_slots`` slots from empty queues."""
    if isinstance(strategy, str):
        policy = config.policy(strategy)
        key = strategy_key(strategy)
    else:
        policy = strategy
        key = 0
    state = SimState.initial(config)
    for slot in range(config.num_slots):
        arrival_rng = _stream(config.seed, ARRIVAL_STREAM, slot)
        policy_rng = _stream(config.seed, POLICY_STREAM, key, slot)
        state, record = step(state, policy, slot, arrival_rng, policy_rng)
        if records is not None:
            records.append(record)
    return metrics_of(state)


def metrics_of(state: SimState) -> SimMetrics:
    n = state.config.num_slots
    return SimMetrics(
        avg_task_delay=state.delay_sum / state.completed if state.completed else 0.0,
        completed_tasks=state.completed,
        processing_rate=state.completed / n,
        peak_blocking_queue=state.peak_blocking,
        final_blocking_queue=state.last_blocking,
        total_energy=state.energy,
        offload_success_rate=state.successes / state.generated if state.generated else 0.0,
        generated_tasks=state.generated,
        deadline_failures=state.deadline_failures,
        ot_iterations_mean=float(np.mean(state.ot_iterations)) if state.ot_iterations else 0.0,
        ot_fallback_count=state.ot_fallbacks,
    )


def derive_seed(master: int, replicate: int) -> int:
    """Independent 63-bit run seed for one replicate of a master seed."""
    ss = np.random.SeedSequence([master & 0xFFFFFFFFFFFFFFFF, replicate & 0xFFFFFFFFFFFFFFFF])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class SweepRow:
    arrival_rate: float
    strategy: str
    seed: int
    metrics: SimMetrics


def _run_row(args) -> SweepRow:
    base, rate, strategy, seed = args
    cfg = base.replace(arrival_rate=rate, seed=derive_seed(base.seed, seed))
    return SweepRow(rate, strategy, seed, run(cfg, strategy))


def sweep(
    base: SimConfig,
    arrival_rates: Sequence[float],
    strategies: Sequence[str],
    seeds: Sequence[int],
    jobs: int = 1,
) -> list[SweepRow]:
    """Cartesian product of runs, ordered by rate, then strategy, then seed.

    Run seeds depend only on ``(base.seed, seed)``, so adding grid points
    never changes existing rows.
    """
    if not arrival_rates or not strategies or not seeds:
        raise ConfigurationError("sweep grids must be nonempty")
    for s in strategies:
        make_policy(s)
    grid = [(base, float(r), s, int(k)) for r in arrival_rates for s in strategies for k in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_row, grid, chunksize=1))
    return [_run_row(g) for g in grid]


def seed_means(rows: Iterable[SweepRow]) -> dict[tuple[float, str], dict[str, float]]:
    """Per-(rate, strategy) arithmetic means of every metric over seeds."""
    groups: dict[tuple[float, str], list[SimMetrics]] = {}
    for row in rows:
        groups.setdefault((row.arrival_rate, row.strategy), []).append(row.metrics)
    out = {}
    for key, ms in groups.items():
        names = [f.name for f in dataclasses.fields(SimMetrics)]
        out[key] = {name: math.fsum(getattr(m, name) for m in ms) / len(ms) for name in names}
    return out
