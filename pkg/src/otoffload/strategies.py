"""Per-slot offloading policies.

Every policy maps a :class:`SlotSnapshot` to an :class:`Assignment`. Node ids
follow the simulator layout: devices ``0..D-1``, edge servers ``D..D+E-1``
(edge ``k`` is co-located with base station ``k``), then the single cloud.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import (
    ChannelModel,
    ConfigurationError,
    MisuseError,
    NodeClass,
    NodeProfile,
    Task,
    classification_weight,
)
from .ot import (
    CostMatrix,
    DiscreteMeasure,
    round_to_assignment,
    sinkhorn,
)

log = logging.getLogger(__name__)

CAPACITY_FLOOR = 1e-9
PENALTY_FACTOR = 10.0


@dataclass(frozen=True, eq=False)
class NodeView:
    profile: NodeProfile
    backlog_cycles: float = 0.0

    def __post_init__(self) -> None:
        if self.backlog_cycles < 0:
            raise MisuseError(f"node {self.profile.id}: negative backlog {self.backlog_cycles}")


@dataclass(frozen=True, eq=False)
class SlotSnapshot:
    pending_tasks: list[Task]
    nodes: list[NodeView]
    channel: ChannelModel
    active_offloaders: int = 1  # N for the cloud formula, estimated from the previous slot
    transmitting: frozenset[int] = frozenset()  # devices that were on air last slot
    slot_length: float = 0.1

    def __post_init__(self) -> None:
        for k, view in enumerate(self.nodes):
            if view.profile.id != k:
                raise MisuseError(f"node at position {k} has id {view.profile.id}")
        classes = [v.profile.node_class for v in self.nodes]
        if classes.count(NodeClass.CLOUD) > 1:
            raise ConfigurationError("a scenario has at most one cloud node")

    def ids_of(self, node_class: NodeClass) -> list[int]:
        return [v.profile.id for v in self.nodes if v.profile.node_class is node_class]

    @property
    def device_ids(self) -> list[int]:
        return self.ids_of(NodeClass.DEVICE)

    @property
    def edge_ids(self) -> list[int]:
        return self.ids_of(NodeClass.EDGE)

    @property
    def cloud_id(self) -> int | None:
        ids = self.ids_of(NodeClass.CLOUD)
        return ids[0] if ids else None


@dataclass
class Assignment:
    mapping: dict[int, int] = field(default_factory=dict)
    solver_iterations: int | None = None
    fell_back: bool = False

    def __len__(self) -> int:
        return len(self.mapping)

    def __getitem__(self, task_id: int) -> int:
        return self.mapping[task_id]


def rate_matrix(channel: ChannelModel, transmitting) -> np.ndarray:
    """Uplink rate of every device towards every base station, in bits/s.

    Interference for device ``d`` comes from the other devices in
    ``transmitting`` that share its channel.
    """
    n_dev = channel.num_devices
    received = channel.tx_power[:, None] * channel.channel_gain  # (D, S)
    interference = np.zeros_like(received)
    if transmitting:
        chan = np.arange(n_dev) % channel.num_channels
        active = np.zeros(n_dev, dtype=bool)
        active[list(transmitting)] = True
        on_channel = np.zeros((channel.num_channels, received.shape[1]))
        np.add.at(on_channel, chan[active], received[active])
        interference = on_channel[chan] - np.where(active[:, None], received, 0.0)
        np.maximum(interference, 0.0, out=interference)
    return channel.bandwidth * np.log2(1.0 + received / (channel.noise_power + interference))


@dataclass(frozen=True, eq=False)
class PlacementEstimates:
    """Estimated (time, energy) of each task on each candidate column.

    Columns are ``[own device, edge 0, ..., edge E-1, cloud]``; ``node_ids``
    maps each (task, column) pair back to a node id. Times include the
    target's current backlog.
    """

    time: np.ndarray
    energy: np.ndarray
    node_ids: np.ndarray


def estimate_placements(tasks: list[Task], snapshot: SlotSnapshot) -> PlacementEstimates:
    nodes = snapshot.nodes
    channel = snapshot.channel
    edges = snapshot.edge_ids
    cloud = snapshot.cloud_id
    n_cols = 1 + len(edges) + (cloud is not None)

    origin = np.array([t.origin_device for t in tasks], dtype=int)
    bits = np.array([t.bits for t in tasks], dtype=float)
    dev = [nodes[d].profile for d in origin]
    dev_cap = np.array([p.compute_capacity for p in dev])
    dev_cpb = np.array([p.cycles_per_bit for p in dev])
    dev_cp = np.array([p.compute_power for p in dev])
    dev_up = np.array([p.upload_power for p in dev])
    dev_backlog = np.array([nodes[d].backlog_cycles for d in origin])

    time = np.empty((len(tasks), n_cols))
    energy = np.empty_like(time)
    node_ids = np.empty(time.shape, dtype=int)

    t_local = bits * dev_cpb / dev_cap
    time[:, 0] = t_local + dev_backlog / dev_cap
    energy[:, 0] = dev_cp * t_local
    node_ids[:, 0] = origin

    rates = rate_matrix(channel, snapshot.transmitting)[origin]  # (n, S)
    with np.errstate(divide="ignore"):
        inv_rate = np.where(rates > 0, 1.0 / rates, np.inf)
    for k, e in enumerate(edges):
        prof = nodes[e].profile
        t = bits * prof.cycles_per_bit / prof.compute_capacity + bits * inv_rate[:, k]
        time[:, 1 + k] = t + nodes[e].backlog_cycles / prof.compute_capacity
        energy[:, 1 + k] = dev_up * t
        node_ids[:, 1 + k] = e
    if cloud is not None:
        prof = nodes[cloud].profile
        serving = np.argmax(channel.channel_gain[origin], axis=1)
        n_share = max(int(snapshot.active_offloaders), 1)
        t = (
            bits * prof.cycles_per_bit / prof.compute_capacity
            + bits * inv_rate[np.arange(len(tasks)), serving] * n_share
            + bits / channel.fiber_rate
            + channel.fiber_latency
        )
        time[:, -1] = t + nodes[cloud].backlog_cycles / prof.compute_capacity
        energy[:, -1] = dev_up * t
        node_ids[:, -1] = cloud
    return PlacementEstimates(time=time, energy=energy, node_ids=node_ids)


def build_cost_matrix(
    tasks: list[Task], snapshot: SlotSnapshot, estimates: PlacementEstimates | None = None
) -> CostMatrix:
    """Delay cost of each task on each candidate column, with infeasible entries penalised."""
    if not tasks:
        raise MisuseError("cost matrix needs at least one task")
    if not snapshot.nodes:
        raise MisuseError("cost matrix needs at least one node")
    est = estimates or estimate_placements(tasks, snapshot)
    deadline = np.array([t.deadline for t in tasks])[:, None]
    budget = np.array([t.energy_budget for t in tasks])[:, None]
    ok = np.isfinite(est.time) & (est.time <= deadline) & (est.energy <= budget)
    cost = est.time.copy()
    finite = np.isfinite(cost)
    if ok.any():
        penalty = PENALTY_FACTOR * cost[ok].max()
    else:
        penalty = PENALTY_FACTOR * (cost[finite].max() if finite.any() else 1.0)
    cost[~ok] = penalty
    return CostMatrix(cost)


def column_capacities(
    tasks: list[Task], snapshot: SlotSnapshot, horizon: float
) -> np.ndarray:
    """Data (bits) each candidate column can still absorb within ``horizon`` seconds.

    The own-device column pools the spare capacity of the distinct origin
    devices of ``tasks``.
    """
    def spare_bits(view: NodeView) -> float:
        prof = view.profile
        cycles = prof.compute_capacity * horizon - view.backlog_cycles
        return max(cycles, 0.0) / prof.cycles_per_bit

    nodes = snapshot.nodes
    origins = sorted({t.origin_device for t in tasks})
    caps = [sum(spare_bits(nodes[d]) for d in origins)]
    caps += [spare_bits(nodes[e]) for e in snapshot.edge_ids]
    if snapshot.cloud_id is not None:
        caps.append(spare_bits(nodes[snapshot.cloud_id]))
    return np.array(caps, dtype=float)


def ot_marginals(demand: np.ndarray, capacity: np.ndarray) -> tuple[DiscreteMeasure, DiscreteMeasure, bool]:
    """Source/target measures for a capacity-constrained assignment.

    Sources are the task demands; targets are column capacities, floored so
    no column vanishes. When capacity exceeds demand, a zero-cost slack
    source takes up the excess (returned flag is True); otherwise the
    capacities are scaled up to the demand.
    """
    demand = np.asarray(demand, dtype=float)
    cap_total = float(np.sum(capacity))
    capacity = np.maximum(np.asarray(capacity, dtype=float), CAPACITY_FLOOR * max(cap_total, 1.0))
    total_demand = float(demand.sum())
    total_cap = float(capacity.sum())
    if total_cap > total_demand:
        rows = np.append(demand, total_cap - total_demand)
        return DiscreteMeasure.from_masses(rows), DiscreteMeasure.from_masses(capacity), True
    return DiscreteMeasure.from_masses(demand), DiscreteMeasure.from_masses(capacity), False


def assign_by_ot(
    cost: CostMatrix | np.ndarray,
    demand,
    capacity,
    epsilon: float | None = None,
    epsilon_scale: float = 0.05,
    tol: float = 1e-6,
    max_iter: int = 10_000,
):
    """Solve the slot's transport problem and round it to one column per task.

    Returns ``(columns, plan)``; ``columns`` is None if Sinkhorn did not converge.
    """
    c = np.asarray(getattr(cost, "entries", cost), dtype=float)
    n = c.shape[0]
    a, b, slack = ot_marginals(demand, capacity)
    if epsilon is None:
        epsilon = epsilon_scale * float(np.median(c))
        if not epsilon > 0:
            epsilon = epsilon_scale * max(float(c.max()), 1.0)
    full = np.vstack([c, np.zeros((1, c.shape[1]))]) if slack else c
    plan = sinkhorn(a, b, full, epsilon, tol=tol, max_iter=max_iter)
    if not plan.converged:
        return None, plan
    return round_to_assignment(plan.coupling[:n]), plan


def _capacity_horizon(setting, snapshot: SlotSnapshot, est: PlacementEstimates) -> float:
    if setting is None:
        return snapshot.slot_length
    if setting == "auto":
        # fill a server only while its queue stays cheaper than the cloud route
        if snapshot.cloud_id is None:
            return snapshot.slot_length
        cloud_time = est.time[:, -1]
        cloud_time = cloud_time[np.isfinite(cloud_time)]
        if cloud_time.size == 0:
            return snapshot.slot_length
        return min(float(np.median(cloud_time)), snapshot.slot_length)
    return float(setting)


def decide_ot(
    snapshot: SlotSnapshot,
    epsilon: float | None = None,
    tol: float = 1e-6,
    max_iter: int = 10_000,
    epsilon_scale: float = 0.05,
    capacity_horizon: float | str | None = "auto",
    gamma1: float = 0.5,
) -> Assignment:
    """Optimal-transport placement ("cloud-edge").

    Demands are the tasks' data sizes; capacities are the data each
    candidate can still process within ``capacity_horizon`` seconds. The
    default "auto" horizon is the median cloud delay of the pending tasks,
    capped at the slot length. Falls back
    to :func:`decide_greedy` when Sinkhorn fails to converge.
    """
    tasks = sorted(snapshot.pending_tasks, key=lambda t: t.id)
    if not tasks:
        return Assignment()
    est = estimate_placements(tasks, snapshot)
    cost = build_cost_matrix(tasks, snapshot, est)
    horizon = _capacity_horizon(capacity_horizon, snapshot, est)
    demand = np.array([t.bits for t in tasks])
    capacity = column_capacities(tasks, snapshot, horizon)
    columns, plan = assign_by_ot(cost, demand, capacity, epsilon, epsilon_scale, tol, max_iter)
    if columns is None:
        log.warning(
            "sinkhorn did not converge (error %.3g after %d iterations); using greedy",
            plan.marginal_error,
            plan.iterations,
        )
        fallback = decide_greedy(snapshot, gamma1)
        fallback.solver_iterations = plan.iterations
        fallback.fell_back = True
        return fallback
    mapping = {t.id: int(est.node_ids[i, col]) for i, (t, col) in enumerate(zip(tasks, columns))}
    return Assignment(mapping, solver_iterations=plan.iterations)


def decide_greedy(snapshot: SlotSnapshot, gamma1: float = 0.5) -> Assignment:
    """Sequential minimum-Δ placement; each choice adds to its node's backlog."""
    classification_weight(0.0, 0.0, gamma1)  # validates gamma1
    tasks = sorted(snapshot.pending_tasks, key=lambda t: t.id)
    if not tasks:
        return Assignment()
    est = estimate_placements(tasks, snapshot)
    caps = {v.profile.id: v.profile.compute_capacity for v in snapshot.nodes}
    extra_delay: dict[int, float] = {}
    mapping = {}
    for i, task in enumerate(tasks):
        ids = est.node_ids[i]
        times = est.time[i] + np.array([extra_delay.get(int(n), 0.0) for n in ids])
        score = gamma1 * times + (1.0 - gamma1) * est.energy[i]
        col = int(np.argmin(score))  # first minimum, so ties go to the lowest column
        node = int(ids[col])
        mapping[task.id] = node
        added = task.cycles_on(snapshot.nodes[node].profile) / caps[node]
        extra_delay[node] = extra_delay.get(node, 0.0) + added
    return Assignment(mapping)


def decide_fixed(snapshot: SlotSnapshot, target_class: NodeClass | str) -> Assignment:
    target_class = NodeClass(target_class)
    tasks = snapshot.pending_tasks
    if target_class is NodeClass.DEVICE:
        return Assignment({t.id: t.origin_device for t in tasks})
    if target_class is NodeClass.EDGE:
        edges = snapshot.edge_ids
        if not edges:
            raise ConfigurationError("edge-only policy needs at least one edge server")
        target = min(edges, key=lambda e: (snapshot.nodes[e].backlog_cycles, e))
    else:
        target = snapshot.cloud_id
        if target is None:
            raise ConfigurationError("cloud-only policy needs a cloud node")
    return Assignment({t.id: target for t in tasks})


def decide_random(snapshot: SlotSnapshot, rng: np.random.Generator) -> Assignment:
    """Uniform choice over {own device} ∪ edges ∪ cloud.

    Draws come in blocks of one value per device: block ``k`` serves each
    device's ``k``-th pending task. A device's ``k``-th task therefore gets
    the same draw regardless of how many tasks other devices have.
    """
    shared = snapshot.edge_ids + ([snapshot.cloud_id] if snapshot.cloud_id is not None else [])
    n_dev = len(snapshot.device_ids)
    per_device: dict[int, list[Task]] = {}
    for t in sorted(snapshot.pending_tasks, key=lambda t: t.id):
        per_device.setdefault(t.origin_device, []).append(t)
    depth = max((len(v) for v in per_device.values()), default=0)
    draws = [rng.random(n_dev) for _ in range(depth)]
    mapping = {}
    for d, dev_tasks in per_device.items():
        candidates = [d] + shared
        for k, t in enumerate(dev_tasks):
            mapping[t.id] = candidates[min(int(draws[k][d] * len(candidates)), len(candidates) - 1)]
    return Assignment(mapping)


STRATEGY_NAMES = ("cloud-edge", "greedy", "local", "edge", "cloud", "random")

Policy = Callable[[SlotSnapshot, np.random.Generator], Assignment]


def make_policy(
    name: str,
    gamma1: float = 0.5,
    epsilon: float | None = None,
    epsilon_scale: float = 0.05,
    tol: float = 1e-6,
    max_iter: int = 10_000,
    capacity_horizon: float | str | None = "auto",
) -> Policy:
    """Policy callable for a CLI strategy name."""
    if name == "cloud-edge":
        return lambda snap, rng: decide_ot(
            snap, epsilon, tol, max_iter, epsilon_scale, capacity_horizon, gamma1
        )
    if name == "greedy":
        return lambda snap, rng: decide_greedy(snap, gamma1)
    if name == "local":
        return lambda snap, rng: decide_fixed(snap, NodeClass.DEVICE)
    if name == "edge":
        return lambda snap, rng: decide_fixed(snap, NodeClass.EDGE)
    if name == "cloud":
        return lambda snap, rng: decide_fixed(snap, NodeClass.CLOUD)
    if name == "random":
        return decide_random
    raise ConfigurationError(f"unknown strategy {name!r}; valid: {', '.join(STRATEGY_NAMES)}")
