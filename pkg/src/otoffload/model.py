"""Domain types and closed-form communication / computation formulas.

Units used throughout the package:

* data sizes are in kilobits (1 kb = 1000 bits),
* compute capacity in cycles per second, cycle demand in cycles,
* rates in bits per second, times in seconds, powers in watts, energy in joules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

BITS_PER_KB = 1000.0


class OffloadError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(OffloadError, ValueError):
    """A scenario or parameter value is out of its allowed range."""

    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key


class MisuseError(OffloadError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class InfeasibleLinkError(OffloadError):
    """The wireless link has zero rate; the target is unreachable this slot."""


class NodeClass(str, Enum):
    DEVICE = "device"
    EDGE = "edge"
    CLOUD = "cloud"


@dataclass(frozen=True)
class Task:
    id: int
    data_size: float  # kilobits
    deadline: float  # seconds
    energy_budget: float  # joules
    origin_device: int
    created_slot: int = 0

    def __post_init__(self) -> None:
        if not self.data_size > 0:
            raise ConfigurationError(f"task {self.id}: data_size must be > 0, got {self.data_size}")
        if not self.deadline > 0:
            raise ConfigurationError(f"task {self.id}: deadline must be > 0, got {self.deadline}")
        if not self.energy_budget > 0:
            raise ConfigurationError(f"task {self.id}: energy_budget must be > 0, got {self.energy_budget}")

    @property
    def bits(self) -> float:
        return self.data_size * BITS_PER_KB

    def cycles_on(self, node: "NodeProfile") -> float:
        """Cycle demand of this task when executed on ``node``."""
        return self.bits * node.cycles_per_bit


@dataclass(frozen=True)
class NodeProfile:
    id: int
    node_class: NodeClass
    compute_capacity: float  # cycles/s
    cycles_per_bit: float
    compute_power: float = 0.0
    upload_power: float = 0.0
    download_power: float = 0.0

    def __post_init__(self) -> None:
        if not self.compute_capacity > 0:
            raise ConfigurationError(f"node {self.id}: compute_capacity must be > 0")
        if not self.cycles_per_bit > 0:
            raise ConfigurationError(f"node {self.id}: cycles_per_bit must be > 0")

    @property
    def bits_per_second(self) -> float:
        """Data throughput of the processor, in bits of task input per second."""
        return self.compute_capacity / self.cycles_per_bit


@dataclass(frozen=True, eq=False)
class ChannelModel:
    """Shared wireless uplink plus the wired backhaul towards the cloud.

    ``channel_gain`` has one row per device and one column per base station
    (each edge server sits at a base station). A 1-D array is accepted and
    treated as a single station.
    """

    bandwidth: float  # Hz, per channel
    num_channels: int
    noise_power: float  # W
    tx_power: np.ndarray  # W, per device
    channel_gain: np.ndarray  # (devices, stations)
    fiber_rate: float  # bits/s
    fiber_latency: float = 0.015  # s

    def __post_init__(self) -> None:
        tx = np.asarray(self.tx_power, dtype=float)
        gain = np.asarray(self.channel_gain, dtype=float)
        if gain.ndim == 1:
            gain = gain[:, None]
        object.__setattr__(self, "tx_power", tx)
        object.__setattr__(self, "channel_gain", gain)
        if not self.bandwidth > 0:
            raise ConfigurationError("bandwidth must be > 0")
        if self.num_channels < 1:
            raise ConfigurationError("num_channels must be >= 1")
        if not self.noise_power > 0:
            raise ConfigurationError("noise_power must be > 0")
        if not self.fiber_rate > 0:
            raise ConfigurationError("fiber_rate must be > 0")
        if self.fiber_latency < 0:
            raise ConfigurationError("fiber_latency must be >= 0")
        if tx.ndim != 1 or gain.shape[0] != tx.shape[0]:
            raise ConfigurationError("tx_power and channel_gain must cover the same devices")
        if np.any(tx < 0):
            raise ConfigurationError("tx_power must be >= 0")
        if np.any(gain <= 0):
            raise ConfigurationError("all channel gains must be > 0")

    @property
    def num_devices(self) -> int:
        return self.tx_power.shape[0]

    @property
    def num_stations(self) -> int:
        return self.channel_gain.shape[1]

    def channel_of(self, device: int) -> int:
        return device % self.num_channels

    def serving_station(self, device: int) -> int:
        """Base station with the strongest gain; used for the path to the cloud."""
        return int(np.argmax(self.channel_gain[device]))

    def co_channel(self, device: int, transmitting: Iterable[int]) -> set[int]:
        """Devices in ``transmitting`` that share ``device``'s channel."""
        ch = self.channel_of(device)
        return {m for m in transmitting if m != device and self.channel_of(m) == ch}


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def transmission_rate(
    channel: ChannelModel, user: int, interferers: Iterable[int] = (), station: int = 0
) -> float:
    """Shannon rate of ``user`` towards ``station`` in bits/s."""
    interferers = set(interferers)
    n_dev = channel.num_devices
    if not 0 <= user < n_dev or any(not 0 <= m < n_dev for m in interferers):
        raise ConfigurationError(f"unknown device id in user={user}, interferers={sorted(interferers)}")
    if not 0 <= station < channel.num_stations:
        raise ConfigurationError(f"unknown station {station}")
    if user in interferers:
        raise MisuseError("a device cannot interfere with itself")
    gains = channel.channel_gain[:, station]
    signal = channel.tx_power[user] * gains[user]
    interference = sum(channel.tx_power[m] * gains[m] for m in interferers)
    return channel.bandwidth * math.log2(1.0 + signal / (channel.noise_power + interference))


def _check_class(node: NodeProfile, expected: NodeClass) -> None:
    if node.node_class is not expected:
        raise MisuseError(f"node {node.id} is {node.node_class.value}, expected {expected.value}")


def _check_rate(rate: float) -> None:
    if not rate > 0:
        raise InfeasibleLinkError(f"link rate is {rate}; target unreachable")


def local_time_energy(task: Task, device: NodeProfile) -> tuple[float, float]:
    _check_class(device, NodeClass.DEVICE)
    t = task.cycles_on(device) / device.compute_capacity
    return t, device.compute_power * t


def edge_time_energy(
    task: Task, device: NodeProfile, edge: NodeProfile, rate: float
) -> tuple[float, float]:
    _check_class(edge, NodeClass.EDGE)
    _check_rate(rate)
    t = task.cycles_on(edge) / edge.compute_capacity + task.bits / rate
    return t, device.upload_power * t


def uplink_delay(task: Task, channel: ChannelModel) -> float:
    """Base station to cloud transfer: serialization on the fiber plus fixed latency."""
    return task.bits / channel.fiber_rate + channel.fiber_latency


def cloud_time_energy(
    task: Task,
    device: NodeProfile,
    cloud: NodeProfile,
    rate: float,
    concurrent_cloud_offloaders: int,
    channel: ChannelModel,
) -> tuple[float, float]:
    _check_class(cloud, NodeClass.CLOUD)
    _check_rate(rate)
    if concurrent_cloud_offloaders < 1:
        raise MisuseError("at least one device (the caller) offloads to the cloud")
    t = (
        task.cycles_on(cloud) / cloud.compute_capacity
        + task.bits / rate * concurrent_cloud_offloaders
        + uplink_delay(task, channel)
    )
    return t, device.upload_power * t


def classification_weight(time: float, energy: float, gamma1: float = 0.5) -> float:
    """Delay/energy score of a placement; lower is better."""
    if not 0.0 <= gamma1 <= 1.0:
        raise ConfigurationError(f"gamma1 must lie in [0, 1], got {gamma1}")
    return gamma1 * time + (1.0 - gamma1) * energy


def feasible(task: Task, time: float, energy: float) -> bool:
    return time <= task.deadline and energy <= task.energy_budget
