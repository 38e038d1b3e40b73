import sys
from pathlib import Path

import numpy as np
import pytest

from otoffload.model import ChannelModel, NodeClass, NodeProfile, Task

sys.path.insert(0, str(Path(__file__).parent))


def make_device(id=0, capacity=1e9, cpb=1000.0, cp=0.5, up=0.1):
    return NodeProfile(id, NodeClass.DEVICE, capacity, cpb, compute_power=cp, upload_power=up, download_power=0.15)


def make_edge(id=1, capacity=10e9, cpb=200.0):
    return NodeProfile(id, NodeClass.EDGE, capacity, cpb, upload_power=0.2, download_power=0.3)


def make_cloud(id=2, capacity=100e9, cpb=50.0):
    return NodeProfile(id, NodeClass.CLOUD, capacity, cpb)


def make_task(id=0, size=1000.0, deadline=1.0, budget=0.5, origin=0, slot=0):
    return Task(id, size, deadline, budget, origin, slot)


@pytest.fixture
def device():
    return make_device()


@pytest.fixture
def edge():
    return make_edge()


@pytest.fixture
def cloud():
    return make_cloud()


@pytest.fixture
def channel():
    # one device whose received power equals the noise floor
    return ChannelModel(
        bandwidth=50e6,
        num_channels=1,
        noise_power=1e-13,
        tx_power=np.array([0.1]),
        channel_gain=np.array([1e-12]),
        fiber_rate=1e9,
        fiber_latency=0.015,
    )
