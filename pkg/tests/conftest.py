import numpy as np
import pytest

from oak.coords import GeoPoint, VivaldiCoordinate
from oak.model import CapacityVector, TaskRequirements, WorkerSnapshot


def make_worker(wid, cpu=4.0, mem=4096, used_cpu=0.0, used_mem=0, virt=("container",), geo=(48.0, 11.0), viv=(0.0, 0.0, 0.0)):
    return WorkerSnapshot(
        worker_id=wid,
        capacity=CapacityVector(cpu, mem),
        used=CapacityVector(used_cpu, used_mem),
        geo=GeoPoint(*geo),
        vivaldi=VivaldiCoordinate(viv),
        virtualizations=frozenset(virt),
    )


def make_task(cpu=1.0, mem=100, virt="container", msid=1, **kw):
    return TaskRequirements(microservice_id=msid, capacity=CapacityVector(cpu, mem), virtualization=virt, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
