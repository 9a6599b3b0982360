"""Service instance state machine and the worker-side NodeEngine."""

from __future__ import annotations

import ipaddress
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

from oak.errors import IllegalTransitionError, SubnetExhaustedError, WorkerRejectedError
from oak.model import ZERO, CapacityVector, Placement
from oak.overlay import InstanceAddressPool


class State(str, Enum):
    REQUESTED = "requested"
    SCHEDULED = "scheduled"
    RUNNING = "running"
    TERMINATED = "terminated"
    FAILED = "failed"


class Event(str, Enum):
    PLACED = "placed"
    STARTED = "started"
    STOPPED = "stopped"
    ERRORED = "errored"


TRANSITIONS: dict[tuple[State, Event], State] = {
    (State.REQUESTED, Event.PLACED): State.SCHEDULED,
    (State.REQUESTED, Event.ERRORED): State.FAILED,
    (State.SCHEDULED, Event.STARTED): State.RUNNING,
    (State.SCHEDULED, Event.ERRORED): State.FAILED,
    (State.RUNNING, Event.STOPPED): State.TERMINATED,
    (State.RUNNING, Event.ERRORED): State.FAILED,
}
ABSORBING = frozenset({State.TERMINATED, State.FAILED})
PLACED_STATES = frozenset({State.SCHEDULED, State.RUNNING, State.TERMINATED})


def transition(state: State, event: Event) -> State:
    try:
        return TRANSITIONS[(State(state), Event(event))]
    except KeyError:
        raise IllegalTransitionError(f"{event} is not allowed in state {state}") from None


def migration_threshold(rigidness: float) -> int:
    """Consecutive SLA violations that trigger a migration."""
    return max(1, math.ceil((1.0 - rigidness) * 10))


@dataclass
class ServiceInstance:
    instance_id: str
    service_id: str
    microservice_id: int
    state: State = State.REQUESTED
    placement: Placement | None = None
    instance_ip: str | None = None
    violation_streak: int = 0
    migration_of: str | None = None
    failed_placement: Placement | None = None
    history: list[State] = field(default_factory=list)

    def fire(self, event: Event, placement: Placement | None = None) -> State:
        new = transition(self.state, event)
        if event is Event.PLACED:
            if placement is None:
                raise ValueError("a placed event needs a placement")
            self.placement = placement
        if event is Event.STARTED:
            self.violation_streak = 0
        if new is State.FAILED:
            self.failed_placement = self.placement
            self.placement = None
        self.history.append(self.state)
        self.state = new
        return new

    def report(self, sla_violation: bool) -> int:
        self.violation_streak = self.violation_streak + 1 if sla_violation else 0
        return self.violation_streak

    @property
    def worker_id(self) -> str | None:
        p = self.placement or self.failed_placement
        return p.worker_id if p else None


class WorkloadKind(str, Enum):
    SLEEP = "sleep"
    ECHO = "echo"
    CPU_BURN = "cpu_burn"


@dataclass(frozen=True)
class MockWorkload:
    kind: WorkloadKind = WorkloadKind.SLEEP
    parameters: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", WorkloadKind(self.kind))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "parameters": dict(self.parameters)}


class RuntimeAdapter(Protocol):
    def start(self, instance_id: str, workload: MockWorkload) -> None: ...

    def stop(self, instance_id: str) -> None: ...

    def probe(self, instance_id: str) -> bool: ...


class MockRuntime:
    """Stands in for a container runtime: tracks which workloads are up."""

    def __init__(self):
        self.running: dict[str, MockWorkload] = {}
        self.started = 0

    def start(self, instance_id: str, workload: MockWorkload) -> None:
        self.running[instance_id] = workload
        self.started += 1

    def stop(self, instance_id: str) -> None:
        self.running.pop(instance_id, None)

    def probe(self, instance_id: str) -> bool:
        return instance_id in self.running

    def echo(self, instance_id: str, payload: bytes) -> bytes:
        if self.running[instance_id].kind is not WorkloadKind.ECHO:
            raise ValueError(f"{instance_id} is not an echo workload")
        return payload


class NodeEngine:
    """Capacity ledger and instance host of a single worker.

    The ledger here is authoritative: a deploy that no longer fits (because
    the orchestrator scheduled on stale numbers) is rejected.
    """

    def __init__(
        self,
        worker_id: str,
        capacity: CapacityVector,
        subnet: ipaddress.IPv4Network | str | None = None,
        runtime: RuntimeAdapter | None = None,
    ):
        self.worker_id = worker_id
        self.capacity = capacity
        self.used = ZERO
        self.live = True
        self.runtime = runtime or MockRuntime()
        self.addresses = InstanceAddressPool(subnet) if subnet is not None else None
        self.instances: dict[str, tuple[ServiceInstance, CapacityVector]] = {}

    def set_subnet(self, subnet: ipaddress.IPv4Network | str) -> None:
        self.addresses = InstanceAddressPool(subnet)

    def deploy(self, instance: ServiceInstance, workload: MockWorkload, demand: CapacityVector) -> str:
        if not self.live:
            raise WorkerRejectedError(f"{self.worker_id} is down")
        if instance.state is not State.SCHEDULED:
            raise IllegalTransitionError(f"{instance.instance_id} is {instance.state}, expected scheduled")
        if not self.capacity.checked_sub(self.used).covers(demand):
            raise WorkerRejectedError(f"{self.worker_id} cannot fit {demand}")
        if self.addresses is None:
            raise SubnetExhaustedError(f"{self.worker_id} has no subnet")
        ip = str(self.addresses.allocate())
        self.runtime.start(instance.instance_id, workload)
        instance.instance_ip = ip
        instance.fire(Event.STARTED)
        self.used = self.used + demand
        self.instances[instance.instance_id] = (instance, demand)
        return ip

    def _release(self, instance_id: str) -> ServiceInstance:
        instance, demand = self.instances.pop(instance_id)
        self.runtime.stop(instance_id)
        self.used = self.used.checked_sub(demand)
        if instance.instance_ip and self.addresses is not None:
            self.addresses.release(instance.instance_ip)
        return instance

    def stop(self, instance_id: str) -> ServiceInstance:
        instance = self._release(instance_id)
        instance.fire(Event.STOPPED)
        return instance

    def fail(self, instance_id: str) -> ServiceInstance:
        instance = self._release(instance_id)
        instance.fire(Event.ERRORED)
        return instance

    def crash(self) -> list[str]:
        """Worker dies: every hosted instance fails and the ledger empties."""
        self.live = False
        ids = sorted(self.instances)
        for iid in ids:
            instance, _ = self.instances.pop(iid)
            self.runtime.stop(iid)
            if instance.state is State.RUNNING:
                instance.fire(Event.ERRORED)
        self.used = ZERO
        return ids

    def recover(self) -> None:
        self.live = True

    def ledger_consistent(self) -> bool:
        total = ZERO
        for _, demand in self.instances.values():
            total = total + demand
        return all(abs(a - b) < 1e-9 for a, b in zip(total.to_dict().values(), self.used.to_dict().values()))

    def running_ids(self) -> list[str]:
        return sorted(i for i, (inst, _) in self.instances.items() if inst.state is State.RUNNING)
