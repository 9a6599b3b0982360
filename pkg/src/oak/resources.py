"""Cluster-side resource bookkeeping: registration, telemetry and aggregation."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field

from oak.coords import GeoPoint, VivaldiCoordinate
from oak.errors import (
    CapacityInvalidError,
    DuplicateIdError,
    EmptyAggregateError,
    UnknownWorkerError,
)
from oak.lifecycle import Event, ServiceInstance, State
from oak.model import (
    ZERO,
    AggregateStats,
    CapacityVector,
    ClusterNode,
    WorkerSnapshot,
    aggregate,
)
from oak.overlay import SubnetPool

_DELTA_DIMS = ("cpu_cores", "memory_mb", "gpu_units", "tpu_units", "bandwidth_in_mbps")


@dataclass(frozen=True)
class TelemetryConfig:
    update_interval_ms: int = 1000
    delta_threshold: float = 0.0
    staleness_timeout_ms: int | None = None
    aggregate_interval_ms: int = 1000

    def __post_init__(self):
        if self.update_interval_ms <= 0:
            raise ValueError("update_interval_ms must be positive")
        if not 0.0 <= self.delta_threshold <= 1.0:
            raise ValueError("delta_threshold must be in [0, 1]")
        if self.staleness_timeout_ms is None:
            object.__setattr__(self, "staleness_timeout_ms", 3 * self.update_interval_ms)
        if self.staleness_timeout_ms < 3 * self.update_interval_ms:
            raise ValueError("staleness_timeout_ms must be at least three update intervals")


@dataclass
class RegistrationRecord:
    id: str
    declared_capacity: CapacityVector
    virtualizations: frozenset[str] = frozenset({"container"})
    geo: GeoPoint = GeoPoint(0.0, 0.0)
    registered_at: float = 0.0
    vivaldi: VivaldiCoordinate = field(default_factory=VivaldiCoordinate)
    assigned_subnet: ipaddress.IPv4Network | None = None


def relative_change(capacity: CapacityVector, old: CapacityVector, new: CapacityVector) -> float:
    """Largest per-dimension utilisation change, relative to declared capacity."""
    out = 0.0
    for name in _DELTA_DIMS:
        cap = getattr(capacity, name)
        if cap > 0:
            out = max(out, abs(getattr(new, name) - getattr(old, name)) / cap)
    return out


class ClusterResourceManager:
    """Owns one cluster's view of its workers and the aggregates of its sub-clusters."""

    def __init__(
        self,
        cluster: ClusterNode,
        config: TelemetryConfig | None = None,
        subnet_pool: SubnetPool | None = None,
    ):
        self.cluster = cluster
        self.config = config or TelemetryConfig()
        self.subnets = subnet_pool or SubnetPool(cluster.index or 1)
        self.records: dict[str, RegistrationRecord] = {}
        self.stale: set[str] = set()
        self.down: set[str] = set()
        self.instances: dict[str, dict[str, ServiceInstance]] = {}
        self._reported: set[str] = set()
        self._telemetry_seq: dict[str, int] = {}
        self._child_seq: dict[str, int] = {}
        self.dropped_messages = 0

    # registration -----------------------------------------------------------
    def register_worker(self, record: RegistrationRecord, now: float | None = None) -> ipaddress.IPv4Network:
        wid = record.id
        if wid in self.records and wid not in self.down:
            raise DuplicateIdError(f"worker {wid!r} already registered")
        cap = record.declared_capacity
        if cap.cpu_cores <= 0 or cap.memory_mb <= 0:
            raise CapacityInvalidError(f"worker {wid!r} declares no cpu or memory")
        if wid in self.records:
            # a worker coming back after being declared down keeps its subnet
            record.assigned_subnet = self.records[wid].assigned_subnet
        else:
            record.assigned_subnet = self.subnets.allocate()
        ts = record.registered_at if now is None else now
        self.records[wid] = record
        self.cluster.workers[wid] = WorkerSnapshot(
            worker_id=wid,
            capacity=cap,
            used=ZERO,
            geo=record.geo,
            vivaldi=record.vivaldi,
            virtualizations=record.virtualizations,
            last_update=ts,
        )
        self.down.discard(wid)
        self.stale.discard(wid)
        self._reported.discard(wid)
        self._telemetry_seq.pop(wid, None)
        self.instances.setdefault(wid, {})
        return record.assigned_subnet

    # telemetry ----------------------------------------------------------------
    def push_telemetry(self, worker_id: str, used: CapacityVector, vivaldi: VivaldiCoordinate, now: float) -> bool:
        snap = self.cluster.workers.get(worker_id)
        if snap is None:
            raise UnknownWorkerError(worker_id)
        if worker_id in self.down:
            record = self.records[worker_id]
            record.vivaldi = vivaldi
            self.register_worker(record, now)
            snap = self.cluster.workers[worker_id]
        snap.capacity.checked_sub(used)
        first = worker_id not in self._reported
        change = relative_change(snap.capacity, snap.used, used)
        if first or change >= self.config.delta_threshold:
            self.cluster.workers[worker_id] = snap.evolve(used=used, vivaldi=vivaldi, last_update=now)
            self._reported.add(worker_id)
            self.stale.discard(worker_id)
            return True
        self.cluster.workers[worker_id] = snap.evolve(last_update=now)
        self.stale.discard(worker_id)
        return False

    def apply_telemetry_message(self, message: dict, now: float) -> bool | None:
        """Apply a ``{worker_id, used, vivaldi, seq}`` report; None when dropped as out of order."""
        wid = message["worker_id"]
        seq = int(message["seq"])
        if seq <= self._telemetry_seq.get(wid, 0):
            self.dropped_messages += 1
            return None
        accepted = self.push_telemetry(
            wid,
            CapacityVector.from_dict(message["used"]),
            VivaldiCoordinate.from_dict(message["vivaldi"]),
            now,
        )
        self._telemetry_seq[wid] = seq
        return accepted

    def reserve(self, worker_id: str, demand: CapacityVector) -> None:
        """Book a placement against the cached snapshot until the next report lands."""
        snap = self.cluster.workers[worker_id]
        self.cluster.workers[worker_id] = snap.evolve(used=snap.used + demand)

    def release(self, worker_id: str, demand: CapacityVector) -> None:
        snap = self.cluster.workers.get(worker_id)
        if snap is not None and snap.used.covers(demand):
            self.cluster.workers[worker_id] = snap.evolve(used=snap.used.checked_sub(demand))

    # liveness -------------------------------------------------------------------
    def is_live(self, worker_id: str, now: float) -> bool:
        snap = self.cluster.workers[worker_id]
        return worker_id not in self.down and now - snap.last_update <= self.config.staleness_timeout_ms

    def live_workers(self, now: float) -> list[WorkerSnapshot]:
        return [w for wid, w in sorted(self.cluster.workers.items()) if self.is_live(wid, now)]

    # aggregation ------------------------------------------------------------
    def update_child_aggregate(self, child_id: str, stats: AggregateStats, seq: int | None = None) -> bool:
        if seq is not None:
            if seq <= self._child_seq.get(child_id, 0):
                self.dropped_messages += 1
                return False
            self._child_seq[child_id] = seq
        self.cluster.child_clusters.add(child_id)
        self.cluster.child_aggregates[child_id] = stats
        return True

    def drop_child(self, child_id: str) -> None:
        self.cluster.child_aggregates.pop(child_id, None)

    def peek_aggregate(self, now: float) -> AggregateStats:
        """The aggregate ``collect_aggregate`` would publish now, without recording anything."""
        live = self.live_workers(now)
        children = [self.cluster.child_aggregates[c] for c in sorted(self.cluster.child_aggregates)]
        if not live and not children:
            raise EmptyAggregateError(f"cluster {self.cluster.cluster_id} has nothing live")
        virts = set()
        for w in live:
            virts |= w.virtualizations
        points = list(self.cluster.geo_zone) or [w.geo for w in live]
        return aggregate([w.available() for w in live], children, virtualizations=virts, geo_points=points)

    def collect_aggregate(self, now: float) -> AggregateStats:
        self.stale = {wid for wid in self.cluster.workers if not self.is_live(wid, now)}
        stats = self.peek_aggregate(now)
        self.cluster.last_aggregate = stats
        return stats

    # failures -------------------------------------------------------------------
    def host(self, worker_id: str, instance: ServiceInstance) -> None:
        self.instances.setdefault(worker_id, {})[instance.instance_id] = instance

    def unhost(self, worker_id: str, instance_id: str) -> None:
        self.instances.get(worker_id, {}).pop(instance_id, None)

    def mark_stale_and_fail(self, now: float) -> list[str]:
        """Declare silent workers down and fail their instances; returns the failed instance ids."""
        failed = []
        for wid in sorted(self.cluster.workers):
            if wid in self.down or self.is_live(wid, now):
                continue
            self.down.add(wid)
            self.stale.add(wid)
            for iid, inst in sorted(self.instances.get(wid, {}).items()):
                if inst.state in (State.RUNNING, State.SCHEDULED):
                    inst.fire(Event.ERRORED)
                    failed.append(iid)
            self.instances[wid] = {}
            snap = self.cluster.workers[wid]
            self.cluster.workers[wid] = snap.evolve(used=ZERO)
        return failed
