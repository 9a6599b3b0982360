"""Root, cluster and worker orchestrators as message-driven actors.

The actors never block: every exchange with another actor is a message plus
a continuation, so the same code runs on the virtual-time simulator and on
sockets.  Wire bodies are plain JSON-able dicts.
"""

from __future__ import annotations

import itertools
import logging
import random
import time
from dataclasses import dataclass, field
from typing import Callable

from oak.control import ControlMessage, Endpoint, Kind, LivenessMonitor, Runtime
from oak.coords import GeoPoint, VivaldiCoordinate
from oak.errors import (
    DegenerateGeometryError,
    EmptyAggregateError,
    InsufficientAnchorsError,
    NoFeasibleClusterError,
    NoFeasibleWorkerError,
    OakError,
    UnresolvableError,
)
from oak.lifecycle import Event, MockWorkload, NodeEngine, ServiceInstance, State, migration_threshold
from oak.model import (
    AggregateStats,
    CapacityVector,
    DIMENSIONS,
    ClusterNode,
    DimStats,
    Placement,
    ServiceDescriptor,
    TaskRequirements,
)
from oak.overlay import Binding, ConversionTable, Policy, ServiceIP, ServiceRegistry, pick
from oak.resources import ClusterResourceManager, RegistrationRecord, TelemetryConfig
from oak.scheduler import PlacedTask, SchedulingContext, cluster_pick, root_prioritize
from oak.sla import dump_task, parse_sla, parse_task

log = logging.getLogger(__name__)

ROOT = "root"
EMPTY_STATS = AggregateStats(*(DimStats(0.0, 0.0, 0.0) for _ in DIMENSIONS), worker_count=0)
_PLACEMENT_ERRORS = (NoFeasibleWorkerError, InsufficientAnchorsError, DegenerateGeometryError, ValueError)


class Recorder:
    """Metric hooks; the default drops everything."""

    def calc(self, request_id: str, tier: str, ms: float, ops: int) -> None:
        pass

    def placement(self, row: dict) -> None:
        pass

    def event(self, name: str, **fields) -> None:
        pass


def placed_to_wire(placed: dict[int, PlacedTask]) -> dict:
    return {
        str(k): {"worker_id": p.worker_id, "geo": p.geo.to_list(), "vivaldi": p.vivaldi.to_dict()} for k, p in placed.items()
    }


def placed_from_wire(data: dict) -> dict[int, PlacedTask]:
    return {
        int(k): PlacedTask(v["worker_id"], GeoPoint(*v["geo"]), VivaldiCoordinate.from_dict(v["vivaldi"]))
        for k, v in data.items()
    }


@dataclass
class _Job:
    """One attempt to place one instance, as seen by a cluster."""

    request_id: str
    service_id: str
    instance_id: str
    task: TaskRequirements
    placed: dict[int, PlacedTask]
    excluded_workers: set[str]
    on_result: Callable[[dict], None]
    excluded_children: set[str] = field(default_factory=set)
    ranked_children: list[str] | None = None
    migration_of: str | None = None


@dataclass
class _Hosted:
    instance: ServiceInstance
    task: TaskRequirements
    placed: dict[int, PlacedTask]
    worker_id: str


# ---------------------------------------------------------------------------
# worker


class WorkerActor(Endpoint):
    """Leaf node: registers, reports telemetry and runs deployments on its NodeEngine."""

    def __init__(
        self,
        name: str,
        runtime: Runtime,
        cluster: str,
        capacity: CapacityVector,
        *,
        geo: GeoPoint = GeoPoint(0.0, 0.0),
        vivaldi: VivaldiCoordinate | None = None,
        virtualizations=("container", "mock"),
        config: TelemetryConfig | None = None,
        sla_probe: Callable[[str], bool] | None = None,
    ):
        super().__init__(name, runtime)
        self.cluster = cluster
        self.capacity = capacity
        self.geo = geo
        self.vivaldi = vivaldi or VivaldiCoordinate()
        self.virtualizations = tuple(virtualizations)
        self.config = config or TelemetryConfig()
        self.engine = NodeEngine(name, capacity)
        self.sla_probe = sla_probe
        self.crashed = False
        self.registered = False
        self._timer = None
        self.table = ConversionTable(name)
        self._resolving: dict[str, list[Callable]] = {}

    def start(self) -> None:
        self.crashed = False
        self.request(
            self.cluster,
            Kind.REGISTER_WORKER,
            {
                "worker_id": self.name,
                "capacity": self.capacity.to_dict(),
                "geo": self.geo.to_list(),
                "vivaldi": self.vivaldi.to_dict(),
                "virtualizations": list(self.virtualizations),
            },
            self._on_registered,
            lambda exc: self.runtime.call_later(self.config.update_interval_ms, self.start),
        )

    def _on_registered(self, msg: ControlMessage) -> None:
        self.engine.set_subnet(msg.body["subnet"])
        self.registered = True
        self._report()

    def _report(self) -> None:
        if self.crashed:
            return
        instances = []
        for iid in sorted(self.engine.instances):
            inst, _ = self.engine.instances[iid]
            violated = bool(self.sla_probe(iid)) if self.sla_probe else False
            instances.append({"instance_id": iid, "state": inst.state.value, "sla_violation": violated})
        self.send(
            self.cluster,
            Kind.TELEMETRY,
            {
                "worker_id": self.name,
                "used": self.engine.used.to_dict(),
                "vivaldi": self.vivaldi.to_dict(),
                "instances": instances,
            },
        )
        self._timer = self.runtime.call_later(self.config.update_interval_ms, self._report)

    def handle(self, msg: ControlMessage) -> None:
        if self.crashed:
            return
        super().handle(msg)

    def crash(self) -> list[str]:
        """Stop answering and lose every instance."""
        self.crashed = True
        self.registered = False
        if self._timer is not None:
            self._timer.cancel()
        return self.engine.crash()

    def recover(self) -> None:
        self.engine.recover()
        self.start()

    def on_deploy(self, msg: ControlMessage) -> None:
        b = msg.body
        inst = ServiceInstance(b["instance_id"], b["service_id"], int(b["microservice_id"]))
        inst.fire(Event.PLACED, Placement(self.name, tuple(b.get("cluster_path", [self.cluster]))))
        try:
            ip = self.engine.deploy(inst, MockWorkload(**b.get("workload", {})), CapacityVector.from_dict(b["capacity"]))
        except OakError as exc:
            self.reply(msg, Kind.INSTANCE_STATUS, {"instance_id": inst.instance_id, "state": "failed", "reason": str(exc)})
            return
        self.reply(msg, Kind.INSTANCE_STATUS, {"instance_id": inst.instance_id, "state": "running", "instance_ip": ip})

    def on_alarm(self, msg: ControlMessage) -> None:
        if msg.body.get("type") == "stop":
            iid = msg.body["instance_id"]
            if iid in self.engine.instances:
                self.engine.stop(iid)
                self.send(self.cluster, Kind.INSTANCE_STATUS, {"instance_id": iid, "state": "terminated"})

    # overlay --------------------------------------------------------------
    def resolve(self, address: str, callback: Callable[[str | None, str | None], None]) -> None:
        """Resolve through the local table, querying the cluster on a miss."""
        entry = self.table.entry(address)
        if entry is not None and entry.resolved:
            try:
                b = pick(entry, self.vivaldi)
                callback(b.instance_ip, b.node_endpoint)
            except UnresolvableError:
                callback(None, None)
            return
        waiting = self._resolving.setdefault(address, [])
        waiting.append(callback)
        if len(waiting) == 1:
            self.request(
                self.cluster,
                Kind.RESOLVE_QUERY,
                {"address": address},
                lambda m: self._on_resolved(address, m),
                lambda e: self._on_resolved(address, None),
            )

    def _on_resolved(self, address: str, msg: ControlMessage | None) -> None:
        callbacks = self._resolving.pop(address, [])
        if msg is None or not msg.body.get("ok"):
            for cb in callbacks:
                cb(None, None)
            return
        b = msg.body
        sip = ServiceIP(b["address"], Policy(b["policy"]), b["service_id"], b.get("instance_id"))
        self.table.install(sip, [Binding.from_dict(x) for x in b["bindings"]], int(b["version"]))
        for cb in callbacks:
            self.resolve(address, cb)

    def on_tableupdate(self, msg: ControlMessage) -> None:
        b = msg.body
        self.table.push_update(b["service_id"], [Binding.from_dict(x) for x in b["bindings"]], int(b["version"]))


# ---------------------------------------------------------------------------
# cluster


class ClusterActor(Endpoint):
    """Cluster orchestrator: owns its workers, schedules locally, delegates to sub-clusters."""

    resets_on = frozenset({Kind.REGISTER_WORKER})
    drain_ms: float = 100.0

    def __init__(
        self,
        name: str,
        runtime: Runtime,
        *,
        parent: str = ROOT,
        index: int = 1,
        scheduler: str = "rom_best_slack",
        config: TelemetryConfig | None = None,
        ping: Callable[[str, str], float] | None = None,
        seed: int = 0,
        recorder: Recorder | None = None,
        geo_zone=(),
    ):
        super().__init__(name, runtime)
        self.parent = parent
        self.node = ClusterNode(name, orchestrator_endpoint=name, index=index, scheduler=scheduler, geo_zone=tuple(geo_zone))
        self.config = config or TelemetryConfig()
        self.crm = ClusterResourceManager(self.node, self.config)
        self.ctx = SchedulingContext(ping=ping, rng=random.Random(seed))
        self.recorder = recorder or Recorder()
        self.hosted: dict[str, _Hosted] = {}
        self.outbox: list[dict] = []
        self.children = LivenessMonitor(self.config.aggregate_interval_ms, self._child_down)
        self._watchdogs: dict[str, object] = {}
        self._ids = itertools.count(1)
        self.resolve_cache: dict[str, dict] = {}
        self.table_subscribers: dict[str, set[str]] = {}
        self._resolving: dict[str, list[ControlMessage]] = {}
        self.failed_at: dict[str, float] = {}

    def start(self) -> None:
        self.runtime.call_later(self.config.aggregate_interval_ms, self._tick)

    # registration & telemetry ---------------------------------------------
    def on_registerworker(self, msg: ControlMessage) -> None:
        b = msg.body
        rec = RegistrationRecord(
            b["worker_id"],
            CapacityVector.from_dict(b["capacity"]),
            frozenset(b["virtualizations"]),
            GeoPoint(*b["geo"]),
            self.runtime.now(),
            VivaldiCoordinate.from_dict(b["vivaldi"]),
        )
        try:
            subnet = self.crm.register_worker(rec, self.runtime.now())
        except OakError as exc:
            log.warning("%s rejects %s: %s", self.name, rec.id, exc)
            return
        self._arm_watchdog(rec.id)
        self.reply(msg, Kind.REGISTER_WORKER, {"subnet": str(subnet)})

    def _arm_watchdog(self, wid: str) -> None:
        old = self._watchdogs.pop(wid, None)
        if old is not None:
            old.cancel()
        # fire just after the worker's silence exceeds the staleness timeout
        self._watchdogs[wid] = self.runtime.call_later(self.config.staleness_timeout_ms + 1e-3, self._check_workers)

    def on_telemetry(self, msg: ControlMessage) -> None:
        b = msg.body
        wid = b["worker_id"]
        if wid not in self.crm.records:
            return
        try:
            self.crm.apply_telemetry_message({**b, "seq": msg.seq}, self.runtime.now())
        except OakError as exc:
            log.warning("%s: bad telemetry from %s: %s", self.name, wid, exc)
            return
        self._arm_watchdog(wid)
        for report in b.get("instances", []):
            hosted = self.hosted.get(report["instance_id"])
            if hosted is None or hosted.instance.state is not State.RUNNING:
                continue
            streak = hosted.instance.report(bool(report.get("sla_violation")))
            if streak >= migration_threshold(hosted.task.rigidness):
                hosted.instance.violation_streak = 0
                self.migrate(hosted.instance.instance_id)

    def on_instancestatus(self, msg: ControlMessage) -> None:
        b = msg.body
        if "migration_of" in b:
            # a sub-cluster's migration report on its way to the root
            report = {**b, "cluster_path": [self.name] + list(b["cluster_path"])}
            self.request(self.parent, Kind.INSTANCE_STATUS, report, lambda m: self.reply(msg, Kind.INSTANCE_STATUS, m.body))
            return
        hosted = self.hosted.get(b["instance_id"])
        if hosted is None:
            return
        if b["state"] == "terminated" and hosted.instance.state is State.RUNNING:
            hosted.instance.fire(Event.STOPPED)
            self._note_hosted(hosted, "terminated")
            self.crm.unhost(hosted.worker_id, hosted.instance.instance_id)
            self.crm.release(hosted.worker_id, hosted.task.capacity)

    def _check_workers(self) -> None:
        now = self.runtime.now()
        for iid in self.crm.mark_stale_and_fail(now):
            hosted = self.hosted[iid]
            self.failed_at[iid] = now
            self.recorder.event("instance_failed", instance_id=iid, worker_id=hosted.worker_id, cluster=self.name, time=now)
            self._note_hosted(hosted, "failed")
            self._reschedule(hosted)

    # aggregation -------------------------------------------------------------
    def _tick(self) -> None:
        now = self.runtime.now()
        self.children.check(now)
        try:
            stats = self.crm.collect_aggregate(now)
        except EmptyAggregateError:
            # nothing to offer, but still alive
            stats = EMPTY_STATS if self.crm.records or self.node.child_clusters else None
        if stats is not None:
            body = {"cluster_id": self.name, "stats": stats.to_dict(), "instances": self.outbox}
            self.outbox = []
            self.send(self.parent, Kind.AGGREGATE_PUSH, body)
        self.runtime.call_later(self.config.aggregate_interval_ms, self._tick)

    def on_aggregatepush(self, msg: ControlMessage) -> None:
        b = msg.body
        child = b["cluster_id"]
        self.children.seen(child, self.runtime.now())
        self.crm.update_child_aggregate(child, AggregateStats.from_dict(b["stats"]))
        # sub-cluster instance changes travel on up with our own push
        self.outbox.extend(b.get("instances", []))

    def _child_down(self, child: str) -> None:
        self.crm.drop_child(child)

    def _note(self, old: ServiceInstance, instance_id: str, state: str, worker_id: str, **extra) -> None:
        """Queue an instance change for the next aggregate push."""
        row = {
            "service_id": old.service_id,
            "instance_id": instance_id,
            "microservice_id": old.microservice_id,
            "state": state,
            "worker_id": worker_id,
            "cluster": self.name,
        }
        row.update(extra)
        self.outbox.append(row)

    def _note_hosted(self, hosted: _Hosted, state: str) -> None:
        self._note(hosted.instance, hosted.instance.instance_id, state, hosted.worker_id)

    def _note_result(self, old: ServiceInstance, result: dict, **extra) -> None:
        self._note(
            old,
            result["instance_id"],
            "running",
            result["worker_id"],
            instance_ip=result["instance_ip"],
            cluster_path=result["cluster_path"],
            **extra,
        )

    # scheduling ------------------------------------------------------------------
    def on_schedulerequest(self, msg: ControlMessage) -> None:
        b = msg.body
        job = _Job(
            request_id=b["request_id"],
            service_id=b["service_id"],
            instance_id=b["instance_id"],
            task=parse_task(b["task"]),
            placed=placed_from_wire(b.get("placed", {})),
            excluded_workers=set(b.get("excluded_workers", [])),
            on_result=lambda result: self.reply(msg, Kind.SCHEDULE_RESPONSE, result),
            migration_of=b.get("migration_of"),
        )
        self._place(job)

    def _place(self, job: _Job) -> None:
        now = self.runtime.now()
        workers = [w for w in self.crm.live_workers(now) if w.worker_id not in job.excluded_workers]
        wid = None
        if workers:
            self.ctx.ops = 0
            t0 = time.perf_counter()
            try:
                wid = cluster_pick(self.node.scheduler, workers, job.task, job.placed, self.ctx)
            except _PLACEMENT_ERRORS:
                wid = None
            ms = (time.perf_counter() - t0) * 1000.0
            self.recorder.calc(job.request_id, self.name, ms, self.ctx.ops or len(workers))
        if wid is not None:
            self._deploy(job, wid)
        else:
            self._delegate_down(job)

    def _deploy(self, job: _Job, wid: str) -> None:
        self.crm.reserve(wid, job.task.capacity)
        inst = ServiceInstance(job.instance_id, job.service_id, job.task.microservice_id, migration_of=job.migration_of)
        path = [self.name]
        inst.fire(Event.PLACED, Placement(wid, tuple(path), self.runtime.now()))
        body = {
            "instance_id": job.instance_id,
            "service_id": job.service_id,
            "microservice_id": job.task.microservice_id,
            "capacity": job.task.capacity.to_dict(),
            "workload": {"kind": "sleep"},
            "cluster_path": path,
        }
        self.request(
            wid,
            Kind.DEPLOY,
            body,
            lambda m: self._on_deploy_status(job, wid, inst, m),
            lambda exc: self._on_deploy_error(job, wid, inst),
            timeout_ms=self.config.staleness_timeout_ms,
        )

    def _on_deploy_status(self, job: _Job, wid: str, inst: ServiceInstance, msg: ControlMessage) -> None:
        if msg.body["state"] != "running":
            self._on_deploy_error(job, wid, inst)
            return
        inst.instance_ip = msg.body["instance_ip"]
        inst.fire(Event.STARTED)
        hosted = _Hosted(inst, job.task, job.placed, wid)
        self.hosted[inst.instance_id] = hosted
        self.crm.host(wid, inst)
        snap = self.node.workers[wid]
        job.on_result(
            {
                "request_id": job.request_id,
                "ok": True,
                "instance_id": inst.instance_id,
                "worker_id": wid,
                "cluster_path": [self.name],
                "instance_ip": inst.instance_ip,
                "geo": snap.geo.to_list(),
                "vivaldi": snap.vivaldi.to_dict(),
            }
        )

    def _on_deploy_error(self, job: _Job, wid: str, inst: ServiceInstance) -> None:
        self.crm.release(wid, job.task.capacity)
        inst.fire(Event.ERRORED)
        job.excluded_workers.add(wid)
        self._place(job)

    def _delegate_down(self, job: _Job) -> None:
        if job.ranked_children is None:
            pairs = [
                (c, s)
                for c, s in sorted(self.node.child_aggregates.items())
                if c not in job.excluded_children and c not in self.children.down
            ]
            try:
                ranked = root_prioritize(job.task, pairs) if pairs else []
            except NoFeasibleClusterError:
                ranked = []
            job.ranked_children = [p.cluster_id for p in ranked if p.feasible]
        while job.ranked_children:
            child = job.ranked_children.pop(0)
            if child in job.excluded_children:
                continue
            self.request(
                child,
                Kind.SCHEDULE_REQUEST,
                self._request_body(job),
                lambda m, c=child: self._on_child_result(job, c, m.body),
                lambda exc, c=child: self._on_child_result(job, c, {"ok": False, "reason": str(exc)}),
            )
            return
        job.on_result({"request_id": job.request_id, "ok": False, "reason": f"{self.name} exhausted"})

    def _on_child_result(self, job: _Job, child: str, result: dict) -> None:
        if result.get("ok"):
            job.on_result({**result, "cluster_path": [self.name] + list(result["cluster_path"])})
            return
        job.excluded_children.add(child)
        self._delegate_down(job)

    @staticmethod
    def _request_body(job: _Job) -> dict:
        return {
            "request_id": job.request_id,
            "service_id": job.service_id,
            "instance_id": job.instance_id,
            "task": dump_task(job.task),
            "placed": placed_to_wire(job.placed),
            "excluded_workers": sorted(job.excluded_workers),
            "migration_of": job.migration_of,
        }

    # failures & migration ---------------------------------------------------
    def _new_id(self, old: str) -> str:
        return f"{old.split('~')[0]}~{self.name}.{next(self._ids)}"

    def _reschedule(self, hosted: _Hosted) -> None:
        old = hosted.instance
        job = _Job(
            request_id=f"{old.instance_id}/reschedule",
            service_id=old.service_id,
            instance_id=self._new_id(old.instance_id),
            task=hosted.task,
            placed=hosted.placed,
            excluded_workers={hosted.worker_id},
            on_result=lambda r: self._after_local_reschedule(hosted, r),
        )
        self.recorder.event("reschedule_local", instance_id=old.instance_id, cluster=self.name, time=self.runtime.now())
        self._place(job)

    def _after_local_reschedule(self, hosted: _Hosted, result: dict) -> None:
        old = hosted.instance
        if result.get("ok"):
            self._note_result(old, result, replaces=old.instance_id)
            self.recorder.event("rescheduled", instance_id=old.instance_id, new_instance_id=result["instance_id"],
                                worker_id=result["worker_id"], scope="local", time=self.runtime.now())
            return
        self.send(
            self.parent,
            Kind.ALARM,
            {
                "type": "reschedule",
                "service_id": old.service_id,
                "instance_id": old.instance_id,
                "task": dump_task(hosted.task),
                "placed": placed_to_wire(hosted.placed),
                "failed_worker": hosted.worker_id,
            },
        )

    def migrate(self, instance_id: str) -> None:
        """Make-before-break move of a running instance, local first."""
        hosted = self.hosted[instance_id]
        old = hosted.instance
        job = _Job(
            request_id=f"{instance_id}/migrate",
            service_id=old.service_id,
            instance_id=self._new_id(instance_id),
            task=hosted.task,
            placed=hosted.placed,
            excluded_workers={hosted.worker_id},
            on_result=lambda r: self._after_migration(hosted, r),
            migration_of=instance_id,
        )
        self._place(job)

    def _after_migration(self, hosted: _Hosted, result: dict) -> None:
        old = hosted.instance
        if not result.get("ok"):
            self.send(
                self.parent,
                Kind.ALARM,
                {
                    "type": "migrate_escalate",
                    "service_id": old.service_id,
                    "instance_id": old.instance_id,
                    "task": dump_task(hosted.task),
                    "placed": placed_to_wire(hosted.placed),
                    "worker_id": hosted.worker_id,
                },
            )
            return
        report = {
            "service_id": old.service_id,
            "microservice_id": old.microservice_id,
            "migration_of": old.instance_id,
            **{k: result[k] for k in ("instance_id", "worker_id", "instance_ip", "cluster_path")},
        }
        # clients switch over before the original goes away
        self.request(
            self.parent,
            Kind.INSTANCE_STATUS,
            report,
            lambda m: self.runtime.call_later(self.drain_ms, self._retire, hosted),
            lambda exc: self._retire(hosted),
        )

    def _retire(self, hosted: _Hosted) -> None:
        self.send(hosted.worker_id, Kind.ALARM, {"type": "stop", "instance_id": hosted.instance.instance_id})

    def on_alarm(self, msg: ControlMessage) -> None:
        b = msg.body
        kind = b.get("type")
        if kind in ("reschedule", "migrate_escalate"):
            # sub-cluster could not cope locally: pass it up
            self.send(self.parent, Kind.ALARM, b)
        elif kind == "stop":
            hosted = self.hosted.get(b["instance_id"])
            if hosted is not None:
                self.send(hosted.worker_id, Kind.ALARM, b)
            else:
                for child in sorted(self.node.child_aggregates):
                    self.send(child, Kind.ALARM, b)
        elif kind == "migrate":
            if b["instance_id"] in self.hosted:
                self.migrate(b["instance_id"])
            else:
                for child in sorted(self.node.child_aggregates):
                    self.send(child, Kind.ALARM, b)

    # overlay relay ---------------------------------------------------------------
    def on_resolvequery(self, msg: ControlMessage) -> None:
        address = msg.body["address"]
        cached = self.resolve_cache.get(address)
        if cached is not None:
            self.table_subscribers.setdefault(cached["service_id"], set()).add(msg.sender)
            self.reply(msg, Kind.RESOLVE_REPLY, cached)
            return
        waiting = self._resolving.setdefault(address, [])
        waiting.append(msg)
        if len(waiting) == 1:
            self.request(
                self.parent,
                Kind.RESOLVE_QUERY,
                {"address": address},
                lambda m: self._answer(address, m.body),
                lambda exc: self._answer(address, {"ok": False, "reason": str(exc)}),
            )

    def _answer(self, address: str, body: dict) -> None:
        if body.get("ok"):
            self.resolve_cache[address] = body
        for q in self._resolving.pop(address, []):
            if body.get("ok"):
                self.table_subscribers.setdefault(body["service_id"], set()).add(q.sender)
            self.reply(q, Kind.RESOLVE_REPLY, body)

    def on_tableupdate(self, msg: ControlMessage) -> None:
        b = msg.body
        for addr, cached in self.resolve_cache.items():
            if cached["service_id"] == b["service_id"]:
                cached.update(bindings=b["bindings"], version=b["version"])
        for sub in sorted(self.table_subscribers.get(b["service_id"], ())):
            self.send(sub, Kind.TABLE_UPDATE, b)


# ---------------------------------------------------------------------------
# root


@dataclass
class InstanceRecord:
    instance_id: str
    service_id: str
    microservice_id: int
    state: str
    cluster: str | None = None
    worker_id: str | None = None
    instance_ip: str | None = None
    cluster_path: list[str] = field(default_factory=list)


@dataclass
class ServiceRecord:
    descriptor: ServiceDescriptor
    placed: dict[int, PlacedTask] = field(default_factory=dict)
    pending: list[TaskRequirements] = field(default_factory=list)
    failed: dict[int, str] = field(default_factory=dict)
    done: Callable[[ServiceRecord], None] | None = None

    @property
    def complete(self) -> bool:
        return not self.pending


@dataclass
class _RootJob:
    request_id: str
    service_id: str
    instance_id: str
    task: TaskRequirements
    placed: dict[int, PlacedTask]
    excluded_workers: set[str]
    deadline: float
    on_done: Callable[[dict], None]
    ranked: list[str] = field(default_factory=list)
    tried: list[str] = field(default_factory=list)
    migration_of: str | None = None


class RootActor(Endpoint):
    """Root orchestrator: ranks clusters from their aggregates and drives delegation."""

    def __init__(
        self,
        runtime: Runtime,
        *,
        name: str = ROOT,
        config: TelemetryConfig | None = None,
        recorder: Recorder | None = None,
        regions=None,
    ):
        super().__init__(name, runtime)
        self.config = config or TelemetryConfig()
        self.recorder = recorder or Recorder()
        self.regions = regions
        self.clusters: dict[str, AggregateStats] = {}
        self.liveness = LivenessMonitor(self.config.aggregate_interval_ms, self._cluster_down)
        self.services: dict[str, ServiceRecord] = {}
        self.instances: dict[str, InstanceRecord] = {}
        self.registry = ServiceRegistry(name="root")
        self.table_subscribers: dict[str, set[str]] = {}
        # instances the root re-placed itself after their cluster went quiet
        self.rerouted: set[str] = set()
        # old instance id -> the instance that took over from it
        self.successor: dict[str, str] = {}
        self._ids = itertools.count(1)

    def start(self) -> None:
        self.runtime.call_later(self.config.aggregate_interval_ms, self._tick)

    def _tick(self) -> None:
        self.liveness.check(self.runtime.now())
        self.runtime.call_later(self.config.aggregate_interval_ms, self._tick)

    @property
    def live_clusters(self) -> list[str]:
        return sorted(c for c in self.clusters if c not in self.liveness.down)

    # cluster membership ------------------------------------------------------------
    def on_aggregatepush(self, msg: ControlMessage) -> None:
        b = msg.body
        cid = b["cluster_id"]
        returning = self.liveness.seen(cid, self.runtime.now())
        if cid not in self.clusters:
            self.recorder.event("cluster_registered", cluster=cid, time=self.runtime.now())
        self.clusters[cid] = AggregateStats.from_dict(b["stats"])
        if returning:
            self.recorder.event("cluster_returned", cluster=cid, time=self.runtime.now())
            # whatever we re-placed while it was gone must not run twice
            for rec in sorted(self.instances.values(), key=lambda r: r.instance_id):
                if rec.cluster == cid and rec.instance_id in self.rerouted:
                    self.send(cid, Kind.ALARM, {"type": "stop", "instance_id": rec.instance_id})
        for change in b.get("instances", []):
            self._apply_change(cid, change)

    def _apply_change(self, cid: str, change: dict) -> None:
        iid = change["instance_id"]
        rec = self.instances.get(iid)
        state = change["state"]
        if state == "running":
            if change.get("replaces") in self.rerouted:
                # the root already re-placed this one; retire the duplicate
                self.send(cid, Kind.ALARM, {"type": "stop", "instance_id": iid})
                return
            if rec is None:
                rec = InstanceRecord(iid, change["service_id"], int(change["microservice_id"]), "running")
                self.instances[iid] = rec
            rec.state = "running"
            rec.cluster = cid
            rec.worker_id = change.get("worker_id")
            rec.instance_ip = change.get("instance_ip")
            rec.cluster_path = list(change.get("cluster_path", [cid]))
            self._bind(rec)
            if change.get("replaces"):
                self.successor[change["replaces"]] = iid
        elif rec is not None and state in ("failed", "terminated") and rec.state == "running":
            rec.state = state
            self._unbind(rec)

    def _cluster_down(self, cid: str) -> None:
        now = self.runtime.now()
        self.recorder.event("cluster_down", cluster=cid, time=now)
        self.fail_pending(cid)
        for rec in sorted(self.instances.values(), key=lambda r: r.instance_id):
            if rec.cluster == cid and rec.state == "running":
                rec.state = "failed"
                self._unbind(rec)
                self.rerouted.add(rec.instance_id)
                svc = self.services.get(rec.service_id)
                if svc is None:
                    continue
                task = svc.descriptor.task(rec.microservice_id)
                self._reschedule_from_root(rec, task, dict(svc.placed), set())

    # overlay bookkeeping ---------------------------------------------------------------
    def _bindings(self, service_id: str) -> list[Binding]:
        return list(self.registry.root.bindings.get(service_id, []))

    def _bind(self, rec: InstanceRecord) -> None:
        if rec.instance_ip is None:
            return
        self.registry.add_binding(rec.service_id, Binding(rec.instance_ip, rec.worker_id or "", VivaldiCoordinate(), rec.instance_id))
        self._push_table(rec.service_id)

    def _unbind(self, rec: InstanceRecord) -> None:
        if rec.instance_ip is None:
            return
        self.registry.remove_binding(rec.service_id, rec.instance_ip)
        self._push_table(rec.service_id)

    def _push_table(self, service_id: str) -> None:
        body = {
            "service_id": service_id,
            "bindings": [b.to_dict() for b in self._bindings(service_id)],
            "version": self.registry.versions.get(service_id, 0),
        }
        for cid in sorted(self.table_subscribers.get(service_id, ())):
            self.send(cid, Kind.TABLE_UPDATE, body)

    def on_resolvequery(self, msg: ControlMessage) -> None:
        address = msg.body["address"]
        try:
            sip, bindings, version = self.registry.query(address)
        except UnresolvableError as exc:
            self.reply(msg, Kind.RESOLVE_REPLY, {"ok": False, "reason": str(exc)})
            return
        self.table_subscribers.setdefault(sip.service_id, set()).add(msg.sender)
        self.reply(
            msg,
            Kind.RESOLVE_REPLY,
            {
                "ok": True,
                "address": sip.address,
                "policy": sip.policy.value,
                "service_id": sip.service_id,
                "instance_id": sip.instance_id,
                "bindings": [b.to_dict() for b in bindings],
                "version": version,
            },
        )

    # deployment --------------------------------------------------------------------
    def submit(self, service: ServiceDescriptor, done: Callable[[ServiceRecord], None] | None = None) -> ServiceRecord:
        rec = ServiceRecord(service, pending=list(service.tasks), done=done)
        self.services[service.service_id] = rec
        self.registry.register_service(service.service_id)
        self._next_task(rec)
        return rec

    def _next_task(self, rec: ServiceRecord) -> None:
        for task in list(rec.pending):
            if all(c.target_microservice_id in rec.placed for c in task.s2s_constraints):
                rec.pending.remove(task)
                sid = rec.descriptor.service_id
                iid = f"{sid}.{task.microservice_id}.{next(self._ids)}"
                self._start_job(
                    _RootJob(
                        request_id=f"{sid}/{task.microservice_id}",
                        service_id=sid,
                        instance_id=iid,
                        task=task,
                        placed=dict(rec.placed),
                        excluded_workers=set(),
                        deadline=self.runtime.now() + task.convergence_time_ms,
                        on_done=lambda result, t=task: self._task_done(rec, t, result),
                    )
                )
                return
        for task in rec.pending:
            rec.failed[task.microservice_id] = "dependency never placed"
        rec.pending = []
        if rec.done:
            rec.done(rec)

    def _task_done(self, rec: ServiceRecord, task: TaskRequirements, result: dict) -> None:
        if result.get("ok"):
            rec.placed[task.microservice_id] = PlacedTask(
                result["worker_id"], GeoPoint(*result["geo"]), VivaldiCoordinate.from_dict(result["vivaldi"])
            )
        else:
            rec.failed[task.microservice_id] = result.get("reason", "failed")
        if rec.pending:
            self._next_task(rec)
        elif rec.done:
            rec.done(rec)

    def _start_job(self, job: _RootJob) -> None:
        candidates = [(c, self.clusters[c]) for c in self.live_clusters]
        t0 = time.perf_counter()
        try:
            ranked = root_prioritize(job.task, candidates, self.regions) if candidates else []
        except NoFeasibleClusterError:
            ranked = []
        ms = (time.perf_counter() - t0) * 1000.0
        self.recorder.calc(job.request_id, self.name, ms, len(candidates))
        job.ranked = [p.cluster_id for p in ranked if p.feasible]
        self._try_next(job)

    def _try_next(self, job: _RootJob) -> None:
        if self.runtime.now() > job.deadline:
            self._finish(job, {"ok": False, "reason": "convergence time elapsed"})
            return
        while job.ranked:
            cid = job.ranked.pop(0)
            if cid in self.liveness.down:
                continue
            job.tried.append(cid)
            self.request(
                cid,
                Kind.SCHEDULE_REQUEST,
                {
                    "request_id": job.request_id,
                    "service_id": job.service_id,
                    "instance_id": job.instance_id,
                    "task": dump_task(job.task),
                    "placed": placed_to_wire(job.placed),
                    "excluded_workers": sorted(job.excluded_workers),
                    "migration_of": job.migration_of,
                },
                lambda m: self._on_response(job, m.body),
                lambda exc: self._try_next(job),
                # a cluster may retry several workers before answering
                timeout_ms=max(job.deadline - self.runtime.now(), 1.0),
            )
            return
        self._finish(job, {"ok": False, "reason": "exhausted"})

    def _on_response(self, job: _RootJob, body: dict) -> None:
        if not body.get("ok"):
            self._try_next(job)
            return
        cid = body["cluster_path"][0]
        rec = InstanceRecord(
            body["instance_id"],
            job.service_id,
            job.task.microservice_id,
            "running",
            cid,
            body["worker_id"],
            body["instance_ip"],
            list(body["cluster_path"]),
        )
        self.instances[rec.instance_id] = rec
        self._bind(rec)
        self._finish(job, body)

    def _finish(self, job: _RootJob, result: dict) -> None:
        self.recorder.placement(
            {
                "request_id": job.request_id,
                "service_id": job.service_id,
                "microservice_id": job.task.microservice_id,
                "instance_id": result.get("instance_id", job.instance_id),
                "ok": bool(result.get("ok")),
                "worker_id": result.get("worker_id", ""),
                "cluster_path": "/".join(result.get("cluster_path", [])),
                "clusters_tried": len(job.tried),
                "reason": result.get("reason", ""),
                "time": self.runtime.now(),
            }
        )
        job.on_done(result)

    # failures forwarded from clusters -----------------------------------------------
    def on_alarm(self, msg: ControlMessage) -> None:
        b = msg.body
        if b.get("type") == "reschedule":
            rec = self.instances.get(b["instance_id"])
            if rec is None:
                return
            rec.state = "failed"
            self._unbind(rec)
            self.recorder.event("reschedule_escalated", instance_id=rec.instance_id, time=self.runtime.now())
            self._reschedule_from_root(rec, parse_task(b["task"]), placed_from_wire(b.get("placed", {})), {b["failed_worker"]})
        elif b.get("type") == "migrate_escalate":
            old = self.instances.get(b["instance_id"])
            if old is None:
                return
            self._migrate_from_root(old, parse_task(b["task"]), placed_from_wire(b.get("placed", {})), b["worker_id"])
        elif b.get("type") == "status":
            self.reply(msg, Kind.ALARM, {"type": "status", **self.status()})
        elif b.get("type") == "deploy":
            service = parse_sla(b["sla"])
            self.submit(service, lambda rec, m=msg: self.reply(m, Kind.ALARM, {"type": "deployed", **self.service_status(rec)}))

    def on_instancestatus(self, msg: ControlMessage) -> None:
        b = msg.body
        if "migration_of" not in b:
            return
        self._switch_over(b)
        self.reply(msg, Kind.INSTANCE_STATUS, {"ok": True})

    def _switch_over(self, b: dict) -> None:
        """Bind a migrated instance and drop its original from every table."""
        path = list(b["cluster_path"])
        rec = InstanceRecord(
            b["instance_id"], b["service_id"], int(b["microservice_id"]), "running", path[0], b["worker_id"], b["instance_ip"], path
        )
        self.instances[rec.instance_id] = rec
        self._bind(rec)
        self.successor[b["migration_of"]] = rec.instance_id
        old = self.instances.get(b["migration_of"])
        if old is not None and old.state == "running":
            old.state = "terminated"
            self._unbind(old)
        self.recorder.event("migrated", instance_id=b["migration_of"], new_instance_id=rec.instance_id,
                            worker_id=rec.worker_id, time=self.runtime.now())

    def _migrate_from_root(self, old: InstanceRecord, task: TaskRequirements, placed, worker_id: str) -> None:
        def done(result):
            if not result.get("ok"):
                self.recorder.event("migration_failed", instance_id=old.instance_id, time=self.runtime.now())
                return
            # _on_response already bound the new instance
            self.successor[old.instance_id] = result["instance_id"]
            if old.state == "running":
                old.state = "terminated"
                self._unbind(old)
            self.recorder.event("migrated", instance_id=old.instance_id, new_instance_id=result["instance_id"],
                                worker_id=result["worker_id"], time=self.runtime.now())
            stop = {"type": "stop", "instance_id": old.instance_id}
            self.runtime.call_later(ClusterActor.drain_ms, self.send, old.cluster, Kind.ALARM, stop)

        self._start_job(
            _RootJob(
                request_id=f"{old.instance_id}/migrate",
                service_id=old.service_id,
                instance_id=f"{old.instance_id.split('~')[0]}~root.{next(self._ids)}",
                task=task,
                placed=placed,
                excluded_workers={worker_id},
                deadline=self.runtime.now() + task.convergence_time_ms,
                on_done=done,
                migration_of=old.instance_id,
            )
        )

    def _reschedule_from_root(self, rec: InstanceRecord, task: TaskRequirements, placed, excluded_workers) -> None:
        new_id = f"{rec.instance_id.split('~')[0]}~root.{next(self._ids)}"

        def done(result, old=rec):
            if result.get("ok"):
                self.successor[old.instance_id] = result["instance_id"]
            self.recorder.event(
                "rescheduled",
                instance_id=old.instance_id,
                new_instance_id=result.get("instance_id", ""),
                worker_id=result.get("worker_id", ""),
                scope="root" if result.get("ok") else "exhausted",
                time=self.runtime.now(),
            )

        self._start_job(
            _RootJob(
                request_id=f"{rec.instance_id}/escalated",
                service_id=rec.service_id,
                instance_id=new_id,
                task=task,
                placed=placed,
                excluded_workers=set(excluded_workers),
                deadline=self.runtime.now() + task.convergence_time_ms,
                on_done=done,
            )
        )

    def migrate(self, instance_id: str) -> None:
        rec = self.instances[instance_id]
        self.send(rec.cluster, Kind.ALARM, {"type": "migrate", "instance_id": instance_id})

    def replicate(self, service_id: str, count: int, done: Callable[[list[dict]], None] | None = None) -> None:
        """Schedule ``count`` extra instances of every task of ``service_id``."""
        svc = self.services[service_id]
        results: list[dict] = []
        total = count * len(svc.descriptor.tasks)

        def collect(result):
            results.append(result)
            if len(results) == total and done:
                done(results)

        for task in svc.descriptor.tasks:
            for _ in range(count):
                self._start_job(
                    _RootJob(
                        request_id=f"{service_id}/{task.microservice_id}/replica",
                        service_id=service_id,
                        instance_id=f"{service_id}.{task.microservice_id}.{next(self._ids)}",
                        task=task,
                        placed=dict(svc.placed),
                        excluded_workers=set(),
                        deadline=self.runtime.now() + task.convergence_time_ms,
                        on_done=collect,
                    )
                )

    # reporting -----------------------------------------------------------------------
    def service_status(self, rec: ServiceRecord) -> dict:
        sid = rec.descriptor.service_id
        return {
            "service_id": sid,
            "placed": {str(k): v.worker_id for k, v in sorted(rec.placed.items())},
            "failed": {str(k): v for k, v in sorted(rec.failed.items())},
            "service_ips": {p.value: a for p, a in self.registry.root.by_service.get(sid, {}).items()},
        }

    def status(self) -> dict:
        return {
            "clusters": {
                c: {
                    "down": c in self.liveness.down,
                    "workers": s.worker_count,
                    "cpu_available": round(s.cpu.sum, 3),
                    "memory_available": round(s.memory.sum, 3),
                }
                for c, s in sorted(self.clusters.items())
            },
            "instances": {
                i: {"service": r.service_id, "state": r.state, "cluster": r.cluster, "worker": r.worker_id, "ip": r.instance_ip}
                for i, r in sorted(self.instances.items())
            },
        }
