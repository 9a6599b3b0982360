"""Topology description and a synchronous facade over a simulated deployment.

:class:`OakSystem` wires one root, its clusters and their workers onto a
:class:`~oak.control.SimRuntime` and drives virtual time until each
operation has settled, so callers get plain return values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import yaml

from oak.actors import ROOT, ClusterActor, Recorder, RootActor, ServiceRecord, WorkerActor
from oak.control import SimRuntime
from oak.coords import GeoPoint, VivaldiCoordinate
from oak.errors import DeadlineExceededError, TopologyError
from oak.model import KNOWN_VIRTUALIZATIONS, CapacityVector, ServiceDescriptor
from oak.resources import TelemetryConfig
from oak.scheduler import SCHEDULERS
from oak.sla import parse_sla


@dataclass
class WorkerSpec:
    id: str
    capacity: CapacityVector
    geo: GeoPoint = GeoPoint(0.0, 0.0)
    vivaldi: VivaldiCoordinate = field(default_factory=VivaldiCoordinate)
    virtualizations: tuple[str, ...] = ("container",)


@dataclass
class ClusterSpec:
    id: str
    parent: str = ROOT
    scheduler: str = "rom_best_slack"
    workers: list[WorkerSpec] = field(default_factory=list)
    zone: tuple[GeoPoint, ...] = ()


def _worker(entry: dict, where: str) -> list[WorkerSpec]:
    allowed = {"id", "cpu", "memory", "geo", "virtualizations", "count", "gpu"}
    unknown = set(entry) - allowed
    if unknown:
        raise TopologyError(f"{where}: unknown field(s) {sorted(unknown)}")
    if "id" not in entry:
        raise TopologyError(f"{where}: worker without id")
    virts = tuple(entry.get("virtualizations", ["container"]))
    bad = set(virts) - KNOWN_VIRTUALIZATIONS
    if bad:
        raise TopologyError(f"{where}: unknown virtualization(s) {sorted(bad)}")
    cap = CapacityVector(float(entry.get("cpu", 0)), float(entry.get("memory", 0)), float(entry.get("gpu", 0)))
    if cap.cpu_cores <= 0 or cap.memory_mb <= 0:
        raise TopologyError(f"{where}: worker {entry['id']} needs positive cpu and memory")
    geo = GeoPoint(*entry.get("geo", (0.0, 0.0)))
    count = int(entry.get("count", 1))
    ids = [str(entry["id"])] if count == 1 else [f"{entry['id']}-{i}" for i in range(count)]
    return [WorkerSpec(i, cap, geo, VivaldiCoordinate(), virts) for i in ids]


def parse_topology(data: dict) -> list[ClusterSpec]:
    """Validate a ``clusters:`` document into specs, parents before children."""
    if not isinstance(data, dict) or not isinstance(data.get("clusters"), list):
        raise TopologyError("topology needs a 'clusters' list")
    specs: list[ClusterSpec] = []
    seen: set[str] = {ROOT}
    workers: set[str] = set()
    for i, entry in enumerate(data["clusters"]):
        where = f"cluster #{i}"
        unknown = set(entry) - {"id", "parent", "scheduler", "workers", "zone"}
        if unknown:
            raise TopologyError(f"{where}: unknown field(s) {sorted(unknown)}")
        cid = str(entry.get("id", ""))
        if not cid or cid in seen:
            raise TopologyError(f"{where}: missing or duplicate id {cid!r}")
        parent = str(entry.get("parent", ROOT))
        if parent not in seen:
            raise TopologyError(f"{where}: parent {parent!r} must be declared before {cid!r}")
        scheduler = entry.get("scheduler", "rom_best_slack")
        if scheduler not in SCHEDULERS:
            raise TopologyError(f"{where}: unknown scheduler {scheduler!r}")
        ws = [w for j, e in enumerate(entry.get("workers", [])) for w in _worker(e, f"{cid} worker #{j}")]
        for w in ws:
            if w.id in workers or w.id in seen:
                raise TopologyError(f"duplicate id {w.id!r}")
            workers.add(w.id)
        seen.add(cid)
        zone = tuple(GeoPoint(*p) for p in entry.get("zone", ()))
        specs.append(ClusterSpec(cid, parent, scheduler, ws, zone))
    if not specs:
        raise TopologyError("topology has no clusters")
    return specs


def load_topology(path: str | Path) -> list[ClusterSpec]:
    with open(path) as fh:
        return parse_topology(yaml.safe_load(fh))


def render_tree(specs: list[ClusterSpec]) -> str:
    """Indented text view of the hierarchy."""
    children: dict[str, list[ClusterSpec]] = {}
    for s in specs:
        children.setdefault(s.parent, []).append(s)
    lines = [ROOT]

    def walk(parent: str, depth: int) -> None:
        for s in children.get(parent, []):
            cpu = sum(w.capacity.cpu_cores for w in s.workers)
            mem = sum(w.capacity.memory_mb for w in s.workers)
            lines.append(f"{'  ' * depth}{s.id}  [{s.scheduler}] {len(s.workers)} workers, {cpu:g} cores, {mem:g} MB")
            for w in s.workers:
                lines.append(f"{'  ' * (depth + 1)}- {w.id}  {w.capacity.cpu_cores:g} cores {w.capacity.memory_mb:g} MB {','.join(w.virtualizations)}")
            walk(s.id, depth + 1)

    walk(ROOT, 1)
    return "\n".join(lines)


class OakSystem:
    """Root, clusters and workers on one virtual-time runtime."""

    def __init__(
        self,
        clusters: list[ClusterSpec],
        *,
        runtime: SimRuntime | None = None,
        config: TelemetryConfig | None = None,
        ping: Callable[[str, str], float] | None = None,
        recorder: Recorder | None = None,
        seed: int = 0,
        regions=None,
        sla_probe: Callable[[str], bool] | None = None,
    ):
        self.runtime = runtime or SimRuntime(seed=seed)
        self.config = config or TelemetryConfig()
        self.recorder = recorder or Recorder()
        self.root = RootActor(self.runtime, config=self.config, recorder=self.recorder, regions=regions)
        self.clusters: dict[str, ClusterActor] = {}
        self.workers: dict[str, WorkerActor] = {}
        for i, spec in enumerate(clusters):
            self.clusters[spec.id] = ClusterActor(
                spec.id,
                self.runtime,
                parent=spec.parent,
                index=i + 1,
                scheduler=spec.scheduler,
                config=self.config,
                ping=ping,
                seed=seed * 1000 + i,
                recorder=self.recorder,
                geo_zone=spec.zone,
            )
            for w in spec.workers:
                self.workers[w.id] = WorkerActor(
                    w.id,
                    self.runtime,
                    spec.id,
                    w.capacity,
                    geo=w.geo,
                    vivaldi=w.vivaldi,
                    virtualizations=w.virtualizations,
                    config=self.config,
                    sla_probe=sla_probe,
                )
        self.started = False

    @property
    def now(self) -> float:
        return self.runtime.now()

    def start(self) -> None:
        """Boot every actor and wait until the root has heard from every cluster."""
        self.root.start()
        for c in self.clusters.values():
            c.start()
        for w in self.workers.values():
            w.start()
        self.started = True
        top = {cid for cid, c in self.clusters.items() if c.parent == ROOT}
        nested = {cid: c.parent for cid, c in self.clusters.items() if c.parent != ROOT}
        limit = 20 * self.config.aggregate_interval_ms
        self.run_until(lambda: top <= set(self.root.clusters), limit)
        if nested:
            self.run_until(lambda: all(cid in self.clusters[p].crm.cluster.child_aggregates for cid, p in nested.items()), limit)
            # one more round so sub-cluster capacity reaches the root
            self.run(self.config.aggregate_interval_ms)

    def run(self, ms: float) -> None:
        self.runtime.run(until=self.runtime.now() + ms)

    def run_until(self, done: Callable[[], bool], limit_ms: float) -> None:
        end = self.runtime.now() + limit_ms
        while not done():
            if not self.runtime.step() or self.runtime.now() > end:
                if not done():
                    raise DeadlineExceededError(f"not settled within {limit_ms} ms of virtual time")
                return

    # operations -----------------------------------------------------------------
    def deploy(self, service: ServiceDescriptor | dict) -> ServiceRecord:
        if isinstance(service, dict):
            service = parse_sla(service)
        finished: list[ServiceRecord] = []
        self.root.submit(service, finished.append)
        limit = sum(t.convergence_time_ms for t in service.tasks) + self.config.staleness_timeout_ms
        self.run_until(lambda: bool(finished), limit)
        return finished[0]

    def instances_of(self, service_id: str, state: str = "running") -> list[str]:
        return sorted(i for i, r in self.root.instances.items() if r.service_id == service_id and r.state == state)

    def migrate(self, instance_id: str) -> str:
        """Move a running instance make-before-break; returns the replacement's id."""
        self.root.migrate(instance_id)
        self.run_until(lambda: instance_id in self.root.successor, 60_000)
        new = self.root.successor[instance_id]
        old_worker = self.workers.get(self.root.instances[instance_id].worker_id or "")
        if old_worker is not None:
            self.run_until(lambda: instance_id not in old_worker.engine.instances, 60_000)
        return new

    def replicate(self, service_id: str, count: int) -> list[dict]:
        results: list[list[dict]] = []
        self.root.replicate(service_id, count, results.append)
        self.run_until(lambda: bool(results), 120_000)
        return results[0]

    def crash_worker(self, worker_id: str) -> list[str]:
        return self.workers[worker_id].crash()

    def recover_worker(self, worker_id: str) -> None:
        self.workers[worker_id].recover()

    def partition(self, name: str, peer: str | None = None) -> None:
        self.runtime.partition(name, peer)

    def heal(self, name: str, peer: str | None = None) -> None:
        self.runtime.heal(name, peer)

    def status(self) -> dict:
        return self.root.status()
