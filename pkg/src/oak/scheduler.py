"""Delegated t-step scheduling: root cluster ranking, ROM and LDP worker selection."""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from oak.coords import GeoPoint, RttSample, VivaldiCoordinate, dist_euc, dist_gc, median_ping, trilaterate
from oak.errors import (
    DeadlineExceededError,
    DependencyUnplacedError,
    EmptyAggregateError,
    ExhaustedError,
    NoFeasibleClusterError,
    NoFeasibleWorkerError,
    SLAFormatError,
)
from oak.lifecycle import ServiceInstance, State
from oak.model import (
    DIMENSIONS,
    AggregateStats,
    InfrastructureTree,
    Placement,
    ServiceDescriptor,
    TaskRequirements,
    WorkerSnapshot,
    aggregate,
)
from oak.sla import RegionRegistry

__all__ = [
    "ClusterPriority",
    "DelegationTrace",
    "PlacedTask",
    "Placement",
    "ScheduleRequest",
    "SchedulingContext",
    "cluster_pick",
    "delegate",
    "ldp_select",
    "reschedule",
    "rom_select",
    "root_prioritize",
    "schedule_service",
]


def _now_ms() -> float:
    return time.monotonic() * 1000.0


@dataclass
class ScheduleRequest:
    task: TaskRequirements
    service_id: str
    attempt: int = 0
    excluded_clusters: set[str] = field(default_factory=set)
    excluded_workers: set[str] = field(default_factory=set)
    deadline: float | None = None

    @classmethod
    def create(cls, task: TaskRequirements, service_id: str, now: float | None = None, **kw) -> ScheduleRequest:
        now = _now_ms() if now is None else now
        return cls(task, service_id, deadline=now + task.convergence_time_ms, **kw)


@dataclass(frozen=True)
class ClusterPriority:
    cluster_id: str
    score: float
    feasible: bool


@dataclass(frozen=True)
class PlacedTask:
    """Where an already-placed microservice runs, as LDP's S2S filter needs it."""

    worker_id: str
    geo: GeoPoint
    vivaldi: VivaldiCoordinate


@dataclass
class SchedulingContext:
    """Side inputs to the cluster schedulers.

    ``ping(worker_id, endpoint)`` measures a single RTT in ms; LDP takes the
    median of three.  ``rng`` drives the random probe sample.
    """

    ping: Callable[[str, str], float] | None = None
    rng: random.Random = field(default_factory=lambda: random.Random(0))
    regions: RegionRegistry | None = None
    ops: int = 0


# ---------------------------------------------------------------------------
# root level


def _zone_within(location: GeoPoint, zone: Sequence[GeoPoint], threshold_km: float, regions_poly=None) -> bool:
    if not zone:
        return True
    from shapely.geometry import MultiPoint, Point

    hull = MultiPoint([(p.longitude_deg, p.latitude_deg) for p in zone]).convex_hull
    if hull.covers(Point(location.longitude_deg, location.latitude_deg)):
        return True
    return min(dist_gc(location, p) for p in zone) <= threshold_km


def cluster_feasible(task: TaskRequirements, stats: AggregateStats, regions: RegionRegistry | None = None) -> bool:
    for d in DIMENSIONS:
        if stats.dim(d).sum < task.capacity.dim(d):
            return False
    if task.virtualization not in stats.supported_virtualizations:
        return False
    if task.area is not None:
        if regions is None or task.area not in regions:
            raise SLAFormatError(f"unknown area {task.area!r}")
        if not regions.overlaps(task.area, stats.geo_zone):
            return False
    if task.location is not None and task.threshold is not None:
        if not _zone_within(task.location, stats.geo_zone, task.threshold):
            return False
    return True


def priority_score(task: TaskRequirements, stats: AggregateStats) -> float:
    """Mean slack over the capacity dimensions, each normalised by the demand."""
    return sum((stats.dim(d).mean - task.capacity.dim(d)) / max(task.capacity.dim(d), 1.0) for d in DIMENSIONS)


def root_prioritize(
    task: TaskRequirements,
    children: Iterable[tuple[str, AggregateStats]],
    regions: RegionRegistry | None = None,
) -> list[ClusterPriority]:
    """Rank child clusters for ``task``; infeasible ones trail with score -inf."""
    children = list(children)
    if not children:
        raise ValueError("no child clusters to rank")
    out = []
    for cid, stats in children:
        if cluster_feasible(task, stats, regions):
            out.append(ClusterPriority(cid, priority_score(task, stats), True))
        else:
            out.append(ClusterPriority(cid, -math.inf, False))
    if not any(p.feasible for p in out):
        raise NoFeasibleClusterError(f"no cluster can host microservice {task.microservice_id}")
    out.sort(key=lambda p: (not p.feasible, -p.score, p.cluster_id))
    return out


# ---------------------------------------------------------------------------
# cluster level


def rom_feasible(worker: WorkerSnapshot, task: TaskRequirements) -> bool:
    avail = worker.available()
    return (
        task.capacity.cpu_cores <= avail.cpu_cores
        and task.capacity.memory_mb <= avail.memory_mb
        and task.virtualization in worker.virtualizations
    )


def slack(worker: WorkerSnapshot, task: TaskRequirements) -> float:
    avail = worker.available()
    return (avail.cpu_cores - task.capacity.cpu_cores) + (avail.memory_mb - task.capacity.memory_mb)


def _best_slack(workers: Iterable[WorkerSnapshot], task: TaskRequirements) -> str:
    """Feasible worker with the largest cpu plus memory slack, in one pass."""
    need = task.capacity
    best_id, best = None, -math.inf
    for w in workers:
        avail = w.available()
        if need.cpu_cores > avail.cpu_cores or need.memory_mb > avail.memory_mb or task.virtualization not in w.virtualizations:
            continue
        s = (avail.cpu_cores - need.cpu_cores) + (avail.memory_mb - need.memory_mb)
        if s > best or (s == best and best_id is not None and w.worker_id < best_id):
            best_id, best = w.worker_id, s
    if best_id is None:
        raise NoFeasibleWorkerError(f"no worker fits microservice {task.microservice_id}")
    return best_id


def rom_select(workers: Sequence[WorkerSnapshot], task: TaskRequirements, strategy: str = "best_slack") -> str:
    """Resource-only match: ``best_slack`` (argmax cpu+mem slack) or ``first_fit`` (input order)."""
    if strategy == "first_fit":
        for w in workers:
            if rom_feasible(w, task):
                return w.worker_id
        raise NoFeasibleWorkerError(f"no worker fits microservice {task.microservice_id}")
    if strategy != "best_slack":
        raise ValueError(f"unknown ROM strategy {strategy!r}")
    return _best_slack(workers, task)


def ldp_select(
    workers: Sequence[WorkerSnapshot],
    task: TaskRequirements,
    placed: Mapping[int, PlacedTask] | None = None,
    ctx: SchedulingContext | None = None,
) -> set[str]:
    """Latency and distance aware placement: the surviving worker ids.

    Stage one keeps ROM-feasible workers.  Every S2S constraint then keeps
    workers within both the great-circle and the Vivaldi threshold of the
    target microservice.  Every S2U constraint probes the user from a random
    sample of survivors, trilaterates the user's coordinate and keeps workers
    close to it and to the constraint's geographic target.
    """
    placed = placed or {}
    ctx = ctx or SchedulingContext()
    for c in task.s2s_constraints:
        if c.target_microservice_id not in placed:
            raise DependencyUnplacedError(f"microservice {c.target_microservice_id} is not placed yet")

    by_id = {w.worker_id: w for w in workers}
    survivors = [w for w in workers if rom_feasible(w, task)]
    ctx.ops += len(workers)
    if not survivors:
        raise NoFeasibleWorkerError(f"no worker fits microservice {task.microservice_id}")

    for c in task.s2s_constraints:
        t = placed[c.target_microservice_id]
        survivors = [
            w
            for w in survivors
            if dist_gc(w.geo, t.geo) <= c.geo_threshold_km and dist_euc(w.vivaldi, t.vivaldi) <= c.latency_threshold_ms
        ]
        ctx.ops += len(survivors)
        if not survivors:
            raise NoFeasibleWorkerError(f"S2S constraint to microservice {c.target_microservice_id} leaves no worker")

    for c in task.s2u_constraints:
        if ctx.ping is None:
            raise ValueError("S2U constraints need a ping function")
        # anchors only need a coordinate, so a thin survivor set borrows from all workers
        pool = survivors if len(survivors) >= c.probe_count else list(by_id.values())
        ids = sorted(w.worker_id for w in pool)
        probes = ctx.rng.sample(ids, min(c.probe_count, len(ids)))
        samples = [
            RttSample(by_id[i].vivaldi, median_ping(ctx.ping, i, c.user_endpoint), peer_id=i) for i in probes
        ]
        user = trilaterate(samples)
        survivors = [
            w
            for w in survivors
            if dist_gc(w.geo, c.geo_target) <= c.geo_threshold_km and dist_euc(w.vivaldi, user) <= c.latency_threshold_ms
        ]
        ctx.ops += len(survivors)
        if not survivors:
            raise NoFeasibleWorkerError(f"S2U constraint to {c.user_endpoint} leaves no worker")
    return {w.worker_id for w in survivors}


SchedulerPlugin = Callable[[Sequence[WorkerSnapshot], TaskRequirements, Mapping[int, PlacedTask], SchedulingContext], set]

SCHEDULERS: dict[str, SchedulerPlugin] = {}


def register_scheduler(name: str, plugin: SchedulerPlugin) -> None:
    SCHEDULERS[name] = plugin


register_scheduler("rom_first_fit", lambda ws, t, p, ctx: {rom_select(ws, t, "first_fit")})
register_scheduler("rom_best_slack", lambda ws, t, p, ctx: {rom_select(ws, t, "best_slack")})
register_scheduler("ldp", ldp_select)


def cluster_pick(
    scheduler: str,
    workers: Sequence[WorkerSnapshot],
    task: TaskRequirements,
    placed: Mapping[int, PlacedTask] | None = None,
    ctx: SchedulingContext | None = None,
) -> str:
    """Run a cluster's scheduler plugin and settle on one worker (best slack among the set)."""
    ctx = ctx or SchedulingContext()
    survivors = SCHEDULERS[scheduler](workers, task, placed or {}, ctx)
    if not survivors:
        raise NoFeasibleWorkerError(f"{scheduler} returned no worker")
    if len(survivors) == 1:
        return next(iter(survivors))
    return _best_slack((w for w in workers if w.worker_id in survivors), task)


# ---------------------------------------------------------------------------
# delegation


@dataclass
class DelegationTrace:
    """Messages and decisions of one delegated scheduling run."""

    messages: list[tuple[str, str]] = field(default_factory=list)
    decisions: int = 0
    tried: list[str] = field(default_factory=list)
    path: list[str] = field(default_factory=list)

    def send(self, src: str, dst: str) -> None:
        self.messages.append((src, dst))


def branch_aggregate(tree: InfrastructureTree, cluster_id: str) -> AggregateStats:
    """What the parent sees of a branch: the cached aggregate, else one computed from its leaves."""
    node = tree.clusters[cluster_id]
    if node.last_aggregate is not None:
        return node.last_aggregate
    children = [branch_aggregate(tree, c) for c in tree.children(cluster_id)]
    workers = list(node.workers.values())
    virts = set()
    for w in workers:
        virts |= w.virtualizations
    return aggregate(
        [w.available() for w in workers],
        children,
        virtualizations=virts,
        geo_points=list(node.geo_zone) or [w.geo for w in workers],
    )


class _Delegation:
    def __init__(self, request, tree, placed, ctx, clock, trace):
        self.request = request
        self.tree = tree
        self.placed = placed or {}
        self.ctx = ctx or SchedulingContext()
        self.clock = clock or _now_ms
        self.trace = trace if trace is not None else DelegationTrace()

    def check_deadline(self) -> None:
        if self.request.deadline is not None and self.clock() > self.request.deadline:
            raise DeadlineExceededError(f"convergence time of microservice {self.request.task.microservice_id} elapsed")

    def rank(self, cluster_ids: list[str]) -> list[str]:
        candidates = [c for c in cluster_ids if c not in self.request.excluded_clusters]
        if not candidates:
            return []
        pairs = []
        for c in candidates:
            try:
                pairs.append((c, branch_aggregate(self.tree, c)))
            except EmptyAggregateError:  # empty branch: nothing to offer
                continue
        if not pairs:
            return []
        try:
            ranked = root_prioritize(self.request.task, pairs, self.ctx.regions)
        except NoFeasibleClusterError:
            return []
        return [p.cluster_id for p in ranked if p.feasible]

    def in_cluster(self, cluster_id: str, path: list[str]) -> Placement | None:
        self.check_deadline()
        self.trace.decisions += 1
        self.trace.tried.append(cluster_id)
        node = self.tree.clusters[cluster_id]
        workers = [w for wid, w in sorted(node.workers.items()) if wid not in self.request.excluded_workers]
        if workers:
            try:
                wid = cluster_pick(node.scheduler, workers, self.request.task, self.placed, self.ctx)
                return Placement(wid, tuple(path), self.clock())
            except NoFeasibleWorkerError:
                pass
        for child in self.rank(self.tree.children(cluster_id)):
            self.trace.send(cluster_id, child)
            result = self.in_cluster(child, path + [child])
            if result is not None:
                return result
            self.request.excluded_clusters.add(child)
        return None

    def from_root(self) -> Placement:
        self.check_deadline()
        self.trace.decisions += 1
        root = self.tree.root_id
        for cid in self.rank(self.tree.children()):
            self.trace.send(root, cid)
            result = self.in_cluster(cid, [cid])
            if result is not None:
                self.trace.path = list(result.cluster_path)
                return result
            self.request.excluded_clusters.add(cid)
        raise ExhaustedError(f"no cluster could host microservice {self.request.task.microservice_id}")


def delegate(
    request: ScheduleRequest,
    tree: InfrastructureTree,
    *,
    placed: Mapping[int, PlacedTask] | None = None,
    ctx: SchedulingContext | None = None,
    clock: Callable[[], float] | None = None,
    trace: DelegationTrace | None = None,
) -> Placement:
    """Place ``request.task`` by walking the priority lists down the tree.

    The root ranks its child clusters from their aggregates and forwards the
    request to the best one.  A cluster either finds a worker itself (early
    termination) or ranks its own sub-clusters and forwards again; a cluster
    that fails joins ``excluded_clusters`` and the next sibling is tried.
    """
    return _Delegation(request, tree, placed, ctx, clock, trace).from_root()


def reschedule(
    instance: ServiceInstance,
    origin_cluster: str,
    tree: InfrastructureTree,
    task: TaskRequirements,
    *,
    placed: Mapping[int, PlacedTask] | None = None,
    ctx: SchedulingContext | None = None,
    clock: Callable[[], float] | None = None,
    trace: DelegationTrace | None = None,
) -> Placement:
    """Re-place a failed instance: origin cluster first, then the whole tree from the root."""
    if instance.state is not State.FAILED:
        raise ValueError(f"{instance.instance_id} is {instance.state.value}, not failed")
    failed_worker = instance.worker_id
    request = ScheduleRequest.create(
        task,
        instance.service_id,
        now=(clock or _now_ms)(),
        attempt=1,
        excluded_workers={failed_worker} if failed_worker else set(),
    )
    run = _Delegation(request, tree, placed, ctx, clock, trace)
    local = run.in_cluster(origin_cluster, tree.path(origin_cluster))
    if local is not None:
        run.trace.path = list(local.cluster_path)
        return local
    # only the failed worker stays excluded once the root takes over
    run.trace.send(origin_cluster, tree.root_id)
    request.excluded_clusters.clear()
    return run.from_root()


def schedule_service(
    service: ServiceDescriptor,
    place: Callable[[TaskRequirements, Mapping[int, PlacedTask]], PlacedTask],
) -> dict[int, PlacedTask]:
    """Place every task in SLA order, deferring tasks whose S2S targets are not placed yet."""
    placed: dict[int, PlacedTask] = {}
    pending = list(service.tasks)
    while pending:
        deferred = []
        for task in pending:
            if all(c.target_microservice_id in placed for c in task.s2s_constraints):
                placed[task.microservice_id] = place(task, placed)
            else:
                deferred.append(task)
        if len(deferred) == len(pending):
            missing = sorted({c.target_microservice_id for t in deferred for c in t.s2s_constraints} - set(placed))
            raise DependencyUnplacedError(f"S2S targets never placed: {missing}")
        pending = deferred
    return placed
