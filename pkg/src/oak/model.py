"""Domain types shared by every other module: capacities, topology and SLAs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

from oak.coords import GeoPoint, VivaldiCoordinate
from oak.errors import EmptyAggregateError, TopologyError, UnderflowError

__all__ = [
    "DIMENSIONS",
    "KNOWN_VIRTUALIZATIONS",
    "AggregateStats",
    "CapacityVector",
    "ClusterNode",
    "DimStats",
    "GeoPoint",
    "InfrastructureTree",
    "Placement",
    "S2SConstraint",
    "S2UConstraint",
    "ServiceDescriptor",
    "TaskRequirements",
    "WorkerSnapshot",
    "aggregate",
    "available",
]

DIMENSIONS = ("cpu", "memory", "gpu", "tpu")
KNOWN_VIRTUALIZATIONS = frozenset({"container", "unikernel", "mock"})

_DIM_FIELD = {
    "cpu": "cpu_cores",
    "memory": "memory_mb",
    "gpu": "gpu_units",
    "tpu": "tpu_units",
    "bandwidth": "bandwidth_in_mbps",
}


@dataclass(frozen=True)
class CapacityVector:
    cpu_cores: float = 0.0
    memory_mb: float = 0
    gpu_units: float = 0
    tpu_units: float = 0
    bandwidth_in_mbps: float = 0

    def __post_init__(self):
        for name in _CAPACITY_FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {value}")

    def dim(self, name: str) -> float:
        return getattr(self, _DIM_FIELD[name])

    def _values(self) -> tuple[float, ...]:
        return (self.cpu_cores, self.memory_mb, self.gpu_units, self.tpu_units, self.bandwidth_in_mbps)

    def __add__(self, other: CapacityVector) -> CapacityVector:
        return CapacityVector(*(a + b for a, b in zip(self._values(), other._values())))

    def checked_sub(self, other: CapacityVector) -> CapacityVector:
        """Componentwise difference; any negative component is an error."""
        out = []
        for name, a, b in zip(_CAPACITY_FIELDS, self._values(), other._values()):
            if b > a:
                raise UnderflowError(f"{name}: {b} exceeds {a}")
            out.append(a - b)
        return CapacityVector(*out)

    __sub__ = checked_sub

    def covers(self, other: CapacityVector) -> bool:
        return all(a >= b for a, b in zip(self._values(), other._values()))

    def to_dict(self) -> dict:
        return dict(zip(_CAPACITY_FIELDS, self._values()))

    @classmethod
    def from_dict(cls, data: dict) -> CapacityVector:
        return cls(**data)


_CAPACITY_FIELDS = tuple(f.name for f in fields(CapacityVector))


ZERO = CapacityVector()


@dataclass(frozen=True)
class WorkerSnapshot:
    worker_id: str
    capacity: CapacityVector
    used: CapacityVector = ZERO
    geo: GeoPoint = GeoPoint(0.0, 0.0)
    vivaldi: VivaldiCoordinate = VivaldiCoordinate()
    virtualizations: frozenset[str] = frozenset({"container"})
    last_update: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "virtualizations", frozenset(self.virtualizations))
        if not self.virtualizations:
            raise ValueError(f"worker {self.worker_id} declares no virtualization")

    def available(self) -> CapacityVector:
        return self.capacity.checked_sub(self.used)

    def evolve(self, **changes) -> WorkerSnapshot:
        return replace(self, **changes)


def available(snapshot: WorkerSnapshot) -> CapacityVector:
    """Capacity left on a worker; raises UnderflowError on corrupt telemetry."""
    return snapshot.available()


@dataclass(frozen=True)
class DimStats:
    sum: float
    mean: float
    std: float


@dataclass(frozen=True)
class AggregateStats:
    cpu: DimStats
    memory: DimStats
    gpu: DimStats
    tpu: DimStats
    worker_count: int
    supported_virtualizations: frozenset[str] = frozenset()
    geo_zone: tuple[GeoPoint, ...] = ()

    def dim(self, name: str) -> DimStats:
        return getattr(self, name)

    def to_dict(self) -> dict:
        out = {d: [s.sum, s.mean, s.std] for d in DIMENSIONS for s in [self.dim(d)]}
        out["worker_count"] = self.worker_count
        out["virtualizations"] = sorted(self.supported_virtualizations)
        out["geo_zone"] = [p.to_list() for p in self.geo_zone]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> AggregateStats:
        return cls(
            **{d: DimStats(*data[d]) for d in DIMENSIONS},
            worker_count=int(data["worker_count"]),
            supported_virtualizations=frozenset(data.get("virtualizations", ())),
            geo_zone=tuple(GeoPoint(*p) for p in data.get("geo_zone", ())),
        )


def _convex_zone(points: Iterable[GeoPoint]) -> tuple[GeoPoint, ...]:
    from shapely.geometry import MultiPoint

    pts = sorted({(p.longitude_deg, p.latitude_deg) for p in points})
    if len(pts) < 3:
        return tuple(GeoPoint(lat, lon) for lon, lat in pts)
    hull = MultiPoint(pts).convex_hull
    if hull.geom_type == "Polygon":
        coords = list(hull.exterior.coords)[:-1]
    else:
        coords = list(hull.coords)
    return tuple(GeoPoint(lat, lon) for lon, lat in coords)


def aggregate(
    workers: Sequence[CapacityVector],
    child_aggregates: Sequence[AggregateStats] = (),
    *,
    virtualizations: Iterable[str] = (),
    geo_points: Iterable[GeoPoint] = (),
) -> AggregateStats:
    """Merge leaf availabilities and child-cluster aggregates into one triple per dimension.

    Leaf workers contribute their raw values; each child contributes its
    ``(count, mean, std)`` through the pairwise parallel-moments update, so the
    result equals the statistics of the flattened leaf multiset.
    """
    if not workers and not child_aggregates:
        raise EmptyAggregateError("nothing to aggregate")

    per_dim = {}
    for d in DIMENSIONS:
        values = [w.dim(d) for w in workers]
        n = len(values)
        total = math.fsum(values)
        mean = total / n if n else 0.0
        m2 = math.fsum((v - mean) ** 2 for v in values)
        for child in child_aggregates:
            cs = child.dim(d)
            nc = child.worker_count
            total += cs.sum
            if n == 0:
                n, mean, m2 = nc, cs.mean, cs.std**2 * nc
                continue
            delta = cs.mean - mean
            merged = n + nc
            mean = mean + delta * nc / merged
            m2 = m2 + cs.std**2 * nc + delta**2 * n * nc / merged
            n = merged
        std = child_aggregates[0].dim(d).std if not workers and len(child_aggregates) == 1 else math.sqrt(max(m2, 0.0) / n)
        per_dim[d] = DimStats(total, mean, std)

    virts = set(virtualizations)
    zone_points = list(geo_points)
    for child in child_aggregates:
        virts |= child.supported_virtualizations
        zone_points.extend(child.geo_zone)
    return AggregateStats(
        **per_dim,
        worker_count=len(workers) + sum(c.worker_count for c in child_aggregates),
        supported_virtualizations=frozenset(virts),
        geo_zone=_convex_zone(zone_points),
    )


@dataclass(frozen=True)
class Placement:
    worker_id: str
    cluster_path: tuple[str, ...]
    decided_at: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cluster_path", tuple(self.cluster_path))
        if not self.cluster_path:
            raise ValueError("placement needs a non-empty cluster path")

    @property
    def cluster_id(self) -> str:
        return self.cluster_path[-1]


@dataclass
class ClusterNode:
    cluster_id: str
    orchestrator_endpoint: str = ""
    workers: dict[str, WorkerSnapshot] = field(default_factory=dict)
    child_clusters: set[str] = field(default_factory=set)
    last_aggregate: AggregateStats | None = None
    geo_zone: tuple[GeoPoint, ...] = ()
    child_aggregates: dict[str, AggregateStats] = field(default_factory=dict)
    scheduler: str = "rom_best_slack"
    index: int = 0

    def __post_init__(self):
        if set(self.workers) & self.child_clusters:
            raise TopologyError(f"cluster {self.cluster_id}: worker and child ids overlap")


class InfrastructureTree:
    """Oriented tree of clusters rooted at the root orchestrator."""

    def __init__(self, root_id: str = "root"):
        self.root_id = root_id
        self.clusters: dict[str, ClusterNode] = {}
        self.edges: set[tuple[str, str]] = set()
        self._parent: dict[str, str] = {}
        self._worker_home: dict[str, str] = {}

    def add_cluster(self, node: ClusterNode | str, parent: str | None = None) -> ClusterNode:
        if isinstance(node, str):
            node = ClusterNode(node)
        cid = node.cluster_id
        if cid == self.root_id or cid in self.clusters:
            raise TopologyError(f"duplicate cluster id {cid!r}")
        parent = self.root_id if parent is None else parent
        if parent != self.root_id and parent not in self.clusters:
            raise TopologyError(f"unknown parent cluster {parent!r}")
        if not node.index:
            node.index = len(self.clusters) + 1
        self.clusters[cid] = node
        self.edges.add((parent, cid))
        self._parent[cid] = parent
        if parent != self.root_id:
            self.clusters[parent].child_clusters.add(cid)
        for wid in node.workers:
            self._claim_worker(wid, cid)
        return node

    def _claim_worker(self, worker_id: str, cluster_id: str) -> None:
        home = self._worker_home.get(worker_id)
        if home is not None and home != cluster_id:
            raise TopologyError(f"worker {worker_id!r} already belongs to {home!r}")
        if worker_id in self.clusters:
            raise TopologyError(f"worker id {worker_id!r} clashes with a cluster id")
        self._worker_home[worker_id] = cluster_id

    def add_worker(self, cluster_id: str, snapshot: WorkerSnapshot) -> None:
        self._claim_worker(snapshot.worker_id, cluster_id)
        self.clusters[cluster_id].workers[snapshot.worker_id] = snapshot

    def update_worker(self, snapshot: WorkerSnapshot) -> None:
        self.clusters[self._worker_home[snapshot.worker_id]].workers[snapshot.worker_id] = snapshot

    def cluster_of(self, worker_id: str) -> str:
        return self._worker_home[worker_id]

    def worker(self, worker_id: str) -> WorkerSnapshot:
        return self.clusters[self._worker_home[worker_id]].workers[worker_id]

    def parent(self, cluster_id: str) -> str:
        return self._parent[cluster_id]

    def children(self, cluster_id: str | None = None) -> list[str]:
        key = self.root_id if cluster_id is None else cluster_id
        return sorted(c for p, c in self.edges if p == key)

    def path(self, cluster_id: str) -> list[str]:
        out = [cluster_id]
        while (p := self._parent[out[-1]]) != self.root_id:
            out.append(p)
        return out[::-1]

    def depth(self) -> int:
        """Number of scheduling tiers below the root (the ``t`` of t-step delegation)."""
        return max((len(self.path(c)) for c in self.clusters), default=0)

    def branch(self, cluster_id: str) -> list[str]:
        out, stack = [], [cluster_id]
        while stack:
            cid = stack.pop()
            out.append(cid)
            stack.extend(self.children(cid))
        return sorted(out)

    def branch_workers(self, cluster_id: str) -> list[WorkerSnapshot]:
        return [w for cid in self.branch(cluster_id) for w in self.clusters[cid].workers.values()]

    def all_workers(self) -> list[WorkerSnapshot]:
        return [w for c in self.clusters.values() for w in c.workers.values()]

    def validate(self) -> None:
        """Raise TopologyError unless every cluster has one parent and reaches the root."""
        parents: dict[str, str] = {}
        for p, c in self.edges:
            if c in parents:
                raise TopologyError(f"cluster {c!r} has two parents")
            if c == self.root_id:
                raise TopologyError("the root cannot be a child")
            parents[c] = p
        if set(parents) != set(self.clusters):
            raise TopologyError("edge set does not cover the cluster set")
        for cid in self.clusters:
            seen = {cid}
            cur = cid
            while cur != self.root_id:
                cur = parents[cur]
                if cur in seen:
                    raise TopologyError(f"cycle through {cid!r}")
                seen.add(cur)
        homes: dict[str, str] = {}
        for cid, node in self.clusters.items():
            for wid in node.workers:
                if wid in homes:
                    raise TopologyError(f"worker {wid!r} in {homes[wid]!r} and {cid!r}")
                homes[wid] = cid

    def components_without(self, edge: tuple[str, str]) -> tuple[set[str], set[str]]:
        """Split the node set (root included) by dropping ``edge``; returns (root side, other side)."""
        if edge not in self.edges:
            raise TopologyError(f"no such edge {edge!r}")
        adj: dict[str, set[str]] = {self.root_id: set(), **{c: set() for c in self.clusters}}
        for p, c in self.edges - {edge}:
            adj[p].add(c)
            adj[c].add(p)
        seen, stack = {self.root_id}, [self.root_id]
        while stack:
            for nxt in adj[stack.pop()] - seen:
                seen.add(nxt)
                stack.append(nxt)
        return seen, set(adj) - seen


@dataclass(frozen=True)
class S2SConstraint:
    target_microservice_id: int
    geo_threshold_km: float
    latency_threshold_ms: float

    def __post_init__(self):
        if self.geo_threshold_km <= 0 or self.latency_threshold_ms <= 0:
            raise ValueError("S2S thresholds must be positive")


@dataclass(frozen=True)
class S2UConstraint:
    user_endpoint: str
    geo_target: GeoPoint
    geo_threshold_km: float
    latency_threshold_ms: float
    probe_count: int = 5

    def __post_init__(self):
        if self.geo_threshold_km <= 0 or self.latency_threshold_ms <= 0:
            raise ValueError("S2U thresholds must be positive")
        if self.probe_count < 3:
            raise ValueError("S2U probe_count must be >= 3 for trilateration")


@dataclass(frozen=True)
class TaskRequirements:
    microservice_id: int
    capacity: CapacityVector
    virtualization: str = "container"
    latency_ms: float | None = None
    area: str | None = None
    location: GeoPoint | None = None
    threshold: float | None = None
    rigidness: float = 0.5
    convergence_time_ms: int = 60_000
    s2s_constraints: tuple[S2SConstraint, ...] = ()
    s2u_constraints: tuple[S2UConstraint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "s2s_constraints", tuple(self.s2s_constraints))
        object.__setattr__(self, "s2u_constraints", tuple(self.s2u_constraints))
        if self.virtualization not in KNOWN_VIRTUALIZATIONS:
            raise ValueError(f"unknown virtualization {self.virtualization!r}")
        if self.convergence_time_ms <= 0:
            raise ValueError("convergence_time_ms must be positive")
        if not 0.0 <= self.rigidness <= 1.0:
            raise ValueError("rigidness must be in [0, 1]")
        if self.latency_ms is not None and self.latency_ms <= 0:
            raise ValueError("latency must be positive")


@dataclass(frozen=True)
class ServiceDescriptor:
    service_id: str
    tasks: tuple[TaskRequirements, ...]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValueError("a service needs at least one task")

    def task(self, microservice_id: int) -> TaskRequirements:
        for t in self.tasks:
            if t.microservice_id == microservice_id:
                return t
        raise KeyError(microservice_id)
