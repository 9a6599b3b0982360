"""Versioned scenario files for the simulation harness.

A scenario fixes everything a run depends on, the seed included::

    version: 1
    name: scale-ldp
    seed: 7
    duration_ms: 30000
    topology: {clusters: 1, workers: 100, tiers: 1, scheduler: ldp}
    worker_template: {cpu: [2, 8], memory: [2048, 8192], virtualizations: [container]}
    latency_model: {rtt_min_ms: 10, rtt_max_ms: 250, vivaldi_rounds: 200}
    workload: {requests: 100, interval_ms: 100, cpu: 1, memory: 100, latency_ms: 20, geo_threshold_km: 120}
    faults: [{at_ms: 5000, type: worker_crash, target: c1-w003}]

``topology.workers`` is a total spread evenly over the clusters;
``workers_per_cluster`` (a number or one number per cluster) or ``split``
(``"9x5"``) may be given instead.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from oak.errors import ScenarioInvalidError, UnknownParameterError
from oak.model import KNOWN_VIRTUALIZATIONS
from oak.resources import TelemetryConfig
from oak.scheduler import SCHEDULERS

SCHEMA_VERSION = 1
FAULT_KINDS = ("worker_crash", "worker_recover", "cluster_partition")
SCHEDULER_ALIASES = {"rom": "rom_best_slack", "rom_first_fit": "rom_first_fit", "ldp": "ldp"}


@dataclass(frozen=True)
class TopologySpec:
    clusters: int = 1
    workers_per_cluster: tuple[int, ...] = (10,)
    tiers: int = 1
    subclusters: int = 2
    scheduler: str = "rom_best_slack"

    @property
    def workers(self) -> int:
        return sum(self.workers_per_cluster)


@dataclass(frozen=True)
class WorkerTemplate:
    cpu: tuple[float, float] = (2.0, 8.0)
    memory: tuple[float, float] = (2048.0, 8192.0)
    virtualizations: tuple[str, ...] = ("container",)


@dataclass(frozen=True)
class LatencySpec:
    rtt_min_ms: float = 10.0
    rtt_max_ms: float = 250.0
    jitter: float = 0.0
    km_per_ms: float = 5.0
    geo_jitter_km: float = 5.0
    vivaldi_rounds: int = 600
    control_latency_ms: float = 1.0


@dataclass(frozen=True)
class WorkloadSpec:
    requests: int = 50
    start_ms: float = 0.0
    interval_ms: float = 100.0
    cpu: float = 1.0
    memory: float = 100.0
    virtualization: str = "container"
    latency_ms: float | None = 20.0
    geo_threshold_km: float | None = 120.0
    s2u: bool = True
    probes: int = 8
    services: tuple[dict, ...] = ()


@dataclass(frozen=True)
class Fault:
    at_ms: float
    type: str
    target: str
    duration_ms: float | None = None


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    seed: int = 0
    duration_ms: float = 30_000.0
    topology: TopologySpec = TopologySpec()
    worker_template: WorkerTemplate = WorkerTemplate()
    latency_model: LatencySpec = LatencySpec()
    telemetry: TelemetryConfig = TelemetryConfig()
    workload: WorkloadSpec = WorkloadSpec()
    faults: tuple[Fault, ...] = ()
    loss: float = 0.0
    version: int = SCHEMA_VERSION
    source: dict = field(default_factory=dict, compare=False, repr=False)

    def with_param(self, name: str, value) -> Scenario:
        """Copy with one sweep knob changed."""
        if name not in SWEEP_PARAMETERS:
            raise UnknownParameterError(f"unknown sweep parameter {name!r}; known: {sorted(SWEEP_PARAMETERS)}")
        data = copy.deepcopy(self.source)
        SWEEP_PARAMETERS[name](data, value)
        return parse_scenario(data)


def _split_workers(total: int, clusters: int) -> tuple[int, ...]:
    base, extra = divmod(total, clusters)
    return tuple(base + (1 if i < extra else 0) for i in range(clusters))


def _set_workers(data, value):
    topo = data.setdefault("topology", {})
    topo.pop("split", None)
    topo.pop("workers_per_cluster", None)
    topo["workers"] = int(value)


def _set_split(data, value):
    topo = data.setdefault("topology", {})
    for k in ("workers", "workers_per_cluster", "clusters"):
        topo.pop(k, None)
    topo["split"] = str(value)


def _set_clusters(data, value):
    topo = data.setdefault("topology", {})
    if "split" in topo:
        raise ScenarioInvalidError("cannot sweep clusters of a split topology")
    topo["clusters"] = int(value)


def _set(section, key, cast):
    def apply(data, value):
        data.setdefault(section, {})[key] = cast(value)

    return apply


SWEEP_PARAMETERS = {
    "workers": _set_workers,
    "split": _set_split,
    "clusters": _set_clusters,
    "scheduler": _set("topology", "scheduler", str),
    "requests": _set("workload", "requests", int),
    "seed": lambda data, v: data.__setitem__("seed", int(v)),
    "jitter": _set("latency_model", "jitter", float),
    "delta_threshold": _set("telemetry", "delta_threshold", float),
    "loss": lambda data, v: data.__setitem__("loss", float(v)),
}


def _section(data: dict, key: str, allowed: set[str]) -> dict:
    sec = data.get(key) or {}
    if not isinstance(sec, dict):
        raise ScenarioInvalidError(f"{key}: expected a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ScenarioInvalidError(f"{key}: unknown field(s) {sorted(unknown)}")
    return sec


def _range(value, name: str) -> tuple[float, float]:
    lo, hi = (value, value) if isinstance(value, (int, float)) else tuple(value)
    if not 0 < lo <= hi:
        raise ScenarioInvalidError(f"worker_template.{name}: need 0 < low <= high")
    return float(lo), float(hi)


def _topology(data: dict) -> TopologySpec:
    sec = _section(data, "topology", {"clusters", "workers", "workers_per_cluster", "split", "tiers", "subclusters", "scheduler"})
    scheduler = SCHEDULER_ALIASES.get(sec.get("scheduler", "rom"), sec.get("scheduler"))
    if scheduler not in SCHEDULERS:
        raise ScenarioInvalidError(f"topology.scheduler: unknown scheduler {sec.get('scheduler')!r}")
    given = [k for k in ("workers", "workers_per_cluster", "split") if k in sec]
    if len(given) > 1:
        raise ScenarioInvalidError(f"topology: give only one of {given}")
    if "split" in sec:
        try:
            clusters, per = (int(x) for x in str(sec["split"]).lower().split("x"))
        except ValueError:
            raise ScenarioInvalidError(f"topology.split: expected 'CxW', got {sec['split']!r}") from None
        wpc = (per,) * clusters
    else:
        clusters = int(sec.get("clusters", 1))
        if clusters < 1:
            raise ScenarioInvalidError("topology.clusters must be at least 1")
        if "workers_per_cluster" in sec:
            wpc = sec["workers_per_cluster"]
            wpc = tuple(int(x) for x in wpc) if isinstance(wpc, (list, tuple)) else (int(wpc),) * clusters
            if len(wpc) != clusters:
                raise ScenarioInvalidError("topology.workers_per_cluster: one entry per cluster")
        else:
            total = int(sec.get("workers", 10 * clusters))
            if total < clusters:
                raise ScenarioInvalidError("topology: fewer workers than clusters")
            wpc = _split_workers(total, clusters)
    if any(n < 1 for n in wpc):
        raise ScenarioInvalidError("topology: every cluster needs at least one worker")
    tiers = int(sec.get("tiers", 1))
    subclusters = int(sec.get("subclusters", 2))
    if tiers not in (1, 2) or subclusters < 1:
        raise ScenarioInvalidError("topology.tiers must be 1 or 2 and subclusters positive")
    return TopologySpec(clusters, wpc, tiers, subclusters, scheduler)


def parse_scenario(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioInvalidError("scenario must be a mapping")
    allowed = {"version", "name", "seed", "duration_ms", "topology", "worker_template", "latency_model", "telemetry", "workload", "faults", "loss"}
    unknown = set(data) - allowed
    if unknown:
        raise ScenarioInvalidError(f"unknown top-level field(s) {sorted(unknown)}")
    version = data.get("version")
    if version != SCHEMA_VERSION:
        raise ScenarioInvalidError(f"unsupported scenario version {version!r}; expected {SCHEMA_VERSION}")
    try:
        topology = _topology(data)
        wt = _section(data, "worker_template", {"cpu", "memory", "virtualizations"})
        virts = tuple(wt.get("virtualizations", ["container"]))
        if not virts or set(virts) - KNOWN_VIRTUALIZATIONS:
            raise ScenarioInvalidError(f"worker_template.virtualizations: {virts!r}")
        template = WorkerTemplate(_range(wt.get("cpu", [2, 8]), "cpu"), _range(wt.get("memory", [2048, 8192]), "memory"), virts)
        lat = _section(data, "latency_model", set(LatencySpec.__dataclass_fields__))
        latency = LatencySpec(**lat)
        if not 0 < latency.rtt_min_ms < latency.rtt_max_ms:
            raise ScenarioInvalidError("latency_model: need 0 < rtt_min_ms < rtt_max_ms")
        tel = _section(data, "telemetry", set(TelemetryConfig.__dataclass_fields__))
        telemetry = TelemetryConfig(**tel)
        wl = dict(_section(data, "workload", set(WorkloadSpec.__dataclass_fields__)))
        wl["services"] = tuple(wl.get("services", ()))
        workload = WorkloadSpec(**wl)
        if workload.requests < 0 or workload.interval_ms < 0:
            raise ScenarioInvalidError("workload: requests and interval_ms must be non-negative")
        faults = []
        for i, f in enumerate(data.get("faults") or []):
            if not isinstance(f, dict) or set(f) - {"at_ms", "type", "target", "duration_ms"}:
                raise ScenarioInvalidError(f"faults[{i}]: expected at_ms, type, target[, duration_ms]")
            if f.get("type") not in FAULT_KINDS:
                raise ScenarioInvalidError(f"faults[{i}]: unknown fault type {f.get('type')!r}")
            faults.append(Fault(float(f["at_ms"]), f["type"], str(f["target"]), f.get("duration_ms")))
        loss = float(data.get("loss", 0.0))
        if not 0.0 <= loss < 1.0:
            raise ScenarioInvalidError("loss must be in [0, 1)")
        return Scenario(
            name=str(data.get("name", "scenario")),
            seed=int(data.get("seed", 0)),
            duration_ms=float(data.get("duration_ms", 30_000)),
            topology=topology,
            worker_template=template,
            latency_model=latency,
            telemetry=telemetry,
            workload=workload,
            faults=tuple(sorted(faults, key=lambda f: f.at_ms)),
            loss=loss,
            version=version,
            source=copy.deepcopy(data),
        )
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ScenarioInvalidError):
            raise
        raise ScenarioInvalidError(str(exc)) from None


def load_scenario(path: str | Path) -> Scenario:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ScenarioInvalidError(f"{path}: {exc}") from None
    return parse_scenario(data)


__all__ = ["Fault", "Scenario", "load_scenario", "parse_scenario", "SWEEP_PARAMETERS"]
