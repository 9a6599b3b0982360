"""Run scenarios on virtual time and write one CSV per metric family.

``placements.csv``, ``messages.csv``, ``resources.csv`` and ``events.csv``
depend only on the scenario and its seed.  ``timings.csv`` holds scheduler
compute measured on the wall clock, which no seed can pin down.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from oak.actors import ROOT, Recorder
from oak.control import SimRuntime
from oak.coords import dist_gc
from oak.model import CapacityVector
from oak.sla import parse_sla
from oak.system import ClusterSpec, OakSystem, WorkerSpec
from oak.sim.latency import PlantedLatency
from oak.errors import EmptyAggregateError, UnknownParameterError
from oak.sim.scenario import SWEEP_PARAMETERS, Scenario

PLACEMENT_FIELDS = [
    "request_id", "service_id", "microservice_id", "instance_id", "ok", "worker_id", "cluster_path",
    "clusters_tried", "reason", "time", "user", "achieved_rtt_ms", "achieved_distance_km", "satisfied",
]
TIMING_FIELDS = ["request_id", "tier", "node", "calc_ms", "ops"]
MESSAGE_FIELDS = ["kind", "src_tier", "dst_tier", "sent", "delivered"]
RESOURCE_FIELDS = ["time", "cluster", "workers", "cpu_available", "memory_available", "leaf_cpu_available", "leaf_memory_available", "conserved"]
EVENT_FIELDS = ["time", "name", "detail"]
SUMMARY_FIELDS = [
    "requests", "placed", "failed", "pending", "satisfied_rate",
    "root_calc_ms_median", "root_calc_ms_p95", "cluster_calc_ms_median", "cluster_calc_ms_p95",
    "total_schedule_ms_median", "total_schedule_ms_p95", "achieved_rtt_ms_median", "achieved_rtt_ms_p95",
    "messages", "conserved_rate", "vivaldi_error",
]


class MetricsRecorder(Recorder):
    """Append-only rows from every actor of one run."""

    def __init__(self):
        self.calcs: list[dict] = []
        self.placements: list[dict] = []
        self.events: list[dict] = []

    def calc(self, request_id: str, tier: str, ms: float, ops: int) -> None:
        self.calcs.append({"request_id": request_id, "tier": "root" if tier == ROOT else "cluster", "node": tier, "calc_ms": ms, "ops": ops})

    def placement(self, row: dict) -> None:
        self.placements.append(dict(row))

    def event(self, name: str, **fields) -> None:
        t = fields.pop("time", None)
        self.events.append({"time": t, "name": name, "detail": json.dumps(fields, sort_keys=True)})


@dataclass
class RunResult:
    scenario: Scenario
    summary: dict
    placements: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    messages: list[dict] = field(default_factory=list)
    resources: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    out_dir: Path | None = None
    started_ms: float = 0.0  # virtual time at which the workload and fault clocks start


def _stat(values: list[float], q: float) -> float:
    return float(np.percentile(values, q)) if values else float("nan")


def _tier(name: str, workers: set[str]) -> str:
    if name == ROOT:
        return "root"
    return "worker" if name in workers else "cluster"


def build_topology(scenario: Scenario, model: PlantedLatency, coords: dict) -> list[ClusterSpec]:
    """Cluster specs with sampled capacities and planted geography."""
    topo, tmpl = scenario.topology, scenario.worker_template
    rng = np.random.default_rng(scenario.seed)
    specs: list[ClusterSpec] = []
    for i, n in enumerate(topo.workers_per_cluster, start=1):
        ids = [f"c{i}-w{j:03d}" for j in range(n)]
        workers = []
        for wid in ids:
            cpu = float(np.round(rng.uniform(*tmpl.cpu) * 2) / 2)
            mem = float(np.round(rng.uniform(*tmpl.memory)))
            workers.append(WorkerSpec(wid, CapacityVector(max(cpu, 0.5), max(mem, 1.0)), model.geo[wid], coords[wid], tmpl.virtualizations))
        if topo.tiers == 1:
            specs.append(ClusterSpec(f"c{i}", ROOT, topo.scheduler, workers))
            continue
        specs.append(ClusterSpec(f"c{i}", ROOT, topo.scheduler, []))
        parts = np.array_split(np.arange(len(workers)), min(topo.subclusters, len(workers)))
        for k, part in enumerate(parts, start=1):
            specs.append(ClusterSpec(f"c{i}s{k}", f"c{i}", topo.scheduler, [workers[j] for j in part]))
    return specs


def worker_ids(scenario: Scenario) -> list[str]:
    return [f"c{i}-w{j:03d}" for i, n in enumerate(scenario.topology.workers_per_cluster, start=1) for j in range(n)]


def _service(scenario: Scenario, i: int, user: str, model: PlantedLatency) -> dict:
    wl = scenario.workload
    props = {"vcpus": wl.cpu, "memory": wl.memory, "virtualization": wl.virtualization}
    if wl.s2u and wl.latency_ms is not None:
        g = model.geo[user]
        props["s2u"] = [
            {
                "user": user,
                "location": f"{g.latitude_deg},{g.longitude_deg}",
                "latency_threshold": wl.latency_ms,
                "geo_threshold": wl.geo_threshold_km if wl.geo_threshold_km is not None else 20_000.0,
                "probes": wl.probes,
            }
        ]
    return {"service_id": f"svc{i:04d}", "constraints": [{"microservice_id": 1, "properties": [props]}]}


def _leaf_available(system: OakSystem, cid: str, now: float) -> tuple[int, float, float]:
    """Leaf-sum oracle: raw capacity minus use over live workers, plus what sub-clusters reported."""
    crm = system.clusters[cid].crm
    count, cpu, mem = 0, 0.0, 0.0
    for wid in sorted(crm.cluster.workers):
        if crm.is_live(wid, now):
            w = crm.cluster.workers[wid]
            count += 1
            cpu += w.capacity.cpu_cores - w.used.cpu_cores
            mem += w.capacity.memory_mb - w.used.memory_mb
    for child in sorted(crm.cluster.child_aggregates):
        agg = crm.cluster.child_aggregates[child]
        count += agg.worker_count
        cpu += agg.cpu.sum
        mem += agg.memory.sum
    return count, cpu, mem


def run(scenario: Scenario, out_dir: str | Path | None = None) -> RunResult:
    """Execute one scenario; writes its CSVs when ``out_dir`` is given."""
    lat = scenario.latency_model
    wl = scenario.workload
    n_generated = wl.requests if not wl.services else 0
    users = [f"u{k:04d}" for k in range(n_generated)] if wl.s2u and wl.latency_ms is not None else []
    wids = worker_ids(scenario)
    model = PlantedLatency(
        wids, users, seed=scenario.seed, rtt_min_ms=lat.rtt_min_ms, rtt_max_ms=lat.rtt_max_ms,
        jitter=lat.jitter, km_per_ms=lat.km_per_ms, geo_jitter_km=lat.geo_jitter_km,
    )
    coords = model.embed(lat.vivaldi_rounds, seed=scenario.seed)
    specs = build_topology(scenario, model, coords)

    recorder = MetricsRecorder()
    runtime = SimRuntime(seed=scenario.seed, latency=lat.control_latency_ms, loss=scenario.loss)
    system = OakSystem(specs, runtime=runtime, config=scenario.telemetry, ping=model.ping, recorder=recorder, seed=scenario.seed)
    system.start()
    t0 = system.now

    services = [dict(s) for s in wl.services] or [_service(scenario, i, users[i] if users else "", model) for i in range(n_generated)]
    user_of = {s["service_id"]: (users[i] if users else "") for i, s in enumerate(services)} if not wl.services else {}
    finished: list[str] = []
    for i, doc in enumerate(services):
        descriptor = parse_sla(doc)
        runtime.call_later(wl.start_ms + i * wl.interval_ms, lambda d=descriptor: system.root.submit(d, lambda rec: finished.append(rec.descriptor.service_id)))

    for f in scenario.faults:
        if f.type == "worker_crash":
            runtime.call_later(f.at_ms, lambda t=f.target: system.crash_worker(t))
            if f.duration_ms is not None:
                runtime.call_later(f.at_ms + f.duration_ms, lambda t=f.target: system.recover_worker(t))
        elif f.type == "worker_recover":
            runtime.call_later(f.at_ms, lambda t=f.target: system.recover_worker(t))
        else:
            runtime.call_later(f.at_ms, lambda t=f.target: system.partition(t, ROOT))
            if f.duration_ms is not None:
                runtime.call_later(f.at_ms + f.duration_ms, lambda t=f.target: system.heal(t, ROOT))

    resources: list[dict] = []

    def snapshot() -> None:
        now = runtime.now()
        for cid in sorted(system.clusters):
            try:
                agg = system.clusters[cid].crm.peek_aggregate(now)
            except EmptyAggregateError:
                continue
            count, leaf_cpu, leaf_mem = _leaf_available(system, cid, now)
            resources.append(
                {
                    "time": now, "cluster": cid, "workers": agg.worker_count,
                    "cpu_available": agg.cpu.sum, "memory_available": agg.memory.sum,
                    "leaf_cpu_available": leaf_cpu, "leaf_memory_available": leaf_mem,
                    "conserved": count == agg.worker_count and abs(agg.cpu.sum - leaf_cpu) < 1e-6 and abs(agg.memory.sum - leaf_mem) < 1e-6,
                }
            )
        if runtime.now() + scenario.telemetry.aggregate_interval_ms <= t0 + scenario.duration_ms:
            runtime.call_later(scenario.telemetry.aggregate_interval_ms, snapshot)

    runtime.call_later(scenario.telemetry.aggregate_interval_ms / 2, snapshot)
    system.run(scenario.duration_ms)

    placements = []
    for row in recorder.placements:
        user = user_of.get(row["service_id"], "")
        rtt = dist = None
        satisfied = bool(row["ok"])
        if row["ok"] and user:
            rtt = model.rtt(row["worker_id"], user)
            dist = dist_gc(model.geo[row["worker_id"]], model.geo[user])
            satisfied = rtt <= wl.latency_ms and (wl.geo_threshold_km is None or dist <= wl.geo_threshold_km)
        placements.append({**row, "user": user, "achieved_rtt_ms": rtt, "achieved_distance_km": dist, "satisfied": satisfied})

    worker_names = set(system.workers)
    counts: dict[tuple, list[int]] = {}
    for e in runtime.trace:
        key = (e.kind, _tier(e.src, worker_names), _tier(e.dst, worker_names))
        c = counts.setdefault(key, [0, 0])
        c[0] += 1
        c[1] += e.delivered
    messages = [{"kind": k, "src_tier": s, "dst_tier": d, "sent": v[0], "delivered": v[1]} for (k, s, d), v in sorted(counts.items())]

    summary = summarize(placements, recorder.calcs, messages, resources, len(services), len(finished))
    summary["vivaldi_error"] = model.prediction_error(coords, seed=scenario.seed) if len(wids) > 1 else 0.0
    result = RunResult(scenario, summary, placements, recorder.calcs, messages, resources, recorder.events, started_ms=t0)
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


def summarize(placements, calcs, messages, resources, requests: int, finished: int) -> dict:
    first = {}
    for p in placements:
        first.setdefault(p["service_id"], p)
    ok = [p for p in first.values() if p["ok"]]
    per_request: dict[str, float] = {}
    for c in calcs:
        per_request[c["request_id"]] = per_request.get(c["request_id"], 0.0) + c["calc_ms"]
    root = [c["calc_ms"] for c in calcs if c["tier"] == "root"]
    cluster = [c["calc_ms"] for c in calcs if c["tier"] == "cluster"]
    total = list(per_request.values())
    rtts = [p["achieved_rtt_ms"] for p in ok if p["achieved_rtt_ms"] is not None]
    return {
        "requests": requests,
        "placed": len(ok),
        "failed": len(first) - len(ok),
        "pending": requests - finished,
        "satisfied_rate": sum(p["satisfied"] for p in ok) / len(ok) if ok else float("nan"),
        "root_calc_ms_median": _stat(root, 50),
        "root_calc_ms_p95": _stat(root, 95),
        "cluster_calc_ms_median": _stat(cluster, 50),
        "cluster_calc_ms_p95": _stat(cluster, 95),
        "total_schedule_ms_median": _stat(total, 50),
        "total_schedule_ms_p95": _stat(total, 95),
        "achieved_rtt_ms_median": _stat(rtts, 50),
        "achieved_rtt_ms_p95": _stat(rtts, 95),
        "messages": sum(m["sent"] for m in messages),
        "conserved_rate": sum(r["conserved"] for r in resources) / len(resources) if resources else float("nan"),
    }


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in fields})


def write_outputs(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "placements.csv", PLACEMENT_FIELDS, result.placements)
    write_csv(out / "messages.csv", MESSAGE_FIELDS, result.messages)
    write_csv(out / "resources.csv", RESOURCE_FIELDS, result.resources)
    write_csv(out / "events.csv", EVENT_FIELDS, result.events)
    write_csv(out / "timings.csv", TIMING_FIELDS, result.timings)
    result.out_dir = out


def format_summary(name: str, summary: dict) -> str:
    lines = [f"scenario {name}"]
    for k in SUMMARY_FIELDS:
        v = summary.get(k)
        lines.append(f"  {k:<26} {v:.4f}" if isinstance(v, float) else f"  {k:<26} {v}")
    return "\n".join(lines)


def sweep(scenario: Scenario, param: str, values: list, out_dir: str | Path | None = None) -> list[dict]:
    """One run per value on the shared seed; rows carry the swept value and the run summary."""
    if param not in SWEEP_PARAMETERS:
        raise UnknownParameterError(f"unknown sweep parameter {param!r}; known: {sorted(SWEEP_PARAMETERS)}")
    variants = [(v, scenario.with_param(param, v)) for v in values]  # validate every value before running any
    rows = []
    for value, variant in variants:
        sub = Path(out_dir) / f"{param}={value}" if out_dir is not None else None
        result = run(variant, sub)
        rows.append({param: value, **result.summary})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out_dir) / "sweep.csv", [param, *SUMMARY_FIELDS], rows)
    return rows

