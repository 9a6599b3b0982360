"""SLA documents and the named-region registry.

An SLA mirrors the service requirement descriptor::

    service_id: detector
    constraints:
      - microservice_id: 1
        properties:
          - vcpus: 1
            memory: 100
            virtualization: container
            latency: 20
            threshold: 120
            s2u:
              - user: 10.1.2.3:5000
                location: "48.14,11.58"

Schema-level ``threshold`` and ``latency`` fill in any S2S/S2U constraint that
omits its own geo or latency threshold.  Unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterable

import yaml

from oak.coords import GeoPoint
from oak.errors import SLAFormatError
from oak.model import (
    CapacityVector,
    S2SConstraint,
    S2UConstraint,
    ServiceDescriptor,
    TaskRequirements,
)

PROPERTY_KEYS = {
    "memory",
    "vcpus",
    "vgpus",
    "vtpus",
    "bandwidth_in",
    "latency",
    "area",
    "location",
    "threshold",
    "rigidness",
    "convergence_time",
    "virtualization",
    "s2s",
    "s2u",
}
S2S_KEYS = {"target", "geo_threshold", "latency_threshold"}
S2U_KEYS = {"user", "location", "geo_threshold", "latency_threshold", "probes"}


def _check_keys(where: str, data: dict, allowed: set[str]) -> None:
    if not isinstance(data, dict):
        raise SLAFormatError(f"{where}: expected a mapping, got {type(data).__name__}")
    unknown = set(data) - allowed
    if unknown:
        raise SLAFormatError(f"{where}: unknown field(s) {sorted(unknown)}")


def _threshold(where: str, own: Any, fallback: Any, name: str) -> float:
    value = own if own is not None else fallback
    if value is None:
        raise SLAFormatError(f"{where}: no {name} and no schema-level default")
    return float(value)


def parse_task(entry: dict) -> TaskRequirements:
    _check_keys("constraint", entry, {"microservice_id", "properties"})
    if "microservice_id" not in entry:
        raise SLAFormatError("constraint without microservice_id")
    msid = int(entry["microservice_id"])
    where = f"microservice {msid}"
    props: dict[str, Any] = {}
    for block in entry.get("properties") or [{}]:
        _check_keys(where, block, PROPERTY_KEYS)
        clash = set(props) & set(block)
        if clash:
            raise SLAFormatError(f"{where}: field(s) {sorted(clash)} given twice")
        props.update(block)

    threshold = props.get("threshold")
    latency = props.get("latency")
    s2s = []
    for c in props.get("s2s") or []:
        _check_keys(f"{where} s2s", c, S2S_KEYS)
        s2s.append(
            S2SConstraint(
                target_microservice_id=int(c["target"]),
                geo_threshold_km=_threshold(where, c.get("geo_threshold"), threshold, "geo_threshold"),
                latency_threshold_ms=_threshold(where, c.get("latency_threshold"), latency, "latency_threshold"),
            )
        )
    s2u = []
    for c in props.get("s2u") or []:
        _check_keys(f"{where} s2u", c, S2U_KEYS)
        target = c.get("location", props.get("location"))
        if target is None:
            raise SLAFormatError(f"{where}: s2u constraint needs a location")
        s2u.append(
            S2UConstraint(
                user_endpoint=str(c["user"]),
                geo_target=GeoPoint.parse(str(target)),
                geo_threshold_km=_threshold(where, c.get("geo_threshold"), threshold, "geo_threshold"),
                latency_threshold_ms=_threshold(where, c.get("latency_threshold"), latency, "latency_threshold"),
                probe_count=int(c.get("probes", 5)),
            )
        )

    try:
        return TaskRequirements(
            microservice_id=msid,
            capacity=CapacityVector(
                cpu_cores=float(props.get("vcpus", 0)),
                memory_mb=int(props.get("memory", 0)),
                gpu_units=int(props.get("vgpus", 0)),
                tpu_units=int(props.get("vtpus", 0)),
                bandwidth_in_mbps=int(props.get("bandwidth_in", 0)),
            ),
            virtualization=str(props.get("virtualization", "container")),
            latency_ms=float(latency) if latency is not None else None,
            area=props.get("area"),
            location=GeoPoint.parse(str(props["location"])) if "location" in props else None,
            threshold=float(threshold) if threshold is not None else None,
            rigidness=float(props.get("rigidness", 0.5)),
            convergence_time_ms=int(props.get("convergence_time", 60_000)),
            s2s_constraints=s2s,
            s2u_constraints=s2u,
        )
    except ValueError as exc:
        raise SLAFormatError(f"{where}: {exc}") from exc


def parse_sla(data: dict) -> ServiceDescriptor:
    _check_keys("sla", data, {"service_id", "constraints"})
    constraints = data.get("constraints")
    if not constraints:
        raise SLAFormatError("sla has no constraints")
    return ServiceDescriptor(str(data.get("service_id", "service")), [parse_task(c) for c in constraints])


def load_sla(path: str | Path) -> ServiceDescriptor:
    return parse_sla(yaml.safe_load(Path(path).read_text()))


def dump_task(task: TaskRequirements) -> dict:
    """Inverse of :func:`parse_task` (one properties block)."""
    cap = task.capacity
    props: dict[str, Any] = {
        "vcpus": cap.cpu_cores,
        "memory": cap.memory_mb,
        "vgpus": cap.gpu_units,
        "vtpus": cap.tpu_units,
        "bandwidth_in": cap.bandwidth_in_mbps,
        "rigidness": task.rigidness,
        "convergence_time": task.convergence_time_ms,
        "virtualization": task.virtualization,
    }
    if task.latency_ms is not None:
        props["latency"] = task.latency_ms
    if task.area is not None:
        props["area"] = task.area
    if task.location is not None:
        props["location"] = f"{task.location.latitude_deg},{task.location.longitude_deg}"
    if task.threshold is not None:
        props["threshold"] = task.threshold
    if task.s2s_constraints:
        props["s2s"] = [
            {"target": c.target_microservice_id, "geo_threshold": c.geo_threshold_km, "latency_threshold": c.latency_threshold_ms}
            for c in task.s2s_constraints
        ]
    if task.s2u_constraints:
        props["s2u"] = [
            {
                "user": c.user_endpoint,
                "location": f"{c.geo_target.latitude_deg},{c.geo_target.longitude_deg}",
                "geo_threshold": c.geo_threshold_km,
                "latency_threshold": c.latency_threshold_ms,
                "probes": c.probe_count,
            }
            for c in task.s2u_constraints
        ]
    return {"microservice_id": task.microservice_id, "properties": [props]}


def dump_sla(service: ServiceDescriptor) -> dict:
    return {"service_id": service.service_id, "constraints": [dump_task(t) for t in service.tasks]}


class RegionRegistry:
    """Named convex regions used by the ``area`` SLA field."""

    def __init__(self, regions: dict[str, Iterable[GeoPoint]] | None = None):
        self._regions: dict[str, tuple[GeoPoint, ...]] = {}
        for name, pts in (regions or {}).items():
            self.add(name, pts)

    def add(self, name: str, points: Iterable[GeoPoint]) -> None:
        pts = tuple(points)
        if len(pts) < 3:
            raise SLAFormatError(f"region {name!r} needs at least 3 vertices")
        self._regions[name] = pts

    def __contains__(self, name: str) -> bool:
        return name in self._regions

    def __getitem__(self, name: str) -> tuple[GeoPoint, ...]:
        return self._regions[name]

    @classmethod
    def load(cls, path: str | Path) -> RegionRegistry:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise SLAFormatError("region file must map names to vertex lists")
        return cls({name: [GeoPoint(float(a), float(b)) for a, b in verts] for name, verts in data.items()})

    def overlaps(self, name: str, zone: Iterable[GeoPoint]) -> bool:
        """True when region ``name`` and the convex hull of ``zone`` share any point."""
        from shapely.geometry import MultiPoint, Polygon

        region = Polygon([(p.longitude_deg, p.latitude_deg) for p in self._regions[name]])
        pts = [(p.longitude_deg, p.latitude_deg) for p in zone]
        if not pts:
            return True
        return region.intersects(MultiPoint(pts).convex_hull)
