import textwrap

import pytest

from oak.coords import GeoPoint
from oak.errors import SLAFormatError
from oak.sla import RegionRegistry, dump_sla, load_sla, parse_sla

DETECTOR = {
    "service_id": "detector",
    "constraints": [
        {
            "microservice_id": 1,
            "properties": [
                {"vcpus": 1, "memory": 100, "virtualization": "container", "latency": 20, "threshold": 120},
                {"s2u": [{"user": "10.0.0.9:5000", "location": "48.14,11.58"}]},
            ],
        },
        {
            "microservice_id": 2,
            "properties": [{"vcpus": 0.5, "memory": 64, "s2s": [{"target": 1, "geo_threshold": 50, "latency_threshold": 5}]}],
        },
    ],
}


def test_parse_merges_property_blocks():
    svc = parse_sla(DETECTOR)
    t1 = svc.task(1)
    assert t1.capacity.cpu_cores == 1 and t1.capacity.memory_mb == 100
    assert t1.latency_ms == 20 and t1.threshold == 120
    (u,) = t1.s2u_constraints
    # thresholds not given on the constraint fall back to the task-level values
    assert u.geo_threshold_km == 120 and u.latency_threshold_ms == 20
    assert u.geo_target == GeoPoint(48.14, 11.58)
    (s,) = svc.task(2).s2s_constraints
    assert (s.target_microservice_id, s.geo_threshold_km, s.latency_threshold_ms) == (1, 50, 5)


def test_dump_round_trips():
    svc = parse_sla(DETECTOR)
    assert parse_sla(dump_sla(svc)) == svc


def test_unknown_fields_are_rejected():
    bad = {"service_id": "x", "constraints": [{"microservice_id": 1, "properties": [{"vcpus": 1, "disk": 5}]}]}
    with pytest.raises(SLAFormatError, match="disk"):
        parse_sla(bad)
    with pytest.raises(SLAFormatError):
        parse_sla({"service_id": "x", "owner": "me", "constraints": DETECTOR["constraints"]})


def test_missing_threshold_without_default():
    bad = {"constraints": [{"microservice_id": 1, "properties": [{"s2s": [{"target": 2}]}]}]}
    with pytest.raises(SLAFormatError):
        parse_sla(bad)


def test_invalid_values_surface_as_format_errors():
    for props in ({"virtualization": "vm"}, {"convergence_time": 0}, {"rigidness": 2}):
        with pytest.raises(SLAFormatError):
            parse_sla({"constraints": [{"microservice_id": 1, "properties": [props]}]})
    with pytest.raises(SLAFormatError):
        parse_sla({"service_id": "x", "constraints": []})


def test_load_from_yaml(tmp_path):
    path = tmp_path / "svc.yaml"
    path.write_text(
        textwrap.dedent(
            """
            service_id: web
            constraints:
              - microservice_id: 1
                properties:
                  - vcpus: 2
                    memory: 512
                    area: bavaria
            """
        )
    )
    svc = load_sla(path)
    assert svc.service_id == "web"
    assert svc.tasks[0].area == "bavaria"


def test_region_overlap(tmp_path):
    path = tmp_path / "regions.yaml"
    path.write_text("bavaria: [[47.3, 9.0], [47.3, 13.8], [50.5, 13.8], [50.5, 9.0]]\n")
    regions = RegionRegistry.load(path)
    assert regions.overlaps("bavaria", [GeoPoint(48.1, 11.5), GeoPoint(48.2, 11.6)])
    assert not regions.overlaps("bavaria", [GeoPoint(52.5, 13.4), GeoPoint(53.5, 10.0), GeoPoint(52.0, 12.0)])
    # a single point on the boundary still counts
    assert regions.overlaps("bavaria", [GeoPoint(47.3, 10.0)])
