import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oak.coords import (
    EARTH_RADIUS_KM,
    GeoPoint,
    RttSample,
    VivaldiCoordinate,
    dist_euc,
    dist_gc,
    median_ping,
    trilaterate,
    vivaldi_update,
)
from oak.errors import DimensionMismatchError, InsufficientAnchorsError


def chord_distance_km(a, b):
    """Great-circle distance through the 3D chord between two unit vectors."""

    def unit(p):
        lat, lon = math.radians(p.latitude_deg), math.radians(p.longitude_deg)
        return np.array([math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)])

    chord = np.linalg.norm(unit(a) - unit(b))
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, chord / 2))


def test_dist_euc_identity():
    a = VivaldiCoordinate((1.0, 2.0, 3.0))
    assert dist_euc(a, a) == 0


def test_dist_euc_345():
    assert dist_euc(VivaldiCoordinate((0, 0, 0)), VivaldiCoordinate((3, 4, 0))) == 5


def test_dist_euc_adds_heights():
    assert dist_euc(VivaldiCoordinate((0, 0, 0), 1.0), VivaldiCoordinate((3, 4, 0), 2.0)) == 8


def test_dist_euc_rejects_mixed_dimensions():
    with pytest.raises(DimensionMismatchError):
        dist_euc(VivaldiCoordinate((0, 0)), VivaldiCoordinate((0, 0, 0)))


def test_dist_gc_identity():
    p = GeoPoint(48.1, 11.5)
    assert dist_gc(p, p) == 0


def test_dist_gc_quarter_circle():
    assert dist_gc(GeoPoint(0, 0), GeoPoint(0, 90)) == pytest.approx(math.pi * 6371 / 2, abs=1e-6)
    assert dist_gc(GeoPoint(0, 0), GeoPoint(0, 90)) == pytest.approx(10007.54, abs=0.01)


def test_dist_gc_munich_berlin():
    munich, berlin = GeoPoint(48.1374, 11.5755), GeoPoint(52.52, 13.405)
    assert dist_gc(munich, berlin) == pytest.approx(chord_distance_km(munich, berlin), abs=1e-6)
    assert dist_gc(munich, berlin) == pytest.approx(504.4, abs=0.5)


coord_lat = st.floats(-90, 90, allow_nan=False)
coord_lon = st.floats(-180, 180, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(coord_lat, coord_lon, coord_lat, coord_lon)
def test_dist_gc_matches_chord_oracle(la, lo, lb, lob):
    a, b = GeoPoint(la, lo), GeoPoint(lb, lob)
    assert dist_gc(a, b) == pytest.approx(chord_distance_km(a, b), abs=1e-6)
    assert dist_gc(a, b) == pytest.approx(dist_gc(b, a), abs=1e-9)


def test_geo_point_validates_range():
    with pytest.raises(ValueError):
        GeoPoint(91, 0)
    with pytest.raises(ValueError):
        GeoPoint(0, 181)
    assert GeoPoint.parse("48.1,11.5") == GeoPoint(48.1, 11.5)


def test_vivaldi_update_zero_error_keeps_position():
    me = VivaldiCoordinate((0.0, 0.0, 0.0), 0.0, 0.5)
    peer = VivaldiCoordinate((3.0, 4.0, 0.0), 0.0, 0.5)
    out = vivaldi_update(me, RttSample(peer, 5.0, "p"))
    assert out.position == pytest.approx(me.position)
    assert out.error_estimate < me.error_estimate


def test_vivaldi_update_hand_evaluated_step():
    # w = 1/(1+1) = 0.5, force = 0.25 * 0.5 * (20 - 10) = 1.25, unit(x_i - x_j) = (-1, 0, 0)
    me = VivaldiCoordinate((0.0, 0.0, 0.0), 0.0, 1.0)
    peer = VivaldiCoordinate((10.0, 0.0, 0.0), 0.0, 1.0)
    out = vivaldi_update(me, RttSample(peer, 20.0, "p"))
    assert out.position == pytest.approx((-1.25, 0.0, 0.0))
    assert out.height == 0.0
    # rel_err = 0.5, e = 0.5 * 0.25 * 0.5 + 1.0 * (1 - 0.125)
    assert out.error_estimate == pytest.approx(0.9375)


def test_vivaldi_update_coincident_nodes_separate_reproducibly():
    me = VivaldiCoordinate.origin()
    peer = VivaldiCoordinate.origin()
    a = vivaldi_update(me, RttSample(peer, 10.0, "b"), self_id="a")
    b = vivaldi_update(me, RttSample(peer, 10.0, "b"), self_id="a")
    assert a == b
    assert dist_euc(a, peer) == pytest.approx(0.25 * 0.5 * 10.0)


def test_vivaldi_update_rejects_zero_rtt():
    with pytest.raises(ValueError):
        vivaldi_update(VivaldiCoordinate.origin(), RttSample(VivaldiCoordinate((1.0, 0, 0)), 0.0))


def test_vivaldi_height_grows_when_underestimating():
    me = VivaldiCoordinate((0.0, 0.0, 0.0), 1.0, 1.0)
    peer = VivaldiCoordinate((10.0, 0.0, 0.0), 1.0, 1.0)
    out = vivaldi_update(me, RttSample(peer, 30.0, "p"))
    assert out.height > me.height


def test_trilaterate_planted_point():
    anchors = [(0, 0, 0), (10, 0, 0), (0, 10, 0), (0, 0, 10)]
    target = np.array([2.0, 3.0, 4.0])
    samples = [
        RttSample(VivaldiCoordinate(tuple(map(float, a))), float(np.linalg.norm(target - a)), f"a{i}")
        for i, a in enumerate(anchors)
    ]
    u = trilaterate(samples)
    assert np.allclose(u.position, target, atol=1e-3)


def test_trilaterate_zero_radius_repeated_anchor():
    anchor = VivaldiCoordinate((5.0, -2.0, 1.0))
    u = trilaterate([RttSample(anchor, 0.0, str(i)) for i in range(3)])
    assert u.position == pytest.approx(anchor.position)


def test_trilaterate_needs_three_anchors():
    a = VivaldiCoordinate((0.0, 0.0, 0.0))
    with pytest.raises(InsufficientAnchorsError):
        trilaterate([RttSample(a, 1.0), RttSample(a, 2.0)])


def test_trilaterate_subtracts_anchor_heights():
    target = np.array([1.0, 1.0, 1.0])
    anchors = [np.array(p, dtype=float) for p in [(0, 0, 0), (8, 0, 0), (0, 8, 0), (0, 0, 8), (8, 8, 8)]]
    samples = [RttSample(VivaldiCoordinate(tuple(a), 2.0), float(np.linalg.norm(target - a)) + 2.0) for a in anchors]
    u = trilaterate(samples)
    assert np.allclose(u.position, target, atol=1e-4)


def test_median_ping_takes_middle_value():
    values = iter([9.0, 1.0, 5.0])
    assert median_ping(lambda w, t: next(values), "w", "u") == 5.0
