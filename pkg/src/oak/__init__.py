"""Hierarchical edge orchestration.

Root, cluster and worker tiers with delegated scheduling (resource-only and
latency/distance aware), Vivaldi network coordinates, a semantic overlay
network, and a deterministic discrete-event simulator.
"""

from oak.coords import GeoPoint, RttSample, VivaldiCoordinate, dist_euc, dist_gc, trilaterate, vivaldi_update
from oak.model import (
    AggregateStats,
    CapacityVector,
    ClusterNode,
    InfrastructureTree,
    Placement,
    ServiceDescriptor,
    TaskRequirements,
    WorkerSnapshot,
    aggregate,
    available,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateStats",
    "CapacityVector",
    "ClusterNode",
    "GeoPoint",
    "InfrastructureTree",
    "Placement",
    "RttSample",
    "ServiceDescriptor",
    "TaskRequirements",
    "VivaldiCoordinate",
    "WorkerSnapshot",
    "aggregate",
    "available",
    "dist_euc",
    "dist_gc",
    "trilaterate",
    "vivaldi_update",
]
