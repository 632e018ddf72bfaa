"""Trajectory coverage queries over a TQ-tree index."""
from ._kernels import backend
from .core import (FacilityComponent, FacilityTrajectory, Point, Rect, ServiceMode, ServiceParams,
                   UserTrajectory, dist, embr, intersecting_components, point_served,
                   trajectory_length)
from .service import (SCALE, ServiceLedger, UnionState, UserTable, make_union, service_group,
                      service_set, service_single)
from .tree import TQTree, Variant, ZId, ZNode, QNode, bounds_for

__all__ = [
    "FacilityComponent", "FacilityTrajectory", "Point", "QNode", "Rect", "SCALE", "ServiceLedger",
    "ServiceMode", "ServiceParams", "TQTree", "UnionState", "UserTable", "UserTrajectory",
    "Variant", "ZId", "ZNode", "backend", "bounds_for", "dist", "embr",
    "intersecting_components", "make_union", "point_served", "service_group", "service_set",
    "service_single", "trajectory_length",
]
