"""Shared fixtures: the twelve-commuter bus-route layout and seeded random instances."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from tqtree import FacilityTrajectory, Rect, ServiceMode, ServiceParams, UserTrajectory

settings.register_profile("repo", deadline=None, print_blob=True)
settings.load_profile("repo")

# A 16 x 16 space. Root quadrants in Morton order: 0 = lower-left,
# 1 = lower-right, 2 = upper-left (holds u5..u8), 3 = upper-right.
FIG_BOUNDS = Rect(0.0, 0.0, 16.0, 16.0)
FIG_PSI = 0.6

FIG_USERS = {
    "u1": [(1, 1), (6, 2)],
    "u2": [(2, 6), (6, 6)],
    "u3": [(9, 1), (14, 2)],
    "u4": [(10, 6), (14, 6)],
    "u5": [(0.5, 8.5), (4.5, 8.5)],
    "u6": [(1.5, 9.5), (4.5, 11.5)],
    "u7": [(3.5, 11.5), (1, 13)],
    "u8": [(1, 15), (7, 11)],
    "u9": [(9, 9), (14, 10)],
    "u10": [(2.5, 14.5), (12, 12)],
    "u11": [(6, 14.5), (13, 3)],
    "u12": [(10, 14), (15, 15)],
}

FIG_ROUTES = {
    25: [(1, 1), (6, 2), (2, 6), (6, 6), (10, 6), (14, 6)],
    46: [(0.5, 8.5), (4.5, 8.5), (1.5, 9.5), (4.5, 11.5), (3.5, 11.5), (1, 13), (1, 15), (7, 11),
         (2.5, 14.5), (6, 14.5)],
    65: [(9, 9), (14, 10), (10, 14), (15, 15), (12, 12), (13, 3)],
}


def figure_users():
    return [UserTrajectory(k, v) for k, v in FIG_USERS.items()]


def figure_facilities():
    return [FacilityTrajectory(k, v) for k, v in FIG_ROUTES.items()]


@pytest.fixture
def fig_users():
    return figure_users()


@pytest.fixture
def fig_facilities():
    return figure_facilities()


@pytest.fixture
def fig_params():
    return ServiceParams(FIG_PSI, ServiceMode.BINARY)


def random_instance(seed: int, n_users=None, n_fac=None, n_stops=None, points=None, extent=None,
                    psi=None):
    """Small clustered workload with many near-threshold hits.

    Points snap to a coarse grid part of the time so that ties, duplicate
    points and points exactly on cell borders all show up.
    """
    rng = np.random.default_rng(seed)
    n_users = n_users or int(rng.integers(1, 400))
    n_fac = n_fac or int(rng.integers(1, 20))
    n_stops = n_stops or int(rng.integers(1, 24))
    lo, hi = points or (2, int(rng.integers(2, 6)))
    extent = extent or float(rng.choice([50.0, 200.0, 1000.0]))
    psi = psi or float(rng.choice([0.05, 0.1, 0.2])) * extent
    centers = rng.uniform(0, extent, size=(int(rng.integers(1, 6)), 2))

    def pts(n):
        c = centers[rng.integers(len(centers), size=n)]
        p = c + rng.normal(scale=extent * 0.08, size=(n, 2))
        snap = rng.random(n) < 0.3
        p[snap] = np.round(p[snap] / (extent / 16)) * (extent / 16)
        return np.clip(p, 0, extent)

    users = [UserTrajectory(i, pts(int(rng.integers(lo, hi + 1)))) for i in range(n_users)]
    facs = []
    for j in range(n_fac):
        if j > 0 and rng.random() < 0.15:
            facs.append(FacilityTrajectory(j, facs[-1].stops.copy()))  # exact tie
        else:
            facs.append(FacilityTrajectory(j, pts(int(rng.integers(1, n_stops + 1)))))
    return users, facs, psi
