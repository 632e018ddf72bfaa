"""Dataset readers, planar projection and synthetic workloads."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from . import _kernels as K
from .core import FacilityTrajectory, Rect, UserTrajectory

EARTH_RADIUS_M = 6_371_008.8
DATASET_FORMAT = "tqtree-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class Projection:
    """Equirectangular projection about a reference point; output in meters."""

    lon0: float
    lat0: float
    radius: float = EARTH_RADIUS_M

    @classmethod
    def about(cls, lons, lats) -> "Projection":
        lons = np.asarray(lons, float)
        lats = np.asarray(lats, float)
        if lons.size == 0:
            return cls(0.0, 0.0)
        return cls(float(lons.mean()), float(lats.mean()))

    @property
    def kx(self) -> float:
        return self.radius * math.cos(math.radians(self.lat0)) * math.pi / 180.0

    @property
    def ky(self) -> float:
        return self.radius * math.pi / 180.0

    def forward(self, lon, lat):
        return ((np.asarray(lon, float) - self.lon0) * self.kx,
                (np.asarray(lat, float) - self.lat0) * self.ky)

    def inverse(self, x, y):
        return (np.asarray(x, float) / self.kx + self.lon0,
                np.asarray(y, float) / self.ky + self.lat0)


class Identity:
    """Keeps coordinates as given (already planar)."""

    def forward(self, lon, lat):
        return np.asarray(lon, float), np.asarray(lat, float)

    def inverse(self, x, y):
        return np.asarray(x, float), np.asarray(y, float)


@dataclass
class IngestReport:
    rows: int = 0
    kept: int = 0
    skipped: int = 0
    dropped_singletons: int = 0
    projection: object = None

    def check(self, expected: int | None) -> None:
        if expected is not None and self.kept != expected:
            raise ValueError(f"expected {expected} records, parsed {self.kept}")


def _open_text(source):
    if hasattr(source, "read"):
        return source, False
    return open(source, newline="", encoding="utf-8"), True


def _column(header: list[str] | None, spec) -> int:
    if isinstance(spec, int):
        return spec
    if header is None:
        raise ValueError(f"column {spec!r} given by name but the input has no header")
    try:
        return header.index(spec)
    except ValueError:
        raise ValueError(f"column {spec!r} not in header {header}") from None


def _rows(source, delimiter: str, has_header: bool):
    fh, close = _open_text(source)
    try:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None) if has_header else None
        if header is not None:
            header = [h.strip() for h in header]
        return header, list(reader)
    finally:
        if close:
            fh.close()


def _coord(v: str) -> float:
    x = float(v)
    if not math.isfinite(x):
        raise ValueError("non-finite coordinate")
    return x


TRIP_COLUMNS = {"pickup_lon": "pickup_longitude", "pickup_lat": "pickup_latitude",
                "dropoff_lon": "dropoff_longitude", "dropoff_lat": "dropoff_latitude"}


def read_two_point_trips(source, columns: dict | None = None, delimiter: str = ",",
                         header: bool = True, project: bool = True, id_column=None,
                         expected: int | None = None) -> tuple[list[UserTrajectory], IngestReport]:
    """One two-point trajectory (pickup, dropoff) per row.

    Rows with unparseable, missing or zero coordinates are skipped and
    counted. With ``project`` coordinates are lon/lat degrees projected to
    meters about the mean latitude; otherwise they are used as given.
    """
    cols = dict(TRIP_COLUMNS, **(columns or {}))
    head, rows = _rows(source, delimiter, header)
    idx = [_column(head, cols[c]) for c in ("pickup_lon", "pickup_lat", "dropoff_lon", "dropoff_lat")]
    id_idx = None if id_column is None else _column(head, id_column)
    rep = IngestReport(rows=len(rows))
    good = []
    for n, row in enumerate(rows):
        try:
            v = [_coord(row[i]) for i in idx]
        except (ValueError, IndexError):
            rep.skipped += 1
            continue
        if 0.0 in v:
            rep.skipped += 1
            continue
        good.append((row[id_idx] if id_idx is not None else n, v))
    arr = np.array([v for _, v in good], float).reshape(-1, 4)
    proj = (Projection.about(np.r_[arr[:, 0], arr[:, 2]], np.r_[arr[:, 1], arr[:, 3]])
            if project else Identity())
    x0, y0 = proj.forward(arr[:, 0], arr[:, 1])
    x1, y1 = proj.forward(arr[:, 2], arr[:, 3])
    users = [UserTrajectory(uid, [(x0[i], y0[i]), (x1[i], y1[i])]) for i, (uid, _) in enumerate(good)]
    rep.kept = len(users)
    rep.projection = proj
    rep.check(expected)
    return users, rep


def _timestamp(v: str) -> float:
    v = v.strip()
    try:
        return float(v)
    except ValueError:
        pass
    dt = datetime.fromisoformat(v.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def read_multipoint(source, columns: dict | None = None, delimiter: str = ",", header: bool = True,
                    project: bool = True, expected: int | None = None
                    ) -> tuple[list[UserTrajectory], IngestReport]:
    """Group check-ins by (user, UTC calendar day) into time-ordered trajectories.

    Groups with a single check-in are dropped and counted.
    """
    cols = dict({"user": "user", "timestamp": "timestamp", "lon": "lon", "lat": "lat"},
                **(columns or {}))
    head, rows = _rows(source, delimiter, header)
    ui, ti, xi, yi = (_column(head, cols[c]) for c in ("user", "timestamp", "lon", "lat"))
    rep = IngestReport(rows=len(rows))
    groups: dict[tuple[str, str], list] = {}
    for n, row in enumerate(rows):
        try:
            ts = _timestamp(row[ti])
            lon, lat = _coord(row[xi]), _coord(row[yi])
        except (ValueError, IndexError):
            rep.skipped += 1
            continue
        day = datetime.fromtimestamp(ts, tz=timezone.utc).date().isoformat()
        groups.setdefault((row[ui].strip(), day), []).append((ts, n, lon, lat))
    kept = []
    for key in sorted(groups):
        recs = sorted(groups[key])
        if len(recs) < 2:
            rep.dropped_singletons += 1
            continue
        kept.append((f"{key[0]}:{key[1]}", recs))
    lons = [r[2] for _, recs in kept for r in recs]
    lats = [r[3] for _, recs in kept for r in recs]
    proj = Projection.about(lons, lats) if project else Identity()
    users = []
    for uid, recs in kept:
        x, y = proj.forward([r[2] for r in recs], [r[3] for r in recs])
        users.append(UserTrajectory(uid, np.column_stack([x, y])))
    rep.kept = len(users)
    rep.projection = proj
    rep.check(expected)
    return users, rep


def read_facility_routes(source, projection=None) -> list[FacilityTrajectory]:
    """One route per line: ``id lon lat lon lat ...`` (commas or whitespace)."""
    fh, close = _open_text(source)
    proj = projection or Identity()
    out = []
    try:
        for n, line in enumerate(fh, 1):
            parts = line.replace(",", " ").split()
            if not parts or parts[0].startswith("#"):
                continue
            vals = parts[1:]
            if len(vals) < 2 or len(vals) % 2:
                raise ValueError(f"route line {n}: expected an id followed by lon/lat pairs")
            xy = np.array([float(v) for v in vals]).reshape(-1, 2)
            x, y = proj.forward(xy[:, 0], xy[:, 1])
            out.append(FacilityTrajectory(parts[0], np.column_stack([x, y])))
    finally:
        if close:
            fh.close()
    return out


def order_points_by_zorder(users: Sequence[UserTrajectory], bounds: Rect) -> list[UserTrajectory]:
    """Reorder each trajectory's points along the z-order curve (for unordered inputs)."""
    out = []
    for u in users:
        c = K.morton_codes(u.points[:, 0], u.points[:, 1], bounds.as_tuple())
        out.append(UserTrajectory(u.id, u.points[np.argsort(c, kind="stable")]))
    return out


# ----------------------------------------------------------------------
# Synthetic workloads


@dataclass(frozen=True)
class SyntheticSpec:
    users: int = 10_000
    points: tuple[int, int] = (2, 2)
    facilities: int = 64
    stops: int = 32
    distribution: str = "clustered"
    hotspots: int = 20
    hotspot_radius: float = 1500.0
    hotspot_share: float = 0.8
    extent: float = 30_000.0
    stop_jitter: float = 150.0
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("uniform", "clustered"):
            raise ValueError("distribution must be 'uniform' or 'clustered'")
        lo, hi = self.points
        if not 2 <= lo <= hi:
            raise ValueError("points per trajectory must satisfy 2 <= min <= max")
        if self.facilities < 0 or self.users < 0 or self.stops < 1:
            raise ValueError("counts must be nonnegative and stops at least 1")


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def hotspot_centers(spec: SyntheticSpec) -> np.ndarray:
    rng = _streams(spec.seed)[0]
    r = spec.hotspot_radius
    return rng.uniform(r, spec.extent - r, size=(spec.hotspots, 2))


def _disc(rng, centers, r, n):
    which = rng.integers(0, centers.shape[0], n)
    ang = rng.uniform(0.0, 2 * math.pi, n)
    rad = r * np.sqrt(rng.uniform(0.0, 1.0, n))
    return centers[which] + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


def _locations(rng, spec: SyntheticSpec, centers, n) -> np.ndarray:
    uni = rng.uniform(0.0, spec.extent, size=(n, 2))
    if spec.distribution == "uniform":
        return uni
    hot = rng.uniform(size=n) < spec.hotspot_share
    near = _disc(rng, centers, spec.hotspot_radius, n)
    return np.where(hot[:, None], near, uni)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[UserTrajectory], list[FacilityTrajectory]]:
    """Deterministic users and facilities over a square of side ``extent`` meters.

    Clustered endpoints fall inside hotspot discs with probability
    ``hotspot_share``; facilities are routes between two locations with
    evenly spaced, jittered stops.
    """
    _, urng, frng = _streams(spec.seed)
    centers = hotspot_centers(spec)
    ext = spec.extent
    n = spec.users
    src = _locations(urng, spec, centers, n)
    dst = _locations(urng, spec, centers, n)
    lo, hi = spec.points
    counts = urng.integers(lo, hi + 1, n) if hi > lo else np.full(n, lo)
    users = []
    for i in range(n):
        m = int(counts[i])
        if m == 2:
            pts = np.stack([src[i], dst[i]])
        else:
            t = np.linspace(0.0, 1.0, m)[:, None]
            pts = src[i] + t * (dst[i] - src[i])
            pts[1:-1] += urng.normal(0.0, spec.hotspot_radius / 4, size=(m - 2, 2))
            pts = np.clip(pts, 0.0, ext)
        users.append(UserTrajectory(i, pts))
    facs = []
    a = _locations(frng, spec, centers, spec.facilities)
    b = _locations(frng, spec, centers, spec.facilities)
    for j in range(spec.facilities):
        t = np.linspace(0.0, 1.0, spec.stops)[:, None]
        st = a[j] + t * (b[j] - a[j]) + frng.normal(0.0, spec.stop_jitter, size=(spec.stops, 2))
        facs.append(FacilityTrajectory(j, np.clip(st, 0.0, ext)))
    return users, facs


# ----------------------------------------------------------------------
# Canonical dataset dump


def dump_dataset(users: Sequence[UserTrajectory], facilities: Sequence[FacilityTrajectory], fp,
                 meta: dict | None = None) -> None:
    """Versioned line-delimited JSON; identical inputs give identical bytes."""
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        with open(fp, "w", encoding="utf-8", newline="\n") as f:
            dump_dataset(users, facilities, f, meta)
        return
    head = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "users": len(users),
            "facilities": len(facilities), "meta": meta or {}}
    fp.write(json.dumps(head, sort_keys=True) + "\n")
    for u in users:
        fp.write(json.dumps({"id": u.id, "points": u.points.tolist()}) + "\n")
    for f in facilities:
        fp.write(json.dumps({"id": f.id, "stops": f.stops.tolist()}) + "\n")


def dumps_dataset(users, facilities, meta=None) -> str:
    buf = io.StringIO()
    dump_dataset(users, facilities, buf, meta)
    return buf.getvalue()


def load_dataset(fp) -> tuple[list[UserTrajectory], list[FacilityTrajectory], dict]:
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        with open(fp, encoding="utf-8") as f:
            return load_dataset(f)
    lines = iter(fp)
    head = json.loads(next(lines))
    if head.get("format") != DATASET_FORMAT:
        raise ValueError("not a dataset dump")
    if head.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {head.get('version')}")
    users = [UserTrajectory(r["id"], r["points"]) for r in (json.loads(next(lines)) for _ in range(head["users"]))]
    facs = [FacilityTrajectory(r["id"], r["stops"])
            for r in (json.loads(next(lines)) for _ in range(head["facilities"]))]
    return users, facs, head.get("meta", {})


def spec_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["points"] = list(spec.points)
    return d
