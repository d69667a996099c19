"""Synthetic movement traces: a lone vehicle on a rural road, and a dense crowd."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ..hexgrid import GeoCoordinate, HexCellId, cell_center_xy, latlng_to_cell, unproject

# Spacing of raster samples along a road; well below a res-9 cell width.
ROAD_SAMPLE_KM = 0.01


@dataclass(frozen=True)
class MovementTrace:
    client_id: int
    waypoints: tuple[tuple[GeoCoordinate, int], ...]
    report_period_ms: int

    def __post_init__(self) -> None:
        if len(self.waypoints) < 2:
            raise ValueError("a trace needs at least two waypoints")
        times = [t for _, t in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint timestamps must be strictly increasing")

    @property
    def duration_ms(self) -> int:
        return self.waypoints[-1][1] - self.waypoints[0][1]

    def cells(self, resolution: int) -> list[HexCellId]:
        """Distinct consecutive cells visited at report times."""
        out: list[HexCellId] = []
        for coord, _ in self.waypoints:
            cell = latlng_to_cell(coord, resolution)
            if not out or out[-1] != cell:
                out.append(cell)
        return out

    def to_json(self) -> dict:
        return {
            "client_id": self.client_id,
            "report_period_ms": self.report_period_ms,
            "waypoints": [[c.lat, c.lon, t] for c, t in self.waypoints],
        }

    @classmethod
    def from_json(cls, raw: dict) -> "MovementTrace":
        return cls(
            int(raw["client_id"]),
            tuple((GeoCoordinate(lat, lon), int(t)) for lat, lon, t in raw["waypoints"]),
            int(raw["report_period_ms"]),
        )


def write_traces(path: Path, traces: Iterable[MovementTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_json()) + "\n")


def read_traces(path: Path) -> list[MovementTrace]:
    with open(path, encoding="utf-8") as fh:
        return [MovementTrace.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class Road:
    """Public road geometry as planar polyline vertices (km)."""

    vertices: tuple[tuple[float, float], ...]

    def sample(self, step_km: float = ROAD_SAMPLE_KM) -> list[tuple[float, float]]:
        pts = [self.vertices[0]]
        for (x0, y0), (x1, y1) in zip(self.vertices, self.vertices[1:]):
            n = max(1, math.ceil(math.hypot(x1 - x0, y1 - y0) / step_km))
            pts.extend((x0 + (x1 - x0) * s / n, y0 + (y1 - y0) * s / n) for s in range(1, n + 1))
        return pts

    def cells(self, resolution: int) -> set[HexCellId]:
        return {latlng_to_cell(unproject(x, y), resolution) for x, y in self.sample()}

    def point_at(self, dist_km: float) -> tuple[float, float]:
        for (x0, y0), (x1, y1) in zip(self.vertices, self.vertices[1:]):
            seg = math.hypot(x1 - x0, y1 - y0)
            if dist_km <= seg:
                f = dist_km / seg
                return (x0 + (x1 - x0) * f, y0 + (y1 - y0) * f)
            dist_km -= seg
        return self.vertices[-1]

    @property
    def length_km(self) -> float:
        return sum(math.hypot(x1 - x0, y1 - y0) for (x0, y0), (x1, y1) in zip(self.vertices, self.vertices[1:]))


def make_road(rng: random.Random, length_km: float, segment_km: float = 1.5, max_turn_deg: float = 30.0) -> Road:
    """Winding road well inside one resolution-1 cell, away from the poles and the antimeridian."""
    lat = rng.uniform(-55.0, 55.0)
    lon = rng.uniform(-170.0, 170.0)
    cx, cy = cell_center_xy(latlng_to_cell(GeoCoordinate(lat, lon), 1))
    r = rng.uniform(0.0, 40.0)
    a = rng.uniform(0.0, 2 * math.pi)
    x, y = cx + r * math.cos(a), cy + r * math.sin(a)
    heading = rng.uniform(0.0, 2 * math.pi)
    verts = [(x, y)]
    travelled = 0.0
    while travelled < length_km:
        heading += math.radians(rng.uniform(-max_turn_deg, max_turn_deg))
        x += segment_km * math.cos(heading)
        y += segment_km * math.sin(heading)
        verts.append((x, y))
        travelled += segment_km
    return Road(tuple(verts))


def sparse_trace(
    rng: random.Random,
    *,
    resolution: int = 9,
    target_cells: int = 40,
    report_period_ms: int = 5_000,
    speed_kmh: float = 65.0,
    start_ms: int = 0,
    client_id: int = 0,
) -> tuple[MovementTrace, Road]:
    """A lone vehicle reporting periodically until it has crossed ``target_cells`` cells.

    The road continues beyond the final report, so the destination is not
    simply the end of the public road.
    """
    step_km = speed_kmh * report_period_ms / 3_600_000.0
    # Generous road length: a wiggly path needs more than one cell width per cell.
    road = make_road(rng, length_km=target_cells * 0.6 + 5.0)
    waypoints: list[tuple[GeoCoordinate, int]] = []
    visited: list[HexCellId] = []
    dist = 0.0
    t = start_ms
    while dist <= road.length_km - 3.0:
        coord = unproject(*road.point_at(dist))
        cell = latlng_to_cell(coord, resolution)
        if not visited or visited[-1] != cell:
            if len(visited) == target_cells:
                break
            visited.append(cell)
        waypoints.append((coord, t))
        dist += step_km
        t += report_period_ms
    return MovementTrace(client_id, tuple(waypoints), report_period_ms), road


def dense_traces(
    rng: random.Random,
    *,
    num_clients: int = 50,
    resolution: int = 9,
    extent_m: float = 120.0,
    duration_ms: int = 600_000,
    report_period_ms: int = 5_000,
    speed_ms: float = 1.4,
    start_ms: int = 0,
) -> tuple[list[MovementTrace], HexCellId]:
    """``num_clients`` random walkers confined to a disc inside one cell.

    Each client reports with its own phase offset within the report period.
    """
    lat = rng.uniform(-55.0, 55.0)
    lon = rng.uniform(-170.0, 170.0)
    home = latlng_to_cell(GeoCoordinate(lat, lon), resolution)
    cx, cy = cell_center_xy(home)
    radius_km = extent_m / 1000.0
    step_km = speed_ms * report_period_ms / 1_000_000.0
    traces = []
    for cid in range(num_clients):
        r = radius_km * math.sqrt(rng.random())
        a = rng.uniform(0.0, 2 * math.pi)
        x, y = cx + r * math.cos(a), cy + r * math.sin(a)
        phase = rng.randrange(report_period_ms)
        waypoints = []
        t = start_ms + phase
        while t < start_ms + duration_ms:
            waypoints.append((unproject(x, y), t))
            a = rng.uniform(0.0, 2 * math.pi)
            nx, ny = x + step_km * math.cos(a), y + step_km * math.sin(a)
            if math.hypot(nx - cx, ny - cy) <= radius_km:
                x, y = nx, ny
            t += report_period_ms
        traces.append(MovementTrace(cid, tuple(waypoints), report_period_ms))
    return traces, home
