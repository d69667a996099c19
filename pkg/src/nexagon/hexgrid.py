"""Planar hierarchical hexagonal grid.

Latitude/longitude are projected equirectangularly onto a plane and covered
by a stack of hexagonal lattices, one per resolution (1 = coarsest, 15 =
finest).  Each level is the previous one scaled by 1/sqrt(7) and rotated by
atan(sqrt(3)/5) (about 19.1 degrees), so every lattice point at resolution r
is either a point of resolution r-1 (digit 0, the center child) or one of
the six lattice neighbours of exactly one such point (digits 1-6, counter
clockwise from the level's first axis).  That gives the aperture-7 hierarchy
used for cell identifiers: a base cell at resolution 1 plus one digit per
finer level.

A cell is the Voronoi hexagon around its lattice point, so indexing a
coordinate means finding the nearest lattice point.  Only cells whose center
falls inside the projected lat/lon rectangle have a geographic center; they
are the cells returned by :func:`latlng_to_cell` and :func:`cell_neighbors`.

Packed 64-bit layout (most significant first)::

    [resolution: 4 bits][base: 15 bits][14 digits x 3 bits]

Unused trailing digits are stored as 7.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator

MIN_RESOLUTION = 1
MAX_RESOLUTION = 15
EARTH_RADIUS_KM = 6371.0088
BASE_EDGE_KM = 500.0
LEVEL_ROTATION = math.atan2(math.sqrt(3.0), 5.0)

X_EXTENT_KM = math.pi * EARTH_RADIUS_KM
Y_EXTENT_KM = 0.5 * math.pi * EARTH_RADIUS_KM

# Axial offsets of the six ring children / neighbours, in digit order 1..6.
DIRECTIONS: tuple[tuple[int, int], ...] = ((1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1))
_OFFSETS = ((0, 0),) + DIRECTIONS
# (3i + j) mod 7 identifies which of the 7 offsets separates a point from its parent.
_DIGIT_OF_RESIDUE = {(3 * di + dj) % 7: digit for digit, (di, dj) in enumerate(_OFFSETS)}

_BASE_BITS = 15
_DIGIT_BITS = 3
_MAX_DIGITS = MAX_RESOLUTION - 1
_TEXT_RE = re.compile(r"^r(\d{1,2})-(\d+)(?:-([0-6]*))?$")


class GridError(ValueError):
    """Raised for coordinates, resolutions or cells outside the grid's domain."""


@dataclass(frozen=True)
class GeoCoordinate:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        lat, lon = self.lat, self.lon
        if isinstance(lat, bool) or isinstance(lon, bool):
            raise GridError("coordinates must be numbers")
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise GridError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise GridError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise GridError(f"longitude {lon} outside [-180, 180]")


def check_resolution(res: int) -> int:
    if isinstance(res, bool) or not isinstance(res, int):
        raise GridError(f"resolution must be an int, got {res!r}")
    if not MIN_RESOLUTION <= res <= MAX_RESOLUTION:
        raise GridError(f"resolution {res} outside [{MIN_RESOLUTION}, {MAX_RESOLUTION}]")
    return res


# --------------------------------------------------------------------------
# Lattice geometry


@dataclass(frozen=True)
class _Level:
    b1: tuple[float, float]
    b2: tuple[float, float]
    inv: tuple[float, float, float, float]
    spacing: float


def _make_level(res: int) -> _Level:
    spacing = math.sqrt(3.0) * BASE_EDGE_KM / math.sqrt(7.0) ** (res - 1)
    phi = -(res - 1) * LEVEL_ROTATION
    b1 = (spacing * math.cos(phi), spacing * math.sin(phi))
    b2 = (spacing * math.cos(phi + math.pi / 3), spacing * math.sin(phi + math.pi / 3))
    det = b1[0] * b2[1] - b2[0] * b1[1]
    inv = (b2[1] / det, -b2[0] / det, -b1[1] / det, b1[0] / det)
    return _Level(b1, b2, inv, spacing)


_LEVELS = {res: _make_level(res) for res in range(MIN_RESOLUTION, MAX_RESOLUTION + 1)}


def edge_length_km(res: int) -> float:
    """Hexagon edge length (= circumradius) at ``res``."""
    return _LEVELS[check_resolution(res)].spacing / math.sqrt(3.0)


def project(coord: GeoCoordinate) -> tuple[float, float]:
    return (
        EARTH_RADIUS_KM * math.radians(coord.lon),
        EARTH_RADIUS_KM * math.radians(coord.lat),
    )


def _in_domain(x: float, y: float) -> bool:
    return abs(x) <= X_EXTENT_KM and abs(y) <= Y_EXTENT_KM


def unproject(x: float, y: float) -> GeoCoordinate:
    if not _in_domain(x, y):
        raise GridError(f"planar point ({x:.3f}, {y:.3f}) lies outside the projected domain")
    lat = math.degrees(y / EARTH_RADIUS_KM)
    lon = math.degrees(x / EARTH_RADIUS_KM)
    return GeoCoordinate(max(-90.0, min(90.0, lat)), max(-180.0, min(180.0, lon)))


def _center_xy(res: int, i: int, j: int) -> tuple[float, float]:
    lv = _LEVELS[res]
    return (i * lv.b1[0] + j * lv.b2[0], i * lv.b1[1] + j * lv.b2[1])


def _fractional_axial(res: int, x: float, y: float) -> tuple[float, float]:
    a, b, c, d = _LEVELS[res].inv
    return (a * x + b * y, c * x + d * y)


def _hex_round(fq: float, fr: float) -> tuple[int, int]:
    fs = -fq - fr
    q, r, s = round(fq), round(fr), round(fs)
    dq, dr, ds = abs(q - fq), abs(r - fr), abs(s - fs)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    return int(q), int(r)


def _down(i: int, j: int, digit: int) -> tuple[int, int]:
    di, dj = _OFFSETS[digit]
    return 2 * i - j + di, i + 3 * j + dj


def _up(i: int, j: int) -> tuple[int, int, int]:
    digit = _DIGIT_OF_RESIDUE[(3 * i + j) % 7]
    di, dj = _OFFSETS[digit]
    a, b = i - di, j - dj
    return (3 * a + b) // 7, (2 * b - a) // 7, digit


# --------------------------------------------------------------------------
# Base cells: every resolution-1 lattice point within a generous margin of the
# projected rectangle, numbered row by row.


def _enumerate_bases() -> tuple[tuple[tuple[int, int], ...], dict[tuple[int, int], int]]:
    margin = 3.0 * BASE_EDGE_KM
    lv = _LEVELS[1]
    row_step = abs(lv.b2[1])
    j_max = int(math.ceil((Y_EXTENT_KM + margin) / row_step)) + 1
    coords = []
    for j in range(-j_max, j_max + 1):
        y = j * lv.b2[1]
        if abs(y) > Y_EXTENT_KM + margin:
            continue
        i_lo = int(math.floor((-X_EXTENT_KM - margin - j * lv.b2[0]) / lv.b1[0])) - 1
        i_hi = int(math.ceil((X_EXTENT_KM + margin - j * lv.b2[0]) / lv.b1[0])) + 1
        for i in range(i_lo, i_hi + 1):
            x, _ = _center_xy(1, i, j)
            if abs(x) <= X_EXTENT_KM + margin:
                coords.append((i, j))
    return tuple(coords), {c: n for n, c in enumerate(coords)}


BASE_AXIAL, _BASE_INDEX = _enumerate_bases()
NUM_BASE_CELLS = len(BASE_AXIAL)
assert NUM_BASE_CELLS < (1 << _BASE_BITS)


# --------------------------------------------------------------------------
# Cell identifiers


@dataclass(frozen=True, order=True)
class HexCellId:
    resolution: int
    base: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        check_resolution(self.resolution)
        if not isinstance(self.path, tuple):
            object.__setattr__(self, "path", tuple(self.path))
        if not 0 <= self.base < NUM_BASE_CELLS:
            raise GridError(f"base cell {self.base} out of range")
        if len(self.path) != self.resolution - 1:
            raise GridError(
                f"path length {len(self.path)} does not match resolution {self.resolution}"
            )
        if any(not isinstance(d, int) or not 0 <= d <= 6 for d in self.path):
            raise GridError(f"invalid digit in path {self.path}")

    def __str__(self) -> str:
        text = f"r{self.resolution}-{self.base:03d}"
        if self.path:
            text += "-" + "".join(map(str, self.path))
        return text

    @classmethod
    def parse(cls, text: str) -> "HexCellId":
        m = _TEXT_RE.match(text)
        if not m:
            raise GridError(f"malformed cell id {text!r}")
        digits = tuple(int(ch) for ch in (m.group(3) or ""))
        return cls(int(m.group(1)), int(m.group(2)), digits)

    def pack(self) -> int:
        value = self.resolution
        value = (value << _BASE_BITS) | self.base
        for n in range(_MAX_DIGITS):
            digit = self.path[n] if n < len(self.path) else 7
            value = (value << _DIGIT_BITS) | digit
        return value

    @classmethod
    def unpack(cls, value: int) -> "HexCellId":
        if not 0 <= value < (1 << 64):
            raise GridError(f"packed cell id {value} is not a 64-bit value")
        digits = []
        for _ in range(_MAX_DIGITS):
            digits.append(value & 0b111)
            value >>= _DIGIT_BITS
        base = value & ((1 << _BASE_BITS) - 1)
        res = value >> _BASE_BITS
        check_resolution(res)
        digits.reverse()
        path = tuple(digits[: res - 1])
        if any(d == 7 for d in path) or any(d != 7 for d in digits[res - 1 :]):
            raise GridError("packed cell id has inconsistent digit padding")
        return cls(res, base, path)


@lru_cache(maxsize=65536)
def _axial(cell: HexCellId) -> tuple[int, int]:
    i, j = BASE_AXIAL[cell.base]
    for digit in cell.path:
        i, j = _down(i, j, digit)
    return i, j


def _cell_from_axial(res: int, i: int, j: int) -> HexCellId | None:
    digits = []
    for _ in range(res - 1):
        i, j, digit = _up(i, j)
        digits.append(digit)
    base = _BASE_INDEX.get((i, j))
    if base is None:
        return None
    digits.reverse()
    return HexCellId(res, base, tuple(digits))


def _has_center(res: int, i: int, j: int) -> bool:
    return _in_domain(*_center_xy(res, i, j))


# --------------------------------------------------------------------------
# Operations


def latlng_to_cell(coord: GeoCoordinate, res: int) -> HexCellId:
    """Cell whose hexagon contains ``coord`` at resolution ``res``.

    Ties between equidistant centers go to the lexicographically smallest
    (base, path).  Within half a hexagon of the domain edge the nearest
    center may lie outside the projected rectangle; the nearest center inside
    it is used instead.
    """
    if not isinstance(coord, GeoCoordinate):
        raise GridError(f"expected GeoCoordinate, got {type(coord).__name__}")
    check_resolution(res)
    x, y = project(coord)
    qi, qj = _hex_round(*_fractional_axial(res, x, y))
    for rings in (1, 3):
        candidates = []
        for i, j in _disc(qi, qj, rings):
            if not _has_center(res, i, j):
                continue
            cx, cy = _center_xy(res, i, j)
            candidates.append(((cx - x) ** 2 + (cy - y) ** 2, i, j))
        if candidates:
            break
    else:  # pragma: no cover - the rectangle is far larger than a few rings
        raise GridError(f"no cell found for {coord}")
    best = min(d for d, _, _ in candidates)
    tied = [(i, j) for d, i, j in candidates if d == best]
    cells = [c for c in (_cell_from_axial(res, i, j) for i, j in tied) if c is not None]
    return min(cells)


def _disc(i: int, j: int, rings: int) -> Iterator[tuple[int, int]]:
    for dq in range(-rings, rings + 1):
        for dr in range(max(-rings, -dq - rings), min(rings, -dq + rings) + 1):
            yield i + dq, j + dr


def cell_to_center(cell: HexCellId) -> GeoCoordinate:
    i, j = _axial(cell)
    return unproject(*_center_xy(cell.resolution, i, j))


def cell_center_xy(cell: HexCellId) -> tuple[float, float]:
    """Planar center in km; defined for every cell, including those off the map."""
    i, j = _axial(cell)
    return _center_xy(cell.resolution, i, j)


def has_center(cell: HexCellId) -> bool:
    return _in_domain(*cell_center_xy(cell))


def cell_parent(cell: HexCellId, coarser: int) -> HexCellId:
    check_resolution(coarser)
    if coarser > cell.resolution:
        raise GridError(f"resolution {coarser} is finer than cell resolution {cell.resolution}")
    return HexCellId(coarser, cell.base, cell.path[: coarser - 1])


def cell_children(cell: HexCellId, finer: int) -> list[HexCellId]:
    check_resolution(finer)
    if finer < cell.resolution:
        raise GridError(f"resolution {finer} is coarser than cell resolution {cell.resolution}")
    paths = [cell.path]
    for _ in range(finer - cell.resolution):
        paths = [p + (d,) for p in paths for d in range(7)]
    return [HexCellId(finer, cell.base, p) for p in paths]


def cell_neighbors(cell: HexCellId) -> list[HexCellId]:
    """Adjacent same-resolution cells; fewer than six at the domain edge."""
    i, j = _axial(cell)
    out = []
    for di, dj in DIRECTIONS:
        ni, nj = i + di, j + dj
        if not _has_center(cell.resolution, ni, nj):
            continue
        nb = _cell_from_axial(cell.resolution, ni, nj)
        if nb is not None:
            out.append(nb)
    return out


def cell_distance_km(a: HexCellId, b: HexCellId) -> float:
    ax, ay = cell_center_xy(a)
    bx, by = cell_center_xy(b)
    return math.hypot(ax - bx, ay - by)


def contains(coarse: HexCellId, fine: HexCellId) -> bool:
    """Geometric containment: the center of ``fine`` indexes to ``coarse``."""
    if fine.resolution < coarse.resolution:
        return False
    return latlng_to_cell(cell_to_center(fine), coarse.resolution) == coarse


def adaptive_resolution(
    coord: GeoCoordinate,
    requested: int,
    k: int,
    population: Callable[[HexCellId], int],
) -> int:
    """Finest resolution <= ``requested`` whose cell holds at least ``k`` clients.

    Falls back to resolution 1 when no level qualifies.
    """
    check_resolution(requested)
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise GridError(f"k must be a positive int, got {k!r}")
    for res in range(requested, MIN_RESOLUTION - 1, -1):
        if population(latlng_to_cell(coord, res)) >= k:
            return res
    return MIN_RESOLUTION
