import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cells, coords, random_coord
from nexagon.hexgrid import (
    BASE_EDGE_KM,
    EARTH_RADIUS_KM,
    NUM_BASE_CELLS,
    GeoCoordinate,
    GridError,
    HexCellId,
    adaptive_resolution,
    cell_center_xy,
    cell_children,
    cell_neighbors,
    cell_parent,
    cell_to_center,
    contains,
    edge_length_km,
    has_center,
    latlng_to_cell,
)

PROPERTY_EXAMPLES = 10_000


def _xy(c: GeoCoordinate) -> tuple[float, float]:
    # Written out independently of the module's projection helper.
    return EARTH_RADIUS_KM * c.lon * math.pi / 180.0, EARTH_RADIUS_KM * c.lat * math.pi / 180.0


def brute_force_nearest(coord: GeoCoordinate, res: int) -> HexCellId:
    """Exhaustive nearest-center search over every descendant of every nearby base cell."""
    x, y = _xy(coord)
    spacing1 = math.sqrt(3.0) * BASE_EDGE_KM
    best = None
    for base in range(NUM_BASE_CELLS):
        root = HexCellId(1, base, ())
        bx, by = cell_center_xy(root)
        if math.hypot(bx - x, by - y) > 2.0 * spacing1:
            continue
        for cell in cell_children(root, res):
            if not has_center(cell):
                continue
            cx, cy = cell_center_xy(cell)
            key = ((cx - x) ** 2 + (cy - y) ** 2, cell)
            if best is None or key < best:
                best = key
    return best[1]


def test_nearest_center_oracle_500_samples():
    rng = random.Random(3)
    mismatches = []
    for _ in range(500):
        c = random_coord(rng)
        if latlng_to_cell(c, 3) != brute_force_nearest(c, 3):
            mismatches.append(c)
    assert mismatches == []


def test_origin_maps_to_nearest_base():
    cell = latlng_to_cell(GeoCoordinate(0.0, 0.0), 1)
    assert cell.resolution == 1
    assert cell == brute_force_nearest(GeoCoordinate(0.0, 0.0), 1)


def test_base_center_is_lattice_point():
    for base in range(0, NUM_BASE_CELLS, 7):
        cell = HexCellId(1, base)
        if has_center(cell):
            x, y = _xy(cell_to_center(cell))
            cx, cy = cell_center_xy(cell)
            assert math.isclose(x, cx, abs_tol=1e-6) and math.isclose(y, cy, abs_tol=1e-6)


@settings(max_examples=PROPERTY_EXAMPLES, deadline=None)
@given(cells)
def test_center_round_trip(cell):
    assert latlng_to_cell(cell_to_center(cell), cell.resolution) == cell


@settings(max_examples=PROPERTY_EXAMPLES, deadline=None)
@given(coords, st.integers(1, 15))
def test_index_fixpoint_and_determinism(c, res):
    cell = latlng_to_cell(c, res)
    assert latlng_to_cell(c, res) == cell
    assert latlng_to_cell(cell_to_center(cell), res) == cell


@settings(max_examples=PROPERTY_EXAMPLES, deadline=None)
@given(cells, st.integers(0, 2))
def test_hierarchy_partition(cell, depth):
    finer = min(15, cell.resolution + depth)
    kids = cell_children(cell, finer)
    assert len(kids) == 7 ** (finer - cell.resolution)
    assert len(set(kids)) == len(kids)
    assert all(cell_parent(k, cell.resolution) == cell for k in kids)


@settings(max_examples=PROPERTY_EXAMPLES, deadline=None)
@given(cells)
def test_neighbor_symmetry_and_irreflexivity(cell):
    nbs = cell_neighbors(cell)
    assert cell not in nbs
    assert len(nbs) <= 6 and len(set(nbs)) == len(nbs)
    for nb in nbs:
        assert cell in cell_neighbors(nb)


def test_interior_cell_has_six_neighbors():
    cell = latlng_to_cell(GeoCoordinate(48.1, 11.6), 9)
    assert len(cell_neighbors(cell)) == 6


def test_neighbors_are_adjacent_on_the_lattice():
    rng = random.Random(8)
    for _ in range(200):
        cell = latlng_to_cell(random_coord(rng), rng.randint(1, 15))
        spacing = math.sqrt(3.0) * edge_length_km(cell.resolution)
        cx, cy = cell_center_xy(cell)
        for nb in cell_neighbors(cell):
            nx, ny = cell_center_xy(nb)
            # Centers sit ~1e4 km from the origin, so the difference carries ~1e-12 km of rounding.
            assert math.isclose(math.hypot(nx - cx, ny - cy), spacing, rel_tol=1e-9, abs_tol=1e-9)
            assert cell in cell_neighbors(nb)


def test_parent_identity_and_truncation():
    cell = latlng_to_cell(GeoCoordinate(10.0, 20.0), 4)
    assert cell_parent(cell, 4) == cell
    assert cell_parent(cell, 1) == HexCellId(1, cell.base)
    with pytest.raises(GridError):
        cell_parent(cell, 5)


def test_children_counts():
    cell = latlng_to_cell(GeoCoordinate(-33.9, 151.2), 6)
    assert cell_children(cell, 6) == [cell]
    assert len(cell_children(cell, 7)) == 7
    kids = cell_children(cell, 8)
    assert len(kids) == 49 and len(set(kids)) == 49
    with pytest.raises(GridError):
        cell_children(cell, 5)


def test_parent_center_within_parent_circumradius():
    rng = random.Random(5)
    for _ in range(500):
        cell = latlng_to_cell(random_coord(rng), rng.randint(2, 15))
        parent = cell_parent(cell, cell.resolution - 1)
        px, py = cell_center_xy(parent)
        cx, cy = cell_center_xy(cell)
        assert math.hypot(px - cx, py - cy) <= edge_length_km(parent.resolution)


def test_coordinate_domain_errors():
    for lat, lon in [(91.0, 0.0), (0.0, 181.0), (float("nan"), 0.0), (0.0, float("inf"))]:
        with pytest.raises(GridError):
            GeoCoordinate(lat, lon)
    with pytest.raises(GridError):
        latlng_to_cell(GeoCoordinate(0.0, 0.0), 0)
    with pytest.raises(GridError):
        latlng_to_cell(GeoCoordinate(0.0, 0.0), 16)


@settings(max_examples=2000, deadline=None)
@given(cells)
def test_text_and_packed_forms_round_trip(cell):
    assert HexCellId.parse(str(cell)) == cell
    packed = cell.pack()
    assert 0 <= packed < 1 << 64
    assert HexCellId.unpack(packed) == cell


def test_text_form_example():
    assert str(HexCellId(4, 17, (3, 0, 2))) == "r4-017-302"
    assert HexCellId.parse("r4-017-302") == HexCellId(4, 17, (3, 0, 2))


def test_geometric_containment_of_fine_centers():
    c = GeoCoordinate(40.0, -3.7)
    fine = latlng_to_cell(c, 12)
    for res in range(1, 12):
        assert contains(latlng_to_cell(cell_to_center(fine), res), fine)


# -- adaptive resolution ------------------------------------------------------


def brute_force_cloak(coord, requested, k, population):
    ok = [r for r in range(1, requested + 1) if population(latlng_to_cell(coord, r)) >= k]
    return max(ok) if ok else 1


def _density_map(points, res_set=range(1, 16)):
    counts = {}
    for p in points:
        for r in res_set:
            cell = latlng_to_cell(p, r)
            counts[cell] = counts.get(cell, 0) + 1
    return lambda cell: counts.get(cell, 0)


def test_adaptive_resolution_dense_cell_example():
    # Ten clients inside one resolution-5 cell, at most four in any res-6 cell.
    home = latlng_to_cell(GeoCoordinate(52.52, 13.40), 5)
    kids = cell_children(home, 6)
    points = [cell_to_center(k) for k in kids] + [cell_to_center(k) for k in cell_children(kids[0], 7)[1:4]]
    assert len(points) == 10
    population = _density_map(points)
    assert population(home) == 10
    query = points[0]
    got = adaptive_resolution(query, 9, 5, population)
    assert got == brute_force_cloak(query, 9, 5, population)
    assert got == 5  # frozen: brute-force scan from 9 down to 1


def test_adaptive_resolution_floor_and_no_cloak():
    c = GeoCoordinate(1.0, 1.0)
    assert adaptive_resolution(c, 9, 5, lambda cell: 1) == 1
    assert adaptive_resolution(c, 9, 5, lambda cell: 5) == 9


@settings(max_examples=300, deadline=None)
@given(
    st.lists(coords, min_size=1, max_size=25),
    st.integers(1, 12),
    st.integers(1, 8),
    st.integers(0, 24),
)
def test_cloaking_soundness_minimality_monotonicity(points, requested, k, pick):
    population = _density_map(points, range(1, requested + 1))
    query = points[pick % len(points)]
    got = adaptive_resolution(query, requested, k, population)
    assert got == brute_force_cloak(query, requested, k, population)
    assert got == 1 or population(latlng_to_cell(query, got)) >= k
    assert all(population(latlng_to_cell(query, r)) < k for r in range(got + 1, requested + 1))
    assert adaptive_resolution(query, requested, k + 1, population) <= got
