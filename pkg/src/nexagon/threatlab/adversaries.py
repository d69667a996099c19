"""Adversary models and their scorers.

Adversary functions take only :class:`AdversaryObservation` lists plus
public knowledge (the road map).  Scorers are the only code that reads the
sealed ground truth.
"""

from __future__ import annotations

import random
import statistics
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

from ..hexgrid import HexCellId, cell_distance_km, cell_to_center, latlng_to_cell
from .scenario import AdversaryObservation, ScenarioResult


# --------------------------------------------------------------------------
# Session linkage


@dataclass(frozen=True)
class _Chain:
    members: tuple[int, ...]
    start: int
    end: int
    start_cell: HexCellId
    end_cell: HexCellId
    eid_key: bytes
    median_gap: float | None


@dataclass
class LinkagePrediction:
    successor: dict[int, int | None]
    clusters: list[list[int]]
    links: dict[int, int]


def _chains(observations: Sequence[AdversaryObservation]) -> list[_Chain]:
    by_eid: dict[bytes, list[int]] = {}
    for i in sorted(range(len(observations)), key=lambda i: (observations[i].timestamp, i)):
        by_eid.setdefault(observations[i].observed_eid.value, []).append(i)
    chains = []
    for key, members in by_eid.items():
        times = [observations[i].timestamp for i in members]
        gaps = [b - a for a, b in zip(times, times[1:]) if b > a]
        chains.append(
            _Chain(
                tuple(members),
                times[0],
                times[-1],
                observations[members[0]].cell,
                observations[members[-1]].cell,
                key,
                statistics.median(gaps) if gaps else None,
            )
        )
    chains.sort(key=lambda c: (c.end, c.eid_key))
    return chains


def linkage_adversary(
    observations: Sequence[AdversaryObservation],
    *,
    window_ms: int = 10_000,
    strategy: Literal["nearest", "timing"] = "nearest",
) -> LinkagePrediction:
    """Chain observations by EID, then stitch chains greedily across EID swaps.

    Each chain, in order of its last observation, is joined to the unclaimed
    chain that starts within ``window_ms`` after it ends and is closest in
    space (``nearest``) or closest to the expected next report time
    (``timing``).  Remaining ties go to the smaller EID, which is unrelated
    to the truth.
    """
    chains = _chains(observations)
    claimed: set[int] = set()
    links: dict[int, int] = {}
    for a_idx, a in enumerate(chains):
        best = None
        best_key = None
        expected = a.end + (a.median_gap if a.median_gap is not None else window_ms / 2)
        for b_idx, b in enumerate(chains):
            if b_idx == a_idx or b_idx in claimed or not a.end < b.start <= a.end + window_ms:
                continue
            if strategy == "nearest":
                key = (cell_distance_km(a.end_cell, b.start_cell), b.eid_key)
            else:
                key = (abs(b.start - expected), b.eid_key)
            if best_key is None or key < best_key:
                best, best_key = b_idx, key
        if best is not None:
            links[a_idx] = best
            claimed.add(best)

    successor: dict[int, int | None] = {}
    for a_idx, chain in enumerate(chains):
        for x, y in zip(chain.members, chain.members[1:]):
            successor[x] = y
        nxt = links.get(a_idx)
        successor[chain.members[-1]] = chains[nxt].members[0] if nxt is not None else None

    clusters = []
    heads = [i for i in range(len(chains)) if i not in claimed]
    for h in heads:
        cluster: list[int] = []
        cur: int | None = h
        while cur is not None:
            cluster.extend(chains[cur].members)
            cur = links.get(cur)
        clusters.append(cluster)
    obs_links = {chains[a].members[-1]: chains[b].members[0] for a, b in links.items()}
    return LinkagePrediction(successor, clusters, obs_links)


@dataclass(frozen=True)
class LinkageScore:
    accuracy: float
    pairs: int
    cross_swap_pairs: bool
    baseline_mean: float
    baseline_p_value: float


def _truth_pairs(result: ScenarioResult) -> tuple[list[tuple[int, int]], bool]:
    obs = result.observations
    truth = result._truth
    per_client: dict[int, list[int]] = {}
    for i in sorted(range(len(obs)), key=lambda i: (obs[i].timestamp, i)):
        per_client.setdefault(truth.client_of[i], []).append(i)
    pairs = [(x, y) for seq in per_client.values() for x, y in zip(seq, seq[1:])]
    crossing = [(x, y) for x, y in pairs if obs[x].observed_eid != obs[y].observed_eid]
    if crossing:
        return crossing, True
    return pairs, False


def score_linkage(
    result: ScenarioResult, prediction: LinkagePrediction, *, shuffles: int = 100, seed: int = 0
) -> LinkageScore:
    """Fraction of consecutive same-client report pairs that the adversary chains.

    Pairs are restricted to those spanning an EID swap when any exist; pairs
    inside one EID are linked by equality and say nothing about the
    mitigation.  The baseline permutes the adversary's stitch targets.
    """
    pairs, crossing = _truth_pairs(result)
    if not pairs:
        return LinkageScore(1.0, 0, False, 1.0, 1.0)

    def accuracy(successor: dict[int, int | None]) -> float:
        return sum(1 for x, y in pairs if successor.get(x) == y) / len(pairs)

    observed = accuracy(prediction.successor)
    rng = random.Random(seed)
    sources = sorted(prediction.links)
    targets = [prediction.links[s] for s in sources]
    shuffled_scores = []
    for _ in range(shuffles):
        perm = targets[:]
        rng.shuffle(perm)
        succ = dict(prediction.successor)
        succ.update(zip(sources, perm))
        shuffled_scores.append(accuracy(succ))
    mean = statistics.fmean(shuffled_scores) if shuffled_scores else observed
    p = (1 + sum(1 for s in shuffled_scores if s >= observed)) / (1 + len(shuffled_scores))
    return LinkageScore(observed, len(pairs), crossing, mean, p)


# --------------------------------------------------------------------------
# Sparse-region tracking


@dataclass
class TrackerPrediction:
    path: list[HexCellId]
    destination: HexCellId | None


def _indexes_to(fine: HexCellId, coarse: HexCellId, cache: dict) -> bool:
    key = (fine, coarse.resolution)
    if key not in cache:
        cache[key] = latlng_to_cell(cell_to_center(fine), coarse.resolution)
    return cache[key] == coarse


def candidate_cells(obs_cell: HexCellId, road_cells: Iterable[HexCellId], resolution: int, cache: dict | None = None) -> list[HexCellId]:
    """Road cells at ``resolution`` that an observed cell is consistent with."""
    cache = {} if cache is None else cache
    if obs_cell.resolution >= resolution:
        return [latlng_to_cell(cell_to_center(obs_cell), resolution)]
    return sorted(c for c in road_cells if _indexes_to(c, obs_cell, cache))


def sparse_tracker(
    observations: Sequence[AdversaryObservation], road_cells: Iterable[HexCellId], resolution: int
) -> TrackerPrediction:
    """Reconstruct a lone client's path at ``resolution`` from observed cells.

    An observation pins down a cell only when exactly one road cell is
    consistent with it; ambiguous observations are skipped.
    """
    road = sorted(set(road_cells))
    cache: dict = {}
    path: list[HexCellId] = []
    for o in sorted(observations, key=lambda o: o.timestamp):
        cands = candidate_cells(o.cell, road, resolution, cache)
        if len(cands) == 1 and (not path or path[-1] != cands[0]):
            path.append(cands[0])
    return TrackerPrediction(path, path[-1] if path else None)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class TrackerScore:
    reconstruction_rate: float
    destination_correct: bool
    true_cells: int


def score_tracker(result: ScenarioResult, prediction: TrackerPrediction) -> TrackerScore:
    true = result._truth.traces[0].cells(result.config.resolution)
    rate = lcs_length(prediction.path, true) / len(true)
    return TrackerScore(rate, prediction.destination == true[-1], len(true))
