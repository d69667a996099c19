"""Scenario runs written to disk: observations, scores and a short report."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

from .adversaries import linkage_adversary, score_linkage, score_tracker, sparse_tracker
from .scenario import TOGGLES, ScenarioConfig, ScenarioResult, run_scenario
from .suite import spoof_and_replay_suite
from .traces import write_traces

SCORE_FIELDS = ("scenario", "variant", "metric", "value")


def variant_name(config: ScenarioConfig) -> str:
    on = [t for t in TOGGLES if getattr(config, t)]
    return "+".join(on) if on else "none"


def score_result(result: ScenarioResult) -> dict[str, float]:
    cfg = result.config
    scores: dict[str, float] = {}
    near = score_linkage(result, linkage_adversary(result.observations), seed=cfg.seed)
    timing = score_linkage(result, linkage_adversary(result.observations, strategy="timing"), seed=cfg.seed)
    scores["linkage_accuracy"] = near.accuracy
    scores["linkage_baseline"] = near.baseline_mean
    scores["linkage_p_value"] = near.baseline_p_value
    scores["timing_linkage_accuracy"] = timing.accuracy
    if cfg.scenario == "sparse":
        tr = score_tracker(result, sparse_tracker(result.observations, result.road_cells, cfg.resolution))
        scores["reconstruction_rate"] = tr.reconstruction_rate
        scores["destination_correct"] = float(tr.destination_correct)
    scores["distinct_eids"] = float(len({o.observed_eid for o in result.observations}))
    scores["observations"] = float(len(result.observations))
    scores["replays_accepted"] = float(result.counters.get("replays_accepted", 0))
    return scores


def write_observations(path: Path, result: ScenarioResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for o in result.observations:
            fh.write(
                json.dumps(
                    {"observed_eid": str(o.observed_eid), "cell": str(o.cell), "timestamp": o.timestamp, "epoch": o.epoch},
                    sort_keys=True,
                )
                + "\n"
            )


def append_scores(path: Path, scenario: str, variant: str, scores: dict[str, float]) -> None:
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(SCORE_FIELDS)
        for metric, value in scores.items():
            w.writerow([scenario, variant, metric, f"{value:.6g}"])


def read_scores(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{**row, "value": float(row["value"])} for row in csv.DictReader(fh)]


def run_sim(config: ScenarioConfig, out_dir: Path, *, with_suite: bool = True) -> dict[str, float]:
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_scenario(config)
    variant = variant_name(config)
    scores = score_result(result)
    if with_suite:
        suite = spoof_and_replay_suite(config)
        scores["attacks_defeated"] = float(suite.defeated)
    write_observations(out_dir / f"observations-{config.scenario}-{variant}.ndjson", result)
    # Inputs, not adversary view: lets `client --trace` replay the same movement.
    write_traces(out_dir / f"traces-{config.scenario}-seed{config.seed}.ndjson", result._truth.traces)
    append_scores(out_dir / "scores.csv", config.scenario, variant, scores)
    with open(out_dir / "sim-report.md", "a", encoding="utf-8") as fh:
        fh.write(f"## {config.scenario} / {variant} (seed {config.seed})\n\n")
        fh.write("| metric | value |\n|---|---|\n")
        for k, v in scores.items():
            fh.write(f"| {k} | {v:.4g} |\n")
        fh.write("\n")
    (out_dir / f"config-{config.scenario}-{variant}.json").write_text(json.dumps(asdict(config), indent=2), encoding="utf-8")
    return scores
