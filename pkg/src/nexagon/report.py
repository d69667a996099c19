"""Markdown summary and charts for a run directory of bench and sim outputs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import PERCENTILES, BenchReport, compare, load_report  # noqa: E402
from .threatlab.experiments import read_scores  # noqa: E402

ABLATION_METRICS = ("linkage_accuracy", "timing_linkage_accuracy", "reconstruction_rate")


class MissingInputError(FileNotFoundError):
    pass


def _find_bench_pairs(run_dir: Path) -> list[tuple[Path, BenchReport, BenchReport]]:
    pairs = []
    for base_path in sorted(run_dir.rglob("bench-baseline.json")):
        ext_path = base_path.with_name("bench-extended.json")
        if ext_path.exists():
            pairs.append((base_path.parent, load_report(base_path), load_report(ext_path)))
    return pairs


def _ci(ci: tuple[float, float]) -> str:
    return f"[{ci[0]:.3f}, {ci[1]:.3f}]"


def _bench_section(where: Path, run_dir: Path, base: BenchReport, ext: BenchReport) -> list[str]:
    s = compare(base, ext)
    rel = where.relative_to(run_dir) if where != run_dir else Path(where.resolve().name)
    out = [
        f"## Authentication overhead ({rel}, {base.config['concurrent_clients']} clients)",
        "",
        "| Metric | Baseline (PSK) | Extended (PKI) | Change |",
        "|---|---|---|---|",
        f"| Mean latency (ms) | {base.mean_latency_ms:.3f} | {ext.mean_latency_ms:.3f} | {s.latency_overhead_pct:+.2f}% |",
        f"| Latency 95% CI (ms) | {_ci(base.mean_latency_ci)} | {_ci(ext.mean_latency_ci)} | |",
        f"| Throughput (req/s) | {base.throughput_rps:.2f} | {ext.throughput_rps:.2f} | {s.throughput_delta_pct:+.2f}% |",
        f"| Throughput 95% CI (req/s) | {_ci(base.throughput_ci)} | {_ci(ext.throughput_ci)} | |",
        "",
        "| Percentile (ms) | Baseline | Extended |",
        "|---|---|---|",
    ]
    out += [f"| p{q} | {base.percentiles_ms[f'p{q}']:.3f} | {ext.percentiles_ms[f'p{q}']:.3f} |" for q in PERCENTILES]
    out += [
        "",
        f"- latency overhead within 10-25% band: {s.within_paper_latency_band}; within acceptance band 5-40%: {s.within_acceptance_latency}",
        f"- throughput change within -7..-3% band: {s.within_paper_throughput_band}; within acceptance band -12..0%: {s.within_acceptance_throughput}",
        f"- extended percentiles dominate baseline: {s.percentile_dominance}",
        "",
    ]
    return out


def _latency_chart(path: Path, base: BenchReport, ext: BenchReport) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = range(len(PERCENTILES))
    w = 0.38
    ax.bar([x - w / 2 for x in xs], [base.percentiles_ms[f"p{q}"] for q in PERCENTILES], w, label="baseline")
    ax.bar([x + w / 2 for x in xs], [ext.percentiles_ms[f"p{q}"] for q in PERCENTILES], w, label="extended")
    ax.set_xticks(list(xs), [f"p{q}" for q in PERCENTILES])
    ax.set_ylabel("latency (ms)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _ablation_chart(path: Path, rows: list[dict]) -> None:
    grouped: dict[str, dict[str, float]] = defaultdict(dict)
    for r in rows:
        if r["metric"] in ABLATION_METRICS:
            grouped[f"{r['scenario']}:{r['variant']}"][r["metric"]] = r["value"]
    labels = sorted(grouped)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(labels)), 4))
    w = 0.8 / len(ABLATION_METRICS)
    for m_i, metric in enumerate(ABLATION_METRICS):
        ax.bar(
            [i + (m_i - 1) * w for i in range(len(labels))],
            [grouped[lbl].get(metric, 0.0) for lbl in labels],
            w,
            label=metric,
        )
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("adversary score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render(run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise MissingInputError(f"{run_dir} is not a directory")
    pairs = _find_bench_pairs(run_dir)
    score_files = sorted(run_dir.rglob("scores.csv"))
    if not pairs and not score_files:
        raise MissingInputError(f"no bench pair or scores.csv under {run_dir}")
    lines = ["# Run summary", ""]
    for i, (where, base, ext) in enumerate(pairs):
        lines += _bench_section(where, run_dir, base, ext)
        chart = run_dir / f"latency_percentiles{'' if i == 0 else f'_{i}'}.png"
        _latency_chart(chart, base, ext)
        lines += [f"![latency percentiles]({chart.name})", ""]
    if score_files:
        rows = [r for f in score_files for r in read_scores(f)]
        lines += ["## Mitigation ablations", "", "| scenario | variant | metric | value |", "|---|---|---|---|"]
        lines += [f"| {r['scenario']} | {r['variant']} | {r['metric']} | {r['value']:.4g} |" for r in rows]
        _ablation_chart(run_dir / "ablation.png", rows)
        lines += ["", "![mitigation ablation](ablation.png)", ""]
    out = run_dir / "report.md"
    out.write_text("\n".join(lines), encoding="utf-8")
    return out
