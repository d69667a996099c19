"""Baseline/extended bench pairs over several client counts.

Each pair lands in <out>/c<N>/ with raw latency CSVs, per-mode reports and
overhead.json; a one-line summary per pair goes to stdout.
"""

import argparse
import json
from pathlib import Path

from nexagon.bench import BenchConfig, compare, run_bench


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--clients", type=int, nargs="+", default=[8, 32, 128])
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--warmup", type=float, default=5.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--stack-mode", choices=("thread", "process"), default="process")
    ap.add_argument("--out", type=Path, default=Path("runs/bench-sweep"))
    args = ap.parse_args()
    for n in args.clients:
        out = args.out / f"c{n}"
        reports = {}
        for mode in ("baseline", "extended"):
            cfg = BenchConfig(mode=mode, concurrent_clients=n, duration_s=args.duration, warmup_s=args.warmup,
                              seed=args.seed, stack_mode=args.stack_mode)
            reports[mode] = run_bench(cfg, out)
        summary = compare(reports["baseline"], reports["extended"])
        (out / "overhead.json").write_text(json.dumps(summary.to_json(), indent=2), encoding="utf-8")
        print(f"clients {n:4d}: latency {reports['baseline'].mean_latency_ms:.3f} -> {reports['extended'].mean_latency_ms:.3f} ms "
              f"({summary.latency_overhead_pct:+.1f}%), throughput {summary.throughput_delta_pct:+.2f}%, "
              f"dominance {summary.percentile_dominance}")


if __name__ == "__main__":
    main()
