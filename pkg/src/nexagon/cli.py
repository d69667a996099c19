"""``nexagon`` command line: services, client replay, simulations, benchmarks, reports.

Every subcommand accepts ``--config FILE`` (YAML or JSON) whose keys mirror
its flags; ``NEXAGON_<FLAG>`` environment variables override the file and
explicit flags override both.  Exit codes: 0 success, 1 usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import signal
import sys
import threading
import time
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from .bench import BenchConfig, BenchError, compare, run_bench
from .client_agent import ClientAgent, ClientConfig, ResolutionError, SpoofedAgentError
from .identity import Rloc, SoftwareTpm
from .report import MissingInputError, render
from .stack import (
    AggregationNode,
    CaNode,
    LocalStack,
    MappingNode,
    ReadinessError,
    StackConfig,
    StackError,
    TopologyConfig,
    load_resolver,
    provision,
    serve_forever,
    up,
)
from .threatlab.experiments import run_sim
from .threatlab.scenario import TOGGLES, ScenarioConfig
from .threatlab.traces import read_traces
from .wire import BindError, ServiceError, TcpTransport, TransportError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ENV_PREFIX = "NEXAGON_"
TOPOLOGY_FIELDS = {f.name for f in fields(TopologyConfig)}
CLIENT_FIELDS = {f.name for f in fields(ClientConfig)}

log = logging.getLogger("nexagon")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _addr(text: str) -> Rloc:
    try:
        return Rloc.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", type=Path, help="YAML/JSON file whose keys mirror these flags")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    if seed:
        p.add_argument("--seed", type=int, help="seed for every random choice (default: OS entropy)")


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    p = _Parser(prog="nexagon", description="Privacy-preserving geo-referenced event overlay")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs: dict[str, _Parser] = {}

    s = subs["ca"] = sub.add_parser("ca", help="run the certificate authority")
    _common(s)
    s.add_argument("--listen", type=_addr, help="host:port to serve on")
    s.add_argument("--rotation-period", type=float, help="CA epoch length in seconds")
    s.add_argument("--cert-lifetime", type=float, help="pseudonym certificate lifetime in seconds")
    s.add_argument("--k", type=int, help="anonymity threshold for sparse sampling")
    s.add_argument("--default-resolution", type=int, choices=range(1, 16), metavar="1..15")
    s.add_argument("--registry", type=Path, help="endorsement-key registry JSON")
    s.add_argument("--state-dir", type=Path, help="directory for keys, registry and escrow")

    s = subs["mapping"] = sub.add_parser("mapping", help="run the geo-mapping agent")
    _common(s)
    s.add_argument("--listen", type=_addr)
    s.add_argument("--ca", type=_addr, help="CA address")
    s.add_argument("--aggregation", type=_addr, help="aggregation agent address")
    s.add_argument("--staleness", type=float, help="mapping entry lifetime in seconds")
    s.add_argument("--replay-window", type=float, help="nonce memory in seconds")
    s.add_argument("--psk", help="hex pre-shared key; enables the benchmark baseline admission path")
    s.add_argument("--state-dir", type=Path)

    s = subs["aggregation"] = sub.add_parser("aggregation", help="run the aggregation agent")
    _common(s)
    s.add_argument("--listen", type=_addr)
    s.add_argument("--window", type=float, help="tumbling window length in seconds")
    s.add_argument("--lake", type=Path, help="data lake directory")
    s.add_argument("--ca", type=_addr, help="CA address")
    s.add_argument("--state-dir", type=Path)

    s = subs["client"] = sub.add_parser("client", help="replay a movement trace as a publishing client")
    _common(s)
    s.add_argument("--trace", type=Path, help="NDJSON movement traces (required)")
    s.add_argument("--mode", choices=("live", "sim"), default="sim")
    s.add_argument("--tpm", type=Path, help="software TPM state file (live mode)")
    s.add_argument("--state-dir", type=Path, help="provisioned state directory (live mode)")
    s.add_argument("--speedup", type=float, default=1.0, help="live replay speed factor")
    s.add_argument("--out", type=Path, help="write acknowledgments here (default stdout)")

    s = subs["sim"] = sub.add_parser("sim", help="run a threat scenario")
    _common(s)
    s.add_argument("--scenario", choices=("sparse", "dense"), default="sparse")
    s.add_argument("--toggles", default="all", help=f"comma list of enabled mitigations, 'all' or 'none'; known: {','.join(TOGGLES)}")
    s.add_argument("--clients", type=int, help="dense scenario client count")
    s.add_argument("--duration", type=float, help="dense scenario length in seconds")
    s.add_argument("--duplicates", type=int, default=0, help="replayed frames to inject")
    s.add_argument("--out", type=Path, default=Path("runs/sim"))

    s = subs["bench"] = sub.add_parser("bench", help="load-test the publish path")
    _common(s)
    s.add_argument("--mode", choices=("baseline", "extended", "both"), default="both")
    s.add_argument("--clients", type=int, default=32)
    s.add_argument("--duration", type=float, default=60.0, help="seconds, including warmup")
    s.add_argument("--warmup", type=float, default=5.0)
    s.add_argument("--think-ms", type=float, default=100.0, help="mean think time between requests")
    s.add_argument("--base-port", type=int, default=7600)
    s.add_argument("--stack-mode", choices=("thread", "process"), default="process")
    s.add_argument("--out", type=Path, default=Path("runs/bench"))

    s = subs["up"] = sub.add_parser("up", help="start CA, aggregation and mapping together")
    _common(s)
    s.add_argument("--mode", choices=("thread", "process"))
    s.add_argument("--host")
    s.add_argument("--ca-port", type=int)
    s.add_argument("--mapping-port", type=int)
    s.add_argument("--aggregation-port", type=int)
    s.add_argument("--state-dir", type=Path)
    s.add_argument("--clients", type=int, help="client TPMs to provision")
    s.add_argument("--for", dest="run_for", type=float, default=0.0, help="stop after this many seconds (0: until signalled)")

    s = subs["report"] = sub.add_parser("report", help="render a run directory to Markdown and charts")
    _common(s, seed=False)
    s.add_argument("run_dir", type=Path)
    return p, subs


# --------------------------------------------------------------------------
# Config file and environment


def load_config_file(path: Path) -> dict[str, Any]:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a mapping")
    return {str(k).replace("-", "_"): v for k, v in raw.items()}


def _convert(action: argparse.Action, value: Any) -> Any:
    if value is None or action.type is None or not isinstance(value, str):
        if action.type is Path and value is not None:
            return Path(value)
        return value
    try:
        return action.type(value)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad value for {action.dest}: {exc}") from None


def _find_config(argv: Sequence[str]) -> Path | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def _apply_defaults(sub: _Parser, file_cfg: dict[str, Any], env: dict[str, str]) -> dict[str, Any]:
    """Install file and environment values as parser defaults; return leftover file keys."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    leftover = {}
    defaults = {}
    for key, value in file_cfg.items():
        if key in actions:
            defaults[key] = _convert(actions[key], value)
        else:
            leftover[key] = value
    for dest, action in actions.items():
        name = ENV_PREFIX + dest.upper()
        if name in env:
            defaults[dest] = _convert(action, env[name])
    sub.set_defaults(**defaults)
    return leftover


# --------------------------------------------------------------------------
# Commands


def _topology(args: argparse.Namespace, extra: dict[str, Any], **overrides: Any) -> TopologyConfig:
    unknown = set(extra) - TOPOLOGY_FIELDS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    topo = dict(extra)
    if getattr(args, "state_dir", None):
        topo["state_dir"] = args.state_dir
    if getattr(args, "seed", None) is not None:
        topo["seed"] = args.seed
    topo.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TopologyConfig.from_mapping(topo)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _addr_fields(service: str, rloc: Rloc | None) -> dict[str, Any]:
    if rloc is None:
        return {}
    return {f"{service}_host": rloc.host, f"{service}_port": rloc.port}


def cmd_ca(args, extra) -> int:
    topo = _topology(
        args,
        extra,
        **_addr_fields("ca", args.listen),
        rotation_period_s=args.rotation_period,
        cert_lifetime_s=args.cert_lifetime,
        k=args.k,
        default_resolution=args.default_resolution,
        registry=str(args.registry) if args.registry else None,
    )
    provision(topo)
    return serve_forever(CaNode(topo))


def cmd_mapping(args, extra) -> int:
    topo = _topology(
        args,
        extra,
        **_addr_fields("mapping", args.listen),
        **_addr_fields("ca", args.ca),
        **_addr_fields("aggregation", args.aggregation),
        staleness_s=args.staleness,
        replay_window_s=args.replay_window,
        psk_hex=args.psk,
    )
    return serve_forever(MappingNode(topo))


def cmd_aggregation(args, extra) -> int:
    topo = _topology(
        args,
        extra,
        **_addr_fields("aggregation", args.listen),
        **_addr_fields("ca", args.ca),
        window_s=args.window,
        lake=str(args.lake) if args.lake else None,
    )
    return serve_forever(AggregationNode(topo))


def _client_config(extra: dict[str, Any]) -> tuple[ClientConfig, dict[str, Any]]:
    own = {k: v for k, v in extra.items() if k in CLIENT_FIELDS}
    rest = {k: v for k, v in extra.items() if k not in CLIENT_FIELDS}
    try:
        return ClientConfig(**own), rest
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_client(args, extra) -> int:
    if args.trace is None:
        raise UsageError("client requires --trace")
    ccfg, rest = _client_config(extra)
    traces = read_traces(args.trace)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        if args.mode == "sim":
            if rest:
                raise UsageError(f"unknown config keys: {sorted(rest)}")
            stack = LocalStack(StackConfig(server_name=ccfg.server_name), random.Random(args.seed or 0))
            t0 = stack.clock()
            for tr in traces:
                client = stack.new_client(ccfg)
                base = tr.waypoints[0][1]
                for coord, t in tr.waypoints:
                    now = max(stack.clock(), t0 + t - base)
                    stack.tick(now)
                    ack = client.publish("road-defect", coord, now)
                    out.write(json.dumps({"client_id": tr.client_id, "timestamp": now, **ack.to_wire()}) + "\n")
            stack.finish()
            return EXIT_OK
        topo = _topology(args, rest)
        tpm_path = args.tpm or topo.client_tpm_path(0)
        tpm = SoftwareTpm.load(tpm_path)

        transport = TcpTransport()
        client = ClientAgent(ccfg, tpm, load_resolver(topo), transport)
        try:
            for tr in traces:
                prev = None
                for coord, t in tr.waypoints:
                    if prev is not None:
                        time.sleep(max(0.0, (t - prev) / 1000.0 / args.speedup))
                    prev = t
                    now = time.time_ns() // 1_000_000
                    ack = client.publish("road-defect", coord, now)
                    out.write(json.dumps({"client_id": tr.client_id, "timestamp": now, **ack.to_wire()}) + "\n")
        finally:
            tpm.save(tpm_path)
            transport.close()
        return EXIT_OK
    finally:
        if out is not sys.stdout:
            out.close()


def parse_toggles(text: str) -> dict[str, bool]:
    text = text.strip()
    if text == "all":
        return {t: True for t in TOGGLES}
    if text in ("none", ""):
        return {t: False for t in TOGGLES}
    chosen = [t.strip().replace("-", "_") for t in text.split(",") if t.strip()]
    if "mix_network" in chosen:
        raise UsageError("mix_network is an ablation placeholder and is not implemented")
    unknown = set(chosen) - set(TOGGLES)
    if unknown:
        raise UsageError(f"unknown toggles: {sorted(unknown)}")
    return {t: t in chosen for t in TOGGLES}


def cmd_sim(args, extra) -> int:
    if extra:
        raise UsageError(f"unknown config keys: {sorted(extra)}")
    kw: dict[str, Any] = dict(parse_toggles(args.toggles))
    kw["scenario"] = args.scenario
    kw["seed"] = args.seed if args.seed is not None else 0
    kw["inject_duplicates"] = args.duplicates
    if args.clients is not None:
        kw["num_clients"] = args.clients
    if args.duration is not None:
        kw["duration_s"] = args.duration
    scores = run_sim(ScenarioConfig(**kw), args.out)
    print(json.dumps(scores, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args, extra) -> int:
    if extra:
        raise UsageError(f"unknown config keys: {sorted(extra)}")
    modes = ("baseline", "extended") if args.mode == "both" else (args.mode,)
    reports = {}
    for mode in modes:
        try:
            cfg = BenchConfig(
                mode=mode,
                concurrent_clients=args.clients,
                duration_s=args.duration,
                warmup_s=args.warmup,
                seed=args.seed if args.seed is not None else 0,
                think_ms=args.think_ms,
                base_port=args.base_port,
                stack_mode=args.stack_mode,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        reports[mode] = run_bench(cfg, args.out)
        r = reports[mode]
        print(f"{mode}: mean {r.mean_latency_ms:.3f} ms, {r.throughput_rps:.1f} req/s, {r.successes} ok")
    if len(reports) == 2:
        summary = compare(reports["baseline"], reports["extended"])
        (args.out / "overhead.json").write_text(json.dumps(summary.to_json(), indent=2), encoding="utf-8")
        print(f"latency overhead {summary.latency_overhead_pct:+.2f}%, throughput change {summary.throughput_delta_pct:+.2f}%")
    return EXIT_OK


def cmd_up(args, extra) -> int:
    topo = _topology(
        args,
        extra,
        host=args.host,
        ca_port=args.ca_port,
        mapping_port=args.mapping_port,
        aggregation_port=args.aggregation_port,
        clients=args.clients,
        mode=args.mode,
    )
    handle = up(topo)
    for service in ("ca", "aggregation", "mapping"):
        print(f"{service} ready at {handle.rloc_of(service)}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        stop.wait(args.run_for if args.run_for > 0 else None)
    finally:
        handle.down()
    return EXIT_OK


def cmd_report(args, extra) -> int:
    path = render(args.run_dir)
    print(path)
    return EXIT_OK


COMMANDS = {
    "ca": cmd_ca,
    "mapping": cmd_mapping,
    "aggregation": cmd_aggregation,
    "client": cmd_client,
    "sim": cmd_sim,
    "bench": cmd_bench,
    "up": cmd_up,
    "report": cmd_report,
}

RUNTIME_ERRORS = (
    BindError,
    ReadinessError,
    BenchError,
    MissingInputError,
    ServiceError,
    TransportError,
    StackError,
    SpoofedAgentError,
    ResolutionError,
    OSError,
)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    command = next((tok for tok in argv if tok in subs), None)
    extra: dict[str, Any] = {}
    try:
        if command is not None:
            cfg_path = _find_config(argv)
            file_cfg = load_config_file(cfg_path) if cfg_path else {}
            extra = _apply_defaults(subs[command], file_cfg, dict(os.environ))
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return COMMANDS[args.command](args, extra)
    except UsageError as exc:
        print(f"nexagon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"nexagon: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
