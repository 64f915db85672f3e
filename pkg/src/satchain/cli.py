"""Command-line front end: bounds, oracle, single runs and sweeps."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .harness import (
    LOSS_FIELDS,
    THROUGHPUT_FIELDS,
    SweepAssertionError,
    SweepSpec,
    loss_base,
    rows_to_csv,
    rows_to_json,
    run_loss_sweep,
    run_throughput_sweep,
    success_probability,
    throughput_base,
    throughput_bounds,
)
from .internet import InternetConfig
from .satellite import SatelliteChannelConfig
from .sim import InvariantViolation, ScenarioConfig, run

THROUGHPUT_FACTORS = [0.2, 0.5, 0.8, 1.0, 1.5, 2.0]
LOSS_RATES = [0.03, 0.06, 0.09, 0.15, 0.30]

# fields that are structured or output-only and so get no override flag
_SKIP = {"satellite", "internet", "outages", "crashes", "trace", "delivery_log", "seed"}
_OPTIONAL_INTS = {"max_rounds", "messages_per_client"}


def _scalar_fields():
    for f in dataclasses.fields(ScenarioConfig):
        if f.name not in _SKIP:
            yield f.name, f.default
    for f in dataclasses.fields(SatelliteChannelConfig):
        if f.name != "rng_seed":
            yield f.name, f.default
    yield "rtt_s", InternetConfig().rtt_s


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON scenario file; flags override its values")
    for name, default in _scalar_fields():
        flag = "--" + name.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, int) or name in _OPTIONAL_INTS:
            p.add_argument(flag, dest=name, type=int, default=None)
        elif isinstance(default, float) or default is None:
            p.add_argument(flag, dest=name, type=float, default=None)
        else:
            p.add_argument(flag, dest=name, default=None)
    p.add_argument("--outage", action="append", default=[], nargs=2, type=float,
                   metavar=("START", "END"), help="broadcast outage window (repeatable)")
    p.add_argument("--crash", action="append", default=[], nargs=2, metavar=("NODE", "TIME"),
                   help="crash NODE at TIME (repeatable)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="write output here instead of stdout")
    p.add_argument("--format", choices=["csv", "json"], default="csv")


def _build_config(args, base: ScenarioConfig) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if args.config else base
    changes = {}
    for name, _ in _scalar_fields():
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    rtt = changes.pop("rtt_s", None)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.outage:
        changes["outages"] = list(cfg.outages) + [tuple(w) for w in args.outage]
    if args.crash:
        changes["crashes"] = list(cfg.crashes) + [(int(a), float(b)) for a, b in args.crash]
    cfg = cfg.replace(**changes)
    if rtt is not None:
        cfg.internet = InternetConfig(rtt, dict(cfg.internet.link_delays))
    cfg.validate()
    return cfg


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _render(rows, fields, fmt) -> str:
    return rows_to_json(rows) if fmt == "json" else rows_to_csv(rows, fields)


def cmd_bounds(args) -> int:
    s_min, s_max = throughput_bounds(args.uplink_bandwidth_bps, args.broadcast_bandwidth_bps,
                                     args.msg_size_bytes)
    _emit(_render([{"s_min": s_min, "s_max": s_max}], ["s_min", "s_max"], args.format), args.out)
    return 0


def cmd_oracle(args) -> int:
    rows = [{"loss_rate": p, "block_size": args.block_size, "n": args.n,
             "success_probability": success_probability(p, args.block_size, args.n)}
            for p in args.loss_rate]
    _emit(_render(rows, ["loss_rate", "block_size", "n", "success_probability"], args.format), args.out)
    return 0


def cmd_run(args) -> int:
    cfg = _build_config(args, ScenarioConfig())
    if args.trace_out:
        cfg.trace = True
    if args.delivery_log_out:
        cfg.delivery_log = True
    result = run(cfg)
    metrics = result.metrics.to_dict()
    metrics["uplink_queue_max"] = max(metrics["uplink_queue_max"], default=0)
    metrics["ledger_head"] = result.reference_ledger().head.hash.hex()
    if args.format == "json":
        text = json.dumps(metrics, indent=2) + "\n"
    else:
        text = rows_to_csv([metrics])
    _emit(text, args.out)
    if args.trace_out:
        with open(args.trace_out, "w") as fh:
            fh.writelines(line + "\n" for line in result.traces)
    if args.delivery_log_out:
        with open(args.delivery_log_out, "w") as fh:
            fh.writelines(line + "\n" for line in result.delivery_log or [])
    return 0


def cmd_sweep_throughput(args) -> int:
    base = _build_config(args, throughput_base())
    if args.values:
        values = args.values
    else:
        _, s_max = throughput_bounds(base.satellite.uplink_bandwidth_bps,
                                     base.satellite.broadcast_bandwidth_bps, base.msg_size_bytes)
        values = [f * s_max for f in THROUGHPUT_FACTORS]
    spec = SweepSpec(base, "offered_rate", values, args.repetitions)
    rows = run_throughput_sweep(spec)
    _emit(_render(rows, THROUGHPUT_FIELDS, args.format), args.out)
    return 0


def cmd_sweep_loss(args) -> int:
    base = _build_config(args, loss_base())
    spec = SweepSpec(base, "loss_rate", args.values or LOSS_RATES, args.repetitions)
    rows = run_loss_sweep(spec)
    _emit(_render(rows, LOSS_FIELDS, args.format), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satchain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", help="throughput bounds for given bandwidths")
    p.add_argument("--uplink-bandwidth-bps", type=float, default=None)
    p.add_argument("--broadcast-bandwidth-bps", type=float, required=True)
    p.add_argument("--msg-size-bytes", type=int, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("oracle", help="analytic round-success probability")
    p.add_argument("--loss-rate", type=float, nargs="+", required=True)
    p.add_argument("--block-size", type=int, default=20)
    p.add_argument("--n", type=int, default=3)
    _add_common(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("run", help="run one scenario and print its metrics")
    _add_config_flags(p)
    _add_common(p)
    p.add_argument("--trace-out", help="write the effect trace here")
    p.add_argument("--delivery-log-out", help="write the broadcast delivery log here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-throughput", help="measured throughput against offered rate")
    _add_config_flags(p)
    _add_common(p)
    p.add_argument("--values", type=float, nargs="+", help="offered rates in messages/s")
    p.add_argument("--repetitions", type=int, default=1)
    p.set_defaults(func=cmd_sweep_throughput)

    p = sub.add_parser("sweep-loss", help="round success ratio against loss rate")
    _add_config_flags(p)
    _add_common(p)
    p.add_argument("--values", type=float, nargs="+", help="loss rates")
    p.add_argument("--repetitions", type=int, default=1)
    p.set_defaults(func=cmd_sweep_loss)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bounds" and args.uplink_bandwidth_bps is None:
        args.uplink_bandwidth_bps = args.broadcast_bandwidth_bps
    try:
        return args.func(args)
    except (SweepAssertionError, InvariantViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
