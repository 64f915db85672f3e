"""Bandwidth bounds, the success-probability oracle and parameter sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass
from typing import Any

from .sim import ScenarioConfig, run
from .satellite import LOSS_DATA, SatelliteChannelConfig
from .internet import InternetConfig

THROUGHPUT_TOLERANCE = 0.02
ORACLE_TOLERANCE = 0.02
ORACLE_MIN_ROUNDS = 10_000


class SweepAssertionError(AssertionError):
    """A sweep row broke one of the asserted laws."""

    def __init__(self, message: str, row: dict[str, Any]):
        super().__init__(message)
        self.row = row


def throughput_bounds(uplink_bps: float, broadcast_bps: float, msg_size_bytes: int) -> tuple[float, float]:
    """Messages per second allowed by one uplink and by the broadcast link."""
    if uplink_bps <= 0 or broadcast_bps <= 0:
        raise ValueError("bandwidths must be positive")
    if uplink_bps > broadcast_bps:
        raise ValueError("uplink bandwidth must not exceed broadcast bandwidth")
    if msg_size_bytes <= 0:
        raise ValueError("msg_size_bytes must be positive")
    bits = msg_size_bytes * 8
    return uplink_bps / bits, broadcast_bps / bits


def success_probability(p: float, block_size: int, n: int) -> float:
    """Probability that a strict majority of ``n`` nodes receive all ``block_size`` messages."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if block_size < 1 or n < 1:
        raise ValueError("block_size and n must be >= 1")
    q = (1.0 - p) ** block_size
    return sum(math.comb(n, k) * q ** k * (1.0 - q) ** (n - k) for k in range(n // 2 + 1, n + 1))


def estimate_effective_tps(broadcast_bps: float, msg_size_bytes: int, success_ratio: float) -> float:
    if not 0.0 < success_ratio <= 1.0:
        raise ValueError("success_ratio must lie in (0, 1]")
    return broadcast_bps / (msg_size_bytes * 8) * success_ratio


@dataclass
class SweepSpec:
    base: ScenarioConfig
    parameter: str
    values: list
    repetitions: int = 1

    def __post_init__(self):
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.parameter not in _sweepable():
            raise ValueError(f"unknown sweep parameter {self.parameter!r}")

    def configs(self):
        """Yield (value, rep, config) ordered by value then repetition."""
        for value in self.values:
            for rep in range(self.repetitions):
                yield value, rep, self.config_for(value, rep)

    def config_for(self, value, rep: int) -> ScenarioConfig:
        changes = {"seed": self.base.seed + rep}
        if self.parameter == "offered_rate":
            count = max(1, self.base.client_count)
            changes["client_count"] = count
            changes["client_rate"] = value / count
        else:
            changes[self.parameter] = value
        return self.base.replace(**changes)


def _sweepable() -> set[str]:
    names = {f.name for f in dataclasses.fields(ScenarioConfig)}
    names |= {f.name for f in dataclasses.fields(SatelliteChannelConfig)}
    return names | {"offered_rate"}


def throughput_base(duration_s: float = 60.0, seed: int = 0) -> ScenarioConfig:
    """Desk-scale saturation setup: three nodes, 15-byte messages over 1.2 Mbit/s.

    The relay sits one millisecond away, like a simulated satellite on a LAN
    testbed. At geostationary delay one round takes about a quarter second, so
    100-message blocks would cap throughput near 800 msg/s long before the
    bandwidth bound.
    """
    return ScenarioConfig(
        n=3, block_size=100, msg_size_bytes=15, client_count=3, client_rate=1000.0,
        arrival="uniform", duration_s=duration_s, seed=seed, airtime="data",
        satellite=SatelliteChannelConfig(uplink_bandwidth_bps=0.6e6, broadcast_bandwidth_bps=1.2e6,
                                         one_way_delay_s=0.001),
        internet=InternetConfig(rtt_s=0.04),
    )


def loss_base(max_rounds: int = ORACLE_MIN_ROUNDS, seed: int = 0) -> ScenarioConfig:
    """Desk-scale loss setup: three nodes, 20-message blocks, one steady client."""
    return ScenarioConfig(
        n=3, block_size=20, msg_size_bytes=15, client_count=1, client_rate=20.0,
        arrival="uniform", duration_s=1e7, seed=seed, loss_applies_to=LOSS_DATA,
        client_resend=False, max_rounds=max_rounds,
    )


THROUGHPUT_FIELDS = ["offered_rate", "rep", "seed", "throughput", "s_min", "s_max",
                     "committed_messages", "rounds_failed"]
LOSS_FIELDS = ["loss_rate", "rep", "seed", "rounds_attempted", "successes", "failures",
               "success_ratio", "oracle", "gap"]


def run_throughput_sweep(spec: SweepSpec, check: bool = True) -> list[dict[str, Any]]:
    rows = []
    for value, rep, cfg in spec.configs():
        m = run(cfg).metrics
        sat = cfg.satellite
        s_min, s_max = throughput_bounds(sat.uplink_bandwidth_bps, sat.broadcast_bandwidth_bps,
                                         cfg.msg_size_bytes)
        row = {
            "offered_rate": cfg.offered_rate, "rep": rep, "seed": cfg.seed,
            "throughput": m.throughput, "s_min": s_min, "s_max": s_max,
            "committed_messages": m.committed_messages, "rounds_failed": m.rounds_failed,
        }
        rows.append(row)
        if check and m.throughput > s_max * (1 + THROUGHPUT_TOLERANCE):
            raise SweepAssertionError(
                f"throughput {m.throughput:.1f} exceeds bound {s_max:.1f} at offered rate {value}", row)
    return rows


def run_loss_sweep(spec: SweepSpec, check: bool = True) -> list[dict[str, Any]]:
    rows = []
    for value, rep, cfg in spec.configs():
        m = run(cfg).metrics
        oracle = success_probability(cfg.satellite.loss_rate, cfg.block_size, cfg.n)
        successes = m.rounds_succeeded + m.rounds_uncertain_resolved
        gap = abs(m.success_ratio - oracle)
        row = {
            "loss_rate": cfg.satellite.loss_rate, "rep": rep, "seed": cfg.seed,
            "rounds_attempted": m.rounds_attempted, "successes": successes,
            "failures": m.rounds_failed, "success_ratio": m.success_ratio,
            "oracle": oracle, "gap": gap,
        }
        rows.append(row)
        if check and m.rounds_attempted >= ORACLE_MIN_ROUNDS and gap > ORACLE_TOLERANCE:
            raise SweepAssertionError(
                f"success ratio {m.success_ratio:.4f} is {gap:.4f} from oracle {oracle:.4f} at p={value}", row)
    return rows


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return format(v, ".6g")
    return str(v)


def rows_to_csv(rows: list[dict[str, Any]], fields: list[str] | None = None) -> str:
    if fields is None:
        fields = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_fmt(row[f]) for f in fields])
    return buf.getvalue()


def rows_to_json(rows: list[dict[str, Any]]) -> str:
    return json.dumps(rows, indent=2, sort_keys=False) + "\n"

