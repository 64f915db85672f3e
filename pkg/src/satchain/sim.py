"""Deterministic discrete-event engine binding nodes, channels and clients."""

from __future__ import annotations

import dataclasses
import hashlib
import heapq
import itertools
import json
import random
from dataclasses import dataclass, field
from typing import Any

from .internet import InternetConfig, InternetNet
from .node import (
    CancelTimer,
    ClientReject,
    Commit,
    InternetSend,
    Node,
    NodeConfig,
    SetTimer,
    UplinkBroadcast,
)
from .proto import (
    AskMessage,
    Block,
    BlockReply,
    BlockRequest,
    ClientMessage,
    DataMessage,
    DecodeError,
    KeyTable,
    Ledger,
    RestartMessage,
    SyncMessage,
    decode,
    encode,
    find_chain_violation,
)
from .satellite import LOSS_ALL, LOSS_DATA, Frame, SatelliteChannel, SatelliteChannelConfig, merge_windows

AIRTIME_WIRE = "wire"
AIRTIME_MSGSIZE = "msgsize"
AIRTIME_DATA = "data"
ARRIVAL_POISSON = "poisson"
ARRIVAL_UNIFORM = "uniform"


class InvariantViolation(RuntimeError):
    def __init__(self, invariant: str, time: float, detail: str):
        super().__init__(f"{invariant} violated at t={time:.6f}: {detail}")
        self.invariant = invariant
        self.time = time
        self.detail = detail


def derive_seed(seed: int, consumer: str) -> int:
    """Stable per-consumer sub-seed, so adding a consumer never shifts another's draws."""
    h = hashlib.blake2b(f"{seed}:{consumer}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


@dataclass
class ScenarioConfig:
    n: int = 3
    block_size: int = 20
    msg_size_bytes: int = 15
    client_count: int = 3
    client_rate: float = 10.0
    arrival: str = ARRIVAL_POISSON
    messages_per_client: int | None = None  # stop generating after this many
    satellite: SatelliteChannelConfig = field(default_factory=SatelliteChannelConfig)
    internet: InternetConfig = field(default_factory=InternetConfig)
    duration_s: float = 10.0
    seed: int = 0
    outages: list = field(default_factory=list)  # [(t_start, t_end)]
    crashes: list = field(default_factory=list)  # [(node, t)]
    loss_applies_to: str = LOSS_ALL
    airtime: str = AIRTIME_MSGSIZE
    client_resend: bool = True
    resend_backoff_s: float = 0.5
    max_rounds: int | None = None
    round_timeout_s: float | None = None
    ask_timeout_s: float | None = None
    fetch_timeout_s: float | None = None
    stall_timeout_s: float | None = None
    abstain_on_gap: bool = True
    warmup_fraction: float = 0.05
    trace: bool = False
    delivery_log: bool = False
    wire_check: bool = False

    def __post_init__(self):
        if isinstance(self.satellite, dict):
            self.satellite = SatelliteChannelConfig(**self.satellite)
        if isinstance(self.internet, dict):
            links = {tuple(k) if not isinstance(k, tuple) else k: v
                     for k, v in self.internet.get("link_delays", {}).items()}
            self.internet = InternetConfig(self.internet.get("rtt_s", 0.04), links)
        self.outages = [tuple(w) for w in self.outages]
        self.crashes = [(int(a), float(b)) for a, b in self.crashes]
        self.validate()

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.msg_size_bytes < 1:
            raise ValueError("msg_size_bytes must be >= 1")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be > 0")
        if self.client_count < 0 or self.client_rate < 0:
            raise ValueError("client_count and client_rate must be >= 0")
        if self.arrival not in (ARRIVAL_POISSON, ARRIVAL_UNIFORM):
            raise ValueError(f"unknown arrival mode {self.arrival!r}")
        if self.airtime not in (AIRTIME_WIRE, AIRTIME_MSGSIZE, AIRTIME_DATA):
            raise ValueError(f"unknown airtime model {self.airtime!r}")
        if self.loss_applies_to not in (LOSS_ALL, LOSS_DATA):
            raise ValueError(f"unknown loss_applies_to {self.loss_applies_to!r}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        for a, b in self.outages:
            if a > b:
                raise ValueError(f"outage window ({a}, {b}) has start after end")
        for node, _t in self.crashes:
            if not 0 <= node < self.n:
                raise ValueError(f"crash of unknown node {node}")

    @property
    def offered_rate(self) -> float:
        return self.client_count * self.client_rate

    def node_timeouts(self) -> dict[str, float]:
        one_way = self.satellite.one_way_delay_s
        rtt = self.internet.rtt_s
        floor = 1e-3
        return {
            "round_timeout": self.round_timeout_s or max(2 * one_way, floor),
            "ask_timeout": self.ask_timeout_s or max(2 * rtt, floor),
            "fetch_timeout": self.fetch_timeout_s or max(2 * rtt, floor),
            "stall_timeout": self.stall_timeout_s or max(4 * one_way, floor),
        }

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["internet"] = {"rtt_s": self.internet.rtt_s,
                         "link_delays": {f"{a},{b}": v for (a, b), v in self.internet.link_delays.items()}}
        d["outages"] = [list(w) for w in self.outages]
        d["crashes"] = [list(c) for c in self.crashes]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        inet = d.get("internet")
        if isinstance(inet, dict):
            links = {}
            for k, v in inet.get("link_delays", {}).items():
                a, b = (int(x) for x in k.split(",")) if isinstance(k, str) else k
                links[(a, b)] = v
            d["internet"] = InternetConfig(inet.get("rtt_s", 0.04), links)
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "ScenarioConfig":
        sat_fields = {f.name for f in dataclasses.fields(SatelliteChannelConfig)}
        sat = {k: changes.pop(k) for k in list(changes) if k in sat_fields}
        cfg = dataclasses.replace(self, **changes)
        if sat:
            cfg.satellite = dataclasses.replace(cfg.satellite, **sat)
        return cfg


@dataclass
class RunMetrics:
    committed_messages: int = 0
    committed_blocks: int = 0
    sim_time: float = 0.0
    throughput: float = 0.0
    offered_rate: float = 0.0
    messages_generated: int = 0
    rounds_attempted: int = 0
    rounds_succeeded: int = 0
    rounds_failed: int = 0
    rounds_uncertain_resolved: int = 0
    success_ratio: float = 0.0
    restarts: int = 0
    client_rejects: int = 0
    frames_broadcast: int = 0
    satellite_queue_max: int = 0
    uplink_queue_max: list = field(default_factory=list)
    events_processed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class RunResult:
    config: ScenarioConfig
    metrics: RunMetrics
    ledgers: list[Ledger]
    traces: list[str]
    live: list[bool]
    delivery_log: list[str] | None = None
    rejected: list[tuple[int, int]] = field(default_factory=list)
    node_stats: list[Any] = field(default_factory=list)

    def ledger_hashes(self) -> list[str]:
        return [ledger.head.hash.hex() for ledger in self.ledgers]

    def reference_ledger(self) -> Ledger:
        for ledger, alive in zip(self.ledgers, self.live):
            if alive:
                return ledger
        return self.ledgers[0]


class _Client:
    __slots__ = ("client_id", "home", "rng", "rate", "seq", "uniform", "size", "payload_pad")

    def __init__(self, client_id: int, home: int, rate: float, uniform: bool, seed: int, size: int):
        self.client_id = client_id
        self.home = home
        self.rate = rate
        self.uniform = uniform
        self.rng = random.Random(seed)
        self.seq = 0
        self.size = size
        self.payload_pad = bytes(max(0, size - 12))

    def gap(self) -> float:
        return 1.0 / self.rate if self.uniform else self.rng.expovariate(self.rate)

    def next_message(self) -> ClientMessage:
        self.seq += 1
        head = self.client_id.to_bytes(4, "little") + self.seq.to_bytes(8, "little")
        return ClientMessage(self.client_id, self.seq, (head + self.payload_pad)[:self.size])


def _trace_fields(env) -> str:
    t = type(env)
    if t is DataMessage or t is ClientMessage:
        return f"{t.__name__} {env.client_id}:{env.client_seq}"
    if t is SyncMessage:
        return f"Sync {env.round_index} e{env.epoch} {env.block_hash.hex()[:16]} from={env.node_id}"
    if t is RestartMessage:
        return f"Restart {env.last_committed_index} e{env.epoch} from={env.node_id}"
    if t is AskMessage or t is BlockRequest:
        return f"{t.__name__} {env.round_index} by={env.requester}"
    if t is BlockReply:
        return f"BlockReply {env.block.index} {env.block.hash.hex()[:16]}"
    return t.__name__


class Simulation:
    """One scenario run. Build, optionally inject faults, then :meth:`run`."""

    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.config = config
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._stop = False
        self.events = 0

        n = config.n
        keys = KeyTable.from_seed(n, derive_seed(config.seed, "signer-keys"))
        timeouts = config.node_timeouts()
        self.nodes = [
            Node(NodeConfig(i, n, config.block_size, keys, payload_budget=config.msg_size_bytes,
                            abstain_on_gap=config.abstain_on_gap, **timeouts))
            for i in range(n)
        ]
        self.live = [True] * n
        sat_cfg = dataclasses.replace(config.satellite, rng_seed=derive_seed(config.seed, "channel-loss"))
        self.satellite = SatelliteChannel(
            sat_cfg, n, self.schedule, self._on_broadcast,
            loss_applies_to=config.loss_applies_to, outages=list(config.outages),
            delivery_log=config.delivery_log)
        self.clients = [
            _Client(k, k % n, config.client_rate, config.arrival == ARRIVAL_UNIFORM,
                    derive_seed(config.seed, f"client-{k}"), config.msg_size_bytes)
            for k in range(config.client_count)
        ]
        endpoints = list(range(n)) + [("client", k) for k in range(config.client_count)]
        self.internet = InternetNet(config.internet, endpoints, self.schedule, self._on_internet)

        self.traces: list[str] = []
        self._trace = config.trace
        self._canonical: dict[int, bytes] = {}
        self._votes: dict[tuple[int, bytes], dict[int, set]] = {}
        self._committers: dict[int, set] = {}
        self._unsettled: set[int] = set()
        self._failed_attempts: set[tuple[int, int]] = set()
        self._asked: set[int] = set()
        self._commit_log: list[list[tuple[float, int]]] = [[] for _ in range(n)]
        self.rounds_succeeded = 0
        self.rounds_uncertain = 0
        self.generated = 0
        self.rejected: list[tuple[int, int]] = []
        self._airtime = self._make_airtime()

        for a, b in config.crashes:
            self.inject_crash(a, b)

    # -- scheduling ----------------------------------------------------------

    def schedule(self, time: float, fn, *args) -> None:
        if time < self.now:
            raise InvariantViolation("event causality", self.now,
                                     f"event scheduled at {time} before now")
        heapq.heappush(self._heap, (time, next(self._seq), fn, args))

    # -- fault injection -----------------------------------------------------

    def inject_outage(self, t_start: float, t_end: float) -> None:
        if t_start > t_end:
            raise ValueError("outage start after end")
        if t_start == t_end:
            return
        self.satellite.outages = merge_windows(self.satellite.outages + [(t_start, t_end)])

    def inject_crash(self, node: int, t: float) -> None:
        if not 0 <= node < self.config.n:
            raise ValueError(f"unknown node {node}")
        self.schedule(t, self._crash, node)

    def _crash(self, now: float, node: int) -> None:
        if not self.live[node]:
            return
        self.live[node] = False
        self.internet.crashed.add(node)
        self._trace_line(now, node, "Crash")
        for idx in sorted(self._unsettled):
            self._settle(idx)

    # -- channel callbacks ---------------------------------------------------

    def _make_airtime(self):
        cfg = self.config
        if cfg.airtime == AIRTIME_WIRE:
            return lambda env: len(encode(env))
        size = cfg.msg_size_bytes
        control_free = cfg.airtime == AIRTIME_DATA

        def airtime(env):
            if type(env) is DataMessage:
                return size
            return 0 if control_free else len(encode(env))
        return airtime

    def _on_broadcast(self, now: float, frame: Frame, kept: list[int]) -> None:
        env = frame.envelope
        if self.config.wire_check:
            try:
                env = decode(encode(env))
            except DecodeError:
                return
            if type(env) is DataMessage and not env.checksum_ok():
                return
        port_seq = frame.port_seq
        live = self.live
        nodes = self.nodes
        for r in kept:
            if live[r]:
                self.events += 1
                effects = nodes[r].on_broadcast(env, port_seq)
                if effects:
                    self._apply(r, now, effects)

    def _on_internet(self, now: float, src, dst, env) -> None:
        if type(dst) is tuple:
            self._client_reject(now, dst[1], src, env)
            return
        if not self.live[dst]:
            return
        self.events += 1
        effects = self.nodes[dst].on_internet(src if type(src) is int else -1, env)
        if effects:
            self._apply(dst, now, effects)

    def _on_timer(self, now: float, node: int, timer_id: int) -> None:
        if not self.live[node]:
            return
        self.events += 1
        effects = self.nodes[node].on_timer(timer_id)
        if effects:
            self._apply(node, now, effects)

    # -- effects -------------------------------------------------------------

    def _apply(self, node: int, now: float, effects) -> None:
        trace = self._trace
        for eff in effects:
            t = type(eff)
            if t is UplinkBroadcast:
                env = eff.envelope
                if type(env) is SyncMessage:
                    self._record_vote(node, env)
                elif type(env) is RestartMessage:
                    attempt = (env.last_committed_index + 1, env.epoch)
                    if attempt not in self._failed_attempts:
                        self._failed_attempts.add(attempt)
                        self._asked.discard(attempt[0])
                        self._check_stop()
                self.satellite.uplink_submit(node, env, now, self._airtime(env))
                if trace:
                    self._trace_line(now, node, "UplinkBroadcast", _trace_fields(env))
            elif t is InternetSend:
                if type(eff.envelope) is AskMessage:
                    self._asked.add(eff.envelope.round_index)
                self.internet.send(node, eff.to, eff.envelope, now)
                if trace:
                    self._trace_line(now, node, "InternetSend", f"to={eff.to} {_trace_fields(eff.envelope)}")
            elif t is SetTimer:
                self.schedule(now + eff.delay, self._on_timer, node, eff.timer_id)
                if trace:
                    self._trace_line(now, node, "SetTimer", f"{eff.timer_id} {eff.delay:.6f}")
            elif t is CancelTimer:
                if trace:
                    self._trace_line(now, node, "CancelTimer", str(eff.timer_id))
            elif t is Commit:
                self._on_commit(node, now, eff.block)
                if trace:
                    self._trace_line(now, node, "Commit", f"{eff.block.index} {eff.block.hash.hex()}")
            elif t is ClientReject:
                cid = eff.msg_id[0]
                if 0 <= cid < len(self.clients):
                    self.internet.send(node, ("client", cid), eff, now)
                if trace:
                    self._trace_line(now, node, "ClientReject", f"{eff.msg_id[0]}:{eff.msg_id[1]}")

    def _trace_line(self, now: float, node: int, kind: str, fields: str = "") -> None:
        if self._trace:
            self.traces.append(f"{now:.9f} {node} {kind} {fields}".rstrip())

    def _record_vote(self, node: int, sync: SyncMessage) -> None:
        by_epoch = self._votes.setdefault((sync.round_index, sync.block_hash), {})
        by_epoch.setdefault(sync.epoch, set()).add(node)

    def _on_commit(self, node: int, now: float, block: Block) -> None:
        idx = block.index
        known = self._canonical.get(idx)
        if known is None:
            self._canonical[idx] = block.hash
        elif known != block.hash:
            raise InvariantViolation("no forks", now,
                                     f"node {node} committed {block.hash.hex()[:16]} at index {idx}, "
                                     f"others committed {known.hex()[:16]}")
        voters = self._votes.get((idx, block.hash), {})
        if not any(2 * len(s) > self.config.n for s in voters.values()):
            raise InvariantViolation("quorum soundness", now,
                                     f"node {node} committed index {idx} without a majority of votes")
        self._commit_log[node].append((now, len(block.messages)))
        self._committers.setdefault(idx, set()).add(node)
        self._unsettled.add(idx)
        self._settle(idx)

    def _settle(self, idx: int) -> None:
        committers = self._committers[idx]
        if all(node in committers for node in range(self.config.n) if self.live[node]):
            self._unsettled.discard(idx)
            if idx in self._asked:
                self.rounds_uncertain += 1
            else:
                self.rounds_succeeded += 1
            self._check_stop()

    def _check_stop(self) -> None:
        limit = self.config.max_rounds
        if limit is not None:
            done = self.rounds_succeeded + self.rounds_uncertain + len(self._failed_attempts)
            if done >= limit:
                self._stop = True

    # -- clients -------------------------------------------------------------

    def _start_clients(self) -> None:
        cfg = self.config
        if cfg.client_rate <= 0 or cfg.messages_per_client == 0:
            return
        for c in self.clients:
            if c.uniform:
                first = (c.client_id / max(1, cfg.client_count)) / c.rate
            else:
                first = c.gap()
            self.schedule(first + self._client_delay(c), self._client_arrival, c)

    def _client_delay(self, client: _Client) -> float:
        return self.config.internet.one_way(("client", client.client_id), client.home)

    def _client_arrival(self, now: float, client: _Client) -> None:
        # fires when a freshly generated message reaches the home node; folding
        # generation and the internet hop into one event halves client load
        msg = client.next_message()
        self.generated += 1
        home = client.home
        if self.live[home]:
            self.events += 1
            effects = self.nodes[home].on_client_message(msg)
            if effects:
                self._apply(home, now, effects)
        limit = self.config.messages_per_client
        if limit is None or client.seq < limit:
            self.schedule(now + client.gap(), self._client_arrival, client)

    def _client_reject(self, now: float, client_id: int, node, reject: ClientReject) -> None:
        self.rejected.append(reject.msg_id)
        if not self.config.client_resend:
            return
        client = self.clients[client_id]
        target = (node + 1) % self.config.n
        payload = (reject.msg_id[0].to_bytes(4, "little") + reject.msg_id[1].to_bytes(8, "little")
                   + client.payload_pad)[:client.size]
        msg = ClientMessage(reject.msg_id[0], reject.msg_id[1], payload)
        self.schedule(now + self.config.resend_backoff_s, self._resend, client_id, target, msg)

    def _resend(self, now: float, client_id: int, target: int, msg: ClientMessage) -> None:
        self.internet.send(("client", client_id), target, msg, now)

    # -- run -----------------------------------------------------------------

    def run(self) -> RunResult:
        self._start_clients()
        duration = self.config.duration_s
        heap = self._heap
        pop = heapq.heappop
        while heap and not self._stop:
            t, _, fn, args = heap[0]
            if t > duration:
                break
            pop(heap)
            self.now = t
            fn(t, *args)
        end = self.now if self._stop else duration
        self.now = end
        self.check_invariants()
        return self._result(end)

    def check_invariants(self) -> None:
        ledgers = [node.ledger for node in self.nodes]
        for i, ledger in enumerate(ledgers):
            bad = find_chain_violation(ledger.blocks)
            if bad is not None:
                raise InvariantViolation("hash chaining", self.now, f"node {i} ledger breaks at {bad}")
            seen: set = set()
            for b in ledger.blocks:
                for m in b.messages:
                    if m.msg_id in seen:
                        raise InvariantViolation("conservation", self.now,
                                                 f"node {i} committed {m.msg_id} twice")
                    seen.add(m.msg_id)
        longest = max(ledgers, key=len)
        for i, ledger in enumerate(ledgers):
            if ledger.hashes() != longest.hashes()[:len(ledger)]:
                raise InvariantViolation("prefix consistency", self.now, f"node {i} diverges")

    def _result(self, end: float) -> RunResult:
        cfg = self.config
        ref = next((i for i in range(cfg.n) if self.live[i]), 0)
        ref_ledger = self.nodes[ref].ledger
        blocks = len(ref_ledger) - 1
        warmup = cfg.warmup_fraction * end
        window = end - warmup
        measured = sum(k for t, k in self._commit_log[ref] if t >= warmup)
        failed = len(self._failed_attempts)
        attempted = self.rounds_succeeded + self.rounds_uncertain + failed
        metrics = RunMetrics(
            committed_messages=blocks * cfg.block_size,
            committed_blocks=blocks,
            sim_time=end,
            throughput=measured / window if window > 0 else 0.0,
            offered_rate=cfg.offered_rate,
            messages_generated=self.generated,
            rounds_attempted=attempted,
            rounds_succeeded=self.rounds_succeeded,
            rounds_failed=failed,
            rounds_uncertain_resolved=self.rounds_uncertain,
            success_ratio=((self.rounds_succeeded + self.rounds_uncertain) / attempted) if attempted else 0.0,
            restarts=self.nodes[ref].stats.restarts,
            client_rejects=len(self.rejected),
            frames_broadcast=self.satellite.frames_broadcast,
            satellite_queue_max=self.satellite.sat_max_depth,
            uplink_queue_max=[self.satellite.uplink_max_depth(i) for i in range(cfg.n)],
            events_processed=self.events,
        )
        return RunResult(
            config=cfg,
            metrics=metrics,
            ledgers=[node.ledger for node in self.nodes],
            traces=self.traces,
            live=list(self.live),
            delivery_log=self.satellite.delivery_log,
            rejected=list(self.rejected),
            node_stats=[node.stats for node in self.nodes],
        )


def run(config: ScenarioConfig) -> RunResult:
    return Simulation(config).run()
