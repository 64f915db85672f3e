"""Sans-IO state machine for one system node.

A :class:`Node` consumes input events (broadcast deliveries, internet
deliveries, client submissions, timer expirations) and returns a list of
output effects for the caller to carry out. It never reads a clock, draws a
random number or touches a socket, so a given state and event always produce
the same transition and the same effects.

Each consensus attempt is identified by ``(next_index, epoch)``. The epoch
only moves when a restart executes, so votes left over from a failed attempt
at the same height can be told apart from fresh ones.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Union

from .proto import (
    AskMessage,
    Block,
    BlockReply,
    BlockRequest,
    ClientMessage,
    DataMessage,
    Envelope,
    KeyTable,
    Ledger,
    RestartMessage,
    SyncMessage,
    UnknownSigner,
    ZERO_HASH,
)

# ---------------------------------------------------------------------------
# Events and effects
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class BroadcastDelivery:
    envelope: Envelope
    port_seq: int | None = None  # satellite frame counter on the data port
    time: float = 0.0


@dataclass(frozen=True, slots=True)
class InternetDelivery:
    src: int
    envelope: Envelope
    time: float = 0.0


@dataclass(frozen=True, slots=True)
class ClientSubmit:
    message: ClientMessage
    time: float = 0.0


@dataclass(frozen=True, slots=True)
class TimerFired:
    timer_id: int
    time: float = 0.0


InputEvent = Union[BroadcastDelivery, InternetDelivery, ClientSubmit, TimerFired]


@dataclass(frozen=True, slots=True)
class UplinkBroadcast:
    envelope: Envelope


@dataclass(frozen=True, slots=True)
class InternetSend:
    to: int
    envelope: Envelope


@dataclass(frozen=True, slots=True)
class SetTimer:
    timer_id: int
    delay: float


@dataclass(frozen=True, slots=True)
class CancelTimer:
    timer_id: int


@dataclass(frozen=True, slots=True)
class Commit:
    block: Block


@dataclass(frozen=True, slots=True)
class ClientReject:
    msg_id: tuple[int, int]


OutputEffect = Union[UplinkBroadcast, InternetSend, SetTimer, CancelTimer, Commit, ClientReject]

ROUND_TIMER = "round"
ASK_TIMER = "ask"
FETCH_TIMER = "fetch"
STALL_TIMER = "stall"


@dataclass(frozen=True)
class NodeConfig:
    node_id: int
    n: int
    block_size: int
    keys: KeyTable
    payload_budget: int | None = None
    round_timeout: float = 0.25
    ask_timeout: float = 0.08
    fetch_timeout: float = 0.08
    stall_timeout: float = 0.5
    # vote the all-zero hash when the data port shows an unexplained hole
    abstain_on_gap: bool = True

    def __post_init__(self):
        if self.n < 1 or self.block_size < 1:
            raise ValueError("n and block_size must be >= 1")
        if not 0 <= self.node_id < self.n:
            raise ValueError(f"node_id {self.node_id} outside [0, {self.n})")


@dataclass
class _Fetch:
    index: int
    expect: bytes | None  # majority hash for a live round, None while catching up
    targets: list[int]
    pos: int = 0

    @property
    def target(self) -> int:
        return self.targets[self.pos]


@dataclass
class NodeStats:
    rounds_committed: int = 0
    own_commits: int = 0
    fetched_commits: int = 0
    failures: int = 0
    restarts: int = 0
    abstentions: int = 0
    asks_sent: int = 0
    block_requests: int = 0
    rejects: int = 0
    extra: dict = field(default_factory=dict)


class Node:
    """One system node: ledger, pending buffer and consensus round state."""

    def __init__(self, config: NodeConfig):
        self.config = config
        self.node_id = config.node_id
        self.n = config.n
        self.block_size = config.block_size
        self.keys = config.keys

        self.ledger = Ledger()
        self.pending: deque[DataMessage] = deque()
        self.next_index = 1
        self.epoch = 0
        self.is_syncing = False
        self.error_flag = False
        self.current_block: Block | None = None
        self.sync_pool: dict[int, SyncMessage] = {}
        self.deferred_syncs: list[SyncMessage] = []
        self.ask_targets_tried: set[int] = set()

        self._batch: list[DataMessage] = []  # taken from pending for the own candidate
        self._held: set[tuple[int, int]] = set()  # ids in pending or _batch
        self._committed: set[tuple[int, int]] = set()
        self._voted = False
        self._majority: bytes | None = None
        self._fetch: _Fetch | None = None
        self._catchup_to: int | None = None
        self._my_syncs: dict[int, SyncMessage] = {}
        self._local: dict[tuple[int, int], None] = {}
        self._last_port_seq = -1
        self._missed = 0
        self._explained = 0
        self._timers: dict[int, str] = {}
        self._timer_of: dict[str, int] = {}
        self._timer_seq = 0
        self._last_time = float("-inf")
        self.stats = NodeStats()

    # -- introspection -----------------------------------------------------

    @property
    def head(self) -> Block:
        return self.ledger.head

    @property
    def tainted(self) -> bool:
        return self._missed > self._explained

    @property
    def active_timers(self) -> dict[int, str]:
        return dict(self._timers)

    # -- dispatch ----------------------------------------------------------

    def handle(self, event: InputEvent) -> list[OutputEffect]:
        if event.time < self._last_time:
            raise ValueError(f"event time {event.time} precedes {self._last_time}")
        self._last_time = event.time
        if isinstance(event, BroadcastDelivery):
            return self.on_broadcast(event.envelope, event.port_seq)
        if isinstance(event, InternetDelivery):
            return self.on_internet(event.src, event.envelope)
        if isinstance(event, ClientSubmit):
            return self.on_client_message(event.message)
        if isinstance(event, TimerFired):
            return self.on_timer(event.timer_id)
        raise TypeError(f"unknown event {event!r}")

    def on_broadcast(self, envelope: Envelope, port_seq: int | None = None) -> list[OutputEffect]:
        if port_seq is not None:
            if port_seq > self._last_port_seq + 1:
                self._missed += port_seq - self._last_port_seq - 1
            if port_seq > self._last_port_seq:
                self._last_port_seq = port_seq
        if type(envelope) is DataMessage:
            return self.on_data_message(envelope)
        if type(envelope) is SyncMessage:
            return self.on_sync_message(envelope)
        if type(envelope) is RestartMessage:
            return self.on_restart(envelope)
        return []

    def on_internet(self, src: int, envelope: Envelope) -> list[OutputEffect]:
        kind = type(envelope)
        if kind is ClientMessage:
            return self.on_client_message(envelope)
        if kind is AskMessage:
            return self.on_ask(envelope)
        if kind is SyncMessage:
            return self.on_sync_message(envelope)
        if kind is BlockRequest:
            return self.on_block_request(envelope)
        if kind is BlockReply:
            return self.on_block_reply(envelope)
        return []

    # -- client and data messages -----------------------------------------

    def on_client_message(self, msg: ClientMessage) -> list[OutputEffect]:
        budget = self.config.payload_budget
        if budget is not None and len(msg.payload) > budget:
            self.stats.rejects += 1
            return [ClientReject(msg.msg_id)]
        mid = (msg.client_id, msg.client_seq)
        if mid in self._committed:
            return []
        self._local[mid] = None
        return [UplinkBroadcast(DataMessage.create(self.node_id, msg.client_id,
                                                   msg.client_seq, msg.payload))]

    def on_data_message(self, msg: DataMessage) -> list[OutputEffect]:
        mid = msg.msg_id
        if mid in self._held or mid in self._committed:
            return []
        self.pending.append(msg)
        self._held.add(mid)
        if self.error_flag or self._catchup_to is not None or len(self.pending) < self.block_size:
            return []
        if not self.is_syncing:
            return self._start_round()
        if not self._voted and self._majority is None and self._fetch is None:
            # joined as a non-producer; production is still allowed to finish
            return self._produce()
        return []

    def _start_round(self) -> list[OutputEffect]:
        self.is_syncing = True
        effects: list[OutputEffect] = []
        self._arm(ROUND_TIMER, self.config.round_timeout, effects)
        effects += self._produce()
        return effects

    def _produce(self) -> list[OutputEffect]:
        pop = self.pending.popleft
        batch = [pop() for _ in range(self.block_size)]
        self._batch = batch
        if self.config.abstain_on_gap and self._missed > self._explained:
            self.current_block = None
            digest = ZERO_HASH
            self.stats.abstentions += 1
        else:
            self.current_block = Block.build(self.next_index, self.ledger.head.hash, batch)
            digest = self.current_block.hash
        sync = self.keys.sign_sync(SyncMessage(self.next_index, self.epoch, digest, self.node_id))
        self._voted = True
        self._my_syncs[self.next_index] = sync
        self.sync_pool[self.node_id] = sync
        effects: list[OutputEffect] = [UplinkBroadcast(sync)]
        effects += self.evaluate_round()
        return effects

    # -- sync messages -----------------------------------------------------

    def on_sync_message(self, sync: SyncMessage) -> list[OutputEffect]:
        try:
            if not self.keys.verify_message(sync):
                return []
        except UnknownSigner:
            return []
        return self._handle_sync(sync)

    def _handle_sync(self, sync: SyncMessage) -> list[OutputEffect]:
        idx = sync.round_index
        if idx < self.next_index:
            return []  # closed round
        effects: list[OutputEffect] = []
        if idx == self.next_index:
            if sync.epoch < self.epoch:
                return []  # vote from a failed attempt
            if sync.epoch > self.epoch:
                # someone restarted past this attempt, so it can never commit
                effects += self._reset(sync.epoch)
            if self.error_flag or self._catchup_to is not None:
                return effects
            if sync.node_id in self.sync_pool:
                return effects
            self.sync_pool[sync.node_id] = sync
            if not self.is_syncing:
                # enter the round as a non-producer
                self.is_syncing = True
                self._arm(ROUND_TIMER, self.config.round_timeout, effects)
            effects += self.evaluate_round()
            return effects
        if self.error_flag:
            effects += self._reset(max(sync.epoch, self.epoch))
            return effects + self._handle_sync(sync)
        if self.is_syncing:
            self.deferred_syncs.append(sync)
            return effects
        return effects + self._adopt(sync)

    def _adopt(self, sync: SyncMessage) -> list[OutputEffect]:
        """Idle node sees a later round: fetch the missing blocks, then join it."""
        self.epoch = max(self.epoch, sync.epoch)
        self._catchup_to = sync.round_index
        self.is_syncing = True
        self.deferred_syncs.append(sync)
        others = [k for k in range(self.n) if k not in (self.node_id, sync.node_id)]
        return self._start_fetch(self.next_index, None, [sync.node_id] + others)

    def evaluate_round(self) -> list[OutputEffect]:
        if (not self.is_syncing or self.error_flag or self._majority is not None
                or self._catchup_to is not None):
            return []
        counts: dict[bytes, int] = {}
        for s in self.sync_pool.values():
            h = s.block_hash
            if h != ZERO_HASH:
                counts[h] = counts.get(h, 0) + 1
        best_hash, best = None, 0
        for h, c in counts.items():
            if c > best or (c == best and best_hash is not None and h > best_hash):
                best_hash, best = h, c
        if 2 * best > self.n:
            return self._on_majority(best_hash)
        outstanding = self.n - len(self.sync_pool)
        if 2 * (best + outstanding) <= self.n:
            return self._fail()
        return []

    def _on_majority(self, digest: bytes) -> list[OutputEffect]:
        self._majority = digest
        effects: list[OutputEffect] = []
        self._cancel(ASK_TIMER, effects)
        if self.current_block is not None and self.current_block.hash == digest:
            self.stats.own_commits += 1
            return effects + self._commit(self.current_block)
        voters = sorted(k for k, s in self.sync_pool.items()
                        if s.block_hash == digest and k != self.node_id)
        return effects + self._start_fetch(self.next_index, digest, voters)

    def _fail(self) -> list[OutputEffect]:
        self.error_flag = True
        self.stats.failures += 1
        self.pending.extendleft(reversed(self._batch))
        self._batch = []
        self.current_block = None
        self.is_syncing = False
        effects: list[OutputEffect] = []
        self._cancel(ROUND_TIMER, effects)
        self._cancel(ASK_TIMER, effects)
        restart = self.keys.sign_restart(
            RestartMessage(self.ledger.head.index, self.epoch, self.node_id))
        effects.append(UplinkBroadcast(restart))
        self._arm(STALL_TIMER, self.config.stall_timeout, effects)
        return effects

    # -- commit ------------------------------------------------------------

    def _commit(self, block: Block) -> list[OutputEffect]:
        self.ledger.append(block)
        ids = [m.msg_id for m in block.messages]
        committed = set(ids)
        held = self._held
        self._explained += sum(1 for mid in ids if mid not in held)
        self._committed.update(committed)
        leftovers = [m for m in self._batch if m.msg_id not in committed]
        self._batch = []
        if any(m.msg_id in committed for m in self.pending):
            self.pending = deque(m for m in self.pending if m.msg_id not in committed)
        self.pending.extendleft(reversed(leftovers))
        held.difference_update(committed)
        for mid in ids:
            self._local.pop(mid, None)

        effects: list[OutputEffect] = [Commit(block)]
        self.stats.rounds_committed += 1
        mine = self._my_syncs.get(block.index)
        self._my_syncs = {block.index: mine} if mine is not None else {}
        self.current_block = None
        self._voted = False
        self._majority = None
        self._fetch = None
        self.sync_pool = {}
        self.ask_targets_tried = set()
        self._cancel(ROUND_TIMER, effects)
        self._cancel(ASK_TIMER, effects)
        self._cancel(FETCH_TIMER, effects)
        self.next_index = block.index + 1

        if self._catchup_to is not None:
            if self.next_index < self._catchup_to:
                others = [k for k in range(self.n) if k != self.node_id]
                return effects + self._start_fetch(self.next_index, None, others)
            self._catchup_to = None
        self.is_syncing = False
        if len(self.pending) >= self.block_size:
            effects += self._start_round()
        effects += self._replay_deferred()
        return effects

    def _replay_deferred(self) -> list[OutputEffect]:
        if not self.deferred_syncs:
            return []
        queued, self.deferred_syncs = self.deferred_syncs, []
        effects: list[OutputEffect] = []
        for s in queued:
            effects += self._handle_sync(s)
        return effects

    # -- block fetch -------------------------------------------------------

    def _start_fetch(self, index: int, expect: bytes | None, targets: list[int]) -> list[OutputEffect]:
        if not targets:
            targets = [k for k in range(self.n) if k != self.node_id]
        self._fetch = _Fetch(index, expect, targets)
        return self._send_fetch()

    def _send_fetch(self) -> list[OutputEffect]:
        f = self._fetch
        effects: list[OutputEffect] = []
        if not f.targets:
            return effects
        self.stats.block_requests += 1
        effects.append(InternetSend(f.target, BlockRequest(f.index, self.node_id)))
        self._arm(FETCH_TIMER, self.config.fetch_timeout, effects)
        return effects

    def _fetch_next(self) -> list[OutputEffect]:
        f = self._fetch
        f.pos = (f.pos + 1) % len(f.targets)
        return self._send_fetch()

    def on_block_request(self, req: BlockRequest) -> list[OutputEffect]:
        if req.round_index > self.ledger.head.index or req.requester == self.node_id:
            return []
        return [InternetSend(req.requester, BlockReply(self.ledger[req.round_index]))]

    def on_block_reply(self, reply: BlockReply) -> list[OutputEffect]:
        f = self._fetch
        block = reply.block
        if f is None or block.index != f.index:
            return []
        if (not self.ledger.extends(block) or not block.hash_ok()
                or (f.expect is not None and block.hash != f.expect)):
            return self._fetch_next()
        self.stats.fetched_commits += 1
        return self._commit(block)

    # -- asks ----------------------------------------------------------------

    def on_ask(self, ask: AskMessage) -> list[OutputEffect]:
        mine = self._my_syncs.get(ask.round_index)
        if mine is None or ask.requester == self.node_id:
            return []
        return [InternetSend(ask.requester, mine)]

    def _undecided(self) -> bool:
        return (self.is_syncing and not self.error_flag and self._majority is None
                and self._catchup_to is None)

    def _ask_next(self) -> list[OutputEffect]:
        absent = [k for k in range(self.n) if k != self.node_id and k not in self.sync_pool]
        if not absent:
            return []
        candidates = [k for k in absent if k not in self.ask_targets_tried]
        if not candidates:
            self.ask_targets_tried.clear()
            candidates = absent
        target = candidates[0]
        self.ask_targets_tried.add(target)
        self.stats.asks_sent += 1
        effects: list[OutputEffect] = [InternetSend(target, AskMessage(self.next_index, self.node_id))]
        self._arm(ASK_TIMER, self.config.ask_timeout, effects)
        return effects

    # -- restart -------------------------------------------------------------

    def on_restart(self, msg: RestartMessage) -> list[OutputEffect]:
        try:
            if not self.keys.verify_message(msg):
                return []
        except UnknownSigner:
            return []
        if not self.error_flag:
            return []
        if msg.last_committed_index != self.ledger.head.index or msg.epoch < self.epoch:
            return []
        return self._reset(msg.epoch + 1)

    def _reset(self, epoch: int) -> list[OutputEffect]:
        """Roll back to the last committed block and open attempt ``epoch``."""
        effects: list[OutputEffect] = []
        for kind in (ROUND_TIMER, ASK_TIMER, FETCH_TIMER, STALL_TIMER):
            self._cancel(kind, effects)
        self.pending.clear()
        self._batch = []
        self._held.clear()
        self.current_block = None
        self._voted = False
        self._majority = None
        self._fetch = None
        self._catchup_to = None
        self.sync_pool = {}
        self.ask_targets_tried = set()
        self.is_syncing = False
        self.error_flag = False
        self.epoch = epoch
        self.next_index = self.ledger.head.index + 1
        self._my_syncs = {k: v for k, v in self._my_syncs.items() if k < self.next_index}
        self._missed = 0
        self._explained = 0
        self.stats.restarts += 1
        for mid in self._local:
            effects.append(ClientReject(mid))
        self.stats.rejects += len(self._local)
        self._local.clear()
        effects += self._replay_deferred()
        return effects

    # -- timers --------------------------------------------------------------

    def on_timer(self, timer_id: int) -> list[OutputEffect]:
        kind = self._timers.pop(timer_id, None)
        if kind is None:
            return []
        del self._timer_of[kind]
        if kind == ROUND_TIMER or kind == ASK_TIMER:
            effects = self.evaluate_round()
            if self._undecided():
                effects += self._ask_next()
            return effects
        if kind == FETCH_TIMER:
            return self._fetch_next() if self._fetch is not None else []
        if kind == STALL_TIMER and self.error_flag:
            effects: list[OutputEffect] = []
            restart = self.keys.sign_restart(
                RestartMessage(self.ledger.head.index, self.epoch, self.node_id))
            effects.append(UplinkBroadcast(restart))
            self._arm(STALL_TIMER, self.config.stall_timeout, effects)
            return effects
        return []

    def _arm(self, kind: str, delay: float, effects: list) -> None:
        self._cancel(kind, effects)
        self._timer_seq += 1
        tid = self._timer_seq
        self._timers[tid] = kind
        self._timer_of[kind] = tid
        effects.append(SetTimer(tid, delay))

    def _cancel(self, kind: str, effects: list) -> None:
        tid = self._timer_of.pop(kind, None)
        if tid is not None:
            del self._timers[tid]
            effects.append(CancelTimer(tid))
