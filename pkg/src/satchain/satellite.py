"""Simulated satellite broadcast medium.

Each node owns an uplink queue drained at ``U`` bit/s into a single satellite
queue drained at ``B`` bit/s. The satellite transmits one frame at a time, so
every receiver sees deliveries as a subsequence of one global order. After
``one_way_delay_s`` each receiver independently keeps or drops the frame.

Control frames (sync and restart) are served ahead of queued data frames at
both hops. Ordering stays global; only the position a control frame lands at
changes.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .proto import DataMessage, Envelope, RestartMessage, SyncMessage, encode

_DRAW_KEY = struct.Struct("<QIQ")
_TWO64 = float(1 << 64)

LOSS_ALL = "all"
LOSS_DATA = "data"


@dataclass(frozen=True)
class SatelliteChannelConfig:
    uplink_bandwidth_bps: float = 1.0e6
    broadcast_bandwidth_bps: float = 2.0e6
    one_way_delay_s: float = 0.125
    loss_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.uplink_bandwidth_bps <= 0 or self.broadcast_bandwidth_bps <= 0:
            raise ValueError("bandwidths must be positive")
        if self.uplink_bandwidth_bps > self.broadcast_bandwidth_bps:
            raise ValueError("uplink bandwidth must not exceed broadcast bandwidth")
        if self.one_way_delay_s < 0:
            raise ValueError("one_way_delay_s must be >= 0")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must lie in [0, 1]")


def uniform_draw(seed: int, receiver_id: int, serial_position: int) -> float:
    """Counter-based uniform in [0, 1) keyed by (seed, receiver, position)."""
    key = _DRAW_KEY.pack(seed & 0xFFFFFFFFFFFFFFFF, receiver_id, serial_position)
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") / _TWO64


def is_control(envelope: Envelope) -> bool:
    return type(envelope) is SyncMessage or type(envelope) is RestartMessage


class Frame:
    __slots__ = ("origin", "envelope", "size_bytes", "control", "serial", "port_seq",
                 "submitted", "broadcast_start", "broadcast_end")

    def __init__(self, origin: int, envelope: Envelope, size_bytes: int, submitted: float):
        self.origin = origin
        self.envelope = envelope
        self.size_bytes = size_bytes
        self.control = is_control(envelope)
        self.serial = -1
        self.port_seq: int | None = None
        self.submitted = submitted
        self.broadcast_start = 0.0
        self.broadcast_end = 0.0


class _Uplink:
    __slots__ = ("control", "data", "busy", "max_depth")

    def __init__(self):
        self.control: deque[Frame] = deque()
        self.data: deque[Frame] = deque()
        self.busy = False
        self.max_depth = 0


Scheduler = Callable[..., None]  # schedule(time, fn, *args); fn receives (now, *args)
DeliveryHandler = Callable[[float, Frame, list], None]


class SatelliteChannel:
    """Uplink queues, the serializing satellite and lossy downlinks.

    ``schedule(time, fn, *args)`` must call ``fn(time, *args)`` in time order,
    breaking ties by insertion order. ``on_delivery(now, frame, kept)`` receives
    the ids of receivers that kept the frame.
    """

    def __init__(self, config: SatelliteChannelConfig, n: int, schedule: Scheduler,
                 on_delivery: DeliveryHandler, loss_applies_to: str = LOSS_ALL,
                 outages: list[tuple[float, float]] | None = None,
                 delivery_log: bool = False):
        if loss_applies_to not in (LOSS_ALL, LOSS_DATA):
            raise ValueError(f"loss_applies_to must be {LOSS_ALL!r} or {LOSS_DATA!r}")
        self.config = config
        self.n = n
        self._schedule = schedule
        self._on_delivery = on_delivery
        self.loss_applies_to = loss_applies_to
        self.outages = merge_windows(outages or [])
        self._up_bps = config.uplink_bandwidth_bps
        self._down_bps = config.broadcast_bandwidth_bps
        self._delay = config.one_way_delay_s
        self._p = config.loss_rate
        self._seed = config.rng_seed

        self._uplinks = [_Uplink() for _ in range(n)]
        self._sat_control: deque[Frame] = deque()
        self._sat_data: deque[Frame] = deque()
        self._sat_busy_until = 0.0
        self._sat_wakeup = False
        self.sat_max_depth = 0
        self._serial = 0
        self._port_seq = {"data": 0, "sync": 0}

        self.frames_submitted = 0
        self.frames_broadcast = 0
        self.bits_broadcast = 0
        self.delivery_log: list[str] | None = [] if delivery_log else None
        self.broadcast_log: list[tuple[float, float, int]] = []
        self._keep_broadcast_log = delivery_log

    # -- loss model --------------------------------------------------------

    def loss_draw(self, receiver_id: int, serial_position: int) -> bool:
        """True when ``receiver_id`` drops the frame at ``serial_position``."""
        p = self._p
        if p <= 0.0:
            return False
        if p >= 1.0:
            return True
        return uniform_draw(self._seed, receiver_id, serial_position) < p

    def in_outage(self, t: float) -> bool:
        for start, end in self.outages:
            if start <= t < end:
                return True
            if t < start:
                break
        return False

    # -- uplink ------------------------------------------------------------

    def uplink_submit(self, node_id: int, envelope: Envelope, now: float,
                      size_bytes: int | None = None) -> Frame:
        if size_bytes is None:
            size_bytes = len(encode(envelope))
        frame = Frame(node_id, envelope, size_bytes, now)
        self.frames_submitted += 1
        up = self._uplinks[node_id]
        if up.busy:
            (up.control if frame.control else up.data).append(frame)
            depth = len(up.control) + len(up.data) + 1
            if depth > up.max_depth:
                up.max_depth = depth
        else:
            up.busy = True
            if up.max_depth < 1:
                up.max_depth = 1
            self._schedule(now + size_bytes * 8 / self._up_bps, self._uplink_done, node_id, frame)
        return frame

    def _uplink_done(self, now: float, node_id: int, frame: Frame) -> None:
        self._sat_enqueue(now, frame)
        up = self._uplinks[node_id]
        if up.control:
            nxt = up.control.popleft()
        elif up.data:
            nxt = up.data.popleft()
        else:
            up.busy = False
            return
        self._schedule(now + nxt.size_bytes * 8 / self._up_bps, self._uplink_done, node_id, nxt)

    def uplink_depth(self, node_id: int) -> int:
        up = self._uplinks[node_id]
        return len(up.control) + len(up.data) + (1 if up.busy else 0)

    def uplink_max_depth(self, node_id: int) -> int:
        return self._uplinks[node_id].max_depth

    # -- satellite ---------------------------------------------------------

    def _sat_enqueue(self, now: float, frame: Frame) -> None:
        if not self._sat_wakeup and self._sat_busy_until <= now:
            self._transmit(now, frame)
            if self.sat_max_depth < 1:
                self.sat_max_depth = 1
            return
        (self._sat_control if frame.control else self._sat_data).append(frame)
        depth = len(self._sat_control) + len(self._sat_data) + 1
        if depth > self.sat_max_depth:
            self.sat_max_depth = depth
        if not self._sat_wakeup:
            self._sat_wakeup = True
            self._schedule(self._sat_busy_until, self._sat_next)

    def _sat_next(self, now: float) -> None:
        self._sat_wakeup = False
        frame = self._sat_control.popleft() if self._sat_control else self._sat_data.popleft()
        self._transmit(now, frame)
        if self._sat_control or self._sat_data:
            self._sat_wakeup = True
            self._schedule(self._sat_busy_until, self._sat_next)

    def _transmit(self, now: float, frame: Frame) -> None:
        frame.serial = self._serial
        self._serial += 1
        port = "sync" if type(frame.envelope) is SyncMessage else "data"
        frame.port_seq = self._port_seq[port] if port == "data" else None
        self._port_seq[port] += 1
        bits = frame.size_bytes * 8
        end = now + bits / self._down_bps
        frame.broadcast_start = now
        frame.broadcast_end = end
        self._sat_busy_until = end
        self.frames_broadcast += 1
        self.bits_broadcast += bits
        if self._keep_broadcast_log:
            self.broadcast_log.append((now, end, bits))
        self._schedule(end + self._delay, self._deliver, frame)

    def satellite_depth(self) -> int:
        return len(self._sat_control) + len(self._sat_data)

    # -- downlink ----------------------------------------------------------

    def _deliver(self, now: float, frame: Frame) -> None:
        lossy = self.loss_applies_to == LOSS_ALL or type(frame.envelope) is DataMessage
        if self.outages and self.in_outage(now):
            kept: list[int] = []
        elif not lossy or self._p <= 0.0:
            kept = list(range(self.n))
        else:
            serial = frame.serial
            kept = [r for r in range(self.n) if not self.loss_draw(r, serial)]
        log = self.delivery_log
        if log is not None:
            kind = type(frame.envelope).__name__
            kept_set = set(kept)
            for r in range(self.n):
                fate = "kept" if r in kept_set else "dropped"
                log.append(f"{now:.9f} {frame.serial} {r} {fate} {kind}")
        self._on_delivery(now, frame, kept)


def merge_windows(windows: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Sort and merge overlapping [start, end) windows; empty windows vanish."""
    cleaned = sorted((float(a), float(b)) for a, b in windows if b > a)
    merged: list[tuple[float, float]] = []
    for a, b in cleaned:
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return merged
