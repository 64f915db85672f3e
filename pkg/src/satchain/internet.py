"""Reliable point-to-point side channel between nodes and clients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable

from .proto import Envelope


@dataclass(frozen=True)
class InternetConfig:
    rtt_s: float = 0.04
    link_delays: dict = field(default_factory=dict)  # (a, b) -> one-way delay

    def __post_init__(self):
        if self.rtt_s < 0:
            raise ValueError("rtt_s must be >= 0")
        for link, d in self.link_delays.items():
            if d < 0:
                raise ValueError(f"negative delay on link {link}")

    def one_way(self, src: Hashable, dst: Hashable) -> float:
        d = self.link_delays.get((src, dst))
        return self.rtt_s / 2 if d is None else d


class InternetNet:
    """Exactly-once, per-link FIFO delivery after a fixed one-way delay.

    Envelopes addressed to a crashed endpoint are consumed silently. Each link
    has a constant delay, so insertion-ordered tie breaking in the scheduler
    keeps every link FIFO.
    """

    def __init__(self, config: InternetConfig, endpoints, schedule: Callable[..., None],
                 on_delivery: Callable[[float, Hashable, Hashable, Envelope], None]):
        self.config = config
        self.endpoints = set(endpoints)
        self._schedule = schedule
        self._on_delivery = on_delivery
        self.crashed: set = set()
        self.sent = 0
        self.delivered = 0
        self.consumed = 0

    def send(self, src: Hashable, dst: Hashable, envelope: Envelope, now: float) -> float:
        if src not in self.endpoints or dst not in self.endpoints:
            raise ValueError(f"unknown endpoint in send {src!r} -> {dst!r}")
        if src == dst:
            raise ValueError("internet send to self")
        self.sent += 1
        at = now + self.config.one_way(src, dst)
        self._schedule(at, self._arrive, src, dst, envelope)
        return at

    def _arrive(self, now: float, src, dst, envelope: Envelope) -> None:
        if dst in self.crashed:
            self.consumed += 1
            return
        self.delivered += 1
        self._on_delivery(now, src, dst, envelope)
