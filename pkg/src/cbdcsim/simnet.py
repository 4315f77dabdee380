"""Deterministic discrete-event network and clock.

The scheduler owns all time and randomness: messages get a sampled delay,
may be dropped, and never cross an active partition. Events at the same
tick deliver in send order (a monotone sequence number breaks ties), so a
whole simulation trace is a pure function of (config, seed).
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .crypto import rng_stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Partition:
    start: int  # inclusive tick
    end: int  # exclusive tick
    side_a: frozenset[str]
    side_b: frozenset[str]

    def separates(self, tick: int, a: str, b: str) -> bool:
        if not (self.start <= tick < self.end):
            return False
        return (a in self.side_a and b in self.side_b) or (a in self.side_b and b in self.side_a)


@dataclass
class NetConfig:
    seed: int = 0
    delay_min: int = 1
    delay_max: int = 1
    drop_probability: float = 0.0
    partitions: list[Partition] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.delay_min < 1:
            raise ValueError("delay_min must be at least 1 tick")
        if self.delay_max < self.delay_min:
            raise ValueError("delay_max below delay_min")
        if not (0.0 <= self.drop_probability < 1.0 or self.drop_probability == 1.0):
            raise ValueError("drop_probability must lie in [0, 1]")


class Node:
    """Anything registered on the network. Subclasses override the hooks."""

    name: str

    def on_message(self, src: str, payload: Any, now: int) -> None:  # pragma: no cover
        raise NotImplementedError

    def on_tick(self, now: int) -> None:
        pass


class Network:
    def __init__(self, config: NetConfig, trace: Optional[Callable[[str], None]] = None) -> None:
        self.config = config
        self.now = 0
        self.nodes: dict[str, Node] = {}
        self._order: list[str] = []  # registration order drives on_tick sequencing
        self._queue: list[tuple[int, int, str, str, Any]] = []
        self._seq = 0
        self._rng = rng_stream(config.seed, "net")
        self._trace = trace
        self.delivered = 0
        self.dropped = 0

    def register(self, node: Node) -> None:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node {node.name!r}")
        self.nodes[node.name] = node
        self._order.append(node.name)

    def _partitioned(self, tick: int, a: str, b: str) -> bool:
        return any(p.separates(tick, a, b) for p in self.config.partitions)

    def send(self, src: str, dst: str, payload: Any, extra_delay: int = 0) -> None:
        if dst not in self.nodes:
            raise ValueError(f"unknown destination node {dst!r}")
        if src not in self.nodes:
            raise ValueError(f"unknown source node {src!r}")
        cfg = self.config
        if cfg.delay_min == cfg.delay_max:
            delay = cfg.delay_min + extra_delay
        else:
            delay = self._rng.randint(cfg.delay_min, cfg.delay_max) + extra_delay
        dropped = cfg.drop_probability > 0.0 and self._rng.random() < cfg.drop_probability
        deliver_at = self.now + delay
        # messages crossing an active partition are lost, not queued
        if dropped or self._partitioned(self.now, src, dst) or self._partitioned(deliver_at, src, dst):
            self.dropped += 1
            if self._trace:
                self._trace(f"{self.now} drop {src}->{dst}")
            return
        self._seq += 1
        heapq.heappush(self._queue, (deliver_at, self._seq, src, dst, payload))

    def broadcast(self, src: str, dsts: list[str], payload: Any, extra_delay: int = 0) -> None:
        for dst in dsts:
            if dst != src:
                self.send(src, dst, payload, extra_delay)

    def heal(self, partition: Partition) -> None:
        """End a partition window early; already-dropped messages stay lost."""
        self.config.partitions = [p for p in self.config.partitions if p is not partition]

    def step(self) -> int:
        """Advance one tick: deliver due messages, then fire per-node ticks."""
        self.now += 1
        delivered = 0
        while self._queue and self._queue[0][0] <= self.now:
            _, _, src, dst, payload = heapq.heappop(self._queue)
            delivered += 1
            self.delivered += 1
            if self._trace:
                self._trace(f"{self.now} deliver {src}->{dst}")
            self.nodes[dst].on_message(src, payload, self.now)
        for name in self._order:
            self.nodes[name].on_tick(self.now)
        return delivered

    def run(self, ticks: int) -> None:
        for _ in range(ticks):
            self.step()

    def idle(self) -> bool:
        return not self._queue

    def drain(self, max_ticks: int, quiet: Optional[Callable[[], bool]] = None) -> int:
        """Step until the queue empties (and ``quiet`` holds) or the budget runs out."""
        for i in range(max_ticks):
            if self.idle() and (quiet is None or quiet()):
                return i
            self.step()
        return max_ticks
