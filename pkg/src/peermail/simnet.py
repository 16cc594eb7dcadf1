"""Deterministic discrete-event simulator standing in for the onion transport.

One logical thread drives every node callback.  Events execute in strictly
nondecreasing time with ties broken by insertion sequence, so a run's
event log is a pure function of the scenario and the seed.  Connection
refusal is synchronous: a send to an offline (or partitioned, or
unregistered) destination fails immediately at the sender, which is what
triggers carrier fallback.

The event log line format is fixed:

    t=<time> seq=<n> <kind> <from> -> <to> id=<message-id> outcome=<...>
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from typing import Callable, Optional

from .identity import AddressError, MailAddress

DEFAULT_LATENCY = 1


class ScenarioError(Exception):
    """The scenario asked for something the world model forbids."""


class LivelockError(ScenarioError):
    """run_to_quiescence exceeded its event budget."""

    def __init__(self, limit: int, pending: list[str]):
        preview = "; ".join(pending[:10])
        super().__init__(f"exceeded {limit} events; pending: {preview}")
        self.pending = pending


@dataclass
class SendOutcome:
    scheduled: bool
    arrival: Optional[int] = None
    reason: str = ""


@dataclass
class _Event:
    kind: str  # deliver | retry-tick | online-change | scenario-action
    payload: tuple


class SimNetwork:
    """Registry, clock, schedules, and the global event queue."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = 0
        self.events_executed = 0
        self.registry: dict[str, object] = {}  # onion label -> node
        self.nodes: dict[str, object] = {}  # node name -> node
        self.online_intervals: dict[str, list[tuple[int, int]]] = {}
        self.partitions: list[tuple[int, int, frozenset, frozenset]] = []
        self.default_latency = DEFAULT_LATENCY
        self.log: list[str] = []
        self.transmissions: dict[str, int] = {}
        self._latency: dict[tuple[str, str], int] = {}
        self._heap: list[tuple[int, int, _Event]] = []
        self._seq = 0
        self._planned_ticks: set[tuple[str, int]] = set()

    # ------------------------------------------------------------------
    # world setup

    def register_node(self, node) -> None:
        if node.name in self.nodes:
            raise ScenarioError(f"node {node.name!r} already registered")
        self.nodes[node.name] = node

    def register_label(self, label: str, node) -> None:
        # Only one active onion service per service key at a time.
        if label in self.registry:
            raise ScenarioError(f"label {label} already registered (one active service per key)")
        self.registry[label] = node

    def set_online(self, name: str, intervals: list[tuple[int, int]]) -> None:
        """Restrict a node to the given half-open [start, end) intervals."""
        ordered = sorted(intervals)
        for start, end in ordered:
            if start >= end:
                raise ScenarioError(f"empty online interval [{start}, {end})")
        for (_, prev_end), (start, _) in zip(ordered, ordered[1:]):
            if start < prev_end:
                raise ScenarioError(f"overlapping online intervals for {name}")
        self.online_intervals[name] = ordered

    def set_latency(self, a: str, b: str, units: int) -> None:
        if units < 1:
            raise ScenarioError("latency must be at least 1 unit")
        self._latency[(a, b)] = units
        self._latency[(b, a)] = units

    def add_partition(self, start: int, end: int, group_a: set[str], group_b: set[str]) -> None:
        if start >= end:
            raise ScenarioError(f"empty partition interval [{start}, {end})")
        self.partitions.append((start, end, frozenset(group_a), frozenset(group_b)))

    # ------------------------------------------------------------------
    # world queries

    def node_online(self, name: str, t: int) -> bool:
        intervals = self.online_intervals.get(name)
        if intervals is None:
            return True
        return any(start <= t < end for start, end in intervals)

    def next_online(self, name: str, after: int) -> Optional[int]:
        intervals = self.online_intervals.get(name)
        if intervals is None:
            return after
        for start, end in intervals:
            if end > after:
                return max(start, after)
        return None

    def latency_between(self, a: str, b: str) -> int:
        return self._latency.get((a, b), self.default_latency)

    def partitioned(self, a: str, b: str, t: int) -> bool:
        for start, end, group_a, group_b in self.partitions:
            if start <= t < end:
                if (a in group_a and b in group_b) or (a in group_b and b in group_a):
                    return True
        return False

    def refusal(self, reason: str) -> SendOutcome:
        return SendOutcome(scheduled=False, reason=reason)

    # ------------------------------------------------------------------
    # sending and scheduling

    def send(
        self,
        sender,
        from_address: str,
        to_address: str,
        data: bytes,
        message_id: Optional[str] = None,
        count_transmission: bool = False,
    ) -> SendOutcome:
        """Attempt one transmission; refusal is synchronous at send time."""
        if not self.node_online(sender.name, self.clock):
            raise ScenarioError(f"{sender.name} attempted to send while offline")
        try:
            to = MailAddress.parse(to_address)
        except AddressError:
            self.log_refused(from_address, to_address, message_id)
            return self.refusal("no-such-service")
        dest = self.registry.get(to.label)
        if dest is None:
            self.log_refused(from_address, to_address, message_id)
            return self.refusal("no-such-service")
        arrival = self.clock + self.latency_between(sender.name, dest.name)
        if not self.node_online(dest.name, arrival):
            self.log_refused(from_address, to_address, message_id)
            return self.refusal("offline")
        if self.partitioned(sender.name, dest.name, arrival):
            self.log_refused(from_address, to_address, message_id)
            return self.refusal("partitioned")
        self._push(arrival, _Event("deliver", (from_address, to_address, data, message_id, dest)))
        if count_transmission and message_id:
            self.transmissions[message_id] = self.transmissions.get(message_id, 0) + 1
        return SendOutcome(scheduled=True, arrival=arrival)

    def inject_deliver(
        self, t: int, from_address: Optional[str], to_node, to_address: str, data: bytes,
        message_id: Optional[str] = None,
    ) -> None:
        """Schedule a raw delivery, bypassing send-time checks (for INJECT)."""
        if t < self.clock:
            raise ScenarioError(f"cannot schedule delivery in the past (t={t})")
        self._push(t, _Event("deliver", (from_address, to_address, data, message_id, to_node)))

    def schedule_retry(self, node, t: int) -> None:
        t = max(t, self.clock)
        if (node.name, t) in self._planned_ticks:
            return
        self._planned_ticks.add((node.name, t))
        self._push(t, _Event("retry-tick", (node,)))

    def schedule_wakeup(self, node) -> bool:
        """Arrange a retry pass when an offline node next comes online.

        Returns False when the node has no future online interval, meaning
        its queue can never drain.
        """
        start = self.next_online(node.name, self.clock)
        if start is None:
            return False
        self._push(start, _Event("online-change", (node,)))
        return True

    def schedule_action(self, t: int, callback: Callable[[], None], label: str = "") -> None:
        if t < self.clock:
            raise ScenarioError(f"directive scheduled in the past (t={t}, now={self.clock})")
        self._push(t, _Event("scenario-action", (callback, label)))

    # ------------------------------------------------------------------
    # execution

    def run_until(self, t: int) -> int:
        executed = 0
        while self._heap and self._heap[0][0] <= t:
            self._step()
            executed += 1
        self.clock = max(self.clock, t)
        return executed

    def run_to_quiescence(self, max_events: int = 200_000) -> int:
        """Drain the event queue; guard against livelock with max_events."""
        executed = 0
        while self._heap:
            if executed >= max_events:
                raise LivelockError(max_events, self._pending_summary())
            self._step()
            executed += 1
        return executed

    def is_quiescent(self) -> bool:
        return not self._heap and all(
            not getattr(node, "outbound", []) for node in self.nodes.values()
        )

    def _push(self, t: int, event: _Event) -> int:
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (t, seq, event))
        return seq

    def _step(self) -> None:
        t, seq, event = heapq.heappop(self._heap)
        self.clock = t
        self.events_executed += 1
        if event.kind == "deliver":
            from_address, to_address, data, message_id, dest = event.payload
            if not self.node_online(dest.name, t):
                # Converted to a connection refusal: the service vanished
                # between scheduling and execution.
                self.log.append(
                    f"t={t} seq={seq} deliver {from_address or 'external'} -> {to_address} "
                    f"id={message_id or '-'} outcome=refused"
                )
                return
            # Reserve the line now so nested sends log after their cause.
            slot = len(self.log)
            self.log.append("")
            result = dest.on_deliver(data, channel=from_address)
            shown = result.message_id or message_id or "-"
            self.log[slot] = (
                f"t={t} seq={seq} deliver {from_address or 'external'} -> {to_address} "
                f"id={shown} outcome={result.outcome}"
            )
        elif event.kind == "retry-tick":
            (node,) = event.payload
            self._planned_ticks.discard((node.name, t))
            node.retry_tick()
        elif event.kind == "online-change":
            (node,) = event.payload
            node.retry_tick()
        elif event.kind == "scenario-action":
            callback, _ = event.payload
            callback()

    def log_refused(self, from_address: str, to_address: str, message_id: Optional[str]) -> None:
        seq = self._seq
        self._seq += 1
        self.log.append(
            f"t={self.clock} seq={seq} send {from_address} -> {to_address} "
            f"id={message_id or '-'} outcome=refused"
        )

    def _pending_summary(self) -> list[str]:
        return [
            f"t={t} seq={seq} {event.kind}"
            for t, seq, event in sorted(self._heap)
        ]
