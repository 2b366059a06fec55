"""Deterministic discrete-event network simulator.

Time is an integer tick counter.  Every scheduled event carries a
monotonically increasing ``seq_no`` so ties on delivery time resolve the
same way on every run.  All randomness comes from a ``random.Random``
seeded by the run seed, drawn in event order.

Each event also carries a message-step count: a message delivered as a
consequence of handling an event at step ``k`` has step ``k + 1``.  Timers
and start-up run at step 0.  Step counts are what the latency audit uses.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Optional

from .certificates import genesis
from .client import Client
from .core import (
    Config,
    PrePrepare,
    ReplyMsg,
    Vote,
    canonical_sign_bytes,
    create_prepare_msg,
    ClientRequest,
)
from .crypto import Keyring
from .effects import Broadcast, Delay, Note, Send, SetTimer
from .errors import StopNeverReached
from .replica import Replica

BEHAVIORS = ("Honest", "Crash", "SilentPrimary", "Equivocate", "InvalidSeq", "DelayVotes")
FAULT_BEHAVIORS = BEHAVIORS[1:]

_INF = float("inf")


@dataclass(frozen=True, slots=True)
class LinkRule:
    """Targeted pre-GST fault on matching messages.

    ``src``/``dst`` of ``None`` match any node; ``kinds`` is a tuple of
    message class names (empty matches all).  ``action`` is ``"drop"`` or
    ``"delay"`` (by ``extra`` ticks).  Active while ``start <= now < end``.
    """

    action: str
    src: Optional[tuple[int, ...]] = None
    dst: Optional[tuple[int, ...]] = None
    kinds: tuple[str, ...] = ()
    extra: int = 0
    start: int = 0
    end: float = _INF

    def matches(self, src: int, dst: int, kind: str, now: int) -> bool:
        return (
            self.start <= now < self.end
            and (self.src is None or src in self.src)
            and (self.dst is None or dst in self.dst)
            and (not self.kinds or kind in self.kinds)
        )


@dataclass(frozen=True, slots=True)
class NetModel:
    """Partial-synchrony delay model.

    After ``gst`` every message is delivered within ``delta`` ticks, drawn
    uniformly from ``delay_post_gst``.  Before ``gst`` the ``chaos`` regime
    draws from ``delay_pre_gst`` and drops with ``drop_rate``, never delaying
    past ``gst + delta``; the ``calm`` regime uses the post-GST bounds.
    Link rules only ever act before ``gst``.
    """

    gst: int = 0
    delta: int = 10
    delay_post_gst: tuple[int, int] = (1, 10)
    delay_pre_gst: tuple[int, int] = (1, 50)
    drop_rate: float = 0.1
    pre_gst: str = "chaos"
    rules: tuple[LinkRule, ...] = ()

    def __post_init__(self):
        lo, hi = self.delay_post_gst
        if not 1 <= lo <= hi <= self.delta:
            raise ValueError("post-GST delays must lie in [1, delta]")
        if self.pre_gst not in ("chaos", "calm"):
            raise ValueError("pre_gst must be 'chaos' or 'calm'")
        if not 0 <= self.drop_rate < 1:
            raise ValueError("drop_rate must be in [0, 1)")

    @classmethod
    def standard(cls, gst: int = 0, delta: int = 10, fixed: bool = False, **kw) -> "NetModel":
        post = (delta, delta) if fixed else (1, delta)
        return cls(gst=gst, delta=delta, delay_post_gst=post, delay_pre_gst=(1, 5 * delta), **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rules"] = [
            {k: (None if v == _INF else v) for k, v in dataclasses.asdict(r).items()} for r in self.rules
        ]
        return d


@dataclass(frozen=True, slots=True)
class AdversaryEntry:
    node: int
    behavior: str
    params: tuple[tuple[str, object], ...] = ()

    def param(self, name: str, default=None):
        return dict(self.params).get(name, default)

    def to_dict(self) -> dict:
        return {"node": self.node, "behavior": self.behavior, "params": dict(self.params)}


@dataclass(frozen=True, slots=True)
class Scenario:
    config: Config
    net: NetModel
    adversary: tuple[AdversaryEntry, ...] = ()
    clients: int = 1
    requests_per_client: int = 4
    client_timeout: Optional[int] = None
    until_height: Optional[int] = None
    max_events: int = 200_000
    name: str = ""

    @property
    def byzantine(self) -> frozenset[int]:
        return frozenset(a.node for a in self.adversary if a.behavior != "Honest")

    @property
    def honest(self) -> tuple[int, ...]:
        return tuple(i for i in self.config.replicas if i not in self.byzantine)

    def to_dict(self) -> dict:
        c = self.config
        return {
            "name": self.name,
            "config": {
                "n": c.n,
                "f": c.f,
                "gst": c.gst,
                "timeout_initial": c.timeout_initial,
                "timeout_multiplier": c.timeout_multiplier,
                "batch_size": c.batch_size,
            },
            "net": self.net.to_dict(),
            "adversary": [a.to_dict() for a in self.adversary],
            "clients": self.clients,
            "requests_per_client": self.requests_per_client,
            "client_timeout": self.client_timeout,
            "until_height": self.until_height,
            "max_events": self.max_events,
        }

    def digest(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# adversary behaviors


class Behavior:
    """Identity transform; subclasses rewrite a node's outgoing effects."""

    name = "Honest"

    def __init__(self, entry: AdversaryEntry, world: "World"):
        self.entry = entry
        self.world = world
        self.node = entry.node

    def crashed(self, now: int) -> bool:
        return False

    def transform(self, effects: list, now: int) -> list:
        return effects


class Crash(Behavior):
    name = "Crash"

    def __init__(self, entry, world):
        super().__init__(entry, world)
        self.at_time = int(entry.param("at_time", 0))

    def crashed(self, now: int) -> bool:
        return now >= self.at_time

    def transform(self, effects, now):
        return [] if self.crashed(now) else effects


class SilentPrimary(Behavior):
    name = "SilentPrimary"

    def transform(self, effects, now):
        return [e for e in effects if not (isinstance(e, Broadcast) and isinstance(e.msg, PrePrepare))]


class DelayVotes(Behavior):
    name = "DelayVotes"

    def transform(self, effects, now):
        hold = int(self.entry.param("hold", 3 * self.world.net.delta))
        return [
            Delay(e, hold) if isinstance(e, Broadcast) and isinstance(e.msg, Vote) else e for e in effects
        ]


def _resign(msg, keys):
    return dataclasses.replace(msg, signature=keys.sign(canonical_sign_bytes(msg)))


class InvalidSeq(Behavior):
    name = "InvalidSeq"

    def transform(self, effects, now):
        out = []
        keys = self.world.keys[self.node]
        for e in effects:
            if isinstance(e, Broadcast) and isinstance(e.msg, PrePrepare):
                b = e.msg.block
                h = b.header
                bad = create_prepare_msg(h.view, h.seq + 2, h.parent, b.qc_nr, b.payload, keys)
                e = Broadcast(_resign(dataclasses.replace(e.msg, block=bad), keys))
            out.append(e)
        return out


class Equivocate(Behavior):
    """Sends two conflicting blocks to disjoint halves, then goes quiet.

    Its own votes are split too: a random subset hears a vote for each
    block.  After forking in a view it proposes nothing else in that view.
    """

    name = "Equivocate"

    def __init__(self, entry, world):
        super().__init__(entry, world)
        self.forked_views: set[int] = set()
        self.forks: dict[tuple[int, int, bytes], object] = {}

    def _fork(self, pp: PrePrepare, now: int) -> list:
        world = self.world
        keys = world.keys[self.node]
        b = pp.block
        h = b.header
        marker = _resign(ClientRequest(f"fork{pp.view}".encode(), (1 << 41) + pp.view, self.node), keys)
        view = h.view if h.proposer == self.node else pp.view
        twin = create_prepare_msg(view, h.seq, h.parent, b.qc_nr, b.payload + (marker,), keys)
        twin_pp = _resign(PrePrepare(pp.view, twin, self.node), keys)
        others = [j for j in world.config.replicas if j != self.node]
        world.adv_rng.shuffle(others)
        half = (len(others) + 1) // 2
        side_a = sorted(others[:half]) + [self.node]
        side_b = sorted(others[half:])
        self.forks[(pp.view, h.seq, h.hash)] = twin
        world.record({"ev": "Fork", "node": self.node, "view": pp.view, "seq": h.seq,
                      "a": h.hash.hex(), "b": twin.hash.hex()})
        return [Send(j, pp) for j in side_a] + [Send(j, twin_pp) for j in side_b]

    def _split_vote(self, vote: Vote) -> list:
        world = self.world
        twin = self.forks.get((vote.view, vote.seq, vote.hash))
        if twin is None:
            return [Broadcast(vote)]
        keys = world.keys[self.node]
        twin_vote = _resign(dataclasses.replace(vote, hash=twin.hash), keys)
        out = []
        for j in world.config.replicas:
            if j == self.node or world.adv_rng.random() < 0.5:
                out.append(Send(j, vote))
            if world.adv_rng.random() < 0.5:
                out.append(Send(j, twin_vote))
        return out

    def transform(self, effects, now):
        out = []
        for e in effects:
            if isinstance(e, Broadcast) and isinstance(e.msg, PrePrepare) and e.msg.sender == self.node:
                view = e.msg.view
                if view in self.forked_views:
                    continue
                self.forked_views.add(view)
                out.extend(self._fork(e.msg, now))
            elif isinstance(e, Broadcast) and isinstance(e.msg, Vote):
                out.extend(self._split_vote(e.msg))
            else:
                out.append(e)
        return out


BEHAVIOR_TYPES = {
    cls.name: cls for cls in (Behavior, Crash, SilentPrimary, Equivocate, InvalidSeq, DelayVotes)
}


# ---------------------------------------------------------------------------
# the world


@dataclass(order=True, slots=True)
class Event:
    deliver_time: int
    seq_no: int
    dest: int = field(compare=False)
    payload: object = field(compare=False)
    is_timer: bool = field(compare=False, default=False)
    src: int = field(compare=False, default=-1)
    step: int = field(compare=False, default=0)
    msg_id: int = field(compare=False, default=-1)


def msg_view(msg) -> Optional[int]:
    for attr in ("view", "next_view"):
        v = getattr(msg, attr, None)
        if isinstance(v, int):
            return v
    qc = getattr(msg, "qc", None)
    return qc.view if qc is not None else None


class World:
    """One simulated run: replicas, clients, adversaries and the network."""

    def __init__(self, scenario: Scenario, seed: int, record_messages: bool = True):
        self.scenario = scenario
        self.seed = seed
        self.config = scenario.config
        self.net = scenario.net
        self.record_messages = record_messages
        self.rng = random.Random(seed)
        self.adv_rng = random.Random(f"adversary|{seed}")

        n = self.config.n
        self.client_ids = tuple(range(n, n + scenario.clients))
        self.keyring, self.keys = Keyring.derive(range(n + scenario.clients), key_seed(seed))
        gen = genesis(self.config, self.keyring, self.keys)
        self.replicas = {i: Replica(i, self.config, self.keys[i], self.keyring, gen) for i in self.config.replicas}
        timeout = scenario.client_timeout or 10 * self.net.delta
        self.clients = {
            c: Client(c, self.config, self.keys[c], self.keyring, scenario.requests_per_client, timeout)
            for c in self.client_ids
        }
        self.behaviors: dict[int, Behavior] = {}
        for entry in scenario.adversary:
            self.behaviors[entry.node] = BEHAVIOR_TYPES[entry.behavior](entry, self)
        self.honest = scenario.honest

        self.queue: list[Event] = []
        self._seq_no = 0
        self._msg_id = 0
        self.now = 0
        self.events_processed = 0
        self.trace: list[dict] = []
        self.heights = {i: 0 for i in self.config.replicas}
        self.record(self.header())

    # trace -----------------------------------------------------------------

    def header(self) -> dict:
        return {
            "ev": "Header",
            "seed": self.seed,
            "key_seed": key_seed(self.seed),
            "scenario_digest": self.scenario.digest(),
            "scenario": self.scenario.to_dict(),
            "honest": list(self.honest),
            "byzantine": sorted(self.scenario.byzantine),
            "clients": list(self.client_ids),
            "record_messages": self.record_messages,
        }

    def record(self, rec: dict) -> None:
        self.trace.append(rec)

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.trace)

    # scheduling -----------------------------------------------------------

    def _push(self, ev: Event) -> None:
        heapq.heappush(self.queue, ev)

    def _next_seq(self) -> int:
        self._seq_no += 1
        return self._seq_no

    def draw_delay(self, src: int, dst: int, kind: str) -> Optional[int]:
        """Ticks until delivery, or ``None`` when the message is lost."""
        net = self.net
        now = self.now
        if now >= net.gst:
            lo, hi = net.delay_post_gst
            return self.rng.randint(lo, hi)
        extra = 0
        for rule in net.rules:
            if rule.matches(src, dst, kind, now):
                if rule.action == "drop":
                    return None
                extra += rule.extra
        if net.pre_gst == "chaos":
            if src != dst and self.rng.random() < net.drop_rate:
                return None
            lo, hi = net.delay_pre_gst
        else:
            lo, hi = net.delay_post_gst
        d = self.rng.randint(lo, hi) + extra
        if not extra:
            # Pre-GST chaos never holds a message past GST + delta.
            d = min(d, max(1, net.gst + net.delta - now))
        return d

    def _send(self, src: int, dst: int, msg, step: int, extra: int = 0) -> None:
        kind = type(msg).__name__
        d = self.draw_delay(src, dst, kind)
        self._msg_id += 1
        mid = self._msg_id
        if self.record_messages:
            self.record({"ev": "Send", "t": self.now, "src": src, "dst": dst, "kind": kind, "id": mid,
                         "step": step, "view": msg_view(msg), "due": None if d is None else self.now + d + extra})
        if d is None:
            return
        self._push(Event(self.now + d + extra, self._next_seq(), dst, msg, False, src, step + 1, mid))

    def _apply(self, node: int, effects: list, step: int) -> None:
        behavior = self.behaviors.get(node)
        if behavior is not None:
            effects = behavior.transform(effects, self.now)
        for e in effects:
            extra = 0
            if isinstance(e, Delay):
                extra, e = e.extra, e.inner
            if isinstance(e, Send):
                self._on_outgoing(node, e.msg, step)
                self._send(node, e.dest, e.msg, step, extra)
            elif isinstance(e, Broadcast):
                self._on_outgoing(node, e.msg, step)
                for j in self.config.replicas:
                    self._send(node, j, e.msg, step, extra)
            elif isinstance(e, SetTimer):
                self._push(Event(self.now + max(1, e.delay), self._next_seq(), node, (e.name, e.token), True))
            elif isinstance(e, Note):
                rec = {"ev": e.kind, "t": self.now, "step": step}
                rec.update(e.data)
                self.record(rec)
                self._track(rec)

    def _on_outgoing(self, node: int, msg, step: int) -> None:
        if isinstance(msg, PrePrepare) and msg.sender == node:
            h = msg.block.header
            key = (msg.view, h.hash)
            if key not in self._proposed:
                self._proposed.add(key)
                self.record({"ev": "Propose", "t": self.now, "step": step, "node": node, "view": msg.view,
                             "seq": h.seq, "hash": h.hash.hex(), "header_view": h.view,
                             "qc_nr": [q.block_hash.hex() for q in msg.block.qc_nr]})
        elif isinstance(msg, ReplyMsg):
            self.record({"ev": "Reply", "t": self.now, "step": step, "node": node, "client": msg.request_key[0],
                         "ct": msg.request_key[1], "seq": msg.seq, "hash": msg.hash.hex()})

    def _track(self, rec: dict) -> None:
        kind = rec["ev"]
        if kind == "Commit":
            self.heights[rec["node"]] = rec["seq"]
        elif kind == "Revoke":
            self.heights[rec["node"]] = rec["seq"] - 1

    # running --------------------------------------------------------------

    _proposed: set

    def start(self) -> None:
        self._proposed = set()
        for i, r in self.replicas.items():
            self._apply(i, r.start(), 0)
        for c, cl in self.clients.items():
            self._apply(c, cl.start(), 0)

    def step(self) -> bool:
        """Process the next event; False once the queue is empty."""
        if not self.queue:
            return False
        ev = heapq.heappop(self.queue)
        self.now = ev.deliver_time
        self.events_processed += 1
        node = ev.dest
        behavior = self.behaviors.get(node)
        if behavior is not None and behavior.crashed(self.now):
            return True
        target = self.replicas.get(node) or self.clients.get(node)
        if ev.is_timer:
            name, token = ev.payload
            effects = target.on_timer(name, token)
            step = 0
        else:
            if self.record_messages:
                self.record({"ev": "Deliver", "t": self.now, "dst": node, "id": ev.msg_id, "step": ev.step})
            effects = target.on_message(ev.src, ev.payload)
            step = ev.step
        self._apply(node, effects, step)
        return True

    def min_honest_height(self) -> int:
        return min(self.heights[i] for i in self.honest)

    def clients_done(self) -> bool:
        return all(c.done for c in self.clients.values())

    def run_until(
        self,
        until_height: Optional[int] = None,
        until_time: Optional[int] = None,
        quiescent: bool = False,
        max_events: Optional[int] = None,
    ) -> list[dict]:
        """Run until the first requested stop condition holds.

        Raises :class:`StopNeverReached` (carrying the partial trace) when
        the event cap is hit or the queue drains first.
        """
        cap = max_events if max_events is not None else self.scenario.max_events
        if not self.events_processed:
            self.start()

        def reached() -> bool:
            if until_height is not None and self.min_honest_height() >= until_height:
                return True
            if until_time is not None and self.now >= until_time:
                return True
            return quiescent and self.clients_done()

        while not reached():
            if self.events_processed >= cap:
                self.record({"ev": "Stop", "t": self.now, "reason": "cap"})
                raise StopNeverReached(f"event cap {cap} hit at t={self.now}", self.trace)
            if not self.step():
                self.record({"ev": "Stop", "t": self.now, "reason": "empty"})
                raise StopNeverReached(f"event queue drained at t={self.now}", self.trace)
        self.record({"ev": "Stop", "t": self.now, "reason": "reached"})
        return self.trace


def key_seed(seed: int) -> str:
    return f"run-{seed}"


def run(
    scenario: Scenario,
    seed: int,
    until_height: Optional[int] = None,
    until_time: Optional[int] = None,
    quiescent: bool = False,
    max_events: Optional[int] = None,
    record_messages: bool = True,
) -> list[dict]:
    """Build a world and run it; defaults to the scenario's stop rule."""
    world = World(scenario, seed, record_messages)
    if until_height is None and until_time is None and not quiescent:
        until_height = scenario.until_height
        quiescent = until_height is None
    return world.run_until(until_height, until_time, quiescent, max_events)


def dumps(trace: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in trace)
