"""Small builders shared by the unit tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from vbft.certificates import create_agg_qc, create_new_view, generate_qc, genesis
from vbft.core import (
    Block,
    ClientRequest,
    Config,
    PrePrepare,
    QuorumCert,
    ViewChangeMsg,
    Vote,
    canonical_sign_bytes,
    create_prepare_msg,
)
from vbft.crypto import KeyPair, Keyring
from vbft.effects import Broadcast, Note, Send
from vbft.replica import Replica


def signed(msg, key: KeyPair):
    return dataclasses.replace(msg, signature=key.sign(canonical_sign_bytes(msg)))


@dataclass
class Cluster:
    config: Config
    keyring: Keyring
    keys: dict
    gen: tuple[Block, QuorumCert]
    replicas: dict

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def client(self) -> int:
        return self.config.n

    def request(self, t: int, op: bytes = b"k=v", client: int | None = None) -> ClientRequest:
        c = self.client if client is None else client
        return signed(ClientRequest(op, t, c), self.keys[c])

    def block(self, view: int, seq: int, parent: bytes, cmds=(), proposer: int = 0, qc_nr=None) -> Block:
        return create_prepare_msg(view, seq, parent, qc_nr, cmds, self.keys[proposer])

    def pre_prepare(self, view: int, block: Block, sender: int | None = None) -> PrePrepare:
        s = block.header.proposer if sender is None else sender
        return signed(PrePrepare(view, block, s), self.keys[s])

    def vote(self, view: int, block: Block, voter: int) -> Vote:
        h = block.header
        return signed(Vote(view, h.seq, h.hash, h.parent, voter), self.keys[voter])

    def qc(self, view: int, block: Block, voters=None) -> QuorumCert:
        voters = range(self.config.quorum) if voters is None else voters
        return generate_qc([self.vote(view, block, v) for v in voters], self.keyring, self.config)

    def view_change(self, next_view: int, qc: QuorumCert, sender: int, beta: Block | None = None, proof=None):
        header = beta.header if beta is not None else None
        sig = beta.proposer_sig if beta is not None else b""
        return signed(ViewChangeMsg(next_view, qc, header, sig, proof, sender), self.keys[sender])

    def new_view(self, view: int, vcs, sender: int):
        agg = create_agg_qc(list(vcs), self.keyring, self.config)
        return create_new_view(agg, view, self.keys[sender])


def cluster(f: int = 1, clients: int = 1, seed: str = "unit", **config) -> Cluster:
    cfg = Config(3 * f + 1, f, **config)
    keyring, keys = Keyring.derive(range(cfg.n + clients), seed)
    gen = genesis(cfg, keyring, keys)
    replicas = {i: Replica(i, cfg, keys[i], keyring, gen) for i in cfg.replicas}
    return Cluster(cfg, keyring, keys, gen, replicas)


def sent(effects, kind: type) -> list:
    """Messages of ``kind`` in ``effects`` as (destination, msg); broadcasts use ``None``."""
    out = []
    for e in effects:
        if isinstance(e, Send) and isinstance(e.msg, kind):
            out.append((e.dest, e.msg))
        elif isinstance(e, Broadcast) and isinstance(e.msg, kind):
            out.append((None, e.msg))
    return out


def notes(effects, kind: str) -> list[dict]:
    return [e.data for e in effects if isinstance(e, Note) and e.kind == kind]


def qc_pool(c: Cluster, length: int = 6) -> list[tuple[Block, QuorumCert]]:
    """A chain of blocks and their QCs, one per view starting at view 0."""
    pool = [c.gen]
    for seq in range(1, length):
        parent = pool[-1][0]
        b = c.block(seq - 1, seq, parent.hash, proposer=(seq - 1) % c.n)
        pool.append((b, c.qc(seq - 1, b, voters=range(c.n - c.config.quorum, c.n))))
    return pool


def random_new_view(c: Cluster, pool, rng, view: int | None = None, sender: int | None = None):
    """A fully valid NEW-VIEW drawn from ``pool`` with random senders and betas."""
    view = len(pool) + rng.randrange(3) if view is None else view
    senders = rng.sample(range(c.n), c.config.quorum)
    vcs = []
    for s in senders:
        i = rng.randrange(len(pool))
        beta = pool[i + 1][0] if i + 1 < len(pool) and rng.random() < 0.3 else None
        vcs.append(c.view_change(view, pool[i][1], s, beta))
    return c.new_view(view, vcs, senders[0] if sender is None else sender)


@dataclass
class Pump:
    """FIFO delivery among a cluster's replicas; timers are ignored."""

    c: Cluster
    drop: object = None
    queue: list = dataclasses.field(default_factory=list)
    notes: list = dataclasses.field(default_factory=list)
    to_clients: list = dataclasses.field(default_factory=list)
    log: list = dataclasses.field(default_factory=list)

    def absorb(self, src: int, effects) -> None:
        for e in effects:
            if isinstance(e, Send):
                self.queue.append((src, e.dest, e.msg))
            elif isinstance(e, Broadcast):
                self.queue.extend((src, j, e.msg) for j in range(self.c.n))
            elif isinstance(e, Note):
                self.notes.append((e.kind, e.data))

    def start(self) -> "Pump":
        for i, r in self.c.replicas.items():
            self.absorb(i, r.start())
        return self

    def inject(self, src: int, dst: int, msg) -> "Pump":
        self.queue.append((src, dst, msg))
        return self

    def run(self, until=None, limit: int = 5000) -> "Pump":
        """Deliver until the queue empties, ``until(cluster)`` holds, or ``limit`` messages."""
        for _ in range(limit):
            if not self.queue or (until is not None and until(self.c)):
                return self
            src, dst, msg = self.queue.pop(0)
            if self.drop is not None and self.drop(src, dst, msg):
                continue
            self.log.append((src, dst, msg))
            if dst >= self.c.n:
                self.to_clients.append((src, dst, msg))
                continue
            self.absorb(dst, self.c.replicas[dst].on_message(src, msg))
        if until is not None and not until(self.c):
            raise AssertionError("pump stopped before the condition held")
        return self

    def timeout(self, nodes) -> "Pump":
        for i in nodes:
            r = self.c.replicas[i]
            self.absorb(i, r.on_timer("epoch", r._timer_token))
        return self

    def kinds(self, kind: str) -> list[dict]:
        return [d for k, d in self.notes if k == kind]


def height(k: int, nodes=None):
    """Pump condition: every listed replica has committed ``k`` blocks."""
    return lambda c: all(c.replicas[i].cur_seq >= k for i in (nodes if nodes is not None else c.replicas))


def executed_everywhere(key, nodes=None):
    return lambda c: all(key in c.replicas[i].executed for i in (nodes if nodes is not None else c.replicas))
