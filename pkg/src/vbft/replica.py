"""Per-node replica state machine.

A :class:`Replica` consumes one event at a time (a delivered message or a
timer firing) and returns the list of effects it produced.  It never touches
the network or the clock directly, so the simulator fully controls ordering.

Phases of a view:

* ``Normal``: proposals are voted on and blocks commit on 2f+1 votes.
* ``AwaitingReady``: the NEW-VIEW has been adopted and the node waits for
  the ready certificate before it votes again.
* ``ViewChanging``: a view-change message for a higher view is outstanding.
  The node keeps storing blocks but neither votes nor commits, except for
  blocks whose child was certified in the same view.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .certificates import beta_entries, create_agg_qc, create_new_view, generate_qc, generate_qc_nr, generate_qc_ready
from .core import (
    QC_BLOCK_VOTE,
    QC_NEGATIVE,
    QC_READY,
    ZERO_DIGEST,
    Block,
    BlockHeader,
    ClientRequest,
    Config,
    EquivocationProof,
    InvalidSeqProof,
    NegativeResponse,
    NewViewMsg,
    PayloadRequest,
    PayloadResponse,
    PrePrepare,
    ProofMsg,
    QuorumCert,
    ReadyCert,
    ReadyMsg,
    ReplyMsg,
    SyncRequest,
    SyncResponse,
    ViewChangeMsg,
    Vote,
    block_digest,
    canonical_sign_bytes,
    create_prepare_msg,
    high_qc_index,
    is_blacklist_tx,
    make_blacklist_tx,
    new_view_digest,
    parse_blacklist_tx,
    payload_digest,
    to_record,
)
from .crypto import KeyPair, Keyring, verify_equivocation_proof, verify_new_view_fast
from .effects import Broadcast, Note, Send, SetTimer
from .errors import CannotRevoke, CryptoError, EncodingError, QCInvalid

NORMAL = "Normal"
VIEW_CHANGING = "ViewChanging"
AWAITING_READY = "AwaitingReady"

ACCEPT = "Accept"
REJECT = "Reject"
NEED_SYNC = "NeedSync"

VOTE_HORIZON = 4
PENDING_LIMIT = 32
SYNC_BACKOFF = 8
SYNC_MAX_BLOCKS = 64

_MISSING = object()


def primary_of(view: int, blacklist, n: int) -> int:
    """Round-robin over the non-blacklisted ids in ascending order."""
    candidates = [i for i in range(n) if i not in blacklist]
    return candidates[view % len(candidates)]


def parse_op(op: bytes) -> Optional[tuple[str, str]]:
    """``b"key=value"`` writes a key; anything else is a no-op."""
    try:
        text = op.decode("utf-8")
    except UnicodeDecodeError:
        return None
    key, sep, value = text.partition("=")
    return (key, value) if sep and key else None


@dataclass(frozen=True, slots=True)
class Verdict:
    outcome: str
    reason: str = ""
    proof: Optional[InvalidSeqProof] = None


@dataclass(slots=True)
class RecoveryState:
    """Primary-side progress through the beta candidates of a new view."""

    beta_candidates: list
    index: int = 0
    negative_responses: dict = field(default_factory=dict)
    qc_nrs: list = field(default_factory=list)
    recovered_payload: Optional[Block] = None

    @property
    def current_target(self) -> Optional[BlockHeader]:
        if self.index < len(self.beta_candidates):
            return self.beta_candidates[self.index][0]
        return None

    @property
    def done(self) -> bool:
        return self.recovered_payload is not None or self.index >= len(self.beta_candidates)


class Replica:
    def __init__(
        self,
        node_id: int,
        config: Config,
        keys: KeyPair,
        keyring: Keyring,
        genesis: tuple[Block, QuorumCert],
    ):
        self.id = node_id
        self.config = config
        self.keys = keys
        self.keyring = keyring
        self.n = config.n
        self.quorum = config.quorum

        gblock, gqc = genesis
        self.chain: list[tuple[Block, QuorumCert]] = [(gblock, gqc)]
        self.seq_of: dict[bytes, int] = {gblock.hash: 0}
        self.blocks: dict[bytes, Block] = {gblock.hash: gblock}
        self.undo: dict[int, tuple[list, list]] = {}

        self.cur_view = 0
        self.vc_target = 0
        self.blacklist: set[int] = set()
        # seq of the block whose BlacklistTx added each culprit
        self.blacklist_seq: dict[int, int] = {}
        self.view_primary = primary_of(0, self.blacklist, self.n)
        self._phase = NORMAL

        self.voted: dict[tuple[int, int], bytes] = {}
        self.last_voted_uncommitted: Optional[Block] = None
        self.pending_votes: dict[tuple, dict[int, Vote]] = {}
        self.seen_headers: dict[tuple[int, int, int], tuple[BlockHeader, bytes]] = {}

        self.mempool: dict[tuple[int, int], ClientRequest] = {}
        self.executed: dict[tuple[int, int], tuple[int, bytes]] = {}
        self.kv: dict[str, str] = {}

        self.vc_pool: dict[int, dict[int, ViewChangeMsg]] = {}
        self.my_vcs: dict[int, ViewChangeMsg] = {}
        self.nv_sent: set[int] = set()
        self.nv_view = 0
        self.nv_high: QuorumCert = gqc
        self.nv_candidates: list[tuple[BlockHeader, bytes]] = []
        self.first_pending = False
        self.stashed_nv: Optional[NewViewMsg] = None
        self.nv_build: Optional[int] = None

        self.readies: dict[int, ReadyMsg] = {}
        self.qc_r: Optional[QuorumCert] = None
        # What this node entered its current view with, replayed to laggards.
        self.last_nv: Optional[NewViewMsg] = None
        self.cur_cert: Optional[ReadyCert] = None
        self.low_nvs: dict[int, NewViewMsg] = {}
        self.future_certs: dict[int, ReadyCert] = {}
        # same-view NEW-VIEWs from another primary, kept in case its Ready round wins
        self.alt_nvs: dict[bytes, NewViewMsg] = {}
        self.alt_cert: Optional[ReadyCert] = None
        self.nv_digest = ZERO_DIGEST
        self.early_readies: dict[int, dict[int, ReadyMsg]] = {}
        self.recovery: Optional[RecoveryState] = None
        self.inflight: Optional[bytes] = None
        self.pending_pps: list[PrePrepare] = []
        self.sync_target: Optional[tuple[int, bytes, bool]] = None

        self.proofs: dict[int, EquivocationProof] = {}
        self.my_proof = None

        self.timeout_current = config.timeout_initial
        self._timer_token = 0
        self._proof_token = 0
        self._fx: list = []
        self._draining = False
        self._drain_again = False

    # ------------------------------------------------------------------
    # read-only views of the state

    @property
    def cur_seq(self) -> int:
        return len(self.chain) - 1

    @property
    def high_qc(self) -> QuorumCert:
        return self.chain[-1][1]

    @property
    def tip(self) -> Block:
        return self.chain[-1][0]

    @property
    def phase(self) -> str:
        if self.vc_target > self.cur_view:
            return VIEW_CHANGING
        return self._phase

    def primary_of(self, view: int) -> int:
        """Best local guess, used before a NEW-VIEW fixes the prefix."""
        return primary_of(view, self.blacklist, self.n)

    def primary_for(self, view: int, high_seq: int) -> int:
        """Primary of ``view`` opened on a highQC at ``high_seq``.

        Only blacklistings committed at or below the highQC count, so every
        honest node holding that prefix picks the same primary.
        """
        banned = {c for c, s in self.blacklist_seq.items() if s <= high_seq}
        return primary_of(view, banned, self.n)

    def _holds(self, qc: QuorumCert) -> bool:
        return qc.seq <= self.cur_seq and self.chain[qc.seq][0].hash == qc.block_hash

    def _sync_to(self, qc: QuorumCert) -> None:
        self._request_sync(min(self.cur_seq + 1, qc.seq), qc.seq, qc.block_hash, trusted=True)

    # ------------------------------------------------------------------
    # entry points

    def start(self) -> list:
        self._fx = []
        self._note("ViewEnter", view=self.cur_view, primary=self.view_primary)
        self._arm_epoch_timer()
        self._maybe_propose()
        return self._flush()

    def on_message(self, src: int, msg) -> list:
        self._fx = []
        handler = self._HANDLERS.get(type(msg))
        if handler is not None:
            handler(self, src, msg)
        return self._flush()

    def on_timer(self, name: str, token: int) -> list:
        self._fx = []
        if name == "epoch" and token == self._timer_token:
            self.handle_timeout()
        elif name == "proof" and token == self._proof_token:
            self._on_proof_deadline()
        return self._flush()

    def _flush(self) -> list:
        out, self._fx = self._fx, []
        return out

    def _note(self, kind: str, **data) -> None:
        data["node"] = self.id
        self._fx.append(Note(kind, data))

    def _signed(self, msg):
        return dataclasses.replace(msg, signature=self.keys.sign(canonical_sign_bytes(msg)))

    def _send_others(self, msg) -> None:
        for j in range(self.n):
            if j != self.id:
                self._fx.append(Send(j, msg))

    # ------------------------------------------------------------------
    # timers

    def _arm_epoch_timer(self) -> None:
        self._timer_token += 1
        self._fx.append(SetTimer("epoch", int(self.timeout_current), self._timer_token))

    def _arm_proof_timer(self) -> None:
        self._proof_token += 1
        self._fx.append(SetTimer("proof", int(self.timeout_current), self._proof_token))

    def handle_timeout(self) -> None:
        """Epoch expiry: start (or push forward) a view change."""
        self._note("Timeout", view=self.cur_view, timeout=self.timeout_current)
        self.sync_target = None
        if self._phase == AWAITING_READY:
            self._fx.append(Send(self.view_primary, self._signed(ReadyMsg(self.cur_view, self.id, self.nv_digest))))
        if self.vc_target > self.cur_view:
            backers = set(self.vc_pool.get(self.vc_target, {})) | {self.id}
            if len(backers) >= self.config.f + 1:
                self._send_view_change(self.vc_target + 1)
            else:
                # Nobody joined yet; retransmit instead of racing ahead alone.
                self._fx.append(Broadcast(self.my_vcs[self.vc_target]))
        else:
            self._send_view_change(self.cur_view + 1)
        self.timeout_current = self.timeout_current * self.config.timeout_multiplier
        self._arm_epoch_timer()

    def _on_proof_deadline(self) -> None:
        if self.phase == NORMAL and any(c not in self.blacklist for c in self.proofs):
            self.start_view_change()

    # ------------------------------------------------------------------
    # client requests

    def _valid_request(self, req: ClientRequest) -> bool:
        return self.keyring.verify(req.client_id, canonical_sign_bytes(req), req.signature)

    def handle_client_request(self, src: int, req: ClientRequest) -> None:
        if not isinstance(req.op, bytes) or not self._valid_request(req):
            return
        done = self.executed.get(req.key)
        if done is not None:
            self._reply(req, *done)
            return
        if is_blacklist_tx(req):
            return
        if req.key not in self.mempool:
            self.mempool[req.key] = req
        if self.id == self.view_primary:
            self._maybe_propose()
        elif src >= self.n:
            self._fx.append(Send(self.view_primary, req))

    def _reply(self, req: ClientRequest, seq: int, block_hash: bytes) -> None:
        if req.client_id < self.n:
            return
        msg = self._signed(ReplyMsg(req.key, seq, block_hash, self.id))
        self._fx.append(Send(req.client_id, msg))

    # ------------------------------------------------------------------
    # proposing

    def _next_batch(self) -> list[ClientRequest]:
        batch: list[ClientRequest] = []
        pending = sorted(c for c in self.proofs if c not in self.blacklist)
        if pending:
            batch.append(make_blacklist_tx(self.proofs[pending[0]], self.keys))
        for key, req in self.mempool.items():
            if len(batch) >= self.config.batch_size:
                break
            if key not in self.executed:
                batch.append(req)
        return batch

    def _maybe_propose(self) -> None:
        if self.id != self.view_primary or self.phase != NORMAL or self.inflight is not None:
            return
        if self.first_pending:
            rec = self.recovery
            if rec is not None and not rec.done:
                return
            if rec is not None and rec.recovered_payload is not None:
                block = rec.recovered_payload
            else:
                qc_nrs = tuple(rec.qc_nrs) if rec is not None else ()
                base = self.nv_high
                block = create_prepare_msg(
                    self.cur_view, base.seq + 1, base.block_hash, qc_nrs, self._next_batch(), self.keys
                )
        else:
            hq = self.high_qc
            block = create_prepare_msg(self.cur_view, hq.seq + 1, hq.block_hash, (), self._next_batch(), self.keys)
        self.propose_block(block)

    def propose_block(self, block: Block) -> None:
        self.inflight = block.hash
        self._fx.append(Broadcast(self._signed(PrePrepare(self.cur_view, block, self.id))))

    # ------------------------------------------------------------------
    # proposal validation

    def _valid_payload(self, block: Block) -> bool:
        for i, req in enumerate(block.payload):
            if not self._valid_request(req):
                return False
            if is_blacklist_tx(req):
                if i != 0:
                    return False
                proof = parse_blacklist_tx(req)
                if proof is None or not verify_equivocation_proof(proof, self.keyring):
                    return False
        return True

    def _valid_qc_nr(self, qc: QuorumCert) -> bool:
        return qc.kind == QC_NEGATIVE and qc.view == self.cur_view and self.keyring.verify_qc(qc, self.quorum)

    def safety_check(self, pp: PrePrepare) -> Verdict:
        b = pp.block
        h = b.header
        if pp.view != self.cur_view:
            return Verdict(REJECT, "WrongView")
        if pp.sender != self.view_primary:
            return Verdict(REJECT, "WrongProposer")
        if pp.sender in self.blacklist:
            return Verdict(REJECT, "Blacklisted")
        if not self.keyring.verify_msg(pp, pp.sender):
            return Verdict(REJECT, "BadSig")
        if block_digest(b) != h.hash:
            return Verdict(REJECT, "BadDigest")
        if not self.keyring.verify(h.proposer, canonical_sign_bytes(h), b.proposer_sig):
            return Verdict(REJECT, "BadSig")
        if not self._valid_payload(b):
            return Verdict(REJECT, "BadPayload")
        parent_seq = self.seq_of.get(h.parent)
        if parent_seq is not None and h.seq != parent_seq + 1:
            return Verdict(REJECT, "InvalidSeq", InvalidSeqProof(h, b.proposer_sig, parent_seq))

        if self.first_pending:
            base = self.nv_high
            if self.cur_seq < base.seq:
                # Voters must hold the parent, so wait for the sync to highQC.
                return Verdict(NEED_SYNC)
            cands = {hd.hash: hd for hd, _ in self.nv_candidates}
            if h.view < self.cur_view:
                if cands.get(h.hash) == h:
                    return Verdict(ACCEPT, "Recovered")
                return Verdict(REJECT, "MissingQcNr")
            if h.view != self.cur_view or h.proposer != pp.sender:
                return Verdict(REJECT, "BadHeader")
            if h.seq > base.seq + 1:
                return Verdict(NEED_SYNC)
            if h.seq != base.seq + 1 or h.parent != base.block_hash:
                return Verdict(REJECT, "MissingQcNr")
            if not all(self._valid_qc_nr(qc) for qc in b.qc_nr):
                return Verdict(REJECT, "BadQcNr")
            if not cands:
                return Verdict(ACCEPT, "NoBeta") if not b.qc_nr else Verdict(REJECT, "UnexpectedQcNr")
            if set(cands) <= {qc.block_hash for qc in b.qc_nr}:
                return Verdict(ACCEPT, "QcNr")
            return Verdict(REJECT, "MissingQcNr")

        if b.qc_nr:
            return Verdict(REJECT, "UnexpectedQcNr")
        if h.view != self.cur_view or h.proposer != pp.sender:
            return Verdict(REJECT, "BadHeader")
        hq = self.high_qc
        if h.seq <= hq.seq:
            return Verdict(REJECT, "Stale")
        if h.seq == hq.seq + 1:
            if h.parent == hq.block_hash:
                return Verdict(ACCEPT, "Normal")
            return Verdict(REJECT, "NotExtendingHighQC")
        return Verdict(NEED_SYNC)

    def _observe_header(self, header: BlockHeader, sig: bytes, verified: bool = False) -> None:
        """Record a signed header and raise a proof on a conflicting twin."""
        if header.proposer < 0:
            return
        key = (header.view, header.seq, header.proposer)
        prev = self.seen_headers.get(key)
        if prev is not None and prev[0].hash == header.hash:
            return
        if not verified and not self.keyring.verify(header.proposer, canonical_sign_bytes(header), sig):
            return
        if prev is None:
            self.seen_headers[key] = (header, sig)
            return
        a, b = sorted([prev, (header, sig)], key=lambda e: e[0].hash)
        proof = EquivocationProof(a[0], b[0], a[1], b[1])
        if self.handle_equivocation_proof(proof, direct=True):
            self._fx.append(Broadcast(ProofMsg(proof)))

    def handle_proposal(self, src: int, pp: PrePrepare) -> None:
        if pp.view < self.cur_view:
            return
        if pp.view > self.cur_view or self._phase == AWAITING_READY:
            self._buffer(pp)
            return
        verdict = self.safety_check(pp)
        b = pp.block
        if verdict.reason not in ("WrongView", "WrongProposer", "Blacklisted", "BadSig", "BadDigest"):
            self._observe_header(b.header, b.proposer_sig, verified=True)
            if b.header.proposer in self.proofs and b.header.view == self.cur_view:
                return
        if verdict.outcome == ACCEPT:
            self._accept(pp, verdict)
        elif verdict.outcome == NEED_SYNC:
            self._buffer(pp)
            h = b.header
            if h.parent not in self.blocks or self.blocks[h.parent].seq != h.seq - 1:
                self._request_sync(self.cur_seq + 1, h.seq - 1, h.parent, trusted=False)
        elif verdict.reason == "InvalidSeq":
            if self.handle_equivocation_proof(verdict.proof, direct=True):
                self._fx.append(Broadcast(ProofMsg(verdict.proof)))
        elif verdict.reason in ("MissingQcNr", "BadQcNr", "UnexpectedQcNr"):
            self.start_view_change()

    def _buffer(self, pp: PrePrepare) -> None:
        if pp in self.pending_pps:
            return
        self.pending_pps.append(pp)
        if len(self.pending_pps) > PENDING_LIMIT:
            self.pending_pps.pop(0)

    def _accept(self, pp: PrePrepare, verdict: Verdict) -> None:
        b = pp.block
        h = b.header
        self.blocks[h.hash] = b
        if self.phase == VIEW_CHANGING:
            self._drain()
            return
        if self.first_pending:
            self.first_pending = False
            if h.seq <= self.cur_seq and self.chain[h.seq][0].hash != h.hash:
                self.revoke_block(h.seq)
        lock = (pp.view, h.seq)
        if lock in self.voted:
            return
        self.voted[lock] = h.hash
        if self.last_voted_uncommitted is None or h.seq >= self.last_voted_uncommitted.seq:
            self.last_voted_uncommitted = b
        self._fx.append(Broadcast(self._signed(Vote(pp.view, h.seq, h.hash, h.parent, self.id))))
        self._drain()

    # ------------------------------------------------------------------
    # votes and commits

    def handle_vote(self, src: int, v: Vote) -> None:
        if not 0 <= v.voter < self.n or v.view < self.cur_view:
            return
        if v.seq > self.cur_seq + VOTE_HORIZON + 1 and v.view == self.cur_view:
            return
        key = (v.view, v.seq, v.hash, v.parent)
        bucket = self.pending_votes.get(key)
        if bucket is not None and v.voter in bucket:
            return
        if not self.keyring.verify_msg(v, v.voter):
            return
        if bucket is None:
            bucket = self.pending_votes[key] = {}
        bucket[v.voter] = v
        if len(bucket) >= self.quorum and v.view == self.cur_view:
            self._drain()

    def _certified(self, seq: int, parent: Optional[bytes] = None, block_hash: Optional[bytes] = None):
        for (view, s, h, p), bucket in self.pending_votes.items():
            if (
                view == self.cur_view
                and s == seq
                and len(bucket) >= self.quorum
                and (parent is None or p == parent)
                and (block_hash is None or h == block_hash)
            ):
                yield h, bucket

    def _commit_ready_blocks(self) -> bool:
        progressed = False
        while True:
            nxt = self.cur_seq + 1
            tip_hash = self.tip.hash
            for h, bucket in self._certified(nxt, parent=tip_hash):
                block = self.blocks.get(h)
                if block is None or block.seq != nxt:
                    continue
                if self.phase == VIEW_CHANGING and not any(self._certified(nxt + 1, parent=h)):
                    continue
                qc = generate_qc(list(bucket.values()), self.keyring, self.config)
                self.commit_block(block, qc, trusted=True)
                progressed = True
                break
            else:
                break
        # A quorum from the current view for a block already held upgrades its QC.
        if self.cur_seq >= 1:
            block, qc = self.chain[-1]
            if qc.view < self.cur_view:
                for h, bucket in self._certified(block.seq, block_hash=block.hash):
                    self.chain[-1] = (block, generate_qc(list(bucket.values()), self.keyring, self.config))
                    if self.inflight == block.hash:
                        # A re-proposed block we had already committed: move on.
                        self.inflight = None
                        self._maybe_propose()
                    break
        return progressed

    def commit_block(self, block: Block, qc: QuorumCert, trusted: bool = False) -> None:
        if qc.kind != QC_BLOCK_VOTE or qc.block_hash != block.hash or qc.seq != block.seq:
            raise QCInvalid("QC does not certify this block")
        if not trusted and not self.keyring.verify_qc(qc, self.quorum):
            raise QCInvalid("QC signature does not verify")
        if block.seq != self.cur_seq + 1 or block.header.parent != self.tip.hash:
            raise QCInvalid("block does not extend the committed chain")
        before: list[tuple[str, object]] = []
        keys: list[tuple[int, int]] = []
        replies = []
        for req in block.payload:
            if req.key in self.executed:
                replies.append((req, *self.executed[req.key]))
                continue
            proof = parse_blacklist_tx(req)
            if proof is not None:
                culprit = proof.culprit
                if (
                    culprit not in self.blacklist
                    and len(self.blacklist) < self.config.f
                    and verify_equivocation_proof(proof, self.keyring)
                ):
                    self.blacklist.add(culprit)
                    self.blacklist_seq[culprit] = block.seq
                    self._note("Blacklist", culprit=culprit, seq=block.seq)
                self.proofs.pop(culprit, None)
            else:
                op = parse_op(req.op)
                if op is not None:
                    before.append((op[0], self.kv.get(op[0], _MISSING)))
                    self.kv[op[0]] = op[1]
                replies.append((req, block.seq, block.hash))
            self.executed[req.key] = (block.seq, block.hash)
            self.mempool.pop(req.key, None)
            keys.append(req.key)
        self.chain.append((block, qc))
        self.seq_of[block.hash] = block.seq
        self.blocks[block.hash] = block
        self.undo[block.seq] = (before, keys)
        h = block.header
        self._note(
            "Commit",
            seq=h.seq,
            hash=h.hash.hex(),
            parent=h.parent.hex(),
            view=h.view,
            payload=payload_digest(block.payload).hex(),
            keys=[list(k) for k in keys],
            qc=to_record(qc),
        )
        for req, seq, bh in replies:
            self._reply(req, seq, bh)
        if self.inflight == block.hash:
            self.inflight = None
        if self.vc_target <= self.cur_view:
            self.timeout_current = self.config.timeout_initial
            self._arm_epoch_timer()
        self._prune_votes()
        self._drain_again = True
        self._maybe_propose()

    def _prune_votes(self) -> None:
        floor = self.cur_seq
        for key in [k for k in self.pending_votes if k[1] < floor or k[0] < self.cur_view]:
            del self.pending_votes[key]

    def revoke_block(self, from_seq: int) -> None:
        """Undo every committed block from ``from_seq`` up to the tip."""
        if from_seq <= 0 or from_seq > self.cur_seq:
            raise CannotRevoke(f"cannot revoke from seq {from_seq} (height {self.cur_seq})")
        while self.cur_seq >= from_seq:
            block, qc = self.chain.pop()
            before, keys = self.undo.pop(block.seq)
            for key, prev in reversed(before):
                if prev is _MISSING:
                    self.kv.pop(key, None)
                else:
                    self.kv[key] = prev
            by_key = {r.key: r for r in block.payload}
            for key in keys:
                self.executed.pop(key, None)
                req = by_key[key]
                if not is_blacklist_tx(req):
                    self.mempool[key] = req
            del self.seq_of[block.hash]
            self._note("Revoke", seq=block.seq, hash=block.hash.hex(), qc=to_record(qc))
        if self.inflight is not None:
            self.inflight = None

    def _drain(self) -> None:
        """Commit whatever is ready and retry buffered proposals."""
        if self._draining:
            self._drain_again = True
            return
        self._draining = True
        try:
            while True:
                self._drain_again = False
                progressed = self._commit_ready_blocks()
                if self.stashed_nv is not None:
                    nv, self.stashed_nv = self.stashed_nv, None
                    self.handle_new_view(nv.sender, nv)
                if self.nv_build is not None:
                    view, self.nv_build = self.nv_build, None
                    self._maybe_build_new_view(view)
                if self.pending_pps and self._phase == NORMAL:
                    pps, self.pending_pps = self.pending_pps, []
                    for pp in pps:
                        if pp.view >= self.cur_view:
                            self.handle_proposal(pp.sender, pp)
                if not (progressed or self._drain_again):
                    break
        finally:
            self._draining = False

    # ------------------------------------------------------------------
    # view change

    def start_view_change(self, target: Optional[int] = None) -> None:
        if target is None:
            target = max(self.cur_view, self.vc_target) + 1
        if target <= self.vc_target and target in self.my_vcs:
            return
        self._send_view_change(target)
        self._arm_epoch_timer()

    def _send_view_change(self, target: int) -> None:
        self.vc_target = max(self.vc_target, target)
        beta = self.last_voted_uncommitted
        if beta is not None and beta.seq <= self.cur_seq:
            beta = None
        vc = self._signed(
            ViewChangeMsg(
                target,
                self.high_qc,
                beta.header if beta is not None else None,
                beta.proposer_sig if beta is not None else b"",
                self.my_proof,
                self.id,
            )
        )
        self.my_vcs[target] = vc
        self._fx.append(Broadcast(vc))

    def _valid_vc(self, vc: ViewChangeMsg) -> bool:
        if not 0 <= vc.sender < self.n or not self.keyring.verify_msg(vc, vc.sender):
            return False
        qc = vc.latest_qc
        if qc.kind != QC_BLOCK_VOTE or qc.view >= vc.next_view:
            return False
        if vc.beta is not None:
            if vc.beta.seq <= qc.seq:
                return False
            if not self.keyring.verify(vc.beta.proposer, canonical_sign_bytes(vc.beta), vc.beta_sig):
                return False
        return self.keyring.verify_qc(qc, self.quorum)

    def _absorb_proof(self, proof) -> None:
        if isinstance(proof, EquivocationProof) and verify_equivocation_proof(proof, self.keyring):
            self.handle_equivocation_proof(proof)

    def handle_view_change_msg(self, src: int, vc: ViewChangeMsg) -> None:
        if vc.next_view <= self.cur_view or self._view_is_working(vc):
            self._help_laggard(src, vc)
        if vc.next_view <= self.cur_view:
            return
        pool = self.vc_pool.setdefault(vc.next_view, {})
        if vc.sender in pool or not self._valid_vc(vc):
            return
        pool[vc.sender] = vc
        if vc.beta is not None:
            self._observe_header(vc.beta, vc.beta_sig, verified=True)
        if vc.proof is not None:
            self._absorb_proof(vc.proof)

        latest: dict[int, int] = {}
        for view, senders in self.vc_pool.items():
            if view > self.cur_view:
                for s in senders:
                    latest[s] = max(latest.get(s, 0), view)
        f = self.config.f
        if len(latest) >= f + 1:
            smallest = sorted(latest.values(), reverse=True)[f]
            if smallest > self.vc_target:
                self.start_view_change(smallest)

        self._maybe_build_new_view(vc.next_view)

    def _maybe_build_new_view(self, view: int) -> None:
        pool = self.vc_pool.get(view, {})
        if len(pool) < self.quorum or view in self.nv_sent or view < self.vc_target or view <= self.cur_view:
            return
        chosen = list(pool.values())[: self.quorum]
        high = chosen[high_qc_index(chosen)].latest_qc
        if not self._holds(high):
            # The primary is only known once the highQC prefix is held.
            self.nv_build = view
            self._sync_to(high)
            return
        if self.primary_for(view, high.seq) != self.id:
            return
        self.nv_sent.add(view)
        agg = create_agg_qc(chosen, self.keyring, self.config)
        nv = create_new_view(agg, view, self.keys)
        self._fx.append(Broadcast(nv))
        # Adopt at once so a timer firing before the self-delivery cannot strand the view.
        self.handle_new_view(self.id, nv)

    def _view_is_working(self, vc: ViewChangeMsg) -> bool:
        """We commit in our view while the sender never saw a QC from it."""
        return (
            self.phase == NORMAL
            and self.cur_cert is not None
            and self.chain[-1][1].view == self.cur_view
            and vc.next_view == self.cur_view + 1
        )

    def _help_laggard(self, src: int, vc: ViewChangeMsg) -> None:
        """The sender is still trying to reach a view we already entered."""
        if src != vc.sender or not 0 <= src < self.n or not self.keyring.verify_msg(vc, src):
            return
        if self.last_nv is not None:
            self._fx.append(Send(src, self.last_nv))
        if self.cur_cert is not None:
            self._fx.append(Send(src, self.cur_cert))

    def handle_new_view(self, src: int, nv: NewViewMsg, switch: bool = False) -> None:
        if nv.view == self.cur_view and not switch:
            self._note_alt_new_view(nv)
            return
        if nv.view < self.cur_view or (nv.view == self.cur_view and not switch):
            return
        if nv.view < self.vc_target and nv.view not in self.future_certs:
            # Only catch up to a lower view once a ReadyCert shows it is live.
            self.low_nvs[nv.view] = nv
            return
        if not 0 <= nv.sender < self.n or not self.keyring.verify_msg(nv, nv.sender):
            return
        try:
            if not verify_new_view_fast(nv, self.keyring, self.config):
                return
        except CryptoError:
            return
        high, entries = beta_entries(nv.agg_qc)
        for vc in nv.agg_qc.view_change_msgs:
            if vc.beta is not None:
                self._observe_header(vc.beta, vc.beta_sig)
            if vc.proof is not None:
                self._absorb_proof(vc.proof)
        if not self._holds(high):
            self.stashed_nv = nv
            self._sync_to(high)
            return
        primary = self.primary_for(nv.view, high.seq)
        if nv.sender != primary or primary in self.blacklist:
            return
        valid = [
            (hd, sig)
            for hd, sig in entries
            if hd.parent == high.block_hash
            and self.keyring.verify(hd.proposer, canonical_sign_bytes(hd), sig)
        ]
        self._enter_view(nv.view, high, valid, new_view_digest(nv))
        self.last_nv = nv

    def _note_alt_new_view(self, nv: NewViewMsg) -> None:
        digest = new_view_digest(nv)
        if digest == self.nv_digest or self.phase == NORMAL and self.cur_cert is not None:
            return
        if len(self.alt_nvs) < self.n:
            self.alt_nvs[digest] = nv
        self._maybe_switch()

    def _maybe_switch(self) -> None:
        """Follow the NEW-VIEW whose Ready round completed, if it is not ours.

        At most one NEW-VIEW per view can gather a Ready quorum, so a valid
        certificate for a different one means our primary cannot make progress.
        """
        rc = self.alt_cert
        if rc is None or rc.qc.view != self.cur_view:
            return
        nv = self.alt_nvs.get(rc.qc.block_hash)
        if nv is None:
            return
        self.alt_cert = None
        self.future_certs[nv.view] = rc
        self.handle_new_view(nv.sender, nv, switch=True)

    def _enter_view(self, view: int, high: QuorumCert, candidates: list, nv_digest: bytes = ZERO_DIGEST) -> None:
        self.cur_view = view
        # Entering below our target only happens with a ReadyCert showing the view is live.
        self.vc_target = view
        self.nv_digest = nv_digest
        self.alt_nvs = {}
        self.alt_cert = None
        self.view_primary = self.primary_for(view, high.seq)
        self._phase = AWAITING_READY
        self.nv_view = view
        self.nv_high = high
        self.nv_candidates = candidates
        self.first_pending = True
        self.inflight = None
        self.readies = {}
        self.qc_r = None
        self.cur_cert = None
        for w in [w for w in self.low_nvs if w <= view]:
            del self.low_nvs[w]
        early = self.early_readies.pop(view, {})
        for w in [w for w in self.early_readies if w < view]:
            del self.early_readies[w]
        self.recovery = None
        self.stashed_nv = None
        self.sync_target = None
        for w in [w for w in self.vc_pool if w <= view]:
            del self.vc_pool[w]
        for w in [w for w in self.my_vcs if w < view]:
            del self.my_vcs[w]
        self._prune_votes()
        self._note("ViewEnter", view=view, primary=self.view_primary)
        self._arm_epoch_timer()
        self._proof_token += 1  # the deadline restarts once the view is ready

        if high.seq <= self.cur_seq:
            if self.chain[high.seq][0].hash != high.block_hash:
                self.revoke_block(high.seq)
        if high.seq > self.cur_seq:
            self._request_sync(self.cur_seq + 1, high.seq, high.block_hash, trusted=True)

        self._fx.append(Send(self.view_primary, self._signed(ReadyMsg(view, self.id, nv_digest))))
        if self.id == self.view_primary:
            self._start_recovery()
        for r in early.values():
            self.handle_ready(r.sender, r)
        cert = self.future_certs.pop(view, None)
        for w in [w for w in self.future_certs if w < view]:
            del self.future_certs[w]
        if cert is not None:
            self.handle_ready_cert(self.view_primary, cert)

    # ------------------------------------------------------------------
    # ready round

    def handle_ready(self, src: int, r: ReadyMsg) -> None:
        if r.view < self.cur_view:
            return
        if self.qc_r is not None and r.view == self.cur_view:
            # Late or repeated Ready: the sender missed the certificate.
            if 0 <= src < self.n:
                self._fx.append(Send(src, ReadyCert(self.qc_r)))
            return
        if not 0 <= r.sender < self.n or not self.keyring.verify_msg(r, r.sender):
            return
        if r.view > self.cur_view:
            # The primary may see Ready before its own NEW-VIEW comes back.
            if self.primary_of(r.view) == self.id:
                self.early_readies.setdefault(r.view, {})[r.sender] = r
            return
        if self.id != self.view_primary or r.sender in self.readies or r.nv_hash != self.nv_digest:
            return
        self.readies[r.sender] = r
        if len(self.readies) >= self.quorum:
            self.qc_r = generate_qc_ready(list(self.readies.values()), self.keyring, self.config)
            self._fx.append(Broadcast(ReadyCert(self.qc_r)))

    def handle_ready_cert(self, src: int, rc: ReadyCert) -> None:
        qc = rc.qc
        if qc.kind != QC_READY or qc.view < self.cur_view:
            return
        if qc.view > self.cur_view:
            if self.keyring.verify_qc(qc, self.quorum):
                self.future_certs[qc.view] = rc
                low = self.low_nvs.pop(qc.view, None)
                if low is not None:
                    self.handle_new_view(src, low)
            return
        if self._phase != AWAITING_READY and qc.block_hash == self.nv_digest:
            return
        if not self.keyring.verify_qc(qc, self.quorum):
            return
        if qc.block_hash != self.nv_digest:
            self.alt_cert = rc
            self._maybe_switch()
            return
        self._phase = NORMAL
        self.cur_cert = rc
        self._arm_epoch_timer()
        for culprit, proof in sorted(self.proofs.items()):
            if culprit not in self.blacklist and self.id != self.view_primary:
                self._fx.append(Send(self.view_primary, ProofMsg(proof)))
        if any(c not in self.blacklist for c in self.proofs):
            self._arm_proof_timer()
        self._maybe_propose()
        self._drain()

    # ------------------------------------------------------------------
    # beta recovery

    def _start_recovery(self) -> None:
        if not self.nv_candidates:
            return
        self.recovery = RecoveryState(list(self.nv_candidates))
        self._recovery_step()

    def _recovery_step(self) -> None:
        rec = self.recovery
        target = rec.current_target
        if target is None:
            self._maybe_propose()
            return
        held = self.blocks.get(target.hash)
        if held is not None:
            rec.recovered_payload = held
            self._maybe_propose()
            return
        rec.negative_responses = {}
        self._fx.append(Broadcast(PayloadRequest(self.cur_view, target.hash)))

    def handle_payload_request(self, src: int, req: PayloadRequest) -> None:
        block = self.blocks.get(req.beta_hash)
        if block is not None:
            self._fx.append(Send(src, PayloadResponse(req.view, block)))
        else:
            nr = self._signed(NegativeResponse(req.beta_hash, req.view, self.id))
            self._fx.append(Send(src, nr))

    def handle_payload_response(self, src: int, resp: PayloadResponse) -> None:
        rec = self.recovery
        if rec is None or rec.done or resp.view != self.cur_view:
            return
        target = rec.current_target
        b = resp.block
        if b.header != target or block_digest(b) != target.hash or not self._valid_payload(b):
            return
        if not self.keyring.verify(target.proposer, canonical_sign_bytes(target), b.proposer_sig):
            return
        self.blocks[b.hash] = b
        rec.recovered_payload = b
        self._maybe_propose()

    def handle_negative_response(self, src: int, nr: NegativeResponse) -> None:
        rec = self.recovery
        if rec is None or rec.done or nr.view != self.cur_view:
            return
        if nr.beta_hash != rec.current_target.hash or nr.sender in rec.negative_responses:
            return
        if not 0 <= nr.sender < self.n or not self.keyring.verify_msg(nr, nr.sender):
            return
        rec.negative_responses[nr.sender] = nr
        if len(rec.negative_responses) >= self.quorum:
            rec.qc_nrs.append(generate_qc_nr(list(rec.negative_responses.values()), self.keyring, self.config))
            rec.index += 1
            self._recovery_step()

    # ------------------------------------------------------------------
    # equivocation proofs

    def handle_equivocation_proof(self, proof, direct: bool = False) -> bool:
        """Store a fresh proof; returns True when it was new."""
        culprit = proof.culprit
        if isinstance(proof, InvalidSeqProof):
            if self.my_proof is None:
                self.my_proof = proof
            if culprit == self.view_primary and self.phase != VIEW_CHANGING:
                self.start_view_change()
            return False
        if culprit in self.blacklist or culprit in self.proofs:
            return False
        self.proofs[culprit] = proof
        self.my_proof = proof
        self._note("Proof", culprit=culprit, view=proof.header_a.view, seq=proof.header_a.seq)
        if self.id != self.view_primary and not direct:
            self._fx.append(Send(self.view_primary, ProofMsg(proof)))
        if self.phase == NORMAL:
            self._arm_proof_timer()
        if culprit == self.view_primary and self.phase != VIEW_CHANGING:
            self.start_view_change()
        return True

    def _on_proof_msg(self, src: int, msg: ProofMsg) -> None:
        proof = msg.proof
        if isinstance(proof, EquivocationProof) and verify_equivocation_proof(proof, self.keyring):
            self.handle_equivocation_proof(proof)

    # ------------------------------------------------------------------
    # state transfer

    def _request_sync(self, from_seq: int, to_seq: int, target: bytes, trusted: bool) -> None:
        from_seq = max(1, from_seq)
        if to_seq < from_seq:
            return
        want = (to_seq, target, trusted)
        if self.sync_target is not None and self.sync_target[:2] == want[:2]:
            return
        self.sync_target = want
        self._send_others(SyncRequest(from_seq, to_seq, target))

    def handle_sync_request(self, src: int, req: SyncRequest) -> None:
        lo, hi = max(1, req.from_seq), req.to_seq
        if hi > self.cur_seq or lo > hi or self.chain[hi][0].hash != req.target_hash:
            return
        lo = max(lo, hi - SYNC_MAX_BLOCKS + 1)
        entries = self.chain[lo : hi + 1]
        self._fx.append(Send(src, SyncResponse(tuple(b for b, _ in entries), tuple(q for _, q in entries))))

    def _valid_segment(self, blocks, qcs) -> bool:
        if not blocks or len(blocks) != len(qcs):
            return False
        for i, (b, qc) in enumerate(zip(blocks, qcs)):
            if i and (b.seq != blocks[i - 1].seq + 1 or b.header.parent != blocks[i - 1].hash):
                return False
            if qc.kind != QC_BLOCK_VOTE or qc.block_hash != b.hash or qc.seq != b.seq:
                return False
            if block_digest(b) != b.hash or not self._valid_payload(b):
                return False
            if not self.keyring.verify(b.header.proposer, canonical_sign_bytes(b.header), b.proposer_sig):
                if b.header.proposer >= 0:
                    return False
            if not self.keyring.verify_qc(qc, self.quorum):
                return False
        return True

    def handle_sync_response(self, src: int, resp: SyncResponse) -> None:
        if self.sync_target is None or not resp.blocks:
            return
        to_seq, target, trusted = self.sync_target
        blocks, qcs = resp.blocks, resp.qcs
        if blocks[-1].hash != target or blocks[-1].seq != to_seq:
            return
        if not trusted and qcs[-1].view < self.nv_view:
            return
        if not self._valid_segment(blocks, qcs):
            return
        for b in blocks:
            self._observe_header(b.header, b.proposer_sig, verified=True)
            self.blocks[b.hash] = b
        first = blocks[0]
        if first.seq > self.cur_seq + 1:
            return
        if self.chain[first.seq - 1][0].hash != first.header.parent:
            # Diverged below the segment; ask for a longer one.
            self.sync_target = None
            self._request_sync(first.seq - SYNC_BACKOFF, to_seq, target, trusted)
            return
        self.sync_target = None
        for i, (b, qc) in enumerate(zip(blocks, qcs)):
            if b.seq <= self.cur_seq:
                if self.chain[b.seq][0].hash == b.hash:
                    continue
                self.revoke_block(b.seq)
            # A certified child means f+1 honest voters already hold b.
            if self.phase == VIEW_CHANGING and not trusted and i + 1 == len(blocks):
                break
            self.commit_block(b, qc, trusted=True)
        self._drain()

    _HANDLERS = {}


def _dispatch(method: str):
    def call(self: Replica, src: int, msg) -> None:
        try:
            getattr(self, method)(src, msg)
        except (CryptoError, EncodingError):
            # Malformed input from the network never crashes the replica.
            pass

    return call


Replica._HANDLERS = {
    ClientRequest: _dispatch("handle_client_request"),
    PrePrepare: _dispatch("handle_proposal"),
    Vote: _dispatch("handle_vote"),
    ViewChangeMsg: _dispatch("handle_view_change_msg"),
    NewViewMsg: _dispatch("handle_new_view"),
    ReadyMsg: _dispatch("handle_ready"),
    ReadyCert: _dispatch("handle_ready_cert"),
    PayloadRequest: _dispatch("handle_payload_request"),
    PayloadResponse: _dispatch("handle_payload_response"),
    NegativeResponse: _dispatch("handle_negative_response"),
    ProofMsg: _dispatch("_on_proof_msg"),
    SyncRequest: _dispatch("handle_sync_request"),
    SyncResponse: _dispatch("handle_sync_response"),
}
