"""Builders for quorum certificates, AggQCs and NEW-VIEW messages."""

from __future__ import annotations

import dataclasses
from typing import Sequence

from .core import (
    QC_BLOCK_VOTE,
    QC_NEGATIVE,
    QC_READY,
    ZERO_DIGEST,
    AggregatedQC,
    Block,
    BlockHeader,
    Config,
    NegativeResponse,
    NewViewMsg,
    QuorumCert,
    ReadyMsg,
    ViewChangeMsg,
    Vote,
    canonical_sign_bytes,
    create_prepare_msg,
    high_qc_index,
    qc_component_message,
)
from .crypto import Keyring, aggregate
from .errors import DuplicateSender, DuplicateVoter, Mixed, MixedView, MixedVotes, TooFew


def generate_qc(votes: Sequence[Vote], keyring: Keyring, config: Config) -> QuorumCert:
    if len(votes) < config.quorum:
        raise TooFew(f"{len(votes)} votes, need {config.quorum}")
    voters = [v.voter for v in votes]
    if len(set(voters)) != len(voters):
        raise DuplicateVoter(f"duplicate voter in {sorted(voters)}")
    first = votes[0]
    tup = (first.view, first.seq, first.hash, first.parent)
    if any((v.view, v.seq, v.hash, v.parent) != tup for v in votes):
        raise MixedVotes("votes do not share (view, seq, hash, parent)")
    sig = aggregate(
        [(canonical_sign_bytes(v), v.signature, v.voter) for v in votes], keyring, config.quorum, config.n
    )
    return QuorumCert(QC_BLOCK_VOTE, first.view, first.seq, first.hash, first.parent, frozenset(voters), sig)


def _simple_qc(kind, msgs, sender_of, key_of, view, block_hash, keyring, config) -> QuorumCert:
    if len(msgs) < config.quorum:
        raise TooFew(f"{len(msgs)} messages, need {config.quorum}")
    senders = [sender_of(m) for m in msgs]
    if len(set(senders)) != len(senders):
        raise DuplicateSender(f"duplicate sender in {sorted(senders)}")
    if len({key_of(m) for m in msgs}) != 1:
        raise Mixed(f"{kind} messages disagree")
    qc = QuorumCert(kind, view, 0, block_hash, ZERO_DIGEST, frozenset(senders), b"")
    sig = aggregate(
        [(qc_component_message(qc, sender_of(m)), m.signature, sender_of(m)) for m in msgs],
        keyring,
        config.quorum,
        config.n,
    )
    return dataclasses.replace(qc, agg_sig=sig)


def generate_qc_nr(nrs: Sequence[NegativeResponse], keyring: Keyring, config: Config) -> QuorumCert:
    if not nrs:
        raise TooFew("no negative responses")
    return _simple_qc(
        QC_NEGATIVE,
        nrs,
        lambda m: m.sender,
        lambda m: (m.beta_hash, m.view),
        nrs[0].view,
        nrs[0].beta_hash,
        keyring,
        config,
    )


def generate_qc_ready(readies: Sequence[ReadyMsg], keyring: Keyring, config: Config) -> QuorumCert:
    if not readies:
        raise TooFew("no ready messages")
    return _simple_qc(
        QC_READY,
        readies,
        lambda m: m.sender,
        lambda m: (m.view, m.nv_hash),
        readies[0].view,
        readies[0].nv_hash,
        keyring,
        config,
    )


def create_agg_qc(vcs: Sequence[ViewChangeMsg], keyring: Keyring, config: Config) -> AggregatedQC:
    if len(vcs) < config.quorum:
        raise TooFew(f"{len(vcs)} view-change messages, need {config.quorum}")
    senders = [vc.sender for vc in vcs]
    if len(set(senders)) != len(senders):
        raise DuplicateSender(f"duplicate sender in {sorted(senders)}")
    if len({vc.next_view for vc in vcs}) != 1:
        raise MixedView("view-change messages target different views")
    chosen = tuple(vcs[: config.quorum])
    sig = aggregate([(canonical_sign_bytes(vc), vc.signature, vc.sender) for vc in chosen], keyring, config.quorum)
    return AggregatedQC(chosen, sig)


def create_new_view(agg: AggregatedQC, next_view: int, signer) -> NewViewMsg:
    if any(vc.next_view != next_view for vc in agg.view_change_msgs):
        raise MixedView(f"AggQC does not target view {next_view}")
    msg = NewViewMsg(next_view, agg, signer.node_id)
    return dataclasses.replace(msg, signature=signer.sign(canonical_sign_bytes(msg)))


def beta_entries(agg: AggregatedQC) -> tuple[QuorumCert, list[tuple[BlockHeader, bytes]]]:
    """Like :func:`high_qc_and_betas` but keeps each beta's proposer signature."""
    vcs = agg.view_change_msgs
    high = vcs[high_qc_index(vcs)].latest_qc
    seen: dict[bytes, tuple[BlockHeader, bytes]] = {}
    for vc in vcs:
        b = vc.beta
        if b is not None and b.seq == high.seq + 1 and b.hash not in seen:
            seen[b.hash] = (b, vc.beta_sig)
    return high, [seen[h] for h in sorted(seen)]


def high_qc_and_betas(agg: AggregatedQC) -> tuple[QuorumCert, list[BlockHeader]]:
    high, entries = beta_entries(agg)
    return high, [h for h, _ in entries]


class _Nobody:
    node_id = -1

    @staticmethod
    def sign(_msg):
        return b""


def genesis_block() -> Block:
    """The fixed seq-0 block: view 0, zero parent, empty payload, unsigned."""
    return create_prepare_msg(0, 0, ZERO_DIGEST, None, (), _Nobody)


def genesis(config: Config, keyring: Keyring, keys: dict) -> tuple[Block, QuorumCert]:
    """Genesis block plus a QC for it signed by every replica."""
    block = genesis_block()
    votes = []
    for i in config.replicas:
        v = Vote(0, 0, block.hash, ZERO_DIGEST, i)
        votes.append(dataclasses.replace(v, signature=keys[i].sign(canonical_sign_bytes(v))))
    sig = aggregate([(canonical_sign_bytes(v), v.signature, v.voter) for v in votes], keyring, config.n)
    qc = QuorumCert(QC_BLOCK_VOTE, 0, 0, block.hash, ZERO_DIGEST, frozenset(config.replicas), sig)
    return block, qc
