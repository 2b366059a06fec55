"""Simulated signature backend.

Each node holds a per-node MAC key.  A signature is an HMAC-SHA256 tag and
an aggregate is a hash over the signer-sorted component tags, so it only
verifies against the exact (message, signer) set it was built from.  Inside
the simulation only the owning node ever signs with its key, which gives
model-level unforgeability.  The public surface (``sign``, ``verify``,
``aggregate``, ``verify_aggregate``) is what a pairing-based backend would
replace.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import (
    QC_BLOCK_VOTE,
    AggregatedQC,
    Config,
    EquivocationProof,
    NewViewMsg,
    QuorumCert,
    canonical_sign_bytes,
    high_qc_index,
    qc_component_message,
)
from .errors import BadComponentSignature, DuplicateSigner, MalformedAggQC, TooFew

AggregateSignature = bytes


@dataclass(frozen=True, slots=True)
class PublicKey:
    node_id: int
    # Symmetric in this backend; never used for signing by anyone but the owner.
    mac_key: bytes = field(repr=False)


@dataclass(frozen=True, slots=True)
class KeyPair:
    node_id: int
    secret: bytes = field(repr=False)

    @property
    def public(self) -> PublicKey:
        return PublicKey(self.node_id, self.secret)

    def sign(self, msg: bytes) -> bytes:
        return sign(self.secret, msg)


def derive_keypair(node_id: int, seed: int | str) -> KeyPair:
    secret = hashlib.sha256(f"vbft-key|{seed}|{node_id}".encode()).digest()
    return KeyPair(node_id, secret)


def sign(secret: bytes, msg: bytes) -> bytes:
    return hmac.new(secret, msg, hashlib.sha256).digest()


def verify(public: PublicKey, msg: bytes, sig: bytes) -> bool:
    if len(sig) != 32:
        return False
    return hmac.compare_digest(sign(public.mac_key, msg), sig)


def _combine(pairs: Iterable[tuple[int, bytes]]) -> AggregateSignature:
    h = hashlib.sha256(b"vbft-agg")
    for node_id, tag in sorted(pairs):
        h.update(node_id.to_bytes(8, "big", signed=True))
        h.update(tag)
    return h.digest()


class Keyring:
    """Public keys of every participant (replicas and clients)."""

    def __init__(self, publics: Iterable[PublicKey]):
        self._pub = {p.node_id: p for p in publics}

    @classmethod
    def derive(cls, ids: Iterable[int], seed: int | str) -> tuple["Keyring", dict[int, KeyPair]]:
        pairs = {i: derive_keypair(i, seed) for i in ids}
        return cls(kp.public for kp in pairs.values()), pairs

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._pub

    def public(self, node_id: int) -> PublicKey:
        return self._pub[node_id]

    def verify(self, node_id: int, msg: bytes, sig: bytes) -> bool:
        pub = self._pub.get(node_id)
        return pub is not None and verify(pub, msg, sig)

    def verify_msg(self, msg, signer: int) -> bool:
        """Check ``msg.signature`` over its canonical bytes."""
        return self.verify(signer, canonical_sign_bytes(msg), msg.signature)

    def verify_qc(self, qc: QuorumCert, quorum: int) -> bool:
        if len(qc.signers) < quorum:
            return False
        try:
            msgs = [qc_component_message(qc, s) for s in sorted(qc.signers)]
            publics = [self._pub[s] for s in sorted(qc.signers)]
        except Exception:
            return False
        return verify_aggregate(qc.agg_sig, msgs, publics)


def aggregate(
    msgs_and_sigs: Sequence[tuple[bytes, bytes, int]],
    keyring: Keyring,
    quorum: int,
    n: int | None = None,
) -> AggregateSignature:
    """Aggregate ``(message, signature, signer)`` triples."""
    ids = [node for _, _, node in msgs_and_sigs]
    if len(set(ids)) != len(ids):
        raise DuplicateSigner(f"duplicate signer in {sorted(ids)}")
    if len(ids) < quorum:
        raise TooFew(f"{len(ids)} signatures, need {quorum}")
    if n is not None and len(ids) > n:
        raise TooFew(f"{len(ids)} signatures exceeds n={n}")
    for msg, sig, node in msgs_and_sigs:
        if not keyring.verify(node, msg, sig):
            raise BadComponentSignature(f"component signature of node {node} is invalid")
    return _combine((node, sig) for _, sig, node in msgs_and_sigs)


def verify_aggregate(
    agg: AggregateSignature, msgs: Sequence[bytes], publics: Sequence[PublicKey]
) -> bool:
    if len(msgs) != len(publics) or not msgs:
        return False
    ids = [p.node_id for p in publics]
    if len(set(ids)) != len(ids):
        return False
    expected = _combine((p.node_id, sign(p.mac_key, m)) for m, p in zip(msgs, publics))
    return hmac.compare_digest(expected, agg)


def verify_equivocation_proof(proof: EquivocationProof, keyring: Keyring) -> bool:
    a, b = proof.header_a, proof.header_b
    if (a.view, a.seq, a.proposer) != (b.view, b.seq, b.proposer) or a.hash == b.hash:
        return False
    return keyring.verify(a.proposer, canonical_sign_bytes(a), proof.sig_a) and keyring.verify(
        b.proposer, canonical_sign_bytes(b), proof.sig_b
    )


def _check_agg_shape(agg: AggregatedQC, view: int, config: Config) -> None:
    vcs = agg.view_change_msgs
    if len(vcs) != config.quorum:
        raise MalformedAggQC(f"AggQC holds {len(vcs)} messages, expected {config.quorum}")
    senders = [vc.sender for vc in vcs]
    if len(set(senders)) != len(senders):
        raise MalformedAggQC("AggQC senders are not distinct")
    if any(vc.next_view != view for vc in vcs):
        raise MalformedAggQC("AggQC mixes view-change targets")
    for vc in vcs:
        qc = vc.latest_qc
        if qc.kind != QC_BLOCK_VOTE:
            raise MalformedAggQC("embedded QC is not a block-vote QC")
        if vc.beta is not None and vc.beta.seq <= qc.seq:
            raise MalformedAggQC("beta does not exceed its sender's latest QC")


def _outer_ok(agg: AggregatedQC, keyring: Keyring) -> bool:
    vcs = agg.view_change_msgs
    try:
        publics = [keyring.public(vc.sender) for vc in vcs]
    except KeyError:
        return False
    return verify_aggregate(agg.agg_sig, [canonical_sign_bytes(vc) for vc in vcs], publics)


def verify_new_view_fast(nv: NewViewMsg, keyring: Keyring, config: Config) -> bool:
    """Linear-cost check: outer aggregate plus the single highest QC only."""
    _check_agg_shape(nv.agg_qc, nv.view, config)
    if not _outer_ok(nv.agg_qc, keyring):
        return False
    vcs = nv.agg_qc.view_change_msgs
    if any(vc.latest_qc.view >= nv.view for vc in vcs):
        return False
    return keyring.verify_qc(vcs[high_qc_index(vcs)].latest_qc, config.quorum)


def verify_new_view_full(nv: NewViewMsg, keyring: Keyring, config: Config) -> bool:
    """Reference check that verifies every embedded QC."""
    _check_agg_shape(nv.agg_qc, nv.view, config)
    if not _outer_ok(nv.agg_qc, keyring):
        return False
    vcs = nv.agg_qc.view_change_msgs
    if any(vc.latest_qc.view >= nv.view for vc in vcs):
        return False
    return all(keyring.verify_qc(vc.latest_qc, config.quorum) for vc in vcs)
