"""Protocol data types, canonical byte encoding and block hashing.

Every message is an immutable dataclass.  Two serializations exist:

* :func:`encode` / :func:`decode` -- the canonical binary form that gets
  signed and hashed.  A one-byte kind tag is followed by every field,
  length-prefixed, in declaration order.
* :func:`to_record` / :func:`from_record` -- JSON-friendly dicts used in
  trace files.  Field names are the dataclass field names; digests and
  signatures are lowercase hex.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass
from typing import Optional, Union

from .errors import EncodingError

Digest = bytes
Signature = bytes
NodeId = int

ZERO_DIGEST: Digest = bytes(32)

QC_BLOCK_VOTE = "BlockVote"
QC_VIEW_CHANGE = "ViewChange"
QC_READY = "Ready"
QC_NEGATIVE = "NegativeResponse"
QC_KINDS = (QC_BLOCK_VOTE, QC_VIEW_CHANGE, QC_READY, QC_NEGATIVE)


def sha256(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True, slots=True)
class Config:
    n: int
    f: int
    gst: int = 0
    timeout_initial: int = 80
    timeout_multiplier: float = 2
    batch_size: int = 16

    def __post_init__(self):
        if self.f < 0 or self.n != 3 * self.f + 1:
            raise ValueError(f"n must equal 3f+1 (got n={self.n}, f={self.f})")
        if self.timeout_multiplier < 1:
            raise ValueError("timeout_multiplier must be >= 1")
        if self.timeout_initial <= 0:
            raise ValueError("timeout_initial must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    @property
    def replicas(self) -> range:
        return range(self.n)


@dataclass(frozen=True, slots=True)
class ClientRequest:
    op: bytes
    timestamp: int
    client_id: int
    signature: Signature = b""

    @property
    def key(self) -> tuple[int, int]:
        return (self.client_id, self.timestamp)


@dataclass(frozen=True, slots=True)
class BlockHeader:
    view: int
    seq: int
    hash: Digest
    parent: Digest
    proposer: int


@dataclass(frozen=True, slots=True)
class QuorumCert:
    kind: str
    view: int
    seq: int
    block_hash: Digest
    parent: Digest
    signers: frozenset[int]
    agg_sig: bytes


@dataclass(frozen=True, slots=True)
class Block:
    header: BlockHeader
    qc_nr: tuple[QuorumCert, ...] = ()
    payload: tuple[ClientRequest, ...] = ()
    proposer_sig: Signature = b""

    @property
    def hash(self) -> Digest:
        return self.header.hash

    @property
    def seq(self) -> int:
        return self.header.seq


@dataclass(frozen=True, slots=True)
class PrePrepare:
    """Proposal envelope; ``view`` is the view it is proposed in.

    For a recovered block ``block.header.view`` is the older view the block
    was first proposed in, while ``view`` is the current one.
    """

    view: int
    block: Block
    sender: int
    signature: Signature = b""


@dataclass(frozen=True, slots=True)
class Vote:
    view: int
    seq: int
    hash: Digest
    parent: Digest
    voter: int
    signature: Signature = b""


@dataclass(frozen=True, slots=True)
class EquivocationProof:
    header_a: BlockHeader
    header_b: BlockHeader
    sig_a: Signature
    sig_b: Signature

    @property
    def culprit(self) -> int:
        return self.header_a.proposer

    def verify(self, keyring) -> bool:
        from .crypto import verify_equivocation_proof

        return verify_equivocation_proof(self, keyring)


@dataclass(frozen=True, slots=True)
class InvalidSeqProof:
    """A signed header whose seq does not follow its (committed) parent."""

    header: BlockHeader
    sig: Signature
    parent_seq: int

    @property
    def culprit(self) -> int:
        return self.header.proposer


@dataclass(frozen=True, slots=True)
class ViewChangeMsg:
    next_view: int
    latest_qc: QuorumCert
    beta: Optional[BlockHeader]
    beta_sig: Signature
    proof: Optional[Union[EquivocationProof, InvalidSeqProof]]
    sender: int
    signature: Signature = b""


@dataclass(frozen=True, slots=True)
class AggregatedQC:
    view_change_msgs: tuple[ViewChangeMsg, ...]
    agg_sig: bytes

    @property
    def senders(self) -> tuple[int, ...]:
        return tuple(vc.sender for vc in self.view_change_msgs)


@dataclass(frozen=True, slots=True)
class NewViewMsg:
    view: int
    agg_qc: AggregatedQC
    sender: int
    signature: Signature = b""
    kind: str = "NEW-VIEW"


@dataclass(frozen=True, slots=True)
class ReadyMsg:
    view: int
    sender: int
    nv_hash: Digest = ZERO_DIGEST  # digest of the NEW-VIEW being answered
    signature: Signature = b""


@dataclass(frozen=True, slots=True)
class ReadyCert:
    qc: QuorumCert


@dataclass(frozen=True, slots=True)
class NegativeResponse:
    beta_hash: Digest
    view: int
    sender: int
    signature: Signature = b""


@dataclass(frozen=True, slots=True)
class PayloadRequest:
    view: int
    beta_hash: Digest


@dataclass(frozen=True, slots=True)
class PayloadResponse:
    view: int
    block: Block


@dataclass(frozen=True, slots=True)
class ReplyMsg:
    request_key: tuple[int, int]
    seq: int
    hash: Digest
    replier: int
    signature: Signature = b""


@dataclass(frozen=True, slots=True)
class ProofMsg:
    proof: Union[EquivocationProof, InvalidSeqProof]


@dataclass(frozen=True, slots=True)
class SyncRequest:
    from_seq: int
    to_seq: int
    target_hash: Digest


@dataclass(frozen=True, slots=True)
class SyncResponse:
    blocks: tuple[Block, ...]
    qcs: tuple[QuorumCert, ...]


MESSAGE_TYPES: tuple[type, ...] = (
    ClientRequest,
    BlockHeader,
    QuorumCert,
    Block,
    PrePrepare,
    Vote,
    EquivocationProof,
    InvalidSeqProof,
    ViewChangeMsg,
    AggregatedQC,
    NewViewMsg,
    ReadyMsg,
    ReadyCert,
    NegativeResponse,
    PayloadRequest,
    PayloadResponse,
    ReplyMsg,
    ProofMsg,
    SyncRequest,
    SyncResponse,
)
KIND_TAG: dict[type, int] = {cls: i + 1 for i, cls in enumerate(MESSAGE_TYPES)}
TAG_KIND: dict[int, type] = {i: cls for cls, i in KIND_TAG.items()}
TYPE_BY_NAME: dict[str, type] = {cls.__name__: cls for cls in MESSAGE_TYPES}

_FIELD_NAMES: dict[type, tuple[str, ...]] = {
    cls: tuple(f.name for f in dataclasses.fields(cls)) for cls in MESSAGE_TYPES
}


# ---------------------------------------------------------------------------
# canonical binary encoding


def _frame(data: bytes) -> bytes:
    return len(data).to_bytes(4, "big") + data


def _enc_value(v) -> bytes:
    if v is None:
        return b"N"
    if isinstance(v, bool):
        return b"?" + (b"\x01" if v else b"\x00")
    if isinstance(v, int):
        return b"I" + v.to_bytes(v.bit_length() // 8 + 1, "big", signed=True)
    if isinstance(v, (bytes, bytearray)):
        return b"B" + bytes(v)
    if isinstance(v, str):
        return b"S" + v.encode("utf-8")
    if isinstance(v, tuple):
        return b"T" + len(v).to_bytes(4, "big") + b"".join(_frame(_enc_value(x)) for x in v)
    if isinstance(v, frozenset):
        items = sorted(v)
        return b"F" + len(items).to_bytes(4, "big") + b"".join(_frame(_enc_value(x)) for x in items)
    if type(v) in KIND_TAG:
        return b"M" + encode(v)
    raise EncodingError(f"cannot encode value of type {type(v).__name__}")


def encode(msg, exclude: tuple[str, ...] = ()) -> bytes:
    """Canonical bytes of ``msg``; fields named in ``exclude`` are skipped."""
    cls = type(msg)
    try:
        tag = KIND_TAG[cls]
    except KeyError:
        raise EncodingError(f"not a protocol message: {cls.__name__}") from None
    parts = [bytes([tag])]
    for name in _FIELD_NAMES[cls]:
        if name in exclude:
            continue
        parts.append(_frame(_enc_value(getattr(msg, name))))
    return b"".join(parts)


def canonical_sign_bytes(msg) -> bytes:
    """Bytes a signer commits to: the canonical encoding minus ``signature``."""
    return encode(msg, exclude=("signature",))


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.data):
            raise EncodingError("truncated input")
        out = self.data[self.pos : self.pos + k]
        self.pos += k
        return out

    def frame(self) -> bytes:
        return self.take(int.from_bytes(self.take(4), "big"))


def _dec_value(raw: bytes):
    if not raw:
        raise EncodingError("empty value")
    marker, body = raw[:1], raw[1:]
    if marker == b"N":
        return None
    if marker == b"?":
        return body == b"\x01"
    if marker == b"I":
        return int.from_bytes(body, "big", signed=True)
    if marker == b"B":
        return bytes(body)
    if marker == b"S":
        return body.decode("utf-8")
    if marker in (b"T", b"F"):
        r = _Reader(body)
        count = int.from_bytes(r.take(4), "big")
        items = [_dec_value(r.frame()) for _ in range(count)]
        if r.pos != len(body):
            raise EncodingError("trailing bytes in sequence")
        return tuple(items) if marker == b"T" else frozenset(items)
    if marker == b"M":
        return decode(body)
    raise EncodingError(f"unknown value marker {marker!r}")


def decode(data: bytes):
    """Inverse of :func:`encode` for full (non-excluding) encodings."""
    if not data:
        raise EncodingError("empty input")
    cls = TAG_KIND.get(data[0])
    if cls is None:
        raise EncodingError(f"unknown kind tag {data[0]}")
    r = _Reader(data[1:])
    values = [_dec_value(r.frame()) for _ in _FIELD_NAMES[cls]]
    if r.pos != len(data) - 1:
        raise EncodingError("trailing bytes")
    return cls(*values)


# ---------------------------------------------------------------------------
# hashing and chain predicates


def payload_digest(payload: tuple[ClientRequest, ...]) -> Digest:
    return sha256(_enc_value(tuple(payload)))


def qc_nr_digest(qc_nr: tuple[QuorumCert, ...]) -> Digest:
    if not qc_nr:
        return ZERO_DIGEST
    return sha256(_enc_value(tuple(qc_nr)))


def _header_digest(view: int, seq: int, parent: Digest, payload, qc_nr) -> Digest:
    body = _enc_value((view, seq, parent, payload_digest(payload), qc_nr_digest(qc_nr)))
    return sha256(b"vbft-block" + body)


def block_digest(block: Block) -> Digest:
    h = block.header
    return _header_digest(h.view, h.seq, h.parent, block.payload, block.qc_nr)


def new_view_digest(nv: NewViewMsg) -> Digest:
    return sha256(canonical_sign_bytes(nv))


def extends(child: BlockHeader, ancestor_hash: Digest) -> bool:
    return child.parent == ancestor_hash


def create_prepare_msg(
    view: int,
    seq: int,
    parent: Digest,
    qc_nr: tuple[QuorumCert, ...] | QuorumCert | None,
    cmds,
    signer,
) -> Block:
    """Build and sign a block.  ``signer`` needs ``node_id`` and ``sign()``."""
    if qc_nr is None:
        qc_nr = ()
    elif isinstance(qc_nr, QuorumCert):
        qc_nr = (qc_nr,)
    payload = tuple(cmds)
    digest = _header_digest(view, seq, parent, payload, tuple(qc_nr))
    header = BlockHeader(view, seq, digest, parent, signer.node_id)
    return Block(header, tuple(qc_nr), payload, signer.sign(canonical_sign_bytes(header)))


def high_qc_index(vcs: tuple[ViewChangeMsg, ...]) -> int:
    """Index of the view-change message carrying the highest QC.

    Ties on seq break toward the higher QC view, then the lower sender id,
    so every replica and verifier settles on the same entry.
    """
    best = 0
    for i in range(1, len(vcs)):
        a, b = vcs[i].latest_qc, vcs[best].latest_qc
        if (a.seq, a.view, -vcs[i].sender) > (b.seq, b.view, -vcs[best].sender):
            best = i
    return best


def qc_component_message(qc: QuorumCert, signer: int) -> bytes:
    """The exact bytes ``signer`` signed for this certificate's kind."""
    if qc.kind == QC_BLOCK_VOTE:
        return canonical_sign_bytes(Vote(qc.view, qc.seq, qc.block_hash, qc.parent, signer))
    if qc.kind == QC_NEGATIVE:
        return canonical_sign_bytes(NegativeResponse(qc.block_hash, qc.view, signer))
    if qc.kind == QC_READY:
        return canonical_sign_bytes(ReadyMsg(qc.view, signer, qc.block_hash))
    raise EncodingError(f"no per-signer message for QC kind {qc.kind!r}")


# ---------------------------------------------------------------------------
# blacklist transactions

BLACKLIST_MAGIC = b"\x00BLACKLIST\x00"
BLACKLIST_TS_BASE = 1 << 40


def make_blacklist_tx(proof: EquivocationProof, signer) -> ClientRequest:
    op = BLACKLIST_MAGIC + encode(proof)
    req = ClientRequest(op, BLACKLIST_TS_BASE + proof.culprit, signer.node_id)
    return dataclasses.replace(req, signature=signer.sign(canonical_sign_bytes(req)))


def parse_blacklist_tx(req: ClientRequest) -> EquivocationProof | None:
    if not req.op.startswith(BLACKLIST_MAGIC):
        return None
    try:
        proof = decode(req.op[len(BLACKLIST_MAGIC) :])
    except EncodingError:
        return None
    return proof if isinstance(proof, EquivocationProof) else None


def is_blacklist_tx(req: ClientRequest) -> bool:
    return req.op.startswith(BLACKLIST_MAGIC)


# ---------------------------------------------------------------------------
# trace records

_HINTS: dict[type, dict[str, object]] = {}


def _hints(cls: type) -> dict[str, object]:
    h = _HINTS.get(cls)
    if h is None:
        h = typing.get_type_hints(cls)
        _HINTS[cls] = h
    return h


def _to_json(v):
    if v is None or isinstance(v, (bool, int, str)):
        return v
    if isinstance(v, (bytes, bytearray)):
        return bytes(v).hex()
    if isinstance(v, tuple):
        return [_to_json(x) for x in v]
    if isinstance(v, frozenset):
        return [_to_json(x) for x in sorted(v)]
    if type(v) in KIND_TAG:
        return to_record(v)
    raise EncodingError(f"cannot serialize {type(v).__name__}")


def to_record(msg) -> dict:
    rec = {"type": type(msg).__name__}
    for name in _FIELD_NAMES[type(msg)]:
        rec[name] = _to_json(getattr(msg, name))
    return rec


def _from_json(v, hint):
    if v is None:
        return None
    origin = typing.get_origin(hint)
    if origin is Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if len(args) == 1:
            return _from_json(v, args[0])
        return from_record(v)
    if hint is bytes:
        return bytes.fromhex(v)
    if hint in (int, str, bool, float):
        return hint(v)
    if origin is tuple:
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_from_json(x, args[0]) for x in v)
        return tuple(_from_json(x, a) for x, a in zip(v, args))
    if origin is frozenset:
        (arg,) = typing.get_args(hint)
        return frozenset(_from_json(x, arg) for x in v)
    if isinstance(hint, type) and hint in KIND_TAG:
        return from_record(v)
    raise EncodingError(f"unsupported field type {hint!r}")


def from_record(rec: dict):
    try:
        cls = TYPE_BY_NAME[rec["type"]]
    except (KeyError, TypeError):
        raise EncodingError(f"record without a known type: {rec!r}") from None
    hints = _hints(cls)
    kwargs = {}
    for name in _FIELD_NAMES[cls]:
        if name not in rec:
            raise EncodingError(f"{cls.__name__} record missing field {name!r}")
        kwargs[name] = _from_json(rec[name], hints[name])
    return cls(**kwargs)
