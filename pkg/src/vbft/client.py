"""Closed-loop clients that wait for 2f+1 matching replies."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .core import ClientRequest, Config, ReplyMsg, canonical_sign_bytes
from .crypto import KeyPair, Keyring
from .effects import Note, Send, SetTimer


@dataclass(slots=True)
class Inflight:
    request: ClientRequest
    # (seq, block hash) -> distinct repliers
    replies: dict = field(default_factory=dict)


class Client:
    """Submits ``n_requests`` writes one at a time.

    A request is confirmed once 2f+1 distinct replicas report the same
    (seq, block hash).  An unanswered request is rebroadcast to every
    replica each time its timer expires.
    """

    def __init__(
        self,
        client_id: int,
        config: Config,
        keys: KeyPair,
        keyring: Keyring,
        n_requests: int,
        timeout: int,
        believed_primary: int = 0,
    ):
        self.id = client_id
        self.config = config
        self.keys = keys
        self.keyring = keyring
        self.n_requests = n_requests
        self.timeout = timeout
        self.believed_primary = believed_primary
        self.next_t = 1
        self.inflight: dict[int, Inflight] = {}
        self.confirmed: dict[int, int] = {}
        self._fx: list = []

    @property
    def done(self) -> bool:
        return len(self.confirmed) >= self.n_requests

    def _op(self, t: int) -> bytes:
        return f"c{self.id}.k{t % 3}={t}".encode()

    def start(self) -> list:
        self._fx = []
        if self.n_requests > 0:
            self.submit(self._op(self.next_t), self.believed_primary)
        return self._flush()

    def _flush(self) -> list:
        out, self._fx = self._fx, []
        return out

    def submit(self, op: bytes, believed_primary: int) -> int:
        t = self.next_t
        self.next_t += 1
        req = ClientRequest(op, t, self.id)
        req = dataclasses.replace(req, signature=self.keys.sign(canonical_sign_bytes(req)))
        self.inflight[t] = Inflight(req)
        self._fx.append(Note("Submit", {"client": self.id, "ct": t}))
        self._fx.append(Send(believed_primary, req))
        self._fx.append(SetTimer("request", self.timeout, t))
        return t

    def on_message(self, src: int, msg) -> list:
        self._fx = []
        if isinstance(msg, ReplyMsg):
            self.on_reply(msg)
        return self._flush()

    def on_reply(self, reply: ReplyMsg) -> None:
        client_id, t = reply.request_key
        entry = self.inflight.get(t)
        if client_id != self.id or entry is None or not 0 <= reply.replier < self.config.n:
            return
        if not self.keyring.verify_msg(reply, reply.replier):
            return
        group = entry.replies.setdefault((reply.seq, reply.hash), set())
        group.add(reply.replier)
        if len(group) >= self.config.quorum:
            del self.inflight[t]
            self.confirmed[t] = reply.seq
            self._fx.append(
                Note("Confirm", {"client": self.id, "ct": t, "seq": reply.seq, "hash": reply.hash.hex()})
            )
            if self.next_t <= self.n_requests:
                self.submit(self._op(self.next_t), self.believed_primary)

    def on_timer(self, name: str, token: int) -> list:
        self._fx = []
        if name == "request":
            self.on_client_timeout(token)
        return self._flush()

    def on_client_timeout(self, t: int) -> None:
        entry = self.inflight.get(t)
        if entry is None:
            return
        for j in self.config.replicas:
            self._fx.append(Send(j, entry.request))
        self._fx.append(SetTimer("request", self.timeout, t))
