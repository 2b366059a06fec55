"""Outputs of replica and client handlers, interpreted by the simulator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Union


@dataclass(frozen=True, slots=True)
class Send:
    dest: int
    msg: Any


@dataclass(frozen=True, slots=True)
class Broadcast:
    """Send ``msg`` to every replica, the sender included."""

    msg: Any


@dataclass(frozen=True, slots=True)
class SetTimer:
    name: str
    delay: int
    token: int


@dataclass(frozen=True, slots=True)
class Note:
    """A trace event the node wants recorded (Commit, Revoke, ...)."""

    kind: str
    data: dict = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class Delay:
    """Adversary wrapper: deliver ``inner`` ``extra`` ticks late."""

    inner: Union[Send, Broadcast]
    extra: int


Effect = Union[Send, Broadcast, SetTimer, Note, Delay]
