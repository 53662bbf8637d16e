"""Protocol message variants and their canonical wire codec.

Every variant carries the sender and, in Byzantine mode, an authenticator.
View fields are present only in Byzantine mode. COMMIT in crash mode is
the single message signed by the initiator primary; in Byzantine mode a
COMMIT is one node's vote and a certificate is 2f+1 matching votes per
involved cluster.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .core import (
    Authenticator,
    ClientRequest,
    Decoder,
    MultiSeq,
    enc_bytes,
    enc_int,
    enc_seq,
)


@dataclass(frozen=True, slots=True)
class Message:
    sender: int
    auth: Optional[Authenticator] = field(default=None, compare=False)

    @property
    def kind(self) -> str:
        return type(self).__name__


@dataclass(frozen=True, slots=True)
class Request(Message):
    """Client submission; sender is the client id (negative node space)."""

    request: ClientRequest = None  # type: ignore[assignment]


@dataclass(frozen=True, slots=True)
class Propose(Message):
    initiator_cluster: int = 0
    seq: int = 0          # h_i, the initiator cluster's local order
    view: int = -1        # v_i; -1 outside Byzantine mode
    digest: bytes = b""
    request: ClientRequest = None  # type: ignore[assignment]


@dataclass(frozen=True, slots=True)
class Accept(Message):
    initiator_cluster: int = 0
    cluster: int = 0      # the sender's cluster p_j
    seq_initiator: int = 0    # h_i
    seq_local: int = 0        # h_j assigned by the sender's cluster
    view_initiator: int = -1  # v_i
    view_local: int = -1      # v_j
    digest: bytes = b""
    request: ClientRequest | None = None  # attached on recovery resends only


@dataclass(frozen=True, slots=True)
class SuperPropose(Message):
    initiator_cluster: int = 0
    seq: int = 0
    view: int = -1
    digest: bytes = b""
    request: ClientRequest = None  # type: ignore[assignment]


@dataclass(frozen=True, slots=True)
class SuperAccept(Message):
    initiator_cluster: int = 0
    cluster: int = 0
    seq_initiator: int = 0
    seq_local: int = 0
    view_initiator: int = -1
    view_local: int = -1
    digest: bytes = b""
    request: ClientRequest | None = None  # attached on the primary-to-cluster leg


@dataclass(frozen=True, slots=True)
class Commit(Message):
    label: MultiSeq = None  # type: ignore[assignment]
    views: tuple[int, ...] = ()  # aligned with label entries, Byzantine only
    digest: bytes = b""
    request: ClientRequest | None = None  # piggybacked in crash mode


@dataclass(frozen=True, slots=True)
class Reply(Message):
    result: str = ""
    digest: bytes = b""


@dataclass(frozen=True, slots=True)
class AcceptQuery(Message):
    """Two forms: a foreign-cluster probe (seq_initiator, seq_local, digest)
    and a new primary's recovery probe (seq only, digest None)."""

    cluster: int = 0          # the querier's cluster
    seq_initiator: int = 0
    seq_local: int = 0
    digest: bytes | None = None


@dataclass(frozen=True, slots=True)
class Committed(Message):
    seq: int = 0
    digest: bytes = b""
    commit: Commit = None  # type: ignore[assignment]


@dataclass(frozen=True, slots=True)
class Unknown(Message):
    seq: int = 0


@dataclass(frozen=True, slots=True)
class Prepare(Message):
    """Leader election probe; number is the (round, node) proposal pair."""

    number: tuple[int, int] = (0, 0)


@dataclass(frozen=True, slots=True)
class Promise(Message):
    number: tuple[int, int] = (0, 0)
    high_seq: int = 0  # promiser's highest assigned slot, bounds recovery


@dataclass(frozen=True, slots=True)
class ViewChange(Message):
    cluster: int = 0
    new_view: int = 0
    checkpoint_seq: int = 0
    checkpoint_proof: tuple["Checkpoint", ...] = ()
    accepts: tuple[Message, ...] = ()  # logged Accept/SuperAccept above the checkpoint
    commits: tuple[Commit, ...] = ()


@dataclass(frozen=True, slots=True)
class NewView(Message):
    cluster: int = 0
    new_view: int = 0
    proof: tuple[ViewChange, ...] = ()     # Sigma
    proposes: tuple[Message, ...] = ()     # P': Propose/SuperAccept entries
    commit_sets: tuple[tuple[Commit, ...], ...] = ()  # C'


@dataclass(frozen=True, slots=True)
class Checkpoint(Message):
    cluster: int = 0
    seq: int = 0
    state_digest: bytes = b""


_WIRE_ORDER = (
    Request,
    Propose,
    Accept,
    SuperPropose,
    SuperAccept,
    Commit,
    Reply,
    AcceptQuery,
    Committed,
    Unknown,
    Prepare,
    Promise,
    ViewChange,
    NewView,
    Checkpoint,
)
_TAG_OF = {cls: i for i, cls in enumerate(_WIRE_ORDER)}


def _enc_opt_bytes(value: bytes | None) -> bytes:
    if value is None:
        return enc_int(-1)
    return enc_int(0) + enc_bytes(value)


def _dec_opt_bytes(dec: Decoder) -> bytes | None:
    if dec.int_() < 0:
        return None
    return dec.bytes_()


def _enc_request(req: ClientRequest | None) -> bytes:
    if req is None:
        return enc_int(-1)
    return enc_int(0) + req.to_wire()


def _dec_request(dec: Decoder) -> ClientRequest | None:
    if dec.int_() < 0:
        return None
    return ClientRequest.from_wire(dec)


def _enc_auth(auth: Authenticator | None) -> bytes:
    if auth is None:
        return enc_int(-1)
    return enc_int(auth.signer) + enc_bytes(auth.digest) + enc_bytes(auth.tag)


def _dec_auth(dec: Decoder) -> Authenticator | None:
    signer = dec.int_()
    if signer == -1:
        return None
    return Authenticator(signer=signer, digest=dec.bytes_(), tag=dec.bytes_())


def encode_message(msg: Message) -> bytes:
    """Canonical bytes: variant tag, sender, auth, then payload fields."""
    head = enc_int(_TAG_OF[type(msg)]) + enc_int(msg.sender) + _enc_auth(msg.auth)
    return head + _encode_payload(msg)


def _encode_payload(msg: Message) -> bytes:
    out = []
    for f in fields(msg):
        if f.name in ("sender", "auth"):
            continue
        out.append(_encode_value(getattr(msg, f.name)))
    return b"".join(out)


def _encode_value(value) -> bytes:
    if isinstance(value, int):  # bools included
        return enc_int(0) + enc_int(int(value))
    if isinstance(value, bytes):
        return enc_int(1) + enc_bytes(value)
    if value is None:
        return enc_int(-1)
    if isinstance(value, ClientRequest):
        return enc_int(2) + value.to_wire()
    if isinstance(value, MultiSeq):
        return enc_int(3) + value.to_wire()
    if isinstance(value, Message):
        return enc_int(4) + enc_bytes(encode_message(value))
    if isinstance(value, tuple):
        return enc_int(5) + enc_seq(_encode_value(v) for v in value)
    if isinstance(value, str):
        return enc_int(6) + enc_bytes(value.encode("utf-8"))
    raise TypeError(f"cannot encode {type(value)!r}")


def _decode_value(dec: Decoder):
    tag = dec.int_()
    if tag == -1:
        return None
    if tag == 0:
        return dec.int_()
    if tag == 1:
        return dec.bytes_()
    if tag == 2:
        return ClientRequest.from_wire(dec)
    if tag == 3:
        return MultiSeq.from_wire(dec)
    if tag == 4:
        return decode_message(dec.bytes_())
    if tag == 5:
        return tuple(_decode_value(dec) for _ in range(dec.count()))
    if tag == 6:
        return dec.bytes_().decode("utf-8")
    raise ValueError(f"bad value tag {tag}")


def decode_message(data: bytes) -> Message:
    dec = Decoder(data)
    cls = _WIRE_ORDER[dec.int_()]
    sender = dec.int_()
    auth = _dec_auth(dec)
    values = {}
    for f in fields(cls):
        if f.name in ("sender", "auth"):
            continue
        raw = _decode_value(dec)
        if f.name == "number" and isinstance(raw, tuple):
            raw = tuple(raw)
        values[f.name] = raw
    return cls(sender=sender, auth=auth, **values)


def with_auth(msg: Message, auth: Authenticator) -> Message:
    return replace(msg, auth=auth)
