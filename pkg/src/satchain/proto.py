"""Wire messages, codec, blocks and the hash-chained ledger.

Every envelope encodes as a one-byte type tag followed by its fields in
declared order. Fixed-width integers are little-endian; variable-length byte
strings carry a u32 little-endian length prefix. The wire encoding doubles as
the canonical encoding used for checksums, signatures and block hashes.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

TAG_CLIENT = 1
TAG_DATA = 2
TAG_SYNC = 3
TAG_ASK = 4
TAG_BLOCK_REQUEST = 5
TAG_BLOCK_REPLY = 6
TAG_RESTART = 7

HASH_SIZE = 32
SIGNATURE_SIZE = 64
ZERO_HASH = bytes(HASH_SIZE)

_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF

_CLIENT_HEAD = struct.Struct("<BIQ")  # tag, client_id, client_seq
_DATA_HEAD = struct.Struct("<BHIQ")  # tag, origin, client_id, client_seq
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_SYNC_HEAD = struct.Struct("<BQI32sH")  # tag, round, epoch, hash, node
_INDEX_NODE = struct.Struct("<BQH")  # ask / block-request
_RESTART_HEAD = struct.Struct("<BQIH")  # tag, last_committed, epoch, node
_BLOCK_HEAD = struct.Struct("<BQ32s")  # tag, index, prev_hash


class CodecError(ValueError):
    pass


class EncodeError(CodecError):
    pass


class DecodeError(CodecError):
    """Malformed bytes. Callers treat it as a lost packet."""


class UnknownSigner(KeyError):
    """Verification was requested for a node id with no registered key."""


def checksum(data: bytes) -> int:
    return zlib.crc32(data) & _U32_MAX


def _check_range(name: str, value: int, hi: int) -> None:
    if not 0 <= value <= hi:
        raise EncodeError(f"{name}={value} out of range [0, {hi}]")


def _lp(data: bytes) -> bytes:
    if len(data) > _U32_MAX:
        raise EncodeError("byte string too long for u32 length prefix")
    return _U32.pack(len(data)) + data


# ---------------------------------------------------------------------------
# Envelopes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ClientMessage:
    client_id: int
    client_seq: int
    payload: bytes

    @property
    def msg_id(self) -> tuple[int, int]:
        return (self.client_id, self.client_seq)


@dataclass(frozen=True, slots=True)
class DataMessage:
    origin_node: int
    client_id: int
    client_seq: int
    payload: bytes
    checksum: int
    # cached wire bytes; excluded from equality so decoded copies compare equal
    wire: bytes = field(default=b"", compare=False, repr=False)
    msg_id: tuple = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "msg_id", (self.client_id, self.client_seq))

    @classmethod
    def create(cls, origin_node: int, client_id: int, client_seq: int,
               payload: bytes) -> "DataMessage":
        _check_range("origin_node", origin_node, _U16_MAX)
        _check_range("client_id", client_id, _U32_MAX)
        _check_range("client_seq", client_seq, _U64_MAX)
        body = _DATA_HEAD.pack(TAG_DATA, origin_node, client_id, client_seq) + _lp(payload)
        crc = checksum(body)
        return cls(origin_node, client_id, client_seq, payload, crc, body + _U32.pack(crc))

    def checksum_ok(self) -> bool:
        body = _DATA_HEAD.pack(TAG_DATA, self.origin_node, self.client_id,
                               self.client_seq) + _lp(self.payload)
        return checksum(body) == self.checksum


@dataclass(frozen=True, slots=True)
class SyncMessage:
    """A vote for one consensus attempt.

    ``epoch`` counts restarts at this height; votes from a failed attempt of
    the same index carry a lower epoch and are filtered out.
    ``block_hash == ZERO_HASH`` is an abstention (the voter knows its batch
    has a hole and will not vouch for any block).
    """

    round_index: int
    epoch: int
    block_hash: bytes
    node_id: int
    signature: bytes = ZERO_HASH * 2

    def signed_bytes(self) -> bytes:
        return _SYNC_HEAD.pack(TAG_SYNC, self.round_index, self.epoch,
                               self.block_hash, self.node_id)

    @property
    def abstains(self) -> bool:
        return self.block_hash == ZERO_HASH


@dataclass(frozen=True, slots=True)
class AskMessage:
    round_index: int
    requester: int


@dataclass(frozen=True, slots=True)
class BlockRequest:
    round_index: int
    requester: int


@dataclass(frozen=True, slots=True)
class RestartMessage:
    last_committed_index: int
    epoch: int
    node_id: int
    signature: bytes = ZERO_HASH * 2

    def signed_bytes(self) -> bytes:
        return _RESTART_HEAD.pack(TAG_RESTART, self.last_committed_index,
                                  self.epoch, self.node_id)


@dataclass(frozen=True, slots=True)
class Block:
    index: int
    prev_hash: bytes
    messages: tuple[DataMessage, ...]
    hash: bytes

    @classmethod
    def build(cls, index: int, prev_hash: bytes,
              messages: Iterable[DataMessage]) -> "Block":
        msgs = tuple(messages)
        return cls(index, prev_hash, msgs, block_hash(index, prev_hash, msgs))

    def hash_ok(self) -> bool:
        return block_hash(self.index, self.prev_hash, self.messages) == self.hash

    def msg_ids(self) -> list[tuple[int, int]]:
        return [m.msg_id for m in self.messages]


@dataclass(frozen=True, slots=True)
class BlockReply:
    block: Block


Envelope = Union[ClientMessage, DataMessage, SyncMessage, AskMessage,
                 BlockRequest, BlockReply, RestartMessage]


def genesis_block() -> Block:
    return Block.build(0, ZERO_HASH, ())


def _encode_messages(messages: Sequence[DataMessage]) -> bytes:
    parts = [_U32.pack(len(messages))]
    for m in messages:
        parts.append(m.wire or encode(m))
    return b"".join(parts)


def block_hash(index: int, prev_hash: bytes, messages: Sequence[DataMessage]) -> bytes:
    """SHA-256 over index, previous hash and the messages in broadcast order."""
    return hashlib.sha256(_U64.pack(index) + prev_hash + _encode_messages(messages)).digest()


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------


def encode(msg: Envelope, payload_budget: int | None = None) -> bytes:
    if isinstance(msg, DataMessage):
        if payload_budget is not None and len(msg.payload) > payload_budget:
            raise EncodeError(f"payload of {len(msg.payload)} bytes exceeds budget {payload_budget}")
        if msg.wire:
            return msg.wire
        _check_range("origin_node", msg.origin_node, _U16_MAX)
        _check_range("client_id", msg.client_id, _U32_MAX)
        _check_range("client_seq", msg.client_seq, _U64_MAX)
        _check_range("checksum", msg.checksum, _U32_MAX)
        return (_DATA_HEAD.pack(TAG_DATA, msg.origin_node, msg.client_id, msg.client_seq)
                + _lp(msg.payload) + _U32.pack(msg.checksum))
    if isinstance(msg, ClientMessage):
        if payload_budget is not None and len(msg.payload) > payload_budget:
            raise EncodeError(f"payload of {len(msg.payload)} bytes exceeds budget {payload_budget}")
        _check_range("client_id", msg.client_id, _U32_MAX)
        _check_range("client_seq", msg.client_seq, _U64_MAX)
        return _CLIENT_HEAD.pack(TAG_CLIENT, msg.client_id, msg.client_seq) + _lp(msg.payload)
    if isinstance(msg, SyncMessage):
        _check_range("round_index", msg.round_index, _U64_MAX)
        _check_range("epoch", msg.epoch, _U32_MAX)
        _check_range("node_id", msg.node_id, _U16_MAX)
        if len(msg.block_hash) != HASH_SIZE or len(msg.signature) != SIGNATURE_SIZE:
            raise EncodeError("sync message hash/signature has wrong width")
        return msg.signed_bytes() + msg.signature
    if isinstance(msg, (AskMessage, BlockRequest)):
        _check_range("round_index", msg.round_index, _U64_MAX)
        _check_range("requester", msg.requester, _U16_MAX)
        tag = TAG_ASK if isinstance(msg, AskMessage) else TAG_BLOCK_REQUEST
        return _INDEX_NODE.pack(tag, msg.round_index, msg.requester)
    if isinstance(msg, BlockReply):
        b = msg.block
        _check_range("index", b.index, _U64_MAX)
        if len(b.prev_hash) != HASH_SIZE or len(b.hash) != HASH_SIZE:
            raise EncodeError("block hash has wrong width")
        return _BLOCK_HEAD.pack(TAG_BLOCK_REPLY, b.index, b.prev_hash) + _encode_messages(b.messages) + b.hash
    if isinstance(msg, RestartMessage):
        _check_range("last_committed_index", msg.last_committed_index, _U64_MAX)
        _check_range("epoch", msg.epoch, _U32_MAX)
        _check_range("node_id", msg.node_id, _U16_MAX)
        if len(msg.signature) != SIGNATURE_SIZE:
            raise EncodeError("restart signature has wrong width")
        return msg.signed_bytes() + msg.signature
    raise EncodeError(f"not an envelope: {type(msg).__name__}")


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise DecodeError(f"truncated: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, st: struct.Struct) -> tuple:
        return st.unpack(self.take(st.size))

    def lp(self) -> bytes:
        (length,) = self.unpack(_U32)
        if length > len(self.buf) - self.pos:
            raise DecodeError(f"length prefix {length} overruns buffer")
        return self.take(length)


def _read_data(r: _Reader) -> DataMessage:
    start = r.pos
    _, origin, cid, seq = r.unpack(_DATA_HEAD)
    payload = r.lp()
    (crc,) = r.unpack(_U32)
    return DataMessage(origin, cid, seq, payload, crc, r.buf[start:r.pos])


def decode(data: bytes) -> Envelope:
    """Inverse of :func:`encode`; raises :class:`DecodeError` on anything malformed."""
    data = bytes(data)
    if not data:
        raise DecodeError("empty buffer")
    r = _Reader(data)
    tag = data[0]
    if tag == TAG_CLIENT:
        _, cid, seq = r.unpack(_CLIENT_HEAD)
        msg: Envelope = ClientMessage(cid, seq, r.lp())
    elif tag == TAG_DATA:
        msg = _read_data(r)
    elif tag == TAG_SYNC:
        _, idx, epoch, h, node = r.unpack(_SYNC_HEAD)
        msg = SyncMessage(idx, epoch, h, node, r.take(SIGNATURE_SIZE))
    elif tag in (TAG_ASK, TAG_BLOCK_REQUEST):
        _, idx, node = r.unpack(_INDEX_NODE)
        msg = AskMessage(idx, node) if tag == TAG_ASK else BlockRequest(idx, node)
    elif tag == TAG_BLOCK_REPLY:
        _, idx, prev = r.unpack(_BLOCK_HEAD)
        (count,) = r.unpack(_U32)
        msgs = []
        for _ in range(count):
            if r.pos >= len(data) or data[r.pos] != TAG_DATA:
                raise DecodeError("block body holds a non-data envelope")
            msgs.append(_read_data(r))
        msg = BlockReply(Block(idx, prev, tuple(msgs), r.take(HASH_SIZE)))
    elif tag == TAG_RESTART:
        _, idx, epoch, node = r.unpack(_RESTART_HEAD)
        msg = RestartMessage(idx, epoch, node, r.take(SIGNATURE_SIZE))
    else:
        raise DecodeError(f"unknown type tag {tag}")
    if r.pos != len(data):
        raise DecodeError(f"{len(data) - r.pos} trailing bytes")
    return msg


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------


def sign(node_key: bytes, data: bytes) -> bytes:
    """Keyed-MAC test signer: HMAC-SHA512, exactly 64 bytes."""
    return hmac.new(node_key, data, hashlib.sha512).digest()


class KeyTable:
    """Per-node signing keys. Stands in for a real public-key registry."""

    def __init__(self, keys: dict[int, bytes]):
        self._keys = dict(keys)

    @classmethod
    def from_seed(cls, n: int, seed: int) -> "KeyTable":
        keys = {}
        for node in range(n):
            keys[node] = hashlib.blake2b(
                b"node-key" + _U64.pack(seed & _U64_MAX) + _U32.pack(node), digest_size=32
            ).digest()
        return cls(keys)

    def key(self, node_id: int) -> bytes:
        try:
            return self._keys[node_id]
        except KeyError:
            raise UnknownSigner(node_id) from None

    def sign(self, node_id: int, data: bytes) -> bytes:
        return sign(self.key(node_id), data)

    def verify(self, node_id: int, data: bytes, signature: bytes) -> bool:
        expected = sign(self.key(node_id), data)
        return hmac.compare_digest(expected, signature)

    def sign_sync(self, msg: SyncMessage) -> SyncMessage:
        sig = self.sign(msg.node_id, msg.signed_bytes())
        return SyncMessage(msg.round_index, msg.epoch, msg.block_hash, msg.node_id, sig)

    def sign_restart(self, msg: RestartMessage) -> RestartMessage:
        sig = self.sign(msg.node_id, msg.signed_bytes())
        return RestartMessage(msg.last_committed_index, msg.epoch, msg.node_id, sig)

    def verify_message(self, msg: SyncMessage | RestartMessage) -> bool:
        return self.verify(msg.node_id, msg.signed_bytes(), msg.signature)


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------


def find_chain_violation(blocks: Sequence[Block]) -> int | None:
    """Index of the first block breaking the chain invariants, or None."""
    for i, b in enumerate(blocks):
        if b.index != i or not b.hash_ok():
            return i
        if i == 0:
            if b.prev_hash != ZERO_HASH or b.messages:
                return 0
        elif b.prev_hash != blocks[i - 1].hash:
            return i
    return None


def verify_chain(ledger: "Ledger | Sequence[Block]") -> bool:
    blocks = ledger.blocks if isinstance(ledger, Ledger) else ledger
    return find_chain_violation(blocks) is None


class Ledger:
    """Append-only chain of blocks starting at genesis."""

    def __init__(self, blocks: Sequence[Block] | None = None):
        self.blocks: list[Block] = list(blocks) if blocks else [genesis_block()]

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i: int) -> Block:
        return self.blocks[i]

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def extends(self, block: Block) -> bool:
        head = self.blocks[-1]
        return block.index == head.index + 1 and block.prev_hash == head.hash

    def append(self, block: Block) -> None:
        if not self.extends(block):
            raise ValueError(f"block {block.index} does not extend head {self.head.index}")
        self.blocks.append(block)

    def hashes(self) -> list[bytes]:
        return [b.hash for b in self.blocks]
