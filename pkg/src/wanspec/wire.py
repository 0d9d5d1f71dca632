"""Protocol messages, binary framing, and a latency-emulating channel.

Frame layout (all integers big-endian)::

    u32 length | u8 tag | fields...

``length`` counts the tag byte plus the fields. Hello and Bye are
connection-level and carry no request id or sequence number; every other
message starts with ``u64 request_id, u64 seq_no``. Tokens are u32,
probabilities and entropies IEEE-754 f64.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import random
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterator, Union

MAX_FRAME = 1 << 20
HEADER = struct.Struct(">IB")
DIGEST_LEN = 32

TAG_HELLO = 1
TAG_SPECULATION = 2
TAG_VALIDATION = 3
TAG_EOS = 4
TAG_BYE = 5

_RS = struct.Struct(">QQ")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_F64 = struct.Struct(">d")
_CAND = struct.Struct(">Idd")


class WireError(Exception):
    pass


class NeedMoreBytes(WireError):
    """The buffer ends before the frame does."""


class ProtocolError(WireError):
    """The peer sent something no valid encoder produces; close the connection."""


@dataclass(frozen=True)
class Hello:
    digest: bytes


@dataclass(frozen=True)
class Speculation:
    request_id: int
    seq_no: int
    offset: int
    path: tuple[int, ...]
    candidates: tuple[tuple[int, float, float], ...]


@dataclass(frozen=True)
class Validation:
    request_id: int
    seq_no: int
    base_offset: int
    accepted: tuple[int, ...]
    bonus: int
    final_entropy: float

    @property
    def length(self) -> int:
        return len(self.accepted) + 1


@dataclass(frozen=True)
class Eos:
    request_id: int
    seq_no: int
    final_length: int


@dataclass(frozen=True)
class Bye:
    pass


Message = Union[Hello, Speculation, Validation, Eos, Bye]


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def _tokens(tokens) -> bytes:
    return _U16.pack(len(tokens)) + b"".join(_U32.pack(t) for t in tokens)


def encode(msg: Message) -> bytes:
    if isinstance(msg, Bye):
        tag, body = TAG_BYE, b""
    elif isinstance(msg, Hello):
        if len(msg.digest) != DIGEST_LEN:
            raise ValueError(f"digest must be {DIGEST_LEN} bytes")
        tag, body = TAG_HELLO, bytes(msg.digest)
    elif isinstance(msg, Speculation):
        tag = TAG_SPECULATION
        body = (
            _RS.pack(msg.request_id, msg.seq_no)
            + _U64.pack(msg.offset)
            + _tokens(msg.path)
            + _U16.pack(len(msg.candidates))
            + b"".join(_CAND.pack(t, p, e) for t, p, e in msg.candidates)
        )
    elif isinstance(msg, Validation):
        tag = TAG_VALIDATION
        body = (
            _RS.pack(msg.request_id, msg.seq_no)
            + _U64.pack(msg.base_offset)
            + _tokens(msg.accepted)
            + _U32.pack(msg.bonus)
            + _F64.pack(msg.final_entropy)
        )
    elif isinstance(msg, Eos):
        tag = TAG_EOS
        body = _RS.pack(msg.request_id, msg.seq_no) + _U64.pack(msg.final_length)
    else:
        raise TypeError(f"not a protocol message: {msg!r}")
    return HEADER.pack(len(body) + 1, tag) + body


class _Reader:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, st: struct.Struct):
        end = self.pos + st.size
        if end > len(self.buf):
            raise ProtocolError("frame body shorter than its fields")
        vals = st.unpack_from(self.buf, self.pos)
        self.pos = end
        return vals

    def tokens(self) -> tuple[int, ...]:
        (n,) = self.take(_U16)
        return tuple(self.take(_U32)[0] for _ in range(n))


def _decode_body(tag: int, body: memoryview) -> Message:
    r = _Reader(body)
    if tag == TAG_BYE:
        msg = Bye()
    elif tag == TAG_HELLO:
        if len(body) != DIGEST_LEN:
            raise ProtocolError("hello digest has wrong length")
        return Hello(bytes(body))
    elif tag == TAG_SPECULATION:
        rid, seq = r.take(_RS)
        (offset,) = r.take(_U64)
        path = r.tokens()
        (n,) = r.take(_U16)
        cands = tuple(r.take(_CAND) for _ in range(n))
        msg = Speculation(rid, seq, offset, path, cands)
    elif tag == TAG_VALIDATION:
        rid, seq = r.take(_RS)
        (base,) = r.take(_U64)
        accepted = r.tokens()
        (bonus,) = r.take(_U32)
        (ent,) = r.take(_F64)
        msg = Validation(rid, seq, base, accepted, bonus, ent)
    elif tag == TAG_EOS:
        rid, seq = r.take(_RS)
        (n,) = r.take(_U64)
        msg = Eos(rid, seq, n)
    else:
        raise ProtocolError(f"unknown kind tag {tag}")
    if r.pos != len(body):
        raise ProtocolError("frame body longer than its fields")
    return msg


def decode_prefix(data) -> tuple[Message, int]:
    """Decode the first frame in `data`; return it with the bytes consumed."""
    view = memoryview(data)
    if len(view) < HEADER.size:
        raise NeedMoreBytes(HEADER.size - len(view))
    length, tag = HEADER.unpack_from(view)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} exceeds {MAX_FRAME}")
    if length < 1:
        raise ProtocolError("zero-length frame")
    end = 4 + length
    if len(view) < end:
        raise NeedMoreBytes(end - len(view))
    return _decode_body(tag, view[HEADER.size:end]), end


def decode(data) -> Message:
    msg, used = decode_prefix(data)
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} trailing bytes after frame")
    return msg


class FrameDecoder:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        while True:
            try:
                msg, used = decode_prefix(self._buf)
            except NeedMoreBytes:
                return out
            del self._buf[:used]
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


class SequenceChecker:
    """Enforces contiguous per-request sequence numbers on one direction."""

    def __init__(self):
        self._next: dict[int, int] = {}

    def check(self, msg: Message) -> None:
        if isinstance(msg, (Hello, Bye)):
            return
        want = self._next.get(msg.request_id, 0)
        if msg.seq_no != want:
            raise ProtocolError(
                f"request {msg.request_id}: expected seq {want}, got {msg.seq_no}"
            )
        self._next[msg.request_id] = want + 1


# -- latency emulation -------------------------------------------------------


class DelayedChannel:
    """Holds every frame for `one_way_delay` +/- uniform jitter before delivery.

    Delivery times are clamped to be non-decreasing so per-direction order is
    that of a stream. Times are seconds on `clock`.
    """

    def __init__(
        self,
        deliver: Callable[[bytes], None],
        one_way_delay: float,
        jitter: float = 0.0,
        seed: int = 0,
        clock: Callable[[], float] = time.monotonic,
        threaded: bool = False,
    ):
        if one_way_delay < 0 or jitter < 0:
            raise ValueError("delays must be non-negative")
        self._deliver = deliver
        self.delay = one_way_delay
        self.jitter = jitter
        self._rng = random.Random(seed)
        self._clock = clock
        self._last_due = float("-inf")
        self._heap: list = []
        self._ids = itertools.count()
        self._cv = threading.Condition()
        self._closed = False
        self.error: BaseException | None = None
        self._thread = None
        if threaded or one_way_delay > 0 or jitter > 0:
            self._thread = threading.Thread(target=self._pump, daemon=True, name="delay-line")
            self._thread.start()

    def send(self, frame: bytes) -> None:
        if self._thread is None:
            self._deliver(frame)
            return
        now = self._clock()
        due = now + self.delay
        if self.jitter:
            due += self._rng.uniform(-self.jitter, self.jitter)
        with self._cv:
            if self.error is not None:
                raise self.error
            due = max(due, self._last_due, now)
            self._last_due = due
            heapq.heappush(self._heap, (due, next(self._ids), frame))
            self._cv.notify()

    def _pump(self) -> None:
        while True:
            with self._cv:
                while not self._heap and not self._closed:
                    self._cv.wait()
                if not self._heap:
                    return
                due, _, frame = self._heap[0]
                wait = due - self._clock()
                if wait > 0:
                    self._cv.wait(wait)
                    continue
                heapq.heappop(self._heap)
            try:
                self._deliver(frame)
            except BaseException as exc:  # surfaced on the next send
                with self._cv:
                    self.error = exc
                    self._heap.clear()
                return

    def close(self, drain: bool = True) -> None:
        """Stop the delay line, by default after delivering what is queued."""
        if self._thread is None:
            return
        with self._cv:
            if not drain:
                self._heap.clear()
            self._closed = True
            self._cv.notify()
        self._thread.join()


def emulate_latency(
    deliver: Callable[[bytes], None], one_way_delay: float, jitter: float = 0.0, seed: int = 0
) -> DelayedChannel:
    return DelayedChannel(deliver, one_way_delay, jitter, seed)


def iter_frames(recv: Callable[[int], bytes], bufsize: int = 65536) -> Iterator[Message]:
    """Yield messages from a blocking `recv` until the peer closes cleanly."""
    dec = FrameDecoder()
    while True:
        chunk = recv(bufsize)
        if not chunk:
            if dec.pending:
                raise ProtocolError(f"connection closed mid-frame ({dec.pending} bytes)")
            return
        yield from dec.feed(chunk)
