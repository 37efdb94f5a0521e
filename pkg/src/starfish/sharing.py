"""Additive secret sharing, the trusted dealer, sessions and metering.

Two parties hold additive shares over Z_{2^w}. Boolean values are XOR
shared bit tensors. Each party runs the same protocol program (SPMD) on
its own Session; every network round is a symmetric exchange where both
parties send one frame and receive one frame.

The dealer is simulated: both sessions derive the full preprocessed
material from the same dealer seed and keep only their own half. Draws
happen in program order on both sides, which keeps the halves consistent.
Consumed material is charged to the meter as offline bytes, as if a real
dealer had shipped it ahead of time.

Seed tree: all randomness comes from numpy SeedSequence keyed as
(seed, stream_tag, *indices). Stream tags: 1 dealer, 2 party 0, 3 party 1,
4 client data, 5 client share splits, 6 baselines, 7 audit inputs.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import DealerExhausted, ProtocolError, ShapeError, TransportError
from .fixedpoint import FixedPointCodec, Ring
from .transport import (
    OP_TAGS,
    bit_payload_bytes,
    build_frame,
    inproc_pair,
    pack_bit_words,
    pack_words,
    parse_frame,
    tcp_connect,
    tcp_listen,
    unpack_bit_words,
    unpack_words,
)

STREAM_DEALER = 1
STREAM_PARTY = 2  # spawn key (2, party)
STREAM_DATA = 4
STREAM_CLIENT_SHARES = 5
STREAM_BASELINE = 6
STREAM_AUDIT = 7


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for a (seed, stream, indices...) key."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *key))))


@dataclass(frozen=True)
class ArithShare:
    party: int
    value: np.ndarray


@dataclass(frozen=True)
class BoolShare:
    party: int
    bits: np.ndarray


def sec_share(v, codec: FixedPointCodec, rng: np.random.Generator):
    """Split v into two additive shares.

    Floating input is encoded first; integer or object input is taken as
    ring words already.
    """
    arr = np.asarray(v)
    if arr.dtype.kind == "f":
        raw = codec.encode(arr)
    else:
        raw = codec.ring.array(arr)
    s0 = codec.ring.rand(rng, raw.shape)
    s1 = codec.ring.sub(raw, s0)
    return ArithShare(0, s0), ArithShare(1, s1)


def reconstruct(sh0: ArithShare, sh1: ArithShare, codec: FixedPointCodec) -> np.ndarray:
    return codec.ring.add(sh0.value, sh1.value)


# -- metering -------------------------------------------------------------


@dataclass
class OpStats:
    invocations: int = 0
    rounds: int = 0
    bytes_online: int = 0
    bytes_offline: int = 0

    def as_dict(self) -> dict:
        return {
            "invocations": self.invocations,
            "rounds": self.rounds,
            "bytes_online": self.bytes_online,
            "bytes_offline": self.bytes_offline,
        }


class TranscriptMeter:
    """Per-functionality communication counters for one party.

    bytes_online sums the framed payloads this party actually sent, so the
    grand total must equal what the transport shipped (checked in tests).
    """

    def __init__(self, word_bits: int = 64):
        self.ell_q = word_bits
        self.ell_plain = word_bits
        self.per_op: dict[str, OpStats] = defaultdict(OpStats)
        self.total_online_bytes = 0
        self.truncations = 0

    def invoke(self, op: str, n: int = 1) -> None:
        self.per_op[op].invocations += n

    def add_round(self, op: str, nbytes: int) -> None:
        stats = self.per_op[op]
        stats.rounds += 1
        stats.bytes_online += nbytes
        self.total_online_bytes += nbytes

    def add_offline(self, op: str, nbytes: int) -> None:
        self.per_op[op].bytes_offline += nbytes

    def add_truncations(self, n: int) -> None:
        self.truncations += int(n)

    def snapshot(self) -> dict:
        return {
            "ops": {op: s.as_dict() for op, s in sorted(self.per_op.items())},
            "total_online_bytes": self.total_online_bytes,
            "truncations": self.truncations,
            "ell_q": self.ell_q,
        }

    def stats(self, op: str) -> OpStats:
        return self.per_op[op]


# -- trusted dealer (simulated) -------------------------------------------


class DealerTape:
    """This party's view of the preprocessed tape.

    Material is generated lazily from the dealer seed, in consumption
    order. An optional item limit models a finite tape; exceeding it
    raises DealerExhausted.
    """

    def __init__(self, seed: int, party: int, codec: FixedPointCodec, limit: int | None = None):
        self.party = party
        self.codec = codec
        self.ring = codec.ring
        self._rng = keyed_rng(seed, STREAM_DEALER)
        self._limit = limit
        self._consumed = 0

    def _tick(self) -> None:
        self._consumed += 1
        if self._limit is not None and self._consumed > self._limit:
            raise DealerExhausted(f"dealer tape limit {self._limit} exceeded")

    def _split(self, full: np.ndarray) -> np.ndarray:
        s0 = self.ring.rand(self._rng, np.asarray(full).shape)
        if self.party == 0:
            return s0
        return self.ring.sub(full, s0)

    def beaver(self, shape_x, shape_y, mode: str = "mul"):
        """Triple (a, b, c) with c = a*b (elementwise) or a@b (matmul)."""
        self._tick()
        a = self.ring.rand(self._rng, shape_x)
        b = self.ring.rand(self._rng, shape_y)
        if mode == "mul":
            c = self.ring.mul(a, b)
        elif mode == "matmul":
            c = self.ring.matmul(a, b)
        else:
            raise ShapeError(f"unknown beaver mode {mode}")
        return self._split(a), self._split(b), self._split(c)

    def bit_triple(self, shape):
        """XOR-shared bit triple with c = a & b."""
        self._tick()
        a = self._rng.integers(0, 2, size=shape, dtype=np.uint8)
        b = self._rng.integers(0, 2, size=shape, dtype=np.uint8)
        c = a & b
        return self._split_bits(a), self._split_bits(b), self._split_bits(c)

    def shared_bit(self, shape):
        """The same random bit shared in both domains (boolean, arithmetic)."""
        self._tick()
        r = self._rng.integers(0, 2, size=shape, dtype=np.uint8)
        return self._split_bits(r), self._split(self.ring.array(r.astype(np.uint64)))

    def zero_share(self, shape) -> np.ndarray:
        self._tick()
        r = self.ring.rand(self._rng, shape)
        return r if self.party == 0 else self.ring.neg(r)

    def inv_mask(self, m: int) -> np.ndarray:
        """Share of a random mask matrix with entries uniform on [-1, 1).

        Entries live on the encode grid so masked products stay inside the
        representable range; redraws on bad conditioning are the caller's
        job. The 1x1 case rejects an exact zero, which would be a singular
        mask no retry could fix.
        """
        self._tick()
        scale = self.codec.scale
        raw = self._rng.integers(-scale, scale, size=(m, m), dtype=np.int64)
        while m == 1 and raw[0, 0] == 0:
            raw = self._rng.integers(-scale, scale, size=(m, m), dtype=np.int64)
        full = self.ring.from_signed(raw)
        return self._split(full)

    def _split_bits(self, full: np.ndarray) -> np.ndarray:
        s0 = self._rng.integers(0, 2, size=full.shape, dtype=np.uint8)
        if self.party == 0:
            return s0
        return full ^ s0

    # Offline cost of materials, in bytes, as shipped to one party.

    @staticmethod
    def beaver_cost(shape_x, shape_y, mode: str, word_bytes: int) -> int:
        nx = int(np.prod(shape_x, dtype=np.int64)) if shape_x else 1
        ny = int(np.prod(shape_y, dtype=np.int64)) if shape_y else 1
        if mode == "mul":
            nc = max(nx, ny)
        else:
            batch = int(np.prod(shape_x[:-2], dtype=np.int64)) if len(shape_x) > 2 else 1
            nc = batch * shape_x[-2] * shape_y[-1]
        return word_bytes * (nx + ny + nc)

    @staticmethod
    def bit_triple_cost(nbits: int) -> int:
        return 3 * bit_payload_bytes(nbits)

    @staticmethod
    def shared_bit_cost(nbits: int, word_bytes: int) -> int:
        return bit_payload_bytes(nbits) + word_bytes * nbits


# -- session ---------------------------------------------------------------


class Session:
    """One party's protocol context: channel, dealer view, meter, RNG.

    A session is single threaded; it may be handed between threads but not
    used from two at once.
    """

    def __init__(
        self,
        party: int,
        channel,
        codec: FixedPointCodec,
        dealer: DealerTape,
        meter: TranscriptMeter,
        rng: np.random.Generator,
        session_id: int,
    ):
        if party not in (0, 1):
            raise ProtocolError(f"party must be 0 or 1, got {party}")
        self.party = party
        self.chan = channel
        self.codec = codec
        self.ring: Ring = codec.ring
        self.dealer = dealer
        self.meter = meter
        self.rng = rng
        self.session_id = session_id & 0xFFFFFFFFFFFFFFFF
        self._op_stack: list[str] = []

    # -- op labelling ----------------------------------------------------

    def op(self, name: str):
        return _OpScope(self, name)

    @property
    def current_op(self) -> str:
        return self._op_stack[-1] if self._op_stack else "other"

    # -- dealer draws with offline accounting ----------------------------

    @property
    def _word_bytes(self) -> int:
        return self.codec.word_bits // 8

    def draw_beaver(self, shape_x, shape_y, mode: str = "mul"):
        trip = self.dealer.beaver(shape_x, shape_y, mode)
        cost = DealerTape.beaver_cost(tuple(shape_x), tuple(shape_y), mode, self._word_bytes)
        self.meter.add_offline(self.current_op, cost)
        return trip

    def draw_bit_triple(self, shape):
        trip = self.dealer.bit_triple(shape)
        nbits = int(np.prod(shape, dtype=np.int64)) if shape else 1
        self.meter.add_offline(self.current_op, DealerTape.bit_triple_cost(nbits))
        return trip

    def draw_shared_bit(self, shape):
        pair = self.dealer.shared_bit(shape)
        nbits = int(np.prod(shape, dtype=np.int64)) if shape else 1
        self.meter.add_offline(self.current_op, DealerTape.shared_bit_cost(nbits, self._word_bytes))
        return pair

    def draw_zero(self, shape):
        z = self.dealer.zero_share(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        self.meter.add_offline(self.current_op, self._word_bytes * n)
        return z

    def draw_inv_mask(self, m: int):
        r = self.dealer.inv_mask(m)
        self.meter.add_offline(self.current_op, self._word_bytes * m * m)
        return r

    # -- rounds -----------------------------------------------------------

    def exchange_words(self, arr: np.ndarray) -> np.ndarray:
        """Send a ring tensor, receive the peer's of the same shape."""
        arr = np.asarray(arr)
        payload = pack_words(arr, self.codec.word_bits)
        reply = self._roundtrip(payload)
        return unpack_words(reply, arr.shape, self.codec.word_bits)

    def exchange_bits(self, bits: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.uint8)
        payload = pack_bit_words(bits)
        reply = self._roundtrip(payload)
        return unpack_bit_words(reply, bits.shape)

    def _roundtrip(self, payload: bytes) -> bytes:
        op = self.current_op
        tag = OP_TAGS.get(op, OP_TAGS["other"])
        frame = build_frame(self.session_id, tag, payload)
        self.chan.send(frame)
        self.meter.add_round(op, len(frame))
        sid, rtag, reply = parse_frame(self.chan.recv())
        if sid != self.session_id:
            raise TransportError(f"session id mismatch: {sid:#x} != {self.session_id:#x}")
        if rtag != tag:
            raise TransportError(f"op tag mismatch: got {rtag:#x}, expected {tag:#x}")
        return reply

    # -- truncation accounting -------------------------------------------

    def truncate(self, v: np.ndarray) -> np.ndarray:
        self.meter.add_truncations(np.asarray(v).size)
        return self.codec.truncate_local(v, self.party)


class _OpScope:
    def __init__(self, sess: Session, name: str):
        self.sess = sess
        self.name = name

    def __enter__(self):
        self.sess._op_stack.append(self.name)
        return self.sess

    def __exit__(self, *exc):
        self.sess._op_stack.pop()
        return False


# -- session-level primitives ----------------------------------------------


def sec_rec(sess: Session, x: np.ndarray, lanes: int | None = None) -> np.ndarray:
    """Reveal a shared tensor to both parties (one symmetric round)."""
    with sess.op("sec_rec"):
        sess.meter.invoke("sec_rec", lanes if lanes is not None else 1)
        theirs = sess.exchange_words(x)
        return sess.ring.add(x, theirs)


def zero_gen(sess: Session, shape=()) -> np.ndarray:
    """Fresh share of zero from the dealer tape (no communication)."""
    with sess.op("zero_gen"):
        sess.meter.invoke("zero_gen")
        return sess.draw_zero(shape)


def sec_ran_gen(sess: Session, shape=()) -> np.ndarray:
    """Share of a uniform ring value unknown to both parties.

    Each party contributes its own uniform share; no communication is
    needed and neither party learns the sum.
    """
    with sess.op("sec_ran_gen"):
        sess.meter.invoke("sec_ran_gen")
        return sess.ring.rand(sess.rng, shape)


# -- pair harness ------------------------------------------------------------


def make_inproc_sessions(
    seed: int,
    codec: FixedPointCodec | None = None,
    dealer_limit: int | None = None,
) -> tuple[Session, Session]:
    codec = codec or FixedPointCodec()
    chan0, chan1 = inproc_pair()
    sessions = []
    for party, chan in ((0, chan0), (1, chan1)):
        dealer = DealerTape(seed, party, codec, limit=dealer_limit)
        meter = TranscriptMeter(codec.word_bits)
        rng = keyed_rng(seed, STREAM_PARTY, party)
        sessions.append(Session(party, chan, codec, dealer, meter, rng, session_id=seed))
    return sessions[0], sessions[1]


def make_tcp_session(
    seed: int,
    party: int,
    address: str,
    codec: FixedPointCodec | None = None,
    dealer_limit: int | None = None,
) -> Session:
    """One party's session over a socket; party 0 listens, party 1 dials."""
    if party not in (0, 1):
        raise ProtocolError(f"party must be 0 or 1, got {party}")
    codec = codec or FixedPointCodec()
    chan = tcp_listen(address) if party == 0 else tcp_connect(address)
    dealer = DealerTape(seed, party, codec, limit=dealer_limit)
    meter = TranscriptMeter(codec.word_bits)
    rng = keyed_rng(seed, STREAM_PARTY, party)
    return Session(party, chan, codec, dealer, meter, rng, session_id=seed)


def run_pair(proto, sessions: tuple[Session, Session]):
    """Run one protocol function as both parties on two threads.

    proto(session) is called per party; returns (result0, result1).
    On failure in one party the peer channel is closed so the other side
    unblocks; the originating exception is re-raised.
    """
    results: list = [None, None]
    errors: list = [None, None]

    def runner(i: int):
        try:
            results[i] = proto(sessions[i])
        except BaseException as exc:  # noqa: BLE001 - reported below
            errors[i] = exc
            sessions[i].chan.close()

    threads = [threading.Thread(target=runner, args=(i,), daemon=True) for i in (0, 1)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    real = [e for e in errors if e is not None and not isinstance(e, TransportError)]
    if real:
        raise real[0]
    if any(errors):
        raise next(e for e in errors if e is not None)
    return results[0], results[1]
