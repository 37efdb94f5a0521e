"""Wire framing and the two channel implementations.

Frame layout, identical for both transports:

    4 bytes   little-endian payload length
    payload:
      8 bytes   session id (LE u64)
      2 bytes   operation tag (LE u16, see OP_TAGS)
      2 bytes   reserved (zero)
      N words   ring elements, little-endian

Boolean payloads are packed little-endian-bit-first into words before they
hit the wire, so byte accounting is the same for arithmetic and boolean
traffic.
"""

from __future__ import annotations

import queue
import select
import socket
import struct

import numpy as np

from .errors import TransportError

HEADER = struct.Struct("<QHH")  # session id, op tag, reserved
LEN = struct.Struct("<I")
FRAME_OVERHEAD = LEN.size + HEADER.size  # 16 bytes per frame

# Operation tags for the wire frame. One tag per metered functionality;
# 0x00ff marks traffic outside any labelled gate.
OP_TAGS = {
    "sec_share": 0x0001,
    "sec_rec": 0x0002,
    "zero_gen": 0x0003,
    "sec_ran_gen": 0x0004,
    "sec_add": 0x0010,
    "sec_mul": 0x0011,
    "sec_mul3": 0x0012,
    "sec_sp": 0x0013,
    "sec_sel": 0x0014,
    "sec_ge": 0x0015,
    "sec_ge2": 0x0016,
    "sec_max": 0x0017,
    "sec_srt": 0x0018,
    "sec_div": 0x0019,
    "sec_ran_gen_inv": 0x001a,
    "sec_mi": 0x001b,
    "sec_ge3": 0x0020,
    "sec_ge4": 0x0021,
    "sec_rs": 0x0022,
    "threshold_determination": 0x0030,
    "sec_ue": 0x0031,
    "sec_tc": 0x0032,
    "stage1": 0x0040,
    "other": 0x00ff,
}

# Simulated link profiles (latency seconds, bandwidth bytes/s). Used for
# estimated wall-clock columns in reports; transfers are never slowed down.
PROFILES = {
    "lan": (0.17e-3, 1e9),
    "wan": (72e-3, 100e6),
}


def estimate_link_time(rounds: int, nbytes: int, profile: str) -> float:
    latency, bandwidth = PROFILES[profile]
    return rounds * latency + nbytes / bandwidth


# -- word packing -------------------------------------------------------


def pack_words(arr: np.ndarray, word_bits: int) -> bytes:
    flat = np.asarray(arr).reshape(-1)
    if word_bits == 64:
        return flat.astype("<u8").tobytes()
    return b"".join(int(v).to_bytes(16, "little") for v in flat)


def unpack_words(buf: bytes, shape, word_bits: int) -> np.ndarray:
    if word_bits == 64:
        arr = np.frombuffer(buf, dtype="<u8").astype(np.uint64)
        return arr.reshape(shape)
    step = 16
    vals = [int.from_bytes(buf[i : i + step], "little") for i in range(0, len(buf), step)]
    return np.array(vals, dtype=object).reshape(shape)


def pack_bit_words(bits: np.ndarray) -> bytes:
    """Bit tensor (uint8 of 0/1) to little-endian words, zero padded."""
    raw = np.packbits(np.asarray(bits, dtype=np.uint8).reshape(-1), bitorder="little")
    pad = (-len(raw)) % 8
    if pad:
        raw = np.concatenate([raw, np.zeros(pad, dtype=np.uint8)])
    return raw.tobytes()


def unpack_bit_words(buf: bytes, shape) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=count, bitorder="little")
    return bits.reshape(shape)


def bit_payload_bytes(nbits: int) -> int:
    """Wire size of a packed bit payload (whole little-endian words)."""
    return 8 * ((nbits + 63) // 64)


def build_frame(session_id: int, tag: int, payload_words: bytes) -> bytes:
    payload = HEADER.pack(session_id, tag, 0) + payload_words
    return LEN.pack(len(payload)) + payload


def parse_frame(frame: bytes) -> tuple[int, int, bytes]:
    if len(frame) < FRAME_OVERHEAD:
        raise TransportError("short frame")
    (length,) = LEN.unpack_from(frame, 0)
    if length != len(frame) - LEN.size:
        raise TransportError("frame length mismatch")
    sid, tag, reserved = HEADER.unpack_from(frame, LEN.size)
    if reserved != 0:
        raise TransportError("reserved field must be zero")
    return sid, tag, frame[FRAME_OVERHEAD:]


# -- channels ------------------------------------------------------------


class InprocChannel:
    """One endpoint of an in-process duplex pipe carrying whole frames."""

    _CLOSE = object()

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, frame: bytes) -> None:
        if self._closed:
            raise TransportError("channel closed")
        self._outbox.put(frame)

    def recv(self) -> bytes:
        item = self._inbox.get()
        if item is self._CLOSE:
            raise TransportError("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(self._CLOSE)


def inproc_pair() -> tuple[InprocChannel, InprocChannel]:
    a, b = queue.Queue(), queue.Queue()
    return InprocChannel(a, b), InprocChannel(b, a)


class TcpChannel:
    """Frame pipe over a connected socket.

    send() drains incoming bytes while pushing outgoing ones so two peers
    that both send large frames before reading cannot deadlock on full
    kernel buffers.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.setblocking(False)
        self._rbuf = bytearray()

    def send(self, frame: bytes) -> None:
        view = memoryview(frame)
        while view:
            rl, wl, _ = select.select([self._sock], [self._sock], [], 30.0)
            if not rl and not wl:
                raise TransportError("peer stalled")
            if rl:
                self._pull()
            if wl:
                try:
                    sent = self._sock.send(view)
                except (BrokenPipeError, ConnectionResetError) as exc:
                    raise TransportError("peer closed the channel") from exc
                view = view[sent:]

    def recv(self) -> bytes:
        while True:
            frame = self._take_frame()
            if frame is not None:
                return frame
            rl, _, _ = select.select([self._sock], [], [], 30.0)
            if not rl:
                raise TransportError("recv timeout")
            self._pull()

    def _pull(self) -> None:
        try:
            chunk = self._sock.recv(1 << 16)
        except BlockingIOError:
            return
        except ConnectionResetError as exc:
            raise TransportError("peer closed the channel") from exc
        if chunk == b"":
            raise TransportError("peer closed the channel")
        self._rbuf.extend(chunk)

    def _take_frame(self) -> bytes | None:
        if len(self._rbuf) < LEN.size:
            return None
        (length,) = LEN.unpack_from(self._rbuf, 0)
        total = LEN.size + length
        if len(self._rbuf) < total:
            return None
        frame = bytes(self._rbuf[:total])
        del self._rbuf[:total]
        return frame

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def tcp_listen(addr: str) -> TcpChannel:
    host, port = addr.rsplit(":", 1)
    srv = socket.create_server((host, int(port)))
    conn, _ = srv.accept()
    srv.close()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpChannel(conn)


def tcp_connect(addr: str, attempts: int = 50) -> TcpChannel:
    import time

    host, port = addr.rsplit(":", 1)
    last: Exception | None = None
    for _ in range(attempts):
        try:
            sock = socket.create_connection((host, int(port)), timeout=10.0)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return TcpChannel(sock)
        except OSError as exc:
            last = exc
            time.sleep(0.1)
    raise TransportError(f"could not connect to {addr}: {last}")
