"""Two-party gates over additively shared ring tensors.

Arithmetic gates use Beaver triples from the dealer tape. Comparison,
division and bit extraction run on XOR-shared bit tensors produced by an
A2B conversion (each party contributes the bits of its own share, a
Kogge-Stone adder recombines them). Batched lanes share one round trip:
every gate here is vectorized, so "T comparisons in parallel" is one
circuit over T lanes.

Scale conventions: encoded reals sit at 2^-p. Products of two encoded
operands land at 2^-2p and are truncated back unless the caller opts out
(bit-valued operands, exact cross multiplications). Comparison outputs are
arithmetic shares of {0, 1} at scale 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import RangeError, ShapeError, SingularRevealError
from .sharing import Session

# -- local helpers ---------------------------------------------------------


def const_share(sess: Session, raw) -> np.ndarray:
    """Share of a public ring value: party 0 holds it, party 1 holds zero."""
    arr = sess.ring.array(raw)
    return arr if sess.party == 0 else sess.ring.zeros(arr.shape)


def add_public(sess: Session, x, raw) -> np.ndarray:
    if sess.party == 0:
        return sess.ring.add(x, sess.ring.array(raw))
    return sess.ring.array(x)


def _broadcast(x, y):
    bx, by = np.broadcast_arrays(np.asarray(x), np.asarray(y))
    return bx.copy(), by.copy()


def _open(sess: Session, x) -> np.ndarray:
    """Reveal inside the current gate scope (attributed to that gate)."""
    theirs = sess.exchange_words(np.asarray(x))
    return sess.ring.add(x, theirs)


def _exchange_concat(sess: Session, parts: list[np.ndarray]) -> list[np.ndarray]:
    """One round carrying several tensors, split back on arrival."""
    flats = [np.asarray(p).reshape(-1) for p in parts]
    joined = np.concatenate(flats) if len(flats) > 1 else flats[0]
    reply = sess.exchange_words(joined)
    out = []
    pos = 0
    for p in parts:
        n = np.asarray(p).size
        out.append(reply[pos : pos + n].reshape(np.asarray(p).shape))
        pos += n
    return out


# -- Beaver multiplication core ---------------------------------------------


def _beaver_mul(sess: Session, x, y, *, matmul: bool = False, truncate: bool = True):
    ring = sess.ring
    x = np.asarray(x)
    y = np.asarray(y)
    if matmul:
        a, b, c = sess.draw_beaver(x.shape, y.shape, "matmul")
        d_loc = ring.sub(x, a)
        e_loc = ring.sub(y, b)
        d, e = _exchange_concat(sess, [d_loc, e_loc])
        d = ring.add(d_loc, d)
        e = ring.add(e_loc, e)
        z = ring.add(c, ring.add(ring.matmul(d, b), ring.matmul(a, e)))
        if sess.party == 0:
            z = ring.add(z, ring.matmul(d, e))
    else:
        x, y = _broadcast(x, y)
        a, b, c = sess.draw_beaver(x.shape, y.shape, "mul")
        d_loc = ring.sub(x, a)
        e_loc = ring.sub(y, b)
        d, e = _exchange_concat(sess, [d_loc, e_loc])
        d = ring.add(d_loc, d)
        e = ring.add(e_loc, e)
        z = ring.add(c, ring.add(ring.mul(d, b), ring.mul(e, a)))
        if sess.party == 0:
            z = ring.add(z, ring.mul(d, e))
    if truncate:
        z = sess.truncate(z)
    return z


def _mul_public_core(sess: Session, x, raw, *, matmul: bool = False, truncate: bool = True):
    ring = sess.ring
    pub = ring.array(raw)
    z = ring.matmul(x, pub) if matmul else ring.mul(x, pub)
    if truncate:
        z = sess.truncate(z)
    return z


# -- arithmetic gates ----------------------------------------------------------


def sec_add(sess: Session, x, y) -> np.ndarray:
    """Share-wise addition. Zero rounds, zero bytes."""
    with sess.op("sec_add"):
        sess.meter.invoke("sec_add", int(np.broadcast(np.asarray(x), np.asarray(y)).size))
        return sess.ring.add(x, y)


def sec_mul(sess: Session, x, y, *, matmul: bool = False, truncate: bool = True) -> np.ndarray:
    """Beaver product of two shared tensors (one round)."""
    with sess.op("sec_mul"):
        n = 1 if matmul else int(np.broadcast(np.asarray(x), np.asarray(y)).size)
        sess.meter.invoke("sec_mul", n)
        return _beaver_mul(sess, x, y, matmul=matmul, truncate=truncate)


def mul_public(sess: Session, x, raw, *, matmul: bool = False, truncate: bool = True) -> np.ndarray:
    """Product with a public ring tensor: no triple, no communication."""
    with sess.op("sec_mul"):
        sess.meter.invoke("sec_mul", 1 if matmul else int(np.asarray(x).size))
        return _mul_public_core(sess, x, raw, matmul=matmul, truncate=truncate)


def sec_mul3(sess: Session, x, y, z, *, matmul: bool = False, truncate: bool = True) -> np.ndarray:
    """Three-operand product, staged as two sequential Beaver products.

    Two rounds instead of the single-round three-party construction; the
    cost table reflects this implementation.
    """
    with sess.op("sec_mul3"):
        sess.meter.invoke("sec_mul3")
        xy = _beaver_mul(sess, x, y, matmul=matmul, truncate=truncate)
        return _beaver_mul(sess, xy, z, matmul=matmul, truncate=truncate)


def sec_sp(sess: Session, x, y, *, truncate: bool = True) -> np.ndarray:
    """Inner product along the last axis, one truncation of the summed terms."""
    with sess.op("sec_sp"):
        x = np.asarray(x)
        y = np.asarray(y)
        if x.shape[-1] != y.shape[-1]:
            raise ShapeError(f"sec_sp shapes {x.shape} x {y.shape}")
        x, y = _broadcast(x, y)
        sess.meter.invoke("sec_sp", int(x.size // x.shape[-1]))
        xm = x[..., None, :]
        ym = y[..., :, None]
        z = _beaver_mul(sess, xm, ym, matmul=True, truncate=truncate)
        return z[..., 0, 0]


def sp_public(sess: Session, x, raw, *, truncate: bool = True) -> np.ndarray:
    """Inner product with a public vector: local, zero communication."""
    with sess.op("sec_sp"):
        ring = sess.ring
        x = np.asarray(x)
        sess.meter.invoke("sec_sp", int(x.size // x.shape[-1]))
        pub = ring.array(raw)
        prod = ring.mul(x, pub)
        if sess.codec.word_bits == 64:
            z = prod.sum(axis=-1, dtype=np.uint64)
        else:
            z = ring._wrap(prod.sum(axis=-1))
        if truncate:
            z = sess.truncate(z)
        return z


def sec_sel(sess: Session, v0, v1, b) -> np.ndarray:
    """Oblivious select v0 + b*(v1 - v0), re-randomized with a zero share."""
    with sess.op("sec_sel"):
        ring = sess.ring
        sess.meter.invoke("sec_sel", int(np.asarray(b).size))
        diff = ring.sub(v1, v0)
        picked = _beaver_mul(sess, b, diff, truncate=False)
        out = ring.add(v0, picked)
        return ring.add(out, sess.draw_zero(np.asarray(out).shape))


# -- boolean kernel -----------------------------------------------------------


def _bit_and(sess: Session, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """AND on XOR-shared bit tensors; one round for any batch shape."""
    a, b, c = sess.draw_bit_triple(x.shape)
    e_loc = x ^ a
    f_loc = y ^ b
    msg = np.stack([e_loc, f_loc])
    reply = sess.exchange_bits(msg)
    e = e_loc ^ reply[0]
    f = f_loc ^ reply[1]
    z = c ^ (f & a) ^ (e & b)
    if sess.party == 0:
        z ^= e & f
    return z


def _shift_up(bits: np.ndarray, s: int) -> np.ndarray:
    out = np.zeros_like(bits)
    out[..., s:] = bits[..., :-s]
    return out


def _ks_levels(width: int) -> list[int]:
    levels = []
    s = 1
    while s < width:
        levels.append(s)
        s <<= 1
    return levels


def _adder(
    sess: Session,
    x: np.ndarray,
    y: np.ndarray | None,
    *,
    cin_share: np.ndarray | None = None,
    cin_public: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Kogge-Stone addition of XOR-shared bit tensors (LSB first).

    Returns (sum bits, carry out). y=None means an all-zero addend, used
    for conditional negation where only a carry-in enters.
    """
    width = x.shape[-1]
    if y is None:
        p = x.copy()
        g = np.zeros_like(x)
    else:
        p = x ^ y
        g = _bit_and(sess, x, y)
    p_orig = p.copy()
    if cin_share is not None:
        fold = _bit_and(sess, p[..., 0], np.broadcast_to(cin_share, p[..., 0].shape).copy())
        g = g.copy()
        g[..., 0] ^= fold
    elif cin_public:
        g = g.copy()
        g[..., 0] ^= p[..., 0]  # p0 AND 1 is local
    for s in _ks_levels(width):
        stacked_x = np.stack([p, p])
        stacked_y = np.stack([_shift_up(g, s), _shift_up(p, s)])
        res = _bit_and(sess, stacked_x, stacked_y)
        g = g ^ res[0]
        p = res[1]
    carry = np.zeros_like(x)
    carry[..., 1:] = g[..., :-1]
    if cin_share is not None:
        carry[..., 0] = np.broadcast_to(cin_share, carry[..., 0].shape)
    elif cin_public and sess.party == 0:
        carry[..., 0] = 1
    total = p_orig ^ carry
    return total, g[..., -1]


def _ring_bits(sess: Session, arr: np.ndarray) -> np.ndarray:
    """Plain (non-shared) bit decomposition of ring words, LSB first."""
    width = sess.codec.word_bits
    arr = np.asarray(arr)
    if sess.codec.word_bits == 64 and arr.dtype == np.uint64:
        shifts = np.arange(width, dtype=np.uint64)
        return ((arr[..., None] >> shifts) & np.uint64(1)).astype(np.uint8)
    flat = arr.reshape(-1)
    out = np.zeros((flat.size, width), dtype=np.uint8)
    for i, v in enumerate(flat):
        iv = int(v)
        for k in range(width):
            out[i, k] = (iv >> k) & 1
    return out.reshape(arr.shape + (width,))


def _a2b(sess: Session, x: np.ndarray) -> np.ndarray:
    """Arithmetic share to XOR-shared bits of the full value."""
    mine = _ring_bits(sess, x)
    zeros = np.zeros_like(mine)
    xa = mine if sess.party == 0 else zeros
    xb = zeros if sess.party == 0 else mine
    total, _ = _adder(sess, xa, xb)
    return total


def _b2a_bits(sess: Session, bits: np.ndarray) -> np.ndarray:
    """XOR-shared bits to arithmetic shares of the same 0/1 values."""
    ring = sess.ring
    r_bool, r_arith = sess.draw_shared_bit(bits.shape)
    t_loc = bits ^ r_bool
    t = t_loc ^ sess.exchange_bits(t_loc)
    t_ring = ring.array(t.astype(np.uint64))
    flip = ring.mul(t_ring, r_arith)
    out = ring.sub(r_arith, ring.scale_int(flip, 2))
    if sess.party == 0:
        out = ring.add(out, t_ring)
    return out


def _b2a_word(sess: Session, bits: np.ndarray) -> np.ndarray:
    """XOR-shared W-bit words to one arithmetic share (two's complement)."""
    ring = sess.ring
    arith = _b2a_bits(sess, bits)
    width = bits.shape[-1]
    if sess.codec.word_bits == 64:
        powers = (np.uint64(1) << np.arange(width, dtype=np.uint64))
        return (arith * powers).sum(axis=-1, dtype=np.uint64)
    powers = np.array([1 << k for k in range(width)], dtype=object)
    return ring._wrap((arith * powers).sum(axis=-1))


def _bool_not(sess: Session, bits: np.ndarray) -> np.ndarray:
    return bits ^ 1 if sess.party == 0 else bits.copy()


def _cond_negate(sess: Session, bits: np.ndarray, sign: np.ndarray) -> np.ndarray:
    """Two's-complement negate where sign=1: (x XOR sign) + sign."""
    mask = np.broadcast_to(sign[..., None], bits.shape)
    flipped = bits ^ mask
    total, _ = _adder(sess, flipped, None, cin_share=sign)
    return total


# -- comparison gates ---------------------------------------------------------


def _ge_core(sess: Session, u, v) -> np.ndarray:
    """Arithmetic share of [u >= v] via the sign bit of u - v."""
    d = sess.ring.sub(*_broadcast(u, v))
    bits = _a2b(sess, d)
    ge_bit = _bool_not(sess, bits[..., -1])
    return _b2a_bits(sess, ge_bit)


def sec_ge(sess: Session, u, v) -> np.ndarray:
    """Exact signed comparison; output is a shared {0,1} at scale 1."""
    with sess.op("sec_ge"):
        sess.meter.invoke("sec_ge", int(np.broadcast(np.asarray(u), np.asarray(v)).size))
        return _ge_core(sess, u, v)


def sec_ge2(sess: Session, u1, v1, u2, v2) -> np.ndarray:
    """[u1/v1 >= u2/v2] for positive v1, v2 by exact cross multiplication."""
    with sess.op("sec_ge2"):
        sess.meter.invoke("sec_ge2", int(np.asarray(u1).size))
        lhs_rhs = _beaver_mul(
            sess,
            np.stack(_broadcast(u1, u2)),
            np.stack(_broadcast(v2, v1)),
            truncate=False,
        )
        return _ge_core(sess, lhs_rhs[0], lhs_rhs[1])


def sec_max(sess: Session, vals) -> np.ndarray:
    """Oblivious max over the last axis (tournament of sec_ge/sec_sel)."""
    with sess.op("sec_max"):
        ring = sess.ring
        vals = np.asarray(vals)
        lanes = int(vals.size // vals.shape[-1])
        sess.meter.invoke("sec_max", lanes)
        t = vals.shape[-1]
        size = 1 << (t - 1).bit_length()
        if size != t:
            pad_val = const_share(sess, _min_sentinel_raw(sess))
            pad = np.broadcast_to(pad_val, vals.shape[:-1] + (size - t,)).copy()
            vals = np.concatenate([vals, pad], axis=-1)
        while vals.shape[-1] > 1:
            half = vals.shape[-1] // 2
            a = vals[..., :half]
            b = vals[..., half:]
            g = _ge_core(sess, a, b)
            picked = _beaver_mul(sess, g, ring.sub(a, b), truncate=False)
            vals = ring.add(b, picked)
        return vals[..., 0]


def _min_sentinel_raw(sess: Session) -> int:
    codec = sess.codec
    return -(1 << (codec.precision_p + codec.range_e - 1)) & codec.ring.mask


# -- oblivious sort -----------------------------------------------------------


@dataclass
class ComparisonKey:
    """Sortable record: named shared components plus a swapped-along payload.

    Every component is an array whose leading axis indexes the T items.
    The comparator decides ordering from the components; the payload (round
    indices here) just rides along through the swaps.
    """

    variant: str
    parts: dict[str, np.ndarray]
    payload: np.ndarray | None = None

    def length(self) -> int:
        return next(iter(self.parts.values())).shape[0]


Comparator = Callable[[Session, dict, dict], np.ndarray]
SentinelFn = Callable[[Session], dict]


def comparator_plain(sess: Session, a: dict, b: dict) -> np.ndarray:
    return _ge_core(sess, a["v"], b["v"])


def sentinel_plain(sess: Session) -> dict:
    return {"v": _min_sentinel_raw(sess)}


def comparator_pair(sess: Session, a: dict, b: dict) -> np.ndarray:
    """Fraction order u1/v1 >= u2/v2 with positive denominators."""
    lhs_rhs = _beaver_mul(
        sess,
        np.stack([a["u"], b["u"]]),
        np.stack([b["v"], a["v"]]),
        truncate=False,
    )
    return _ge_core(sess, lhs_rhs[0], lhs_rhs[1])


def sentinel_pair(sess: Session) -> dict:
    return {"u": _min_sentinel_raw(sess), "v": sess.codec.encode(1.0)}


SORT_VARIANTS: dict[str, tuple[Comparator, SentinelFn]] = {
    "plain": (comparator_plain, sentinel_plain),
    "pair": (comparator_pair, sentinel_pair),
}


def sec_srt(
    sess: Session,
    key: ComparisonKey,
    comparator: Comparator | None = None,
    sentinel: SentinelFn | None = None,
) -> ComparisonKey:
    """Descending bitonic sort; (l^2+l)/4 * T comparator calls at T = 2^l.

    Items beyond a non-power-of-two length are padded with the variant's
    minus-infinity sentinel and sink to the tail.
    """
    with sess.op("sec_srt"):
        sess.meter.invoke("sec_srt")
        if comparator is None or sentinel is None:
            if key.variant not in SORT_VARIANTS:
                raise ShapeError(f"no default comparator for variant {key.variant!r}")
            comparator, sentinel = SORT_VARIANTS[key.variant]
        ring = sess.ring
        t = key.length()
        size = 1 << (t - 1).bit_length()
        # working copies: the network scatters in place
        parts = {k: np.array(v, copy=True) for k, v in key.parts.items()}
        payload = None if key.payload is None else np.array(key.payload, copy=True)
        if size != t:
            pads = sentinel(sess)
            for name in parts:
                pad_val = const_share(sess, pads[name])
                pad = np.broadcast_to(pad_val, (size - t,) + parts[name].shape[1:]).copy()
                parts[name] = np.concatenate([parts[name], pad], axis=0)
            if payload is not None:
                pad_val = const_share(sess, ring.from_signed(-1))
                pad = np.broadcast_to(pad_val, (size - t,) + payload.shape[1:]).copy()
                payload = np.concatenate([payload, pad], axis=0)

        names = sorted(parts)
        k = 2
        while k <= size:
            j = k // 2
            while j >= 1:
                hi_idx, lo_idx, desc = _bitonic_stage(size, k, j)
                b = comparator(
                    sess,
                    {n: parts[n][hi_idx] for n in names},
                    {n: parts[n][lo_idx] for n in names},
                )
                sess.meter.invoke("comparator", len(hi_idx))
                sess.meter.invoke("sec_sel", len(hi_idx))
                # positions sorting ascending flip the comparator bit locally
                sign = np.where(desc, 1, -1)
                s = ring.mul(b, ring.from_signed(sign))
                if sess.party == 0:
                    s = ring.add(s, ring.from_signed(np.where(desc, 0, 1)))
                cols = [parts[n][hi_idx].copy() for n in names]
                lows = [parts[n][lo_idx].copy() for n in names]
                if payload is not None:
                    cols.append(payload[hi_idx].copy())
                    lows.append(payload[lo_idx].copy())
                diffs = [ring.sub(c, lo) for c, lo in zip(cols, lows)]
                flat_diffs = np.concatenate([d.reshape(len(hi_idx), -1) for d in diffs], axis=1)
                picked = _beaver_mul(sess, s[:, None], flat_diffs, truncate=False)
                picked = ring.add(picked, sess.draw_zero(flat_diffs.shape))
                pos = 0
                for idx, name in enumerate(names + (["__payload__"] if payload is not None else [])):
                    width = cols[idx].reshape(len(hi_idx), -1).shape[1]
                    chunk = picked[:, pos : pos + width].reshape(cols[idx].shape)
                    pos += width
                    new_hi = ring.add(lows[idx], chunk)
                    new_lo = ring.sub(ring.add(cols[idx], lows[idx]), new_hi)
                    if name == "__payload__":
                        payload[hi_idx] = new_hi
                        payload[lo_idx] = new_lo
                    else:
                        parts[name][hi_idx] = new_hi
                        parts[name][lo_idx] = new_lo
                j //= 2
            k *= 2
        return ComparisonKey(key.variant, parts, payload)


def _bitonic_stage(size: int, k: int, j: int):
    """Disjoint compare-exchange pairs for one (k, j) stage."""
    i = np.arange(size)
    l = i ^ j
    take = l > i
    hi = i[take]
    lo = l[take]
    desc = (hi & k) == 0  # these blocks keep the larger item on top
    return hi, lo, desc


# -- division ------------------------------------------------------------------


def div_iterations(codec) -> int:
    """Quotient bit count: dividends are bounded by 2^(2p + e - 1)."""
    return 2 * codec.precision_p + codec.range_e - 1


def sec_div(sess: Session, u, v) -> np.ndarray:
    """Fixed-point quotient round toward zero of (u << p) / v.

    Sign-magnitude long division on XOR-shared bits; exact given v != 0
    and a representable quotient. The circuit produces garbage on v = 0,
    so callers guard the domain at the plaintext level.
    """
    with sess.op("sec_div"):
        u, v = _broadcast(u, v)
        sess.meter.invoke("sec_div", int(u.size))
        width = sess.codec.word_bits
        p = sess.codec.precision_p

        bits_u = _a2b(sess, u)
        bits_v = _a2b(sess, v)
        s_u = bits_u[..., -1].copy()
        s_v = bits_v[..., -1].copy()
        au = _cond_negate(sess, bits_u, s_u)
        av = _cond_negate(sess, bits_v, s_v)

        # dividend = |u| << p, safe because |u| * 2^p < 2^(width-1)
        dividend = np.zeros_like(au)
        dividend[..., p:] = au[..., : width - p]

        neg_av = _bool_not(sess, av)
        remainder = np.zeros_like(au)
        quot = np.zeros_like(au)
        for i in range(div_iterations(sess.codec) - 1, -1, -1):
            shifted = np.zeros_like(remainder)
            shifted[..., 1:] = remainder[..., :-1]
            shifted[..., 0] = dividend[..., i]
            diff, carry = _adder(sess, shifted, neg_av, cin_public=1)
            mask = np.broadcast_to(carry[..., None], diff.shape).copy()
            swap = _bit_and(sess, mask, diff ^ shifted)
            remainder = shifted ^ swap
            quot[..., i] = carry
        s_q = s_u ^ s_v
        signed_q = _cond_negate(sess, quot, s_q)
        return _b2a_word(sess, signed_q)


# -- random invertible draws and masked inversion --------------------------------


def sec_ran_gen_inv(sess: Session, shape=(), *, tries: int = 16, cond_bound: float = 1e8):
    """Shared random value accepted only if provably invertible.

    Scalar mode draws full-ring values and rejects on a zero revealed
    product. Matrix mode draws encode-grid entries and rejects when the
    revealed masked product is ill conditioned.
    """
    with sess.op("sec_ran_gen_inv"):
        sess.meter.invoke("sec_ran_gen_inv")
        ring = sess.ring
        matrix = len(shape) == 2
        for _ in range(tries):
            if matrix:
                u = sess.draw_inv_mask(shape[0])
                w = sess.draw_inv_mask(shape[0])
                prod = _beaver_mul(sess, u, w, matmul=True, truncate=False)
                revealed = _open(sess, prod)
                dec = sess.codec.decode_at(revealed, 2 * sess.codec.precision_p)
                if np.isfinite(np.linalg.cond(dec)) and np.linalg.cond(dec) < cond_bound:
                    return u
            else:
                u = ring.rand(sess.rng, shape)
                w = ring.rand(sess.rng, shape)
                prod = _beaver_mul(sess, u, w, truncate=False)
                revealed = _open(sess, prod)
                if np.all(np.asarray(revealed) != 0):
                    return u
        raise SingularRevealError(f"no invertible draw in {tries} tries")


def _invert_longdouble(n: np.ndarray) -> np.ndarray:
    """Gauss-Jordan inverse at extended precision, partial pivoting."""
    m = n.shape[0]
    a = n.astype(np.longdouble).copy()
    inv = np.eye(m, dtype=np.longdouble)
    for col in range(m):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if a[piv, col] == 0:
            raise SingularRevealError("masked matrix is singular")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            inv[[col, piv]] = inv[[piv, col]]
        scale = a[col, col]
        a[col] /= scale
        inv[col] /= scale
        for row in range(m):
            if row != col:
                f = a[row, col]
                if f != 0:
                    a[row] -= f * a[col]
                    inv[row] -= f * inv[col]
    return inv


def sec_mi(sess: Session, x, *, tries: int = 8, cond_bound: float = 1e8) -> np.ndarray:
    """Masked inverse: reveal N = X*R, invert in the clear, return R * N^-1.

    The mask comes from the dealer with entries on [-1, 1); the clear-side
    inverse is computed at extended precision and re-encoded at 2p so the
    final public product only needs one truncation. Scalars are the 1x1
    case (the reciprocal used for curvature scalars).
    """
    with sess.op("sec_mi"):
        sess.meter.invoke("sec_mi")
        ring = sess.ring
        codec = sess.codec
        arr = np.asarray(x)
        scalar = arr.ndim == 0
        lanes = arr.ndim == 1
        if scalar:
            arr = arr.reshape(1)
        if arr.ndim == 1:
            m = 1
            mat = arr.reshape(-1, 1, 1)
        else:
            if arr.shape[-1] != arr.shape[-2]:
                raise ShapeError(f"sec_mi needs a square matrix, got {arr.shape}")
            m = arr.shape[-1]
            mat = arr.reshape((-1,) + arr.shape[-2:]) if arr.ndim > 2 else arr[None]

        two_p = 2 * codec.precision_p
        out = None
        for _ in range(tries):
            masks = np.stack([sess.draw_inv_mask(m) for _ in range(mat.shape[0])])
            prod = _beaver_mul(sess, mat, masks, matmul=True, truncate=False)
            revealed = _open(sess, prod)
            dec = codec.decode_at(revealed, two_p)
            ok = True
            for b in range(dec.shape[0]):
                cond = np.linalg.cond(dec[b]) if m > 1 else (np.inf if dec[b, 0, 0] == 0 else 1.0)
                if not np.isfinite(cond) or cond > cond_bound:
                    ok = False
                    break
            if not ok:
                continue
            inv_pub = np.stack([_invert_longdouble(dec[b]) for b in range(dec.shape[0])])
            enc = _encode_at(codec, inv_pub, two_p)
            res = ring.matmul(masks, enc)
            # one shift by 2p rather than two by p: a single rounding event
            sess.meter.add_truncations(res.size)
            out = _truncate_by(sess, res, two_p)
            break
        if out is None:
            raise SingularRevealError(f"masked product stayed singular after {tries} draws")
        if scalar:
            return out[0, 0, 0]
        if lanes:
            return out[:, 0, 0]
        return out.reshape(np.asarray(x).shape)


def _truncate_by(sess: Session, v: np.ndarray, bits: int) -> np.ndarray:
    ring = sess.ring
    if sess.party == 0:
        return ring.shift_right_logical(v, bits)
    return ring.neg(ring.shift_right_logical(ring.neg(v), bits))


def _encode_at(codec, values: np.ndarray, scale_bits: int) -> np.ndarray:
    vals = np.asarray(values, dtype=np.longdouble) * np.longdouble(2.0) ** scale_bits
    limit = np.longdouble(2.0) ** (codec.word_bits - 1)
    if np.any(np.abs(vals) >= limit):
        raise RangeError("value too large to re-encode at the extended scale")
    mag = np.floor(np.abs(vals) + 0.5)
    signed = np.where(vals < 0, -mag, mag)
    # int() on an integer-valued longdouble is exact; float64 casts are not
    flat = [int(v) & codec.ring.mask for v in signed.reshape(-1)]
    if codec.word_bits == 64:
        return np.array(flat, dtype=np.uint64).reshape(signed.shape)
    return np.array(flat, dtype=object).reshape(signed.shape)
