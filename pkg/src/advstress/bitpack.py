"""Bit-packed execution of binarized layers.

Sign vectors (+1/-1) are packed into 64-bit words, bit=1 encoding +1, and
inner products run as XNOR + population count: sum(a*b) = N - 2*popcount(
a XOR b). Results are integer-exact; a single float multiply by the layer
scale happens last, so packed outputs match the float reference on the
same +-1 tensors bit for bit.

Spatial padding inside binarized layers uses +1, consistent with the
sign(0) = +1 convention (a zero-padded input binarizes to +1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _im2col, make_op

WORD_BITS = 64

if hasattr(np, "bitwise_count"):
    _popcount = np.bitwise_count
else:  # numpy < 2.0
    _POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def _popcount(words):
        return _POP8[words.view(np.uint8)].reshape(*words.shape, 8).sum(axis=-1)


@dataclass(frozen=True)
class PackedBits:
    """Packed sign vector. Trailing pad bits are zero and never counted."""

    n: int
    words: np.ndarray  # uint64, ceil(n/64) entries

    def __eq__(self, other):
        return (
            isinstance(other, PackedBits)
            and self.n == other.n
            and np.array_equal(self.words, other.words)
        )


def _pack_rows(signs: np.ndarray) -> np.ndarray:
    """Pack the last axis of a +-1 array into uint64 words, LSB first."""
    bits = signs > 0
    *lead, n = bits.shape
    pad = (-n) % WORD_BITS
    if pad:
        bits = np.concatenate(
            [bits, np.zeros((*lead, pad), dtype=bool)], axis=-1
        )
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view(np.uint64)


def pack(signs) -> PackedBits:
    """Pack a vector whose elements are exactly +1.0 or -1.0."""
    arr = np.asarray(signs, dtype=np.float32).reshape(-1)
    if not np.all(np.abs(arr) == 1.0):
        bad = arr[np.abs(arr) != 1.0]
        raise ValueError(f"pack requires +-1 values, found {bad[:4]!r}")
    return PackedBits(n=arr.size, words=_pack_rows(arr))


def unpack(p: PackedBits) -> np.ndarray:
    bits = np.unpackbits(p.words.view(np.uint8), bitorder="little")[: p.n]
    return np.where(bits == 1, 1.0, -1.0).astype(np.float32)


def xnor_dot(a: PackedBits, b: PackedBits) -> int:
    """sum(a_i * b_i) over the N valid bits, via XNOR and popcount."""
    if a.n != b.n:
        raise ValueError(f"xnor_dot length mismatch: {a.n} vs {b.n}")
    mismatches = int(_popcount(a.words ^ b.words).sum())
    return a.n - 2 * mismatches


def xnor_dot_many(rows: np.ndarray, other: np.ndarray, n: int) -> np.ndarray:
    """Row-wise packed dots: rows [R, W] against other [W] or [R, W]."""
    mism = _popcount(rows ^ other).sum(axis=-1, dtype=np.int64)
    return n - 2 * mism


@dataclass(frozen=True)
class PackedConvWeights:
    """One binary weight basis of a conv layer, packed one row per filter."""

    out_channels: int
    in_channels: int
    kh: int
    kw: int
    rows: np.ndarray  # uint64 [out_channels, words]

    @property
    def k(self) -> int:
        return self.in_channels * self.kh * self.kw


def pack_conv_weights(signs: np.ndarray) -> PackedConvWeights:
    """Pack an OIHW tensor of +-1 weights, one packed row per filter."""
    if signs.ndim != 4:
        raise ValueError(f"expected OIHW weights, got shape {signs.shape}")
    if not np.all(np.abs(signs) == 1.0):
        raise ValueError("pack_conv_weights requires +-1 values")
    co, ci, kh, kw = signs.shape
    return PackedConvWeights(
        out_channels=co, in_channels=ci, kh=kh, kw=kw,
        rows=_pack_rows(signs.reshape(co, ci * kh * kw)),
    )


def binary_conv2d(
    input_signs: np.ndarray,
    weights: PackedConvWeights,
    alpha: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Convolution of +-1 inputs against packed +-1 weights, scaled by alpha.

    ``alpha`` has one entry per filter. Integer dot products are computed
    exactly; the scale multiplies once at the end. Spatial padding enters
    as +1.
    """
    if stride < 1:
        raise ValueError(f"binary_conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError("binary_conv2d padding must be >= 0")
    x = np.asarray(input_signs, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError(f"binary_conv2d expects NCHW input, got {x.shape}")
    if not np.all(np.abs(x) == 1.0):
        raise ValueError("binary_conv2d input must be +-1 (binarize first)")
    n, c, h, w = x.shape
    if c != weights.in_channels:
        raise ValueError(
            f"binary_conv2d channel mismatch: input has {c}, "
            f"weights expect {weights.in_channels}"
        )
    alpha = np.asarray(alpha, dtype=np.float32)
    if alpha.shape != (weights.out_channels,):
        raise ValueError(f"alpha shape {alpha.shape} != ({weights.out_channels},)")

    kh, kw = weights.kh, weights.kw
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=1.0)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("binary_conv2d output would be empty")

    cols = _im2col(x, kh, kw, stride, oh, ow)
    patches = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, weights.k)
    packed = _pack_rows(patches)

    dots = np.empty((n * oh * ow, weights.out_channels), dtype=np.int64)
    for f in range(weights.out_channels):
        dots[:, f] = xnor_dot_many(packed, weights.rows[f], weights.k)

    out = dots.astype(np.float32) * alpha[None, :]
    return np.ascontiguousarray(out.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2))


def sign_activation(x: Tensor) -> tuple[Tensor, PackedBits]:
    """Elementwise sign with sign(0) = +1, plus the packed form.

    Backward uses the straight-through estimator: the upstream gradient
    passes where |input| <= 1 and is zeroed elsewhere.
    """
    signs = np.where(x.data >= 0, 1.0, -1.0).astype(x.data.dtype)
    gate = np.abs(x.data) <= 1.0
    out = make_op(signs, (x,), lambda g: (g * gate,), "sign_activation")
    return out, PackedBits(n=signs.size, words=_pack_rows(signs.reshape(-1)))


def sign_tensor(x: Tensor) -> Tensor:
    """sign with STE backward, without materializing the packed form."""
    signs = np.where(x.data >= 0, 1.0, -1.0).astype(x.data.dtype)
    gate = np.abs(x.data) <= 1.0
    return make_op(signs, (x,), lambda g: (g * gate,), "sign_activation")


def sign_weights_ste(w: Tensor) -> Tensor:
    """sign(w) whose backward passes the gradient through unchanged.

    Used for latent weights of binarized layers: the sign projection is
    treated as identity in the backward pass so the latent copy keeps
    training (and white-box attacks get usable gradients).
    """
    signs = np.where(w.data >= 0, 1.0, -1.0).astype(w.data.dtype)
    return make_op(signs, (w,), lambda g: (g,), "sign_weights_ste")
