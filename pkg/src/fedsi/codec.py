"""Modulo quantizer with decoder-side information.

The encoder stochastically rounds ``x / eps`` to a neighbouring integer and
sends only its residue modulo ``s``.  The decoder picks the point of the
coset ``{(z*s + m) * eps : z in Z}`` nearest to its side information ``h``.
As long as ``s * eps >= 2 * (eps + |x - h|)`` the right coset point is
recovered, so the reconstruction is unbiased with error below ``eps``.

Vector inputs are quantized coordinate by coordinate with a shared lattice
width ``eps = 2 * delta / (s - 2)`` where ``delta`` is the distance between
the input and the side information under the chosen norm.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np


class CodecError(ValueError):
    """Invalid parameters, malformed messages or bad inputs to the codec."""


class NormMode(str, enum.Enum):
    L2 = "l2"
    LINF = "linf"

    @classmethod
    def parse(cls, value: "str | NormMode") -> "NormMode":
        if isinstance(value, NormMode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise CodecError(f"unknown norm mode {value!r}; expected 'l2' or 'linf'") from None


def norm(v: np.ndarray, mode: NormMode) -> float:
    if mode is NormMode.L2:
        return float(np.linalg.norm(v))
    return float(np.max(np.abs(v))) if v.size else 0.0


def bits_per_bin(s: int) -> int:
    """ceil(log2(s)), computed exactly on integers."""
    if s < 1:
        raise CodecError(f"resolution must be a positive integer, got {s}")
    return (int(s) - 1).bit_length()


def lattice_width(delta: float, s: int) -> float:
    return 2.0 * delta / (s - 2)


@dataclass(frozen=True)
class QuantizerParams:
    s: int
    epsilon: float
    delta_prime: float = 0.0
    norm_mode: NormMode = NormMode.L2

    def __post_init__(self):
        if int(self.s) != self.s or self.s < 1:
            raise CodecError(f"s must be a positive integer, got {self.s}")
        if not (np.isfinite(self.epsilon) and np.isfinite(self.delta_prime)):
            raise CodecError("epsilon and delta_prime must be finite")
        if self.epsilon < 0 or self.delta_prime < 0:
            raise CodecError("epsilon and delta_prime must be nonnegative")
        if (self.epsilon == 0) != (self.delta_prime == 0):
            raise CodecError("epsilon is zero exactly when delta_prime is zero")

    @classmethod
    def for_distance(cls, delta_prime: float, s: int, norm_mode=NormMode.L2) -> "QuantizerParams":
        """Parameters with eps = 2 * delta' / (s - 2), the tightest feasible width."""
        if s < 3:
            raise CodecError(f"s must be at least 3 for the distance-derived width, got {s}")
        return cls(s=s, epsilon=lattice_width(delta_prime, s), delta_prime=delta_prime,
                   norm_mode=NormMode.parse(norm_mode))

    @property
    def feasible(self) -> bool:
        """Whether s*eps >= 2*(eps + delta') holds (up to rounding in eps itself)."""
        if self.epsilon == 0:
            return True
        lhs = self.s * self.epsilon
        rhs = 2.0 * (self.epsilon + self.delta_prime)
        return lhs >= rhs * (1.0 - 1e-12)


# -- scalar lattice primitives (vectorized over numpy arrays) -----------------


def encode_bins(x, epsilon: float, s: int, uniforms) -> np.ndarray:
    """Stochastic rounding of ``x / epsilon`` followed by reduction modulo ``s``.

    ``uniforms`` supplies one U[0, 1) draw per element; the upper neighbour is
    chosen when the draw falls below the fractional part.
    """
    if not epsilon > 0:
        raise CodecError(f"epsilon must be positive, got {epsilon}")
    scaled = np.asarray(x, dtype=np.float64) / epsilon
    lower = np.floor(scaled)
    level = lower + (np.asarray(uniforms) < scaled - lower)
    return np.mod(level.astype(np.int64), s)


def decode_bins(bins, h, epsilon: float, s: int) -> np.ndarray:
    """Coset point nearest to ``h`` for each bin; ties go to the smaller point."""
    if not epsilon > 0:
        raise CodecError(f"epsilon must be positive, got {epsilon}")
    bins = np.asarray(bins, dtype=np.int64)
    if bins.size and (bins.min() < 0 or bins.max() >= s):
        raise CodecError(f"bin out of range [0, {s})")
    h = np.asarray(h, dtype=np.float64)
    z0 = np.round((h / epsilon - bins) / s)
    best = None
    best_dist = None
    # candidates visited in increasing order, strict '<' keeps the smaller on ties
    for dz in (-1.0, 0.0, 1.0):
        cand = ((z0 + dz) * s + bins) * epsilon
        dist = np.abs(cand - h)
        if best is None:
            best, best_dist = cand, dist
        else:
            closer = dist < best_dist
            best = np.where(closer, cand, best)
            best_dist = np.where(closer, dist, best_dist)
    return best


def mq_encode(x: float, params: QuantizerParams, rng: np.random.Generator) -> int:
    if not params.epsilon > 0:
        raise CodecError("scalar encoding needs epsilon > 0")
    if not np.isfinite(x):
        raise CodecError(f"cannot encode non-finite value {x}")
    return int(encode_bins(x, params.epsilon, params.s, rng.random()))


def mq_decode(bin: int, h: float, params: QuantizerParams) -> float:
    if not 0 <= bin < params.s:
        raise CodecError(f"bin {bin} out of range [0, {params.s})")
    return float(decode_bins(bin, h, params.epsilon, params.s))


# -- bit packing ----------------------------------------------------------------


def pack_bins(bins, s: int) -> bytes:
    """Fixed-width, MSB-first packing of bins, zero-padded to a whole byte."""
    width = bits_per_bin(s)
    bins = np.asarray(bins, dtype=np.int64).ravel()
    if bins.size and (bins.min() < 0 or bins.max() >= s):
        raise CodecError(f"bin out of range [0, {s})")
    if width == 0 or bins.size == 0:
        return b""
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    bits = ((bins[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def unpack_bins(data: bytes, d: int, s: int) -> np.ndarray:
    width = bits_per_bin(s)
    nbits = d * width
    if len(data) * 8 < nbits:
        raise CodecError(f"need {nbits} bits for {d} bins, got {len(data) * 8}")
    if nbits == 0:
        return np.zeros(d, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=nbits)
    weights = np.left_shift(np.int64(1), np.arange(width - 1, -1, -1, dtype=np.int64))
    bins = bits.reshape(d, width).astype(np.int64) @ weights
    if bins.max() >= s:
        raise CodecError(f"decoded bin out of range [0, {s})")
    return bins


# -- messages -------------------------------------------------------------------

_HEADER = struct.Struct("<IIBd")
HEADER_BITS = _HEADER.size * 8


@dataclass
class EncodedGradient:
    """Quantized upload: bins plus the distance scalar and side-info flag."""

    bins: np.ndarray
    scale: float
    alpha: bool
    s: int
    d: int = field(init=False)

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64)
        self.d = int(self.bins.size)

    @property
    def payload_bits(self) -> int:
        return self.d * bits_per_bin(self.s)

    @property
    def header_bits(self) -> int:
        return HEADER_BITS

    @property
    def total_bits(self) -> int:
        return self.payload_bits + self.header_bits

    @property
    def epsilon(self) -> float:
        return lattice_width(self.scale, self.s)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(self.d, self.s, int(bool(self.alpha)), float(self.scale))
        return head + pack_bins(self.bins, self.s)

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["EncodedGradient", int]:
        """Parse one message from the front of ``data``; returns it and bytes consumed."""
        if len(data) < _HEADER.size:
            raise CodecError("truncated message header")
        d, s, alpha, scale = _HEADER.unpack_from(data)
        if alpha not in (0, 1):
            raise CodecError(f"alpha byte must be 0 or 1, got {alpha}")
        body = (d * bits_per_bin(s) + 7) // 8
        end = _HEADER.size + body
        if len(data) < end:
            raise CodecError("truncated message payload")
        bins = unpack_bins(data[_HEADER.size:end], d, s)
        return cls(bins=bins, scale=scale, alpha=bool(alpha), s=s), end


@dataclass
class RawGradient:
    """Uncompressed upload: float64 coordinates, no quantizer header."""

    values: np.ndarray
    alpha: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def d(self) -> int:
        return int(self.values.size)

    @property
    def payload_bits(self) -> int:
        return 64 * self.d

    @property
    def header_bits(self) -> int:
        return 0

    @property
    def total_bits(self) -> int:
        return self.payload_bits

    def to_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, d: int) -> tuple["RawGradient", int]:
        end = 8 * d
        if len(data) < end:
            raise CodecError("truncated raw gradient")
        return cls(np.frombuffer(data[:end], dtype="<f8").astype(np.float64)), end


# -- vector quantizer -------------------------------------------------------------


def _check_pair(x, h) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    h = np.asarray(h, dtype=np.float64).ravel()
    if x.shape != h.shape:
        raise CodecError(f"dimension mismatch: x has {x.size}, h has {h.size}")
    if x.size < 1:
        raise CodecError("cannot quantize an empty vector")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(h))):
        raise CodecError("non-finite coordinates")
    return x, h


def mqd_encode(x, h, s: int, norm_mode, rng: np.random.Generator,
               alpha: bool = True) -> EncodedGradient:
    """Quantize ``x`` against side information ``h`` known to the decoder.

    One uniform is drawn per coordinate, except when ``x == h`` exactly: the
    message then carries scale 0 and no randomness is consumed.
    """
    mode = NormMode.parse(norm_mode)
    if int(s) != s or s < 3:
        raise CodecError(f"s must be an integer >= 3, got {s}")
    s = int(s)
    x, h = _check_pair(x, h)
    delta = norm(x - h, mode)
    if delta == 0.0:
        return EncodedGradient(np.zeros(x.size, dtype=np.int64), 0.0, alpha, s)
    eps = lattice_width(delta, s)
    bins = encode_bins(x, eps, s, rng.random(x.size))
    return EncodedGradient(bins, delta, alpha, s)


def mqd_decode(msg: EncodedGradient, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).ravel()
    if h.size != msg.d:
        raise CodecError(f"dimension mismatch: message has {msg.d}, h has {h.size}")
    if msg.scale == 0.0:
        return h.copy()
    return decode_bins(msg.bins, h, msg.epsilon, msg.s)
