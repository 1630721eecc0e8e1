"""Exponent-only floating point (EOFP) quantization.

A float32 value is ``(-1)**S * 2**(Exp - 127) * Man``.  EOFP keeps the sign
and a window of the biased exponent and drops every mantissa bit, so each
element costs ``total_bits = 1 + exponent_bits``.

Encoding used here (per tensor, or per row when ``rows=True``):

* exponent code 0 is reserved for exact zero;
* codes ``1 .. 2**eb - 1`` map to biased exponents
  ``top - (2**eb - 1) + code``, where ``top`` is the largest biased exponent
  present in the tensor and is stored once in the header;
* values whose exponent falls below the window are flushed to the zero code
  and counted in ``QuantizedTensor.overflow``;
* the 1-bit mode stores only signs; magnitudes dequantize to the median of
  the non-zero input magnitudes, and exact zeros are kept as an index list
  in the header.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

BIAS = 127
SUPPORTED_BITS = (1, 3, 5, 7, 9, 32)

_MAGIC = b"EOFP"
_VERSION = 1


@dataclass(frozen=True)
class Float32Fields:
    sign: int
    biased_exponent: int
    mantissa: int
    bias: int = BIAS

    @property
    def mantissa_value(self) -> float:
        """Significand as a decimal, including the implicit leading one for normals."""
        lead = 0.0 if self.biased_exponent == 0 else 1.0
        return lead + self.mantissa / float(1 << 23)

    @property
    def value(self) -> float:
        exp = max(self.biased_exponent, 1) - self.bias
        return (-1.0) ** self.sign * 2.0 ** exp * self.mantissa_value

    @property
    def bits(self) -> int:
        return (self.sign << 31) | (self.biased_exponent << 23) | self.mantissa


def float_to_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def bits_to_float(bits: int) -> float:
    return struct.unpack("<f", struct.pack("<I", bits & 0xFFFFFFFF))[0]


def decompose(x: float) -> Float32Fields:
    """Split a float32 value into sign, biased exponent and mantissa fields."""
    if not np.isfinite(x):
        raise ValueError(f"cannot decompose non-finite value {x!r}")
    bits = float_to_bits(x)
    return Float32Fields(bits >> 31, (bits >> 23) & 0xFF, bits & 0x7FFFFF)


def decompose_bits(bits: int) -> Float32Fields:
    fields = Float32Fields(bits >> 31 & 1, (bits >> 23) & 0xFF, bits & 0x7FFFFF)
    if fields.biased_exponent == 0xFF:
        raise ValueError(f"bit pattern {bits:#010x} is not a finite float")
    return fields


def recompose(fields: Float32Fields) -> float:
    if not (0 <= fields.biased_exponent < 0xFF and 0 <= fields.mantissa < (1 << 23)):
        raise ValueError(f"invalid float32 fields {fields}")
    return bits_to_float(fields.bits)


def split_fields(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`decompose`: returns (sign, biased exponent, mantissa) arrays."""
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    return bits >> 31, (bits >> 23) & 0xFF, bits & 0x7FFFFF


@dataclass(frozen=True)
class EofpSpec:
    total_bits: int = 3

    def __post_init__(self):
        if self.total_bits not in SUPPORTED_BITS:
            raise ValueError(f"total_bits must be one of {SUPPORTED_BITS}, got {self.total_bits}")

    @property
    def exponent_bits(self) -> int:
        return 8 if self.total_bits == 32 else self.total_bits - 1

    @property
    def identity(self) -> bool:
        return self.total_bits == 32


@dataclass
class QuantizedTensor:
    spec: EofpSpec
    shape: tuple[int, ...]
    payload: bytes
    window_top: int = 0
    magnitude: float = 0.0
    zero_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    overflow: int = 0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def to_bytes(self) -> bytes:
        """Serialise (little-endian).

        Layout: ``b"EOFP"``, u16 version, u8 total_bits, u8 ndim, u32[ndim]
        shape, u8 window_top, f32 magnitude, u64 overflow, u32 zero count,
        u32[count] zero indices, u32 payload length, payload.  Payload codes
        are written MSB first, ``total_bits`` per element, zero-padded to a
        byte boundary.
        """
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<HBB", _VERSION, self.spec.total_bits, len(self.shape)))
        buf.write(struct.pack(f"<{len(self.shape)}I", *self.shape))
        buf.write(struct.pack("<BfQI", self.window_top, self.magnitude, self.overflow, len(self.zero_index)))
        buf.write(np.asarray(self.zero_index, dtype="<u4").tobytes())
        buf.write(struct.pack("<I", len(self.payload)))
        buf.write(self.payload)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedTensor":
        if data[:4] != _MAGIC:
            raise ValueError("not an EOFP tensor (bad magic)")
        version, total_bits, ndim = struct.unpack_from("<HBB", data, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported EOFP version {version}")
        off = 8
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        top, magnitude, overflow, nzero = struct.unpack_from("<BfQI", data, off)
        off += struct.calcsize("<BfQI")
        zero_index = np.frombuffer(data, dtype="<u4", count=nzero, offset=off).astype(np.uint32)
        off += 4 * nzero
        (plen,) = struct.unpack_from("<I", data, off)
        off += 4
        payload = data[off:off + plen]
        q = cls(EofpSpec(total_bits), tuple(shape), bytes(payload), top, magnitude, zero_index, overflow)
        _check_payload(q)
        return q


def _check_payload(q: QuantizedTensor) -> None:
    expected = (q.size * q.spec.total_bits + 7) // 8
    if len(q.payload) != expected:
        raise ValueError(f"corrupt payload: {len(q.payload)} bytes, expected {expected}")


def _pack_codes(codes: np.ndarray, nbits: int) -> bytes:
    shifts = np.arange(nbits - 1, -1, -1, dtype=np.uint32)
    bits = ((codes.astype(np.uint32)[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def _unpack_codes(payload: bytes, count: int, nbits: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count * nbits)
    bits = bits.reshape(count, nbits).astype(np.uint32)
    weights = (1 << np.arange(nbits - 1, -1, -1)).astype(np.uint32)
    return bits @ weights


def _validate(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("EOFP quantization requires finite values")
    return x


def _window_codes(rows: np.ndarray, eb: int):
    """Exponent codes for a 2-D array, one window per row.

    Returns (sign, code, top per row, underflow count).
    """
    sign, exp, _ = split_fields(rows)
    exp = exp.astype(np.int64)
    top = exp.max(axis=1, keepdims=True)
    offset = exp - (top - ((1 << eb) - 1))
    nonzero = exp > 0  # zeros and subnormals have biased exponent 0
    in_window = nonzero & (offset >= 1)
    code = np.where(in_window, offset, 0)
    # the zero code carries no sign
    sign = np.where(in_window, sign, 0)
    return sign.astype(np.uint32), code.astype(np.uint32), top[:, 0], int(np.sum(nonzero & ~in_window))


def _dequantize_codes(sign, code, top, eb):
    exp = np.asarray(top, dtype=np.int64)[:, None] - ((1 << eb) - 1) + code.astype(np.int64)
    bits = (sign.astype(np.uint32) << 31) | (np.clip(exp, 0, 254).astype(np.uint32) << 23)
    out = bits.view(np.float32)
    return np.where(code == 0, np.float32(0.0), out)


def _sign_magnitude(rows: np.ndarray) -> np.ndarray:
    mags = np.abs(rows)
    out = np.zeros(rows.shape[0], dtype=np.float32)
    for i, row in enumerate(mags):
        nz = row[row != 0]
        if nz.size:
            out[i] = np.float32(np.median(nz))
    return out


def eofp_quantize(x, spec: EofpSpec | int) -> QuantizedTensor:
    """Quantize a tensor to EOFP codes with a single shared exponent window."""
    spec = spec if isinstance(spec, EofpSpec) else EofpSpec(int(spec))
    x = _validate(x)
    shape = tuple(int(s) for s in x.shape)
    flat = x.reshape(1, -1)
    if spec.identity:
        return QuantizedTensor(spec, shape, flat.astype("<f4").tobytes())
    if spec.total_bits == 1:
        sign, _, _ = split_fields(flat)
        zeros = np.flatnonzero(flat[0] == 0).astype(np.uint32)
        magnitude = float(_sign_magnitude(flat)[0])
        return QuantizedTensor(spec, shape, _pack_codes(sign[0], 1), magnitude=magnitude, zero_index=zeros)
    eb = spec.exponent_bits
    if flat.size == 0:
        return QuantizedTensor(spec, shape, b"")
    sign, code, top, underflow = _window_codes(flat, eb)
    codes = (sign[0] << eb) | code[0]
    return QuantizedTensor(spec, shape, _pack_codes(codes, spec.total_bits), int(top[0]), overflow=underflow)


def eofp_dequantize(q: QuantizedTensor) -> np.ndarray:
    """Rebuild float32 values from an EOFP payload."""
    _check_payload(q)
    n, tb = q.size, q.spec.total_bits
    if q.spec.identity:
        return np.frombuffer(q.payload, dtype="<f4").astype(np.float32).reshape(q.shape)
    codes = _unpack_codes(q.payload, n, tb)
    if tb == 1:
        out = np.where(codes == 1, -q.magnitude, q.magnitude).astype(np.float32)
        out[np.asarray(q.zero_index, dtype=np.int64)] = 0.0
        return out.reshape(q.shape)
    eb = q.spec.exponent_bits
    sign = codes >> eb
    code = codes & ((1 << eb) - 1)
    return _dequantize_codes(sign[None], code[None], [q.window_top], eb)[0].reshape(q.shape)


def quantize_dequantize(x, total_bits: int, rows: bool = False) -> np.ndarray:
    """Round-trip ``x`` through EOFP without materialising the payload.

    With ``rows=True`` every slice along the last axis gets its own window
    (used for per-frame latent vectors); otherwise the whole tensor shares one.
    Matches ``eofp_dequantize(eofp_quantize(x, total_bits))`` exactly.
    """
    spec = EofpSpec(total_bits)
    x = _validate(x)
    if spec.identity:
        return x.copy()
    shape = x.shape
    flat = x.reshape(-1, shape[-1]) if rows and x.ndim else x.reshape(1, -1)
    if flat.size == 0:
        return x.copy()
    if total_bits == 1:
        mag = _sign_magnitude(flat)[:, None]
        out = np.where(np.signbit(flat), -mag, mag)
        out = np.where(flat == 0, np.float32(0.0), out).astype(np.float32)
        return out.reshape(shape)
    eb = spec.exponent_bits
    sign, code, top, _ = _window_codes(flat, eb)
    return _dequantize_codes(sign, code, top, eb).reshape(shape)


@dataclass(frozen=True)
class CompressionReport:
    """Exact rational compression ratios; ``float(report.r_comp)`` for display."""

    r_color: Fraction
    r_res: Fraction
    r_qua: Fraction

    @property
    def r_comp(self) -> Fraction:
        return self.r_color * self.r_res * self.r_qua


def compression_ratio(src, dst) -> CompressionReport:
    """Size ratio between two visual pipeline settings.

    ``src``/``dst`` need ``channels``, ``resolution`` and ``image_bits``
    attributes (a :class:`avse.crq.CrqConfig` works).
    """
    pairs = [(src.channels, dst.channels), (src.resolution, dst.resolution), (src.image_bits, dst.image_bits)]
    for a, b in pairs:
        if a <= 0 or b <= 0:
            raise ValueError(f"dimensions and bit widths must be positive, got {a} and {b}")
    return CompressionReport(
        Fraction(src.channels, dst.channels),
        Fraction(src.resolution ** 2, dst.resolution ** 2),
        Fraction(src.image_bits, dst.image_bits),
    )
