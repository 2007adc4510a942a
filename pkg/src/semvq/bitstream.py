"""Rate accounting and the ``.sqb`` bitstream.

Layout (big-endian header, 19 bytes)::

    magic    4s   b"SQGB"
    version  u8   1
    H, W     u16  image size, multiples of 16
    log2J    u8   codebook size exponent
    mode     u8   0 = fixed width, 1 = adaptive arithmetic, 2 = prefix code
    N_x, N_s u32  kept positions per grid

followed by ``payload_x || payload_s``.  Each grid is the row-major sequence
of its K symbols over the alphabet {-1, 0..J-1}.

* mode 0: every symbol in ``ceil(log2(J+1))`` bits, -1 written as J.
* mode 1: u32 byte length, then the range-coded symbol stream
  (see :mod:`semvq.rangecoder`).
* mode 2: ``0`` for -1, ``1`` + ``log2 J`` index bits otherwise; this spends
  exactly ``K + N log2 J`` bits, the linearised budget of :func:`bits_budget`.

Payloads are padded to whole bytes, independently per grid.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .rangecoder import decode_symbols, encode_symbols

MAGIC = b"SQGB"
VERSION = 1
HEADER = struct.Struct(">4sBHHBBII")
MODE_FIXED, MODE_ARITHMETIC, MODE_PREFIX = 0, 1, 2


class BitstreamError(ValueError):
    pass


class BadMagicError(BitstreamError):
    pass


class VersionError(BitstreamError):
    pass


class TruncatedError(BitstreamError):
    pass


class CountMismatchError(BitstreamError):
    pass


def h2(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def rate_upper_bound(m: float, J: int) -> float:
    """Bits per index: ``h2(m) + m log2 J``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"masking fraction must lie in [0, 1], got {m}")
    return h2(m) + m * math.log2(J)


def bits_budget(m: float, J: int, K: int) -> float:
    """``K (1 + m log2 J)``: the bound with ``h2`` replaced by 1."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"masking fraction must lie in [0, 1], got {m}")
    return K * (1 + m * math.log2(J))


def bpp_total(m_x: float, m_s: float, J: int = 1024, K: int | None = None, pixels: int | None = None) -> float:
    """Total bits per pixel for both pipelines.

    Without ``K``/``pixels`` the 16x16-pixels-per-latent case is assumed, which
    for J=1024 is ``(10 (m_x + m_s) + 2) / 256``.
    """
    if K is None or pixels is None:
        K, pixels = 1, 256
    return (bits_budget(m_x, J, K) + bits_budget(m_s, J, K)) / pixels


@dataclass
class RateReport:
    m_x: float
    m_s: float
    R_x: float
    R_s: float
    B_x: float
    B_s: float
    bpp: float
    actual_payload_bits: int = 0

    @classmethod
    def build(cls, m_x, m_s, J, H, W, payload_bits=0):
        K = (H // 16) * (W // 16)
        B_x, B_s = bits_budget(m_x, J, K), bits_budget(m_s, J, K)
        return cls(m_x, m_s, rate_upper_bound(m_x, J), rate_upper_bound(m_s, J),
                   B_x, B_s, (B_x + B_s) / (H * W), payload_bits)


@dataclass(frozen=True)
class BitstreamHeader:
    H: int
    W: int
    log2j: int
    mode: int
    n_x: int
    n_s: int
    version: int = VERSION

    @property
    def K(self) -> int:
        return (self.H // 16) * (self.W // 16)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.H // 16, self.W // 16

    @property
    def J(self) -> int:
        return 1 << self.log2j

    def pack(self) -> bytes:
        if self.H % 16 or self.W % 16:
            raise BitstreamError(f"H and W must be multiples of 16, got {self.H}x{self.W}")
        if self.mode not in (MODE_FIXED, MODE_ARITHMETIC, MODE_PREFIX):
            raise BitstreamError(f"unknown payload mode {self.mode}")
        return HEADER.pack(MAGIC, self.version, self.H, self.W, self.log2j, self.mode, self.n_x, self.n_s)

    @classmethod
    def unpack(cls, data: bytes) -> "BitstreamHeader":
        if len(data) < 4 or data[:4] != MAGIC:
            raise BadMagicError(f"bad magic {bytes(data[:4])!r}")
        if len(data) < HEADER.size:
            raise TruncatedError("truncated header")
        magic, version, H, W, log2j, mode, n_x, n_s = HEADER.unpack_from(data)
        if version != VERSION:
            raise VersionError(f"unsupported version {version}")
        if mode not in (MODE_FIXED, MODE_ARITHMETIC, MODE_PREFIX):
            raise BitstreamError(f"unknown payload mode {mode}")
        if H % 16 or W % 16:
            raise BitstreamError(f"H and W must be multiples of 16, got {H}x{W}")
        return cls(H, W, log2j, mode, n_x, n_s, version)


class BitWriter:
    def __init__(self):
        self.value = 0
        self.nbits = 0

    def write(self, value: int, width: int) -> None:
        self.value = (self.value << width) | value
        self.nbits += width

    def getvalue(self) -> bytes:
        pad = -self.nbits % 8
        return (self.value << pad).to_bytes((self.nbits + pad) // 8, "big")


class BitReader:
    def __init__(self, data: bytes):
        self.value = int.from_bytes(data, "big")
        self.total = 8 * len(data)
        self.pos = 0

    def read(self, width: int) -> int:
        if self.pos + width > self.total:
            raise TruncatedError("payload ended early")
        self.pos += width
        return (self.value >> (self.total - self.pos)) & ((1 << width) - 1)


def fixed_width(J: int) -> int:
    return math.ceil(math.log2(J + 1))


def _encode_grid(symbols: np.ndarray, log2j: int, mode: int) -> bytes:
    J = 1 << log2j
    if mode == MODE_ARITHMETIC:
        body = encode_symbols(symbols, log2j)
        return struct.pack(">I", len(body)) + body
    w = BitWriter()
    if mode == MODE_FIXED:
        width = fixed_width(J)
        for s in symbols:
            w.write(J if s < 0 else int(s), width)
    else:
        for s in symbols:
            if s < 0:
                w.write(0, 1)
            else:
                w.write((1 << log2j) | int(s), log2j + 1)
    return w.getvalue()


def _decode_grid(data: bytes, offset: int, K: int, log2j: int, mode: int):
    """Returns (symbols, new offset)."""
    J = 1 << log2j
    if mode == MODE_ARITHMETIC:
        if offset + 4 > len(data):
            raise TruncatedError("missing arithmetic payload length")
        (n,) = struct.unpack_from(">I", data, offset)
        offset += 4
        if offset + n > len(data):
            raise TruncatedError(f"arithmetic payload needs {n} bytes, {len(data) - offset} left")
        syms = decode_symbols(bytes(data[offset:offset + n]), K, log2j)
        return np.array(syms, dtype=np.int64), offset + n
    if mode == MODE_FIXED:
        nbytes = (K * fixed_width(J) + 7) // 8
        if offset + nbytes > len(data):
            raise TruncatedError(f"fixed payload needs {nbytes} bytes, {len(data) - offset} left")
        r = BitReader(data[offset:offset + nbytes])
        syms = []
        for _ in range(K):
            v = r.read(fixed_width(J))
            if v > J:
                raise BitstreamError(f"symbol {v} outside alphabet")
            syms.append(-1 if v == J else v)
        return np.array(syms, dtype=np.int64), offset + nbytes
    r = BitReader(data[offset:])
    syms = []
    for _ in range(K):
        syms.append(r.read(log2j) if r.read(1) else -1)
    return np.array(syms, dtype=np.int64), offset + (r.pos + 7) // 8


def serialize(ix: np.ndarray, is_: np.ndarray, header: BitstreamHeader) -> bytes:
    """Header followed by the x payload and the s payload."""
    out = [header.pack()]
    for grid, n in ((ix, header.n_x), (is_, header.n_s)):
        grid = np.asarray(grid)
        if grid.shape != header.grid_shape:
            raise CountMismatchError(f"grid shape {grid.shape} != {header.grid_shape}")
        if grid.min() < -1 or grid.max() >= header.J:
            raise BitstreamError(f"index outside [-1, {header.J - 1}]")
        kept = int((grid >= 0).sum())
        if kept != n:
            raise CountMismatchError(f"grid keeps {kept} positions, header says {n}")
        out.append(_encode_grid(grid.ravel(), header.log2j, header.mode))
    return b"".join(out)


def deserialize(data: bytes):
    """Inverse of :func:`serialize`: ``(ix, is_, header)``."""
    header = BitstreamHeader.unpack(data)
    offset = HEADER.size
    grids = []
    for n in (header.n_x, header.n_s):
        syms, offset = _decode_grid(data, offset, header.K, header.log2j, header.mode)
        kept = int((syms >= 0).sum())
        if kept != n:
            raise CountMismatchError(f"decoded grid keeps {kept} positions, header says {n}")
        grids.append(syms.reshape(header.grid_shape))
    if offset != len(data):
        raise BitstreamError(f"{len(data) - offset} trailing bytes after payload")
    return grids[0], grids[1], header


def payload_bits(data: bytes) -> int:
    return 8 * (len(data) - HEADER.size)


def grid_payload_bytes(grid: np.ndarray, log2j: int, mode: int) -> int:
    """Size of one grid's payload; for mode 1 the length prefix is excluded."""
    n = len(_encode_grid(np.asarray(grid).ravel(), log2j, mode))
    return n - 4 if mode == MODE_ARITHMETIC else n
