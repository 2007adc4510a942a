"""Binary range coder (32-bit, carry propagation) with KT-estimated bits.

The encoder is the LZMA-style ``low``/``range`` design: ``low`` may overflow
into bit 32, and the carry is pushed into the cached byte plus any pending
0xFF bytes.  The leading byte of that design is always zero and is not
emitted.  At flush the encoder picks the value in the final interval with
the most trailing zero bits and drops trailing zero bytes; the decoder reads
zeros past the end of its input.
"""

from __future__ import annotations

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class KTBit:
    """Krichevsky-Trofimov estimate for a binary source: P(0) = (n0 + 1/2) / (n + 1)."""

    __slots__ = ("n0", "n1")

    def __init__(self):
        self.n0 = 0
        self.n1 = 0

    def p0(self) -> int:
        p = ((2 * self.n0 + 1) << PROB_BITS) // (2 * (self.n0 + self.n1) + 2)
        return min(max(p, 1), PROB_ONE - 1)

    def update(self, bit: int) -> None:
        if bit:
            self.n1 += 1
        else:
            self.n0 += 1


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, bit: int, p0: int) -> None:
        bound = (self.range >> PROB_BITS) * p0
        if bit:
            self.low += bound
            self.range -= bound
        else:
            self.range = bound
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        hi = self.low + self.range - 1
        for k in range(32, -1, -1):
            step = 1 << k
            v = (self.low + step - 1) & ~(step - 1)
            if v <= hi:
                self.low = v
                break
        for _ in range(5):
            self._shift_low()
        data = bytes(self.out[1:])
        return data.rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def decode(self, p0: int) -> int:
        bound = (self.range >> PROB_BITS) * p0
        if self.code < bound:
            self.range = bound
            bit = 0
        else:
            self.code -= bound
            self.range -= bound
            bit = 1
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & MASK32
        return bit


class SymbolModel:
    """Adaptive model for the sentinel alphabet {-1, 0, ..., J-1}.

    Each symbol is one kept/discarded decision followed, for kept positions,
    by the ``log2 J`` bits of the codeword index (MSB first), each bit depth
    with its own KT estimator.
    """

    def __init__(self, log2j: int):
        self.log2j = log2j
        self.flag = KTBit()
        self.bits = [KTBit() for _ in range(log2j)]

    def encode(self, enc: RangeEncoder, symbol: int) -> None:
        kept = int(symbol >= 0)
        enc.encode(kept, self.flag.p0())
        self.flag.update(kept)
        if kept:
            for d in range(self.log2j):
                b = (symbol >> (self.log2j - 1 - d)) & 1
                enc.encode(b, self.bits[d].p0())
                self.bits[d].update(b)

    def decode(self, dec: RangeDecoder) -> int:
        kept = dec.decode(self.flag.p0())
        self.flag.update(kept)
        if not kept:
            return -1
        symbol = 0
        for d in range(self.log2j):
            b = dec.decode(self.bits[d].p0())
            self.bits[d].update(b)
            symbol = (symbol << 1) | b
        return symbol


def encode_symbols(symbols, log2j: int) -> bytes:
    enc = RangeEncoder()
    model = SymbolModel(log2j)
    for sym in symbols:
        model.encode(enc, int(sym))
    return enc.finish()


def decode_symbols(data: bytes, count: int, log2j: int) -> list[int]:
    dec = RangeDecoder(data)
    model = SymbolModel(log2j)
    return [model.decode(dec) for _ in range(count)]
