"""
Raw DEFLATE (RFC 1951) decompressor.

Handles stored, fixed-Huffman and dynamic-Huffman blocks. Huffman codes are
decoded through a lookup table indexed by the next ``max_len`` input bits, so
each symbol costs one dictionary-free list lookup.

Usage:
    from deflate_decoder import inflate

    raw = inflate(member_bytes, max_output=declared_size)
"""

from typing import List, Optional, Tuple


class InflateError(ValueError):
    """The compressed stream is malformed or truncated."""


# Length codes 257..285: (base length, extra bits)
_LENGTH_BASE = [3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31,
                35, 43, 51, 59, 67, 83, 99, 115, 131, 163, 195, 227, 258]
_LENGTH_EXTRA = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2,
                 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0]
# Distance codes 0..29
_DIST_BASE = [1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193,
              257, 385, 513, 769, 1025, 1537, 2049, 3073, 4097, 6145,
              8193, 12289, 16385, 24577]
_DIST_EXTRA = [0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6,
               7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13]
# Order in which code length code lengths are transmitted
_CLEN_ORDER = [16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15]

MAX_BITS = 15


class HuffmanTable:
    """Canonical Huffman code built from per-symbol code lengths."""

    def __init__(self, lengths: List[int]):
        self.max_len = max(lengths) if lengths else 0
        if self.max_len == 0:
            raise InflateError("Huffman code has no symbols")
        if self.max_len > MAX_BITS:
            raise InflateError(f"Huffman code length {self.max_len} exceeds {MAX_BITS}")

        counts = [0] * (self.max_len + 1)
        for length in lengths:
            counts[length] += 1
        counts[0] = 0
        left = 1
        for length in range(1, self.max_len + 1):
            left = (left << 1) - counts[length]
            if left < 0:
                raise InflateError("Huffman code is over-subscribed")

        next_code = [0] * (self.max_len + 2)
        code = 0
        for length in range(1, self.max_len + 1):
            code = (code + counts[length - 1]) << 1
            next_code[length] = code

        # (symbol, length); length 0 marks bit patterns no code maps to
        self.table: List[Tuple[int, int]] = [(0, 0)] * (1 << self.max_len)
        for symbol, length in enumerate(lengths):
            if length == 0:
                continue
            code = next_code[length]
            next_code[length] += 1
            reversed_code = int(format(code, f"0{length}b")[::-1], 2)
            for index in range(reversed_code, 1 << self.max_len, 1 << length):
                self.table[index] = (symbol, length)


_FIXED_LITLEN = HuffmanTable([8] * 144 + [9] * 112 + [7] * 24 + [8] * 8)
_FIXED_DIST = HuffmanTable([5] * 30)


class _BitReader:
    """LSB-first bit reader over an in-memory buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.bitbuf = 0
        self.bitcnt = 0

    def _fill(self, n: int) -> None:
        while self.bitcnt < n and self.pos < len(self.data):
            self.bitbuf |= self.data[self.pos] << self.bitcnt
            self.pos += 1
            self.bitcnt += 8

    def bits(self, n: int) -> int:
        if n == 0:
            return 0
        self._fill(n)
        if self.bitcnt < n:
            raise InflateError("Unexpected end of compressed stream")
        value = self.bitbuf & ((1 << n) - 1)
        self.bitbuf >>= n
        self.bitcnt -= n
        return value

    def symbol(self, code: HuffmanTable) -> int:
        self._fill(code.max_len)
        sym, length = code.table[self.bitbuf & ((1 << code.max_len) - 1)]
        if length == 0:
            raise InflateError("Invalid Huffman code in compressed stream")
        if length > self.bitcnt:
            raise InflateError("Unexpected end of compressed stream")
        self.bitbuf >>= length
        self.bitcnt -= length
        return sym

    def align(self) -> None:
        drop = self.bitcnt % 8
        self.bitbuf >>= drop
        self.bitcnt -= drop

    def raw_bytes(self, n: int) -> bytes:
        out = bytearray()
        while self.bitcnt and n:
            out.append(self.bits(8))
            n -= 1
        if self.pos + n > len(self.data):
            raise InflateError("Stored block runs past the end of the stream")
        out += self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)


def _read_dynamic_tables(reader: _BitReader) -> Tuple[HuffmanTable, HuffmanTable]:
    hlit = reader.bits(5) + 257
    hdist = reader.bits(5) + 1
    hclen = reader.bits(4) + 4
    if hlit > 286 or hdist > 30:
        raise InflateError(f"Too many length or distance codes ({hlit}, {hdist})")

    clen_lengths = [0] * 19
    for i in range(hclen):
        clen_lengths[_CLEN_ORDER[i]] = reader.bits(3)
    clen_code = HuffmanTable(clen_lengths)

    lengths: List[int] = []
    while len(lengths) < hlit + hdist:
        sym = reader.symbol(clen_code)
        if sym < 16:
            lengths.append(sym)
            continue
        if sym == 16:
            if not lengths:
                raise InflateError("Repeat code with no previous length")
            value, repeat = lengths[-1], 3 + reader.bits(2)
        elif sym == 17:
            value, repeat = 0, 3 + reader.bits(3)
        else:
            value, repeat = 0, 11 + reader.bits(7)
        if len(lengths) + repeat > hlit + hdist:
            raise InflateError("Code length repeat runs past the declared code count")
        lengths.extend([value] * repeat)

    litlen_lengths, dist_lengths = lengths[:hlit], lengths[hlit:]
    if litlen_lengths[256] == 0:
        raise InflateError("Dynamic block has no end-of-block code")
    if not any(dist_lengths):
        # only literals; any distance symbol would be invalid
        dist_lengths = [1]
    return HuffmanTable(litlen_lengths), HuffmanTable(dist_lengths)


def _inflate_block(reader: _BitReader, out: bytearray, litlen: HuffmanTable, dist: HuffmanTable,
                   max_output: Optional[int]) -> None:
    while True:
        sym = reader.symbol(litlen)
        if sym < 256:
            out.append(sym)
        elif sym == 256:
            return
        else:
            sym -= 257
            if sym >= len(_LENGTH_BASE):
                raise InflateError(f"Invalid length symbol {sym + 257}")
            length = _LENGTH_BASE[sym] + reader.bits(_LENGTH_EXTRA[sym])
            dsym = reader.symbol(dist)
            if dsym >= len(_DIST_BASE):
                raise InflateError(f"Invalid distance symbol {dsym}")
            distance = _DIST_BASE[dsym] + reader.bits(_DIST_EXTRA[dsym])
            if distance > len(out):
                raise InflateError(f"Distance {distance} reaches before the start of the output")
            start = len(out) - distance
            if distance >= length:
                out += out[start:start + length]
            else:
                out += (out[start:] * (length // distance + 1))[:length]
        if max_output is not None and len(out) > max_output:
            raise InflateError(f"Decompressed data exceeds the declared size of {max_output} bytes")


def inflate(data: bytes, max_output: Optional[int] = None) -> bytes:
    """Decompress a raw DEFLATE stream; bytes after the final block are ignored."""
    reader = _BitReader(bytes(data))
    out = bytearray()
    final = 0
    while not final:
        final = reader.bits(1)
        btype = reader.bits(2)
        if btype == 0:
            reader.align()
            length = reader.bits(16)
            nlength = reader.bits(16)
            if length != (~nlength & 0xFFFF):
                raise InflateError("Stored block length does not match its complement")
            out += reader.raw_bytes(length)
        elif btype == 1:
            _inflate_block(reader, out, _FIXED_LITLEN, _FIXED_DIST, max_output)
        elif btype == 2:
            litlen, dist = _read_dynamic_tables(reader)
            _inflate_block(reader, out, litlen, dist, max_output)
        else:
            raise InflateError("Reserved block type 3")
        if max_output is not None and len(out) > max_output:
            raise InflateError(f"Decompressed data exceeds the declared size of {max_output} bytes")
    return bytes(out)
