"""Append-only bit buffer and the matching reader.

Bits are packed MSB-first within each byte.  The writer keeps an exact
count of written bits so that coded rates can be reported without any
estimation; the reader raises :class:`CorruptBitstream` on overrun.
"""

from __future__ import annotations

from .errors import CorruptBitstream


class BitWriter:
    """MSB-first bit packer with exact length accounting."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self._cur = 0
        self._ncur = 0  # bits pending in _cur, 0..7
        self.bits_written = 0

    def write_bit(self, bit: int) -> None:
        self._cur = (self._cur << 1) | (bit & 1)
        self._ncur += 1
        self.bits_written += 1
        if self._ncur == 8:
            self._buf.append(self._cur)
            self._cur = 0
            self._ncur = 0

    def write_bits(self, value: int, count: int) -> None:
        """Write `count` bits of `value`, most significant first."""
        if count < 0 or (count < value.bit_length()):
            raise ValueError(f"value {value} does not fit in {count} bits")
        for i in range(count - 1, -1, -1):
            self.write_bit((value >> i) & 1)

    def write_bytes(self, data: bytes) -> None:
        if self._ncur == 0:
            self._buf.extend(data)
            self.bits_written += 8 * len(data)
        else:
            for b in data:
                self.write_bits(b, 8)

    def getvalue(self) -> bytes:
        """Finish the stream, zero-padding the final partial byte."""
        out = bytearray(self._buf)
        if self._ncur:
            out.append(self._cur << (8 - self._ncur))
        return bytes(out)


class BitReader:
    """Reader over the :class:`BitWriter` format."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0  # bit cursor
        self._nbits = 8 * len(data)

    @property
    def bits_consumed(self) -> int:
        return self._pos

    def read_bit(self) -> int:
        if self._pos >= self._nbits:
            raise CorruptBitstream("bitstream exhausted")
        byte = self._data[self._pos >> 3]
        bit = (byte >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit

    def read_bits(self, count: int) -> int:
        value = 0
        for _ in range(count):
            value = (value << 1) | self.read_bit()
        return value

    def read_bytes(self, count: int) -> bytes:
        if self._pos & 7 == 0:
            start = self._pos >> 3
            if start + count > len(self._data):
                raise CorruptBitstream("bitstream exhausted")
            self._pos += 8 * count
            return self._data[start : start + count]
        return bytes(self.read_bits(8) for _ in range(count))
