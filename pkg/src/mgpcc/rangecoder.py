"""Binary arithmetic range coder over 16-bit cumulative frequency tables.

32-bit windowed arithmetic coding: the encoder narrows [low, high] per
symbol and emits leading bits as they settle, with pending-underflow
tracking; the decoder mirrors the updates.  Termination appends the
disambiguation bit plus a zero tail long enough that a complete stream is
never read past its end, which makes "decoder ran out of bits" a reliable
truncation signal.
"""

from __future__ import annotations

import numpy as np

STATE_SIZE = 32
_MASK = (1 << STATE_SIZE) - 1
_TOP = 1 << (STATE_SIZE - 1)
_SECOND = _TOP >> 1

CDF_TOTAL = 1 << 16


class CdfTable:
    """Cumulative symbol counts: cum[0]=0 < cum[1] < ... < cum[n]=65536."""

    def __init__(self, cum):
        cum = np.asarray(cum, dtype=np.int64)
        if cum.ndim != 1 or len(cum) < 2:
            raise ValueError(f"cdf must be 1-D with >= 2 entries, got shape {cum.shape}")
        if cum[0] != 0 or cum[-1] != CDF_TOTAL:
            raise ValueError(f"cdf must span [0, {CDF_TOTAL}], got [{cum[0]}, {cum[-1]}]")
        if np.any(np.diff(cum) < 1):
            raise ValueError("cdf must be strictly increasing")
        self.cum = cum

    @property
    def num_symbols(self) -> int:
        return len(self.cum) - 1

    @classmethod
    def from_pmf(cls, pmf) -> "CdfTable":
        counts = quantize_pmf_batch(np.asarray(pmf, dtype=np.float64)[None, :])[0]
        cum = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=cum[1:])
        return cls(cum)

    @classmethod
    def uniform(cls, n: int) -> "CdfTable":
        if n < 1 or CDF_TOTAL % n != 0:
            raise ValueError(f"uniform table needs n dividing {CDF_TOTAL}, got {n}")
        return cls(np.arange(n + 1, dtype=np.int64) * (CDF_TOTAL // n))


def quantize_pmf_batch(pmf: np.ndarray) -> np.ndarray:
    """Quantize rows of probabilities to integer counts summing to 65536.

    Every bin gets at least one count so the coder can represent any
    in-support symbol.  Largest-remainder apportionment, deterministic
    tie-breaking by bin index.
    """
    p = np.asarray(pmf, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected (rows, bins), got shape {p.shape}")
    rows, n = p.shape
    if n < 1 or n > CDF_TOTAL:
        raise ValueError(f"bins per row must be in [1, {CDF_TOTAL}], got {n}")
    if np.any(p < 0) or np.any(~np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    sums = p.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("each pmf row must have positive mass")
    target = p / sums * CDF_TOTAL
    floor = np.floor(target)
    counts = np.maximum(floor.astype(np.int64), 1)
    diff = CDF_TOTAL - counts.sum(axis=1)

    over = diff > 0  # distribute surplus to the largest remainders
    if np.any(over):
        rem = np.where(counts == floor, target - floor, -1.0)  # clipped bins wait
        order = np.argsort(-rem[over], axis=1, kind="stable")
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.broadcast_to(np.arange(n), order.shape), 1)
        counts[over] += ranks < diff[over, None]

    while np.any(diff < 0):  # rare: reclaim the deficit from the largest bins
        under = diff < 0
        rows_u = np.flatnonzero(under)
        j = counts[rows_u].argmax(axis=1)
        take = np.minimum(counts[rows_u, j] - 1, -diff[rows_u])
        counts[rows_u, j] -= take
        diff[rows_u] += take

    return counts


class _BitOutput:
    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._n = 0

    def write(self, bit: int):
        self._acc = (self._acc << 1) | bit
        self._n += 1
        if self._n == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._n = 0

    def finish(self) -> bytes:
        while self._n:
            self.write(0)
        return bytes(self._bytes)


class _BitInput:
    """MSB-first bit reader; counts reads past the end of the data."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._cur = 0
        self._left = 0
        self.overrun = 0

    def read(self) -> int:
        if self._left == 0:
            if self._pos >= len(self._data):
                self.overrun += 1
                return 0
            self._cur = self._data[self._pos]
            self._pos += 1
            self._left = 8
        self._left -= 1
        return (self._cur >> self._left) & 1


def _cum_bounds(cum, symbol: int) -> tuple[int, int, int]:
    n = len(cum) - 1
    if not 0 <= symbol < n:
        raise ValueError(f"symbol {symbol} outside table support [0, {n})")
    return int(cum[symbol]), int(cum[symbol + 1]), n


class RangeEncoder:
    """Single-use encoder: encode() per symbol, then finish() for the bytes."""

    def __init__(self):
        self._low = 0
        self._high = _MASK
        self._underflow = 0
        self._out = _BitOutput()
        self._done = False

    def encode(self, table: CdfTable, symbol: int):
        if self._done:
            raise RuntimeError("encoder already finished")
        cum = table.cum if isinstance(table, CdfTable) else table
        symlow, symhigh, _ = _cum_bounds(cum, symbol)
        low, high = self._low, self._high
        span = high - low + 1
        self._high = low + symhigh * span // CDF_TOTAL - 1
        self._low = low + symlow * span // CDF_TOTAL
        out = self._out
        while ((self._low ^ self._high) & _TOP) == 0:
            bit = self._low >> (STATE_SIZE - 1)
            out.write(bit)
            flip = bit ^ 1
            for _ in range(self._underflow):
                out.write(flip)
            self._underflow = 0
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
        while (self._low & ~self._high & _SECOND) != 0:
            self._underflow += 1
            self._low = (self._low << 1) & (_MASK >> 1)
            self._high = ((self._high << 1) & (_MASK >> 1)) | _TOP | 1

    def finish(self) -> bytes:
        if self._done:
            raise RuntimeError("encoder already finished")
        self._done = True
        self._out.write(1)
        # zero tail: lets a decoder of an intact stream stop inside the data
        for _ in range(self._underflow + STATE_SIZE):
            self._out.write(0)
        return self._out.finish()


class RangeDecoder:
    """Single-use decoder over one payload."""

    def __init__(self, data: bytes):
        self._in = _BitInput(data)
        self._low = 0
        self._high = _MASK
        self._code = 0
        for _ in range(STATE_SIZE):
            self._code = (self._code << 1) | self._in.read()

    def decode(self, table: CdfTable) -> int:
        cum = table.cum if isinstance(table, CdfTable) else table
        span = self._high - self._low + 1
        value = ((self._code - self._low + 1) * CDF_TOTAL - 1) // span
        symbol = int(np.searchsorted(cum, value, side="right")) - 1
        symlow, symhigh, n = _cum_bounds(cum, symbol)
        low = self._low
        self._high = low + symhigh * span // CDF_TOTAL - 1
        self._low = low + symlow * span // CDF_TOTAL
        bits = self._in
        while ((self._low ^ self._high) & _TOP) == 0:
            self._code = ((self._code << 1) & _MASK) | bits.read()
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
        while (self._low & ~self._high & _SECOND) != 0:
            self._code = (self._code & _TOP) | ((self._code << 1) & (_MASK >> 1)) | bits.read()
            self._low = (self._low << 1) & (_MASK >> 1)
            self._high = ((self._high << 1) & (_MASK >> 1)) | _TOP | 1
        return symbol

    def check_complete(self):
        """Raise if decoding consumed bits past the end of the payload."""
        if self._in.overrun > 0:
            raise ValueError(
                f"truncated stream: decoder needed {self._in.overrun} bits past the end"
            )


def range_encode(symbols, cdfs) -> bytes:
    """Encode integer symbols; cdfs is one table or one table per symbol."""
    enc = RangeEncoder()
    if isinstance(cdfs, CdfTable):
        for s in symbols:
            enc.encode(cdfs, int(s))
    else:
        if len(cdfs) != len(symbols):
            raise ValueError(f"{len(cdfs)} tables for {len(symbols)} symbols")
        for table, s in zip(cdfs, symbols):
            enc.encode(table, int(s))
    return enc.finish()


def range_decode(data: bytes, cdfs, count: int) -> list[int]:
    """Decode `count` symbols; raises on truncated input."""
    dec = RangeDecoder(data)
    out = []
    if isinstance(cdfs, CdfTable):
        for _ in range(count):
            out.append(dec.decode(cdfs))
    else:
        if len(cdfs) != count:
            raise ValueError(f"{len(cdfs)} tables for {count} symbols")
        for table in cdfs:
            out.append(dec.decode(table))
    dec.check_complete()
    return out
