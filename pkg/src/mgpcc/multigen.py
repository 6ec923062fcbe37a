"""Repeated compress/decompress chains and their quality metrics.

A generation trace records bits per point and luma PSNR for each pass of a
codec over the same cloud. Derived columns quantify robustness: the
per-generation PSNR decrement, the drop relative to generation 1, and the
log-normalized drop convergence rate.

Recorded PSNR values are snapped to a 2^-40 dB grid (about 1e-12 dB) and
capped at 99.99 dB. Every recorded value then carries no mantissa bits below
2^-46 while staying under 2^7, so differences of recorded values and sums of
those differences are exact in float64: the drop at generation k equals the
sum of the deltas up to k bit for bit, on any trace.
"""

from __future__ import annotations

import math
import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .codec import Bitstream, CodecModel
from .codec import compress as codec_compress
from .codec import decompress as codec_decompress
from .pointcloud import PointCloud, y_channel
from .rangecoder import CdfTable, range_decode, range_encode

PSNR_CAP = 99.99

_PSNR_GRID = 2.0 ** 40

TRACE_COLUMNS = ("sequence", "method", "rate_point", "k", "bpp", "psnr_y",
                 "delta_psnr_y", "psnr_y_drop", "drop_convergence_rate",
                 "lossless_flag")

SUMMARY_FIRST_LAST_COLUMNS = ("sequence", "method", "rate_point", "bpp_1",
                              "psnr_y_1", "psnr_y_last", "psnr_y_drop_last")

SUMMARY_DELTA_KS = (2, 5, 10, 25, 50)


class MultigenError(RuntimeError):
    """A generation chain failed; the message names the failing generation."""


# ---------------------------------------------------------------------------
# Metrics

def psnr_y(a: PointCloud, b: PointCloud) -> float:
    """Luma PSNR in dB between two clouds with identical geometry.

    Lossless pairs give +inf. The squared-error sum uses exact summation so
    the value is independent of vectorization strategy.
    """
    if not np.array_equal(a.positions, b.positions):
        raise ValueError("geometry mismatch: clouds differ in positions or order")
    dy = y_channel(a.colors) - y_channel(b.colors)
    mse = math.fsum((dy * dy).tolist()) / len(dy)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _snap(p: float) -> float:
    return p if math.isinf(p) else round(p * _PSNR_GRID) / _PSNR_GRID


def _capped(p: float) -> float:
    return min(p, PSNR_CAP)


@dataclass
class GenerationTrace:
    """Per-generation record of one (cloud, codec) chain."""

    sequence: str
    method: str
    rate_point: str
    bpp: list = field(default_factory=list)
    psnr: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.bpp) != len(self.psnr):
            raise ValueError("bpp and psnr columns must have equal length")
        if any(b <= 0 for b in self.bpp):
            raise ValueError("bpp must be positive")

    @property
    def generations(self) -> int:
        return len(self.bpp)


def delta_psnr_y(trace: GenerationTrace, k: int) -> float:
    """PSNR-Y at generation k-1 minus at k; defined for k >= 2."""
    if not 2 <= k <= trace.generations:
        raise ValueError(f"k must be in [2, {trace.generations}], got {k}")
    return _capped(trace.psnr[k - 2]) - _capped(trace.psnr[k - 1])


def psnr_y_drop(trace: GenerationTrace, k: int) -> float:
    """Quality lost since generation 1; zero at k = 1."""
    if not 1 <= k <= trace.generations:
        raise ValueError(f"k must be in [1, {trace.generations}], got {k}")
    return _capped(trace.psnr[0]) - _capped(trace.psnr[k - 1])


def drop_convergence_rate(delta: float, max_drop: float) -> float:
    """ln(delta / max_drop); -inf marks a converged (zero-delta) generation,
    nan flags a negative delta (quality improved), undefined for the ratio."""
    if max_drop <= 0:
        raise ValueError(f"max_drop must be positive, got {max_drop}")
    if delta == 0.0:
        return -math.inf
    if delta < 0.0:
        return math.nan
    return math.log(delta / max_drop)


def max_drop_of(traces) -> float:
    """Largest drop over the whole comparison set (>= 0; k=1 contributes 0)."""
    return max(psnr_y_drop(t, k)
               for t in traces for k in range(1, t.generations + 1))


def average_dcr(traces, max_drop: float | None = None):
    """Mean finite drop-convergence-rate over all generations k >= 2.

    Returns None when every generation is converged or improving (no finite
    values to average), as happens for a lossless chain.
    """
    if max_drop is None:
        max_drop = max_drop_of(traces)
    values = []
    for t in traces:
        for k in range(2, t.generations + 1):
            if max_drop <= 0:
                continue
            v = drop_convergence_rate(delta_psnr_y(t, k), max_drop)
            if math.isfinite(v):
                values.append(v)
    if not values:
        return None
    return math.fsum(values) / len(values)


# ---------------------------------------------------------------------------
# Codecs under test

class LearnedCodec:
    """Adapter putting a trained model behind the byte-level chain interface."""

    def __init__(self, model: CodecModel):
        self.model = model

    def compress(self, cloud: PointCloud) -> bytes:
        return codec_compress(cloud, self.model).to_bytes()

    def decompress(self, data: bytes, geometry: PointCloud) -> PointCloud:
        return codec_decompress(Bitstream.from_bytes(data), geometry, self.model)


class IdempotentControlCodec:
    """Stateless lossless reference: one pass reproduces its input exactly.

    Attributes are carried as plain 8-bit symbols under a uniform prior, so
    the rate sits at 24 bits per point plus coder overhead and every
    generation beyond the first is a fixed point.
    """

    _MAGIC = b"CTRL"

    def compress(self, cloud: PointCloud) -> bytes:
        payload = range_encode(cloud.colors.reshape(-1).astype(np.int64),
                               CdfTable.uniform(256))
        return self._MAGIC + struct.pack("<I", len(cloud)) + payload

    def decompress(self, data: bytes, geometry: PointCloud) -> PointCloud:
        if data[:4] != self._MAGIC:
            raise ValueError("not a control-codec stream")
        (n,) = struct.unpack("<I", data[4:8])
        if n != len(geometry):
            raise ValueError(f"point count mismatch: stream has {n}, "
                             f"geometry has {len(geometry)}")
        symbols = range_decode(data[8:], CdfTable.uniform(256), 3 * n)
        return geometry.with_colors(
            np.asarray(symbols, dtype=np.uint8).reshape(-1, 3))


def make_idempotent_control() -> IdempotentControlCodec:
    return IdempotentControlCodec()


# ---------------------------------------------------------------------------
# The generation chain

def run_multigen(cloud: PointCloud, codec, generations: int,
                 sequence: str = "", method: str = "",
                 rate_point: str = "") -> GenerationTrace:
    """Chain compress/decompress `generations` times from `cloud`.

    Quality is always measured against the original. Codec failures abort
    with the failing generation index; geometry must survive every pass.
    """
    if generations < 1:
        raise ValueError(f"generations must be >= 1, got {generations}")
    trace = GenerationTrace(sequence=sequence, method=method,
                            rate_point=rate_point)
    current = cloud
    for k in range(1, generations + 1):
        try:
            data = codec.compress(current)
            current = codec.decompress(data, current)
        except Exception as exc:
            raise MultigenError(f"generation {k} failed: {exc}") from exc
        if not np.array_equal(current.positions, cloud.positions):
            raise MultigenError(f"generation {k} altered geometry")
        trace.bpp.append(8.0 * len(data) / len(cloud))
        trace.psnr.append(_snap(psnr_y(cloud, current)))
    return trace


# ---------------------------------------------------------------------------
# Trace CSV

def atomic_write_text(path: str, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def _dcr_cell(delta: float, max_drop: float) -> str:
    if max_drop <= 0:
        # the whole comparison set is lossless; every generation converged
        return "converged"
    v = drop_convergence_rate(delta, max_drop)
    if v == -math.inf:
        return "converged"
    if math.isnan(v):
        return f"improved({_fmt(delta)})"
    return _fmt(v)


def trace_csv_text(traces, max_drop: float | None = None) -> str:
    """Render traces in trace-CSV form; shared by files and recomputation."""
    if max_drop is None:
        max_drop = max_drop_of(traces)
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(TRACE_COLUMNS)
    for t in traces:
        for k in range(1, t.generations + 1):
            p = t.psnr[k - 1]
            delta = delta_psnr_y(t, k) if k >= 2 else None
            writer.writerow([
                t.sequence, t.method, t.rate_point, str(k),
                _fmt(t.bpp[k - 1]), _fmt(_capped(p)),
                "" if delta is None else _fmt(delta),
                _fmt(psnr_y_drop(t, k)),
                "" if delta is None else _dcr_cell(delta, max_drop),
                "1" if math.isinf(p) else "0",
            ])
    return out.getvalue()


def write_trace_csv(path: str, traces, max_drop: float | None = None) -> None:
    atomic_write_text(path, trace_csv_text(traces, max_drop))


def read_trace_csv(path: str):
    """Parse a trace CSV back into GenerationTrace objects (grouped, ordered)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(TRACE_COLUMNS):
            raise ValueError(f"unexpected trace CSV header in {path}")
        traces = []
        index = {}
        for row in reader:
            seq, method, rate_point = row[0], row[1], row[2]
            key = (seq, method, rate_point)
            if key not in index:
                index[key] = GenerationTrace(
                    sequence=seq, method=method, rate_point=rate_point)
                traces.append(index[key])
            t = index[key]
            k = int(row[3])
            if k != t.generations + 1:
                raise ValueError(
                    f"trace rows for {key} out of order: expected generation "
                    f"{t.generations + 1}, got {k}")
            t.bpp.append(float(row[4]))
            t.psnr.append(math.inf if row[9] == "1" else float(row[5]))
    return traces


# ---------------------------------------------------------------------------
# Summary tables

def summarize_first_last(traces):
    """First- vs last-generation quality per experiment cell."""
    rows = []
    for t in traces:
        last = t.generations
        rows.append([
            t.sequence, t.method, t.rate_point,
            _fmt(t.bpp[0]), _fmt(_capped(t.psnr[0])),
            _fmt(_capped(t.psnr[last - 1])), _fmt(psnr_y_drop(t, last)),
        ])
    return rows


def summarize_deltas(traces, ks=SUMMARY_DELTA_KS):
    """Per-generation PSNR decrements at the standard checkpoints."""
    rows = []
    for t in traces:
        row = [t.sequence, t.method, t.rate_point]
        for k in ks:
            row.append(_fmt(delta_psnr_y(t, k)) if k <= t.generations else "")
        rows.append(row)
    return rows


def summary_delta_columns(ks=SUMMARY_DELTA_KS):
    return ("sequence", "method", "rate_point") + tuple(f"delta_k{k}" for k in ks)
