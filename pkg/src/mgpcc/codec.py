"""Deployed attribute compression chain.

Analysis/synthesis transforms over the Morton-serialized color signal, a
hyper-prior producing per-element Gaussian entropy parameters, centered
quantization, scale-and-round color restoration, per-element discretized
Gaussian coding tables, and the bitstream container.

Tensor layout convention: public functions speak (positions, channels);
convolutions run on the transposed (channels, length) layout internally.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud, morton_order
from .rangecoder import (
    CdfTable,
    RangeDecoder,
    RangeEncoder,
    quantize_pmf_batch,
)
from .tensor import Tensor, load_arrays, no_grad, round_half_away, save_arrays

MAGIC = b"MGPC\x01"
HEADER_LEN = len(MAGIC) + 4 + 4 + 1 + 4 + 4

PAD_MULTIPLE = 8  # two stride-2 analysis stages plus one hyper stride-2 stage
SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3
LIKELIHOOD_FLOOR = 1e-9
SUPPORT_CAP = 1024  # per-element coding support radius limit
_CODING_CHUNK = 16384  # symbols per vectorized table-building chunk

LAMBDA_GRID = (6000.0, 4000.0, 2000.0, 1000.0)  # lambda_id indexes this

_LOG_SIGMA_MIN = math.log(SIGMA_MIN)
_LOG_SIGMA_MAX = math.log(SIGMA_MAX)

_BYTE_TABLE = CdfTable.uniform(256)


@dataclass(frozen=True)
class Architecture:
    """Channel widths of the conv stacks; strides are fixed (2, 2, 1)."""

    hidden: int = 64
    latent: int = 32
    hyper: int = 4
    k_outer: int = 5
    k_inner: int = 3


TOY_ARCH = Architecture()


@dataclass
class CodecModel:
    params: dict[str, Tensor]
    lambda_id: int
    arch: Architecture = TOY_ARCH

    def __post_init__(self):
        if not 0 <= self.lambda_id < len(LAMBDA_GRID):
            raise ValueError(f"lambda_id {self.lambda_id} outside grid of {len(LAMBDA_GRID)}")
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise ValueError(f"non-finite parameter {name!r}")

    @property
    def lam(self) -> float:
        return LAMBDA_GRID[self.lambda_id]


@dataclass
class LatentTensor:
    """Latent signal of shape (positions, channels)."""

    values: Tensor
    quantized: bool = False


@dataclass
class EntropyParams:
    mu: Tensor
    sigma: Tensor


def _layer_specs(a: Architecture):
    enc = [
        ("enc.0", 3, a.hidden, a.k_outer, 2, True),
        ("enc.1", a.hidden, a.hidden, a.k_outer, 2, True),
        ("enc.2", a.hidden, a.latent, a.k_inner, 1, False),
    ]
    dec = [
        ("dec.0", a.latent, a.hidden, a.k_inner, 1, True),
        ("dec.1", a.hidden, a.hidden, a.k_outer, 2, True),
        ("dec.2", a.hidden, 3, a.k_outer, 2, False),
    ]
    ha = [
        ("ha.0", a.latent, a.hyper, a.k_inner, 2, True),
        ("ha.1", a.hyper, a.hyper, a.k_inner, 1, False),
    ]
    hs = [
        ("hs.0", a.hyper, a.hyper, a.k_inner, 1, True),
        ("hs.1", a.hyper, 2 * a.latent, a.k_inner, 2, False),
    ]
    return enc, dec, ha, hs


def init_model(seed: int, lambda_id: int, arch: Architecture = TOY_ARCH) -> CodecModel:
    """Seeded He/Glorot initialization of the full parameter set."""
    rng = np.random.default_rng(seed)
    enc, dec, ha, hs = _layer_specs(arch)
    params: dict[str, Tensor] = {}
    for name, cin, cout, k, _stride, with_relu in enc + dec + ha + hs:
        fan_in = cin * k
        std = math.sqrt((2.0 if with_relu else 1.0) / fan_in)
        params[name + ".w"] = Tensor(rng.normal(0.0, std, size=(cout, cin, k)),
                                     requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True)
    params["prior.mu"] = Tensor(np.zeros(arch.hyper), requires_grad=True)
    params["prior.log_sigma"] = Tensor(np.zeros(arch.hyper), requires_grad=True)
    return CodecModel(params=params, lambda_id=lambda_id, arch=arch)


def _run_stack(x_cl: Tensor, model: CodecModel, specs, transposed: bool) -> Tensor:
    h = x_cl
    for name, _cin, _cout, _k, stride, with_relu in specs:
        w = model.params[name + ".w"]
        b = model.params[name + ".b"]
        if transposed:
            h = h.conv1d_transpose(w, b, stride=stride)
        else:
            h = h.conv1d(w, b, stride=stride)
        if with_relu:
            h = h.relu()
    return h


# ---------------------------------------------------------------------------
# Signal preparation

def normalize(colors) -> Tensor:
    """8-bit RGB rows to floats in [0, 1] by exact division by 255."""
    c = np.asarray(colors, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"expected (N, 3) colors, got {c.shape}")
    return Tensor(c / 255.0)


def pad_signal(x: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Edge-replicate the last row up to a length multiple; no-op if aligned."""
    x = np.asarray(x)
    n = x.shape[0]
    pad = (-n) % multiple
    if pad == 0:
        return x
    return np.concatenate([x, np.repeat(x[-1:], pad, axis=0)], axis=0)


def padded_length(n: int, multiple: int = PAD_MULTIPLE) -> int:
    return n + (-n) % multiple


# ---------------------------------------------------------------------------
# Transform stacks

def analyze(x_norm: Tensor, model: CodecModel) -> LatentTensor:
    """(N_pad, 3) normalized colors -> latent (N_pad/4, latent_channels)."""
    n = x_norm.shape[0]
    if x_norm.data.ndim != 2 or x_norm.shape[1] != 3:
        raise ValueError(f"expected (N, 3) input, got {x_norm.shape}")
    if n % PAD_MULTIPLE != 0:
        raise ValueError(f"input length {n} is not a multiple of {PAD_MULTIPLE}")
    enc, _, _, _ = _layer_specs(model.arch)
    y_cl = _run_stack(x_norm.transpose(), model, enc, transposed=False)
    return LatentTensor(values=y_cl.transpose(), quantized=False)


def synthesize(latent, model: CodecModel) -> Tensor:
    """Latent (L, C) -> unclipped reconstruction (4L, 3)."""
    values = latent.values if isinstance(latent, LatentTensor) else latent
    if values.data.ndim != 2 or values.shape[1] != model.arch.latent:
        raise ValueError(
            f"latent shape {values.shape} does not match {model.arch.latent} channels"
        )
    _, dec, _, _ = _layer_specs(model.arch)
    x_cl = _run_stack(values.transpose(), model, dec, transposed=True)
    return x_cl.transpose()


def hyper_analyze(y, model: CodecModel) -> Tensor:
    """Latent (L, C) -> continuous hyper-latent z of shape (L/2, hyper)."""
    values = y.values if isinstance(y, LatentTensor) else y
    _, _, ha, _ = _layer_specs(model.arch)
    return _run_stack(values.transpose(), model, ha, transposed=False).transpose()


def hyper_synthesize(z_hat: Tensor, model: CodecModel) -> EntropyParams:
    """Hyper-latent (L/2, hyper) -> per-element (mu, sigma), each (L, latent)."""
    _, _, _, hs = _layer_specs(model.arch)
    out = _run_stack(z_hat.transpose(), model, hs, transposed=True).transpose()
    c = model.arch.latent
    mu = out[:, 0:c]
    sigma_raw = out[:, c:2 * c]
    # pre-boundaries keep exp() finite; the outer clamp is the binding one
    sigma = sigma_raw.clamp(_LOG_SIGMA_MIN - 1.0, _LOG_SIGMA_MAX + 1.0).exp() \
        .clamp(SIGMA_MIN, SIGMA_MAX)
    return EntropyParams(mu=mu, sigma=sigma)


def hyper_path(y, model: CodecModel) -> tuple[Tensor, EntropyParams]:
    """Deployed side-information path: z_hat = round(h_a(y)), params = h_s(z_hat)."""
    z = hyper_analyze(y, model)
    z_hat = z.ste_round()
    return z_hat, hyper_synthesize(z_hat, model)


def prior_params(model: CodecModel) -> EntropyParams:
    """Per-channel factorized Gaussian prior for the hyper-latent."""
    mu = model.params["prior.mu"]
    sigma = model.params["prior.log_sigma"] \
        .clamp(_LOG_SIGMA_MIN - 1.0, _LOG_SIGMA_MAX + 1.0).exp() \
        .clamp(SIGMA_MIN, SIGMA_MAX)
    return EntropyParams(mu=mu, sigma=sigma)


# ---------------------------------------------------------------------------
# Quantizers and entropy model

def quantize_centered(y, mu) -> Tensor:
    """Centered quantizer: mu + round(y - mu), rounding via the STE."""
    yv = y.values if isinstance(y, LatentTensor) else y
    mv = mu.mu if isinstance(mu, EntropyParams) else mu
    if yv.shape != mv.shape:
        raise ValueError(f"latent shape {yv.shape} != mu shape {mv.shape}")
    return mv + (yv - mv).ste_round()


def scale_round_tensor(x_hat: Tensor) -> Tensor:
    """Differentiable color restoration: round(clip(x, 0, 1) * 255) via STE."""
    return (x_hat.clamp(0.0, 1.0) * 255.0).ste_round()


def scale_round(x_hat) -> np.ndarray:
    """Deployed color restoration to uint8; rejects non-finite input."""
    data = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite reconstruction values")
    return round_half_away(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def likelihood(values: Tensor, params: EntropyParams) -> Tensor:
    """Discretized Gaussian mass of each element under (mu, sigma), floored."""
    d = values - params.mu
    upper = ((d + 0.5) / params.sigma).normal_cdf()
    lower = ((d - 0.5) / params.sigma).normal_cdf()
    return (upper - lower).clamp(LIKELIHOOD_FLOOR, 1.0)


def _ncdf(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# Per-element coding tables.  Symbols of the main latent are the integers
# round(y - mu), whose model distribution is a zero-centered discretized
# Gaussian of scale sigma; the hyper-latent is coded with its per-channel
# prior centered near round(prior mu).  Out-of-support values take a final
# escape bin followed by the raw 32-bit value in four uniform bytes.

def _support_radii(sigmas: np.ndarray) -> np.ndarray:
    r = np.ceil(6.0 * sigmas).astype(np.int64) + 2
    return np.clip(r, 2, SUPPORT_CAP)


def _build_tables(sigmas: np.ndarray, mus: np.ndarray):
    """Quantized CDF rows for a chunk of elements.

    Returns (radii, centers, cum_rows) where cum_rows[i] is the cumulative
    table over support [center-r, center+r] plus one trailing escape bin.
    """
    radii = _support_radii(sigmas)
    centers = round_half_away(mus).astype(np.int64)
    cum_rows: list = [None] * len(sigmas)
    for r in np.unique(radii):
        rows = np.flatnonzero(radii == r)
        d = np.arange(-r, r + 1, dtype=np.float64)
        off = d[None, :] + (centers[rows] - mus[rows])[:, None]
        s = sigmas[rows][:, None]
        pmf = _ncdf((off + 0.5) / s) - _ncdf((off - 0.5) / s)
        pmf = np.maximum(pmf, LIKELIHOOD_FLOOR)
        pmf = np.concatenate([pmf, np.full((len(rows), 1), LIKELIHOOD_FLOOR)], axis=1)
        counts = quantize_pmf_batch(pmf)
        cums = np.zeros((len(rows), counts.shape[1] + 1), dtype=np.int64)
        np.cumsum(counts, axis=1, out=cums[:, 1:])
        for i, row in enumerate(rows):
            cum_rows[row] = cums[i]
    return radii, centers, cum_rows


def _encode_raw_u32(enc: RangeEncoder, value: int):
    u = value & 0xFFFFFFFF
    for shift in (0, 8, 16, 24):
        enc.encode(_BYTE_TABLE, (u >> shift) & 0xFF)


def _decode_raw_u32(dec: RangeDecoder) -> int:
    u = 0
    for shift in (0, 8, 16, 24):
        u |= dec.decode(_BYTE_TABLE) << shift
    return u - (1 << 32) if u >= (1 << 31) else u


def _encode_gaussian(enc: RangeEncoder, symbols: np.ndarray, sigmas: np.ndarray,
                     mus: np.ndarray):
    for start in range(0, len(symbols), _CODING_CHUNK):
        sl = slice(start, start + _CODING_CHUNK)
        radii, centers, cums = _build_tables(sigmas[sl], mus[sl])
        for s, r, c, cum in zip(symbols[sl], radii, centers, cums):
            idx = int(s) - (int(c) - int(r))
            if 0 <= idx <= 2 * r:
                enc.encode(cum, idx)
            else:
                enc.encode(cum, int(2 * r + 1))  # escape bin
                _encode_raw_u32(enc, int(s))


def _decode_gaussian(dec: RangeDecoder, sigmas: np.ndarray, mus: np.ndarray) -> np.ndarray:
    out = np.empty(len(sigmas), dtype=np.int64)
    pos = 0
    for start in range(0, len(sigmas), _CODING_CHUNK):
        sl = slice(start, start + _CODING_CHUNK)
        radii, centers, cums = _build_tables(sigmas[sl], mus[sl])
        for r, c, cum in zip(radii, centers, cums):
            idx = dec.decode(cum)
            if idx <= 2 * r:
                out[pos] = idx + (int(c) - int(r))
            else:
                out[pos] = _decode_raw_u32(dec)
            pos += 1
    return out


# ---------------------------------------------------------------------------
# Bitstream

@dataclass
class Bitstream:
    num_points: int
    original_length: int
    lambda_id: int
    hyper_payload: bytes
    main_payload: bytes

    def to_bytes(self) -> bytes:
        header = MAGIC + struct.pack(
            "<IIBII", self.num_points, self.original_length, self.lambda_id,
            len(self.hyper_payload), len(self.main_payload),
        )
        return header + self.hyper_payload + self.main_payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_LEN:
            raise ValueError("truncated stream: header incomplete")
        if data[:4] != MAGIC[:4]:
            raise ValueError("not a compressed attribute stream (bad magic)")
        if data[4:5] != MAGIC[4:5]:
            raise ValueError(f"version mismatch: got {data[4]}, supported {MAGIC[4]}")
        num_points, orig_len, lambda_id, hyper_len, main_len = struct.unpack(
            "<IIBII", data[len(MAGIC):HEADER_LEN])
        if len(data) < HEADER_LEN + hyper_len:
            raise ValueError("truncated stream: hyper payload incomplete")
        if len(data) < HEADER_LEN + hyper_len + main_len:
            raise ValueError("truncated stream: main payload incomplete")
        if len(data) > HEADER_LEN + hyper_len + main_len:
            raise ValueError("trailing data after payload")
        return cls(
            num_points=num_points,
            original_length=orig_len,
            lambda_id=lambda_id,
            hyper_payload=data[HEADER_LEN:HEADER_LEN + hyper_len],
            main_payload=data[HEADER_LEN + hyper_len:HEADER_LEN + hyper_len + main_len],
        )


def _latent_lengths(n: int) -> tuple[int, int, int]:
    n_pad = padded_length(n)
    lat = n_pad // 4
    return n_pad, lat, lat // 2


def compress(cloud: PointCloud, model: CodecModel) -> Bitstream:
    """Encode the cloud's colors against its geometry; fully deterministic."""
    perm = morton_order(cloud)
    colors_m = cloud.colors[perm.order]
    n = len(cloud)
    with no_grad():
        x = Tensor(pad_signal(colors_m.astype(np.float64) / 255.0))
        y = analyze(x, model)
        z_hat, params = hyper_path(y, model)
        main_sym = round_half_away(y.values.data - params.mu.data)

    prior = prior_params(model)
    lz = z_hat.shape[0]
    hyper_sym = z_hat.data.T.reshape(-1).astype(np.int64)  # channel-major
    hyper_sigma = np.repeat(prior.sigma.data, lz)
    hyper_mu = np.repeat(prior.mu.data, lz)
    enc = RangeEncoder()
    _encode_gaussian(enc, hyper_sym, hyper_sigma, hyper_mu)
    hyper_payload = enc.finish()

    flat_sym = main_sym.T.reshape(-1).astype(np.int64)
    flat_sigma = params.sigma.data.T.reshape(-1)
    enc = RangeEncoder()
    _encode_gaussian(enc, flat_sym, flat_sigma, np.zeros(len(flat_sym)))
    main_payload = enc.finish()

    return Bitstream(
        num_points=n,
        original_length=n,
        lambda_id=model.lambda_id,
        hyper_payload=hyper_payload,
        main_payload=main_payload,
    )


def decompress(stream: Bitstream, geometry: PointCloud, model: CodecModel) -> PointCloud:
    """Decode colors and attach them to the given geometry."""
    if stream.num_points != len(geometry):
        raise ValueError(
            f"point count mismatch: stream has {stream.num_points}, "
            f"geometry has {len(geometry)}"
        )
    n = stream.num_points
    n_pad, lat, lz = _latent_lengths(n)
    arch = model.arch

    prior = prior_params(model)
    hyper_sigma = np.repeat(prior.sigma.data, lz)
    hyper_mu = np.repeat(prior.mu.data, lz)
    # no completeness check: truncation is caught structurally at parse time,
    # and a mismatched model must still decode (to garbage) without failing
    dec = RangeDecoder(stream.hyper_payload)
    hyper_sym = _decode_gaussian(dec, hyper_sigma, hyper_mu)
    z_hat = Tensor(hyper_sym.reshape(arch.hyper, lz).T.astype(np.float64))

    with no_grad():
        params = hyper_synthesize(z_hat, model)
    flat_sigma = params.sigma.data.T.reshape(-1)
    dec = RangeDecoder(stream.main_payload)
    flat_sym = _decode_gaussian(dec, flat_sigma, np.zeros(len(flat_sigma)))
    offsets = flat_sym.reshape(arch.latent, lat).T.astype(np.float64)

    with no_grad():
        y_hat = LatentTensor(values=params.mu + Tensor(offsets), quantized=True)
        x_hat = synthesize(y_hat, model)
    colors_m = scale_round(x_hat.data[:n])

    perm = morton_order(geometry)
    colors = np.empty_like(colors_m)
    colors[perm.order] = colors_m
    return PointCloud(geometry.positions, colors, geometry.resolution_bits)


def bpp(stream, num_points: int) -> float:
    """Bits per point of a serialized stream (or raw bytes / byte count)."""
    if num_points <= 0:
        raise ValueError(f"num_points must be positive, got {num_points}")
    if isinstance(stream, Bitstream):
        total = len(stream.to_bytes())
    elif isinstance(stream, (bytes, bytearray)):
        total = len(stream)
    else:
        total = int(stream)
    return 8.0 * total / num_points


def analytic_rate_bits(cloud: PointCloud, model: CodecModel) -> float:
    """Model's own estimate: sum of -log2 P over both coded tensors."""
    perm = morton_order(cloud)
    with no_grad():
        x = Tensor(pad_signal(cloud.colors[perm.order].astype(np.float64) / 255.0))
        y = analyze(x, model)
        z_hat, params = hyper_path(y, model)
        y_hat = quantize_centered(y, params)
        p_main = likelihood(y_hat, params)
        p_hyper = likelihood(z_hat, prior_params(model))
        return -(np.log2(p_main.data).sum() + np.log2(p_hyper.data).sum())


# ---------------------------------------------------------------------------
# Checkpoints

def save_model(path: str, model: CodecModel, extras: dict | None = None) -> None:
    arrays = {name: p.data for name, p in model.params.items()}
    a = model.arch
    arrays["meta.lambda_id"] = np.array(float(model.lambda_id))
    arrays["meta.arch"] = np.array(
        [a.hidden, a.latent, a.hyper, a.k_outer, a.k_inner], dtype=np.float64)
    for k, v in (extras or {}).items():
        arrays[k] = v
    save_arrays(path, arrays)


def load_model(path: str) -> tuple[CodecModel, dict]:
    arrays = load_arrays(path)
    if "meta.lambda_id" not in arrays or "meta.arch" not in arrays:
        raise ValueError(f"checkpoint missing model metadata: {path}")
    h, lat, hy, ko, ki = (int(v) for v in arrays.pop("meta.arch"))
    arch = Architecture(hidden=h, latent=lat, hyper=hy, k_outer=ko, k_inner=ki)
    lambda_id = int(arrays.pop("meta.lambda_id"))
    params = {}
    extras = {}
    expected = {name + suffix for name, *_ in sum(_layer_specs(arch), [])
                for suffix in (".w", ".b")} | {"prior.mu", "prior.log_sigma"}
    for name, a in arrays.items():
        if name in expected:
            params[name] = Tensor(a.copy(), requires_grad=True)
        else:
            extras[name] = a
    missing = expected - set(params)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    return CodecModel(params=params, lambda_id=lambda_id, arch=arch), extras
