"""Dense float64 tensors with reverse-mode autodiff.

Small-scale numpy substrate: each op records a backward closure, and
``Tensor.backward`` replays them in reverse topological order.  Includes a
straight-through rounding estimator, seeded uniform quantization noise, an
Adam optimizer, a finite-difference gradient checker, and a checkpoint
format for named parameter arrays.
"""

from __future__ import annotations

import hashlib
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_depth = 0  # >0 means gradient recording is suspended


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_depth
    _grad_depth += 1
    try:
        yield
    finally:
        _grad_depth -= 1


def _recording() -> bool:
    return _grad_depth == 0


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Elementwise round with ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


# ---------------------------------------------------------------------------
# Rounding freeze: to compare gradients of losses that contain hard rounding
# against finite differences, the rounding offsets observed on a reference
# forward pass can be recorded and then replayed as constant shifts
# (x + offset).  The replayed function is smooth, its true derivative is the
# straight-through derivative, and at the reference point it agrees with the
# hard-rounded forward.

class RoundFreeze:
    def __init__(self):
        self._log: list[np.ndarray] = []
        self._mode: str | None = None
        self._cursor = 0

    @contextmanager
    def record(self):
        self._log.clear()
        self._mode = "record"
        try:
            yield self
        finally:
            self._mode = None

    @contextmanager
    def replay(self):
        self._mode = "replay"
        self._cursor = 0
        try:
            yield self
        finally:
            if self._cursor != len(self._log):
                raise RuntimeError(
                    f"replayed {self._cursor} of {len(self._log)} recorded roundings"
                )
            self._mode = None

    def _apply(self, x: np.ndarray) -> np.ndarray:
        if self._mode == "record":
            r = round_half_away(x)
            self._log.append(r - x)
            return r
        if self._cursor >= len(self._log):
            raise RuntimeError("more ste_round calls than recorded roundings")
        off = self._log[self._cursor]
        self._cursor += 1
        if off.shape != x.shape:
            raise RuntimeError(
                f"recorded rounding shape {off.shape} != input shape {x.shape}"
            )
        return x + off


_round_freeze: RoundFreeze | None = None


@contextmanager
def freeze_rounding(freeze: RoundFreeze):
    """Route all ste_round calls in the block through `freeze`."""
    global _round_freeze
    prev = _round_freeze
    _round_freeze = freeze
    try:
        yield
    finally:
        _round_freeze = prev


# ---------------------------------------------------------------------------

class Tensor:
    """A float64 array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = _prev

    # -- plumbing ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut from the tape."""
        return Tensor(self.data)

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        # iterative postorder toposort
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out = _make(self.data + other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad, other.data.shape))
            out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(-out.grad)
        return out

    def __sub__(self, other):
        other = _wrap(other)
        out = _make(self.data - other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(-out.grad, other.data.shape))
            out._backward = _bw
        return out

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        out = _make(self.data * other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad * self.data, other.data.shape))
            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = _make(self.data / other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad / other.data, self.data.shape))
                if other.requires_grad:
                    g = -out.grad * self.data / (other.data * other.data)
                    other._accum(_unbroadcast(g, other.data.shape))
            out._backward = _bw
        return out

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def square(self) -> "Tensor":
        out = _make(self.data * self.data, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(2.0 * self.data * out.grad)
        return out

    # -- matmul -------------------------------------------------------------

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out = _make(a @ b, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(out.grad @ b.T)
                if other.requires_grad:
                    other._accum(a.T @ out.grad)
            out._backward = _bw
        return out

    # -- nonlinearities and reshaping ----------------------------------------

    def relu(self) -> "Tensor":
        out = _make(np.maximum(self.data, 0.0), (self,))
        if out.requires_grad:
            mask = self.data > 0
            out._backward = lambda: self._accum(out.grad * mask)
        return out

    def exp(self) -> "Tensor":
        out = _make(np.exp(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad * out.data)
        return out

    def log(self) -> "Tensor":
        out = _make(np.log(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad / self.data)
        return out

    def clamp(self, lo: float, hi: float) -> "Tensor":
        out = _make(np.clip(self.data, lo, hi), (self,))
        if out.requires_grad:
            mask = (self.data >= lo) & (self.data <= hi)
            out._backward = lambda: self._accum(out.grad * mask)
        return out

    def sum(self) -> "Tensor":
        out = _make(self.data.sum(), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(np.broadcast_to(out.grad, self.data.shape))
        return out

    def mean(self) -> "Tensor":
        out = _make(self.data.mean(), (self,))
        if out.requires_grad:
            inv = 1.0 / self.data.size
            out._backward = lambda: self._accum(
                np.broadcast_to(out.grad * inv, self.data.shape)
            )
        return out

    def normal_cdf(self) -> "Tensor":
        """Standard normal CDF, elementwise."""
        out = _make(0.5 * (1.0 + _erf(self.data * _INV_SQRT2)), (self,))
        if out.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * self.data * self.data)
            out._backward = lambda: self._accum(out.grad * pdf)
        return out

    def __getitem__(self, key) -> "Tensor":
        out = _make(self.data[key], (self,))
        if out.requires_grad:
            def _bw():
                g = np.zeros_like(self.data)
                g[key] = out.grad
                self._accum(g)
            out._backward = _bw
        return out

    def ste_round(self) -> "Tensor":
        """Round half-away-from-zero; the adjoint passes through unchanged."""
        if _round_freeze is not None and _round_freeze._mode is not None:
            data = _round_freeze._apply(self.data)
        else:
            data = round_half_away(self.data)
        out = _make(data, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad)
        return out

    def add_uniform_noise(self, rng: np.random.Generator) -> "Tensor":
        """Add i.i.d. U(-0.5, 0.5) noise; the adjoint passes through unchanged."""
        out = _make(self.data + rng.uniform(-0.5, 0.5, size=self.data.shape), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad)
        return out

    # -- 1D convolutions ------------------------------------------------------

    def conv1d(self, weight: "Tensor", bias: "Tensor | None", stride: int = 1) -> "Tensor":
        """Same-size correlation with edge-replicated padding.

        self: (Cin, L); weight: (Cout, Cin, K); output (Cout, ceil(L/stride)).
        """
        return _conv_core(self, weight, bias, stride, pad_mode="edge")

    def conv1d_transpose(self, weight: "Tensor", bias: "Tensor | None",
                         stride: int = 1) -> "Tensor":
        """Zero-stuffing upsample by `stride` followed by a stride-1 conv.

        Uses zero padding (not edge replication) so inserted zeros stay
        exact: output length is L*stride and depends only on real samples
        through the kernel taps.
        """
        up = self.upsample_zero(stride)
        return _conv_core(up, weight, bias, 1, pad_mode="zero")

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ValueError(f"transpose needs a 2-D tensor, got shape {self.data.shape}")
        out = _make(self.data.T.copy(), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad.T)
        return out

    def upsample_zero(self, stride: int) -> "Tensor":
        """Insert stride-1 zeros after each sample along the last axis."""
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        c, l = self.data.shape
        data = np.zeros((c, l * stride), dtype=np.float64)
        data[:, ::stride] = self.data
        out = _make(data, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad[:, ::stride])
        return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, prev: tuple) -> Tensor:
    req = _recording() and any(p.requires_grad for p in prev)
    return Tensor(data, requires_grad=req, _prev=prev if req else ())


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _same_pad(length: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return out, total // 2, total - total // 2


def _conv_core(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int,
               pad_mode: str) -> Tensor:
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 3 or xd.shape[0] != wd.shape[1]:
        raise ValueError(f"conv1d shape mismatch: input {xd.shape}, weight {wd.shape}")
    if bias is not None and bias.data.shape != (wd.shape[0],):
        raise ValueError(
            f"conv1d bias shape {bias.data.shape} != ({wd.shape[0]},)"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    cin, length = xd.shape
    cout, _, kernel = wd.shape
    lout, pl, pr = _same_pad(length, kernel, stride)
    mode = "edge" if pad_mode == "edge" else "constant"
    xp = np.pad(xd, ((0, 0), (pl, pr)), mode=mode)
    idx = np.arange(lout)[:, None] * stride + np.arange(kernel)[None, :]
    cols = xp[:, idx]  # (Cin, Lout, K)
    out_data = np.einsum("ock,ctk->ot", wd, cols, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data[:, None]
    prev = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data, prev)
    if out.requires_grad:
        def _bw():
            go = out.grad
            if weight.requires_grad:
                weight._accum(np.einsum("ot,ctk->ock", go, cols, optimize=True))
            if bias is not None and bias.requires_grad:
                bias._accum(go.sum(axis=1))
            if x.requires_grad:
                gcols = np.einsum("ock,ot->ctk", wd, go, optimize=True)
                gp = np.zeros_like(xp)
                np.add.at(gp, (slice(None), idx), gcols)
                gx = gp[:, pl:pl + length].copy()
                if pad_mode == "edge":
                    if pl:
                        gx[:, 0] += gp[:, :pl].sum(axis=1)
                    if pr:
                        gx[:, -1] += gp[:, pl + length:].sum(axis=1)
                x._accum(gx)
        out._backward = _bw
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _make(data, tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bw():
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(a, b)
                    t._accum(out.grad[tuple(sl)])
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One in-place Adam update with bias correction; None grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Finite-difference gradient check

def fd_gradients(loss_fn, params: dict[str, Tensor], step: float = 1e-4,
                 freeze: RoundFreeze | None = None) -> dict[str, np.ndarray]:
    """Central finite differences of loss_fn() w.r.t. every parameter element.

    loss_fn must be repeatable (seed all of its randomness).  When `freeze`
    is given, evaluations run under its replay mode so recorded rounding
    offsets are reused and the probed function is smooth.
    """
    out = {}
    for name in sorted(params):
        p = params[name]
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            def eval_at(v):
                flat[i] = v
                with no_grad():
                    if freeze is not None:
                        with freeze.replay():
                            r = loss_fn().item()
                    else:
                        r = loss_fn().item()
                return r
            hi = eval_at(keep + step)
            lo = eval_at(keep - step)
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * step)
        out[name] = g
    return out


def gradcheck(loss_fn, params: dict[str, Tensor], step: float = 1e-4,
              rtol: float = 1e-3, atol: float = 1e-6,
              uses_rounding: bool = False) -> float:
    """Compare reverse-mode gradients with finite differences.

    Returns the worst relative error; raises AssertionError past tolerance.
    """
    zero_grads(params)
    freeze = RoundFreeze() if uses_rounding else None
    if freeze is not None:
        with freeze_rounding(freeze), freeze.record():
            loss = loss_fn()
    else:
        loss = loss_fn()
    loss.backward()
    ad = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
          for n, p in params.items()}
    if freeze is not None:
        with freeze_rounding(freeze):
            fd = fd_gradients(loss_fn, params, step=step, freeze=freeze)
    else:
        fd = fd_gradients(loss_fn, params, step=step)
    worst = 0.0
    for name in sorted(params):
        a, f = ad[name], fd[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), atol / rtol)
        rel = np.abs(a - f) / denom
        worst = max(worst, float(rel.max()))
        if not np.all(rel <= rtol):
            i = int(np.argmax(rel))
            raise AssertionError(
                f"gradient mismatch for {name!r} at flat index {i}: "
                f"autodiff {a.reshape(-1)[i]:.8g} vs finite-diff "
                f"{f.reshape(-1)[i]:.8g} (rel err {rel.reshape(-1)[i]:.3g})"
            )
    return worst


# ---------------------------------------------------------------------------
# Named-array checkpoint: magic, count, then sorted (name, shape, float64
# little-endian payload) records, closed by a SHA-256 of everything above.

_CKPT_MAGIC = b"MGTC\x01"


def save_arrays(path: str, arrays: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", a.ndim)
        for d in a.shape:
            blob += struct.pack("<I", d)
        blob += a.astype("<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(blob))
    os.replace(tmp, path)


def load_arrays(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_CKPT_MAGIC) + 36 or blob[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"checkpoint checksum mismatch: {path}")
    off = len(_CKPT_MAGIC)
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        a = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = a.astype(np.float64)
    if off != len(body):
        raise ValueError(f"trailing bytes in checkpoint: {path}")
    return out
