"""Rate-distortion training with optional robustness constraint paths.

Seven constraint sets share one forward trunk. BASELINE optimizes rate plus
distortion. The three constraints each add (or substitute) an auxiliary path:

* MIC replaces the distortion term with the full deployed mapping, rounding
  included, made differentiable with straight-through rounding.
* TRC adds a quantization-free encode/decode identity penalty.
* LCC adds a latent consistency penalty across one decode -> color
  restoration -> re-encode hop, with the quantized latent as a fixed target.

Pairwise combinations compose the terms; sets containing MIC never carry a
separate distortion term. Training is strictly seeded: every crop and every
noise draw derives from (seed, epoch, step, item), so interrupted runs resume
bit-exactly from a checkpoint.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .codec import (
    Architecture,
    CodecModel,
    EntropyParams,
    LAMBDA_GRID,
    LatentTensor,
    TOY_ARCH,
    analyze,
    hyper_analyze,
    hyper_path,
    hyper_synthesize,
    init_model,
    likelihood,
    load_model,
    pad_signal,
    prior_params,
    quantize_centered,
    save_model,
    scale_round_tensor,
    synthesize,
)
from .pointcloud import PointCloud, kdtree_crop, morton_order
from .tensor import AdamState, Tensor, adam_step, zero_grads

CONSTRAINT_SETS = ("BASELINE", "MIC", "TRC", "LCC", "MIC_TRC", "MIC_LCC", "TRC_LCC")

LOG_COLUMNS = ("epoch", "lr", "L_Rate", "L_D", "L_MI", "L_TR", "L_LC", "total")

_LOG2 = math.log(2.0)


class TrainingError(RuntimeError):
    """Raised when a run must abort (non-finite loss, bad configuration)."""


@dataclass(frozen=True)
class LossWeights:
    lam: float
    alpha: float
    beta: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")

    @classmethod
    def default(cls, lam: float, alpha: float | None = None,
                beta: float = 100.0) -> "LossWeights":
        # alpha tracks lambda unless pinned explicitly
        return cls(lam=lam, alpha=lam if alpha is None else alpha, beta=beta)


@dataclass
class TrainConfig:
    constraint_set: str = "BASELINE"
    lambda_id: int = 3
    epochs: int = 200
    batch_size: int = 4
    lr0: float = 1e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 20
    seed: int = 0
    k_crop: int = 250000
    steps_per_epoch: int | None = None
    alpha: float | None = None
    beta: float = 100.0
    penalty: str = "mse"
    arch: Architecture = TOY_ARCH

    def __post_init__(self):
        if self.constraint_set not in CONSTRAINT_SETS:
            raise ValueError(
                f"unknown constraint set {self.constraint_set!r}; "
                f"expected one of {', '.join(CONSTRAINT_SETS)}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.k_crop <= 0 or self.lr0 <= 0:
            raise ValueError("k_crop and lr0 must be positive")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every <= 0:
            raise ValueError("lr_decay must be in (0, 1], lr_decay_every positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch <= 0:
            raise ValueError("steps_per_epoch must be positive")
        if self.penalty not in _PENALTIES:
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if not 0 <= self.lambda_id < len(LAMBDA_GRID):
            raise ValueError(f"lambda_id {self.lambda_id} outside grid")

    @property
    def weights(self) -> LossWeights:
        return LossWeights.default(
            LAMBDA_GRID[self.lambda_id], alpha=self.alpha, beta=self.beta)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        """Build from flat key=value strings; rejects unknown keys."""
        kw = {}
        left = dict(mapping)
        for name, cast in (
            ("constraint_set", str), ("lambda_id", int), ("epochs", int),
            ("batch_size", int), ("lr0", float), ("lr_decay", float),
            ("lr_decay_every", int), ("seed", int), ("k_crop", int),
            ("steps_per_epoch", int), ("alpha", float), ("beta", float),
            ("penalty", str),
        ):
            if name in left:
                kw[name] = cast(left.pop(name))
        arch_kw = {}
        for name in ("hidden", "latent", "hyper", "k_outer", "k_inner"):
            key = f"arch_{name}"
            if key in left:
                arch_kw[name] = int(left.pop(key))
        if arch_kw:
            kw["arch"] = Architecture(**{
                f.name: arch_kw.get(f.name, getattr(TOY_ARCH, f.name))
                for f in Architecture.__dataclass_fields__.values()})
        if left:
            raise ValueError(f"unknown config keys: {', '.join(sorted(left))}")
        return cls(**kw)


def parse_kv(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment, blanks skipped."""
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"malformed config line: {raw.strip()!r}")
        out[key] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Loss terms

def _mse(diff: Tensor) -> Tensor:
    return diff.square().mean()


def _sum_squares(diff: Tensor) -> Tensor:
    return diff.square().sum()


_PENALTIES = {"mse": _mse, "sum": _sum_squares}


def rate_loss(y_noisy: Tensor, z_noisy: Tensor, params: EntropyParams,
              factorized_prior: EntropyParams, num_points: int) -> Tensor:
    """Cross-entropy of both coded tensors in bits per point."""
    if num_points <= 0:
        raise ValueError(f"num_points must be positive, got {num_points}")
    log_mass = likelihood(y_noisy, params).log().sum() \
        + likelihood(z_noisy, factorized_prior).log().sum()
    return log_mass * (-1.0 / (_LOG2 * num_points))


def distortion_loss(x_norm: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared reconstruction error on the [0, 1] color scale."""
    return _mse(x_norm - x_hat)


def mic_path(x_norm: Tensor, model: CodecModel,
             penalty: str = "mse") -> tuple[Tensor, Tensor]:
    """Deployed mapping with straight-through rounding; returns (x_MI, L_MI).

    The forward value of x_MI is bit-identical to feeding the decompressed
    colors of the real codec back through normalization.
    """
    y = analyze(x_norm, model)
    _, params = hyper_path(y, model)
    y_hat = quantize_centered(y, params)
    x_hat = synthesize(y_hat, model)
    x_mi = scale_round_tensor(x_hat) / 255.0
    return x_mi, _PENALTIES[penalty](x_norm - x_mi)


def trc_path(x_norm: Tensor, model: CodecModel,
             penalty: str = "mse") -> tuple[Tensor, Tensor]:
    """Quantization-free analysis/synthesis identity; returns (x_TR, L_TR)."""
    x_tr = synthesize(analyze(x_norm, model), model)
    return x_tr, _PENALTIES[penalty](x_norm - x_tr)


def lcc_path(y_hat, model: CodecModel, penalty: str = "mse",
             target: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Decode, restore colors, re-encode; returns (y_LC, L_LC).

    No quantization is applied after re-analysis. The comparison target is the
    incoming quantized latent with gradient flow blocked; `target` overrides it
    with a fixed array (used by finite-difference checks, which must see the
    same frozen target on every evaluation).
    """
    yv = y_hat.values if isinstance(y_hat, LatentTensor) else y_hat
    x_hat = synthesize(yv, model)
    x_restored = scale_round_tensor(x_hat) / 255.0
    y_lc = analyze(x_restored, model).values
    ref = Tensor(target) if target is not None else yv.detach()
    return y_lc, _PENALTIES[penalty](ref - y_lc)


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict
    lcc_target: np.ndarray | None = None

    def component_values(self) -> dict:
        return {name: t.item() for name, t in self.components.items()}


def total_loss(x_norm: Tensor, model: CodecModel, constraint_set: str,
               weights: LossWeights, rng: np.random.Generator | None,
               num_points: int, penalty: str = "mse",
               lcc_target: np.ndarray | None = None) -> LossBreakdown:
    """One training item's loss with its named components.

    The rate term and the plain distortion term use additive-noise latents
    (rng=None selects the noise-free evaluation mode); the MIC and LCC terms
    instead run the deployed path with straight-through rounding, so those
    losses see the signal the shipped codec produces. That split is the
    point of MIC: the plain path trains on a relaxation, MIC on the real
    discrete chain.
    """
    if constraint_set not in CONSTRAINT_SETS:
        raise ValueError(f"unknown constraint set {constraint_set!r}")
    uses_mic = "MIC" in constraint_set
    uses_trc = "TRC" in constraint_set
    uses_lcc = "LCC" in constraint_set

    y = analyze(x_norm, model)
    z = hyper_analyze(y, model)
    params = hyper_synthesize(z.ste_round(), model)
    y_noisy = y.values if rng is None else y.values.add_uniform_noise(rng)
    z_noisy = z if rng is None else z.add_uniform_noise(rng)
    components = {"L_Rate": rate_loss(
        y_noisy, z_noisy, params, prior_params(model), num_points)}

    pen = _PENALTIES[penalty]
    y_hat = x_hat = None
    if uses_mic or uses_lcc:
        y_hat = quantize_centered(y, params)
        x_hat = synthesize(y_hat, model)
    if uses_mic:
        x_mi = scale_round_tensor(x_hat) / 255.0
        components["L_MI"] = pen(x_norm - x_mi)
    else:
        components["L_D"] = distortion_loss(x_norm, synthesize(y_noisy, model))
    if uses_trc:
        x_tr = synthesize(y, model)
        components["L_TR"] = pen(x_norm - x_tr)
    target_out = None
    if uses_lcc:
        x_restored = scale_round_tensor(x_hat) / 255.0
        y_lc = analyze(x_restored, model).values
        target_out = y_hat.data.copy() if lcc_target is None else lcc_target
        ref = Tensor(lcc_target) if lcc_target is not None else y_hat.detach()
        components["L_LC"] = pen(ref - y_lc)

    total = components["L_Rate"] \
        + components["L_MI" if uses_mic else "L_D"] * weights.lam
    if uses_trc:
        total = total + components["L_TR"] * weights.alpha
    if uses_lcc:
        total = total + components["L_LC"] * weights.beta
    return LossBreakdown(total=total, components=components, lcc_target=target_out)


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class EpochStats:
    epoch: int
    lr: float
    means: dict
    total: float


@dataclass
class TrainState:
    model: CodecModel
    adam: AdamState = field(default_factory=AdamState)
    epochs_done: int = 0


@dataclass
class TrainResult:
    model: CodecModel
    adam: AdamState
    log: list
    epochs_done: int


def learning_rate(config: TrainConfig, epoch_index: int) -> float:
    """Stepwise schedule; epoch_index counts from 0."""
    return config.lr0 * config.lr_decay ** (epoch_index // config.lr_decay_every)


def default_steps_per_epoch(dataset, config: TrainConfig) -> int:
    total = sum(len(c) for c in dataset)
    return max(1, math.ceil(total / (config.batch_size * config.k_crop)))


def _prepare_item(dataset, config: TrainConfig, epoch: int, step: int, item: int):
    """Deterministically crop, order, and normalize one training block."""
    seq = np.random.SeedSequence([config.seed, epoch, step, item])
    crop_seed, noise_seed = (int(s) for s in seq.generate_state(2))
    cloud = dataset[(step * config.batch_size + item) % len(dataset)]
    block = kdtree_crop(cloud, config.k_crop, crop_seed)
    perm = morton_order(block)
    x = Tensor(pad_signal(block.colors[perm.order].astype(np.float64) / 255.0))
    return x, len(block), np.random.default_rng(noise_seed)


def train(dataset, config: TrainConfig, state: TrainState | None = None,
          progress=None) -> TrainResult:
    """Run (or continue) a training job; fully determined by config.seed.

    `state` continues a run from `state.epochs_done` with its optimizer
    moments intact; the result after N epochs is bit-identical whether or not
    the run was interrupted.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if state is None:
        state = TrainState(model=init_model(config.seed, config.lambda_id, config.arch))
    model, adam = state.model, state.adam
    weights = config.weights
    steps = config.steps_per_epoch or default_steps_per_epoch(dataset, config)
    log = []
    for epoch in range(state.epochs_done, config.epochs):
        lr = learning_rate(config, epoch)
        sums = {}
        total_sum = 0.0
        for step in range(steps):
            zero_grads(model.params)
            # per-item backward: gradients accumulate across the batch while
            # only one item's graph is alive at a time, keeping the peak
            # footprint flat in batch_size
            inv = 1.0 / config.batch_size
            batch_value = 0.0
            for item in range(config.batch_size):
                x, n_points, rng = _prepare_item(dataset, config, epoch, step, item)
                breakdown = total_loss(
                    x, model, config.constraint_set, weights, rng, n_points,
                    penalty=config.penalty)
                for name, value in breakdown.component_values().items():
                    if not math.isfinite(value):
                        raise TrainingError(
                            f"non-finite loss term {name!r} "
                            f"at epoch {epoch + 1}, step {step + 1}")
                    sums[name] = sums.get(name, 0.0) + value
                scaled = breakdown.total * inv
                batch_value += scaled.item()
                scaled.backward()
            if not math.isfinite(batch_value):
                raise TrainingError(
                    f"non-finite loss term 'total' at epoch {epoch + 1}, "
                    f"step {step + 1}")
            total_sum += batch_value
            adam_step(model.params, adam, lr)
        count = steps * config.batch_size
        stats = EpochStats(
            epoch=epoch + 1, lr=lr,
            means={k: v / count for k, v in sums.items()},
            total=total_sum / steps)
        log.append(stats)
        if progress is not None:
            progress(stats)
    return TrainResult(model=model, adam=adam, log=log, epochs_done=config.epochs)


def write_train_log(path: str, records) -> None:
    """Per-epoch CSV; loss columns not in the constraint set stay empty."""
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for r in records:
                row = [str(r.epoch), repr(r.lr)]
                for name in LOG_COLUMNS[2:-1]:
                    row.append(repr(r.means[name]) if name in r.means else "")
                row.append(repr(r.total))
                writer.writerow(row)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Resumable checkpoints

def save_train_state(path: str, result_or_state) -> None:
    """Model checkpoint plus optimizer moments and epoch counter."""
    s = result_or_state
    extras = {
        "opt.step": np.array(float(s.adam.step)),
        "train.epochs_done": np.array(float(s.epochs_done)),
    }
    for name, m in s.adam.m.items():
        extras[f"opt.m.{name}"] = m
    for name, v in s.adam.v.items():
        extras[f"opt.v.{name}"] = v
    save_model(path, s.model, extras=extras)


def load_train_state(path: str) -> TrainState:
    model, extras = load_model(path)
    adam = AdamState(step=int(extras.get("opt.step", 0.0)))
    for key, arr in extras.items():
        if key.startswith("opt.m."):
            adam.m[key[len("opt.m."):]] = arr
        elif key.startswith("opt.v."):
            adam.v[key[len("opt.v."):]] = arr
    return TrainState(
        model=model, adam=adam,
        epochs_done=int(extras.get("train.epochs_done", 0.0)))
