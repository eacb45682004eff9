"""Training loop for the block-aware regressor.

The dataset is generated once as a fixed list of batches, each sharing one
synthetic genome, then reused across epochs. The split between training
and validation is at the batch level so genomes never leak across the
split. The checkpoint with the lowest validation loss is returned, ties
broken by the earliest epoch.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as bfmodel
from .autodiff import GradientError, OptimizerState, Tensor
from .genome import MapError
from .simulator import TrainBatchSpec, generate_training_batch

# rough cap on live graph bytes (attention scores plus activations) when
# choosing the micro-batch size for gradient accumulation
_GRAPH_BYTE_BUDGET = 6e8


@dataclass(frozen=True)
class TrainConfig:
    model: bfmodel.ModelConfig = field(default_factory=bfmodel.ModelConfig)
    total_samples: int = 5000
    batch_size: int = 200
    epochs: int = 50
    val_fraction: float = 0.10
    # default tuned for the desk budget (~1150 Adam steps); runs with the
    # full 50k-sample/200-epoch budget converge well at 5e-4
    learning_rate: float = 5e-3
    seed: int = 0
    chromosome_count_range: tuple = (2, 10)
    chromosome_count_choices: tuple | None = None
    fixed_spot_variance: float | None = None
    noise_level: float = 0.10
    dtype: str = "float32"

    def __post_init__(self):
        if not (0 < self.val_fraction < 1):
            raise MapError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.total_samples < 2 * self.batch_size:
            raise MapError("need at least 2 batches to split train/validation")
        if self.dtype not in ("float32", "float64"):
            raise MapError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def n_batches(self):
        return self.total_samples // self.batch_size

    def batch_spec(self):
        return TrainBatchSpec(
            chromosome_count_range=self.chromosome_count_range,
            chromosome_count_choices=self.chromosome_count_choices,
            batch_size=self.batch_size,
            noise_level=self.noise_level,
            fixed_spot_variance=self.fixed_spot_variance)


def mse_loss(predictions, targets):
    """Mean over the batch of squared prediction-target differences."""
    t = np.asarray(targets)
    if t.size == 0:
        raise MapError("empty batch")
    diff = ad.sub(predictions, Tensor(t.astype(predictions.dtype)))
    return ad.mean(ad.mul(diff, diff))


def batch_seed(base_seed, index):
    """Deterministic per-batch seed derived from the run seed."""
    return int(np.random.SeedSequence((int(base_seed), int(index)))
               .generate_state(1)[0])


def _tokenize_batch(rows, targets, config, dtype):
    """Stack one batch into (B, N, P^2) patches plus the shared encoding."""
    patches0, enc, _ = bfmodel.tokenize(rows[0], config)
    stack = np.empty((len(rows),) + patches0.shape, dtype=dtype)
    stack[0] = patches0
    for m, row in enumerate(rows[1:], start=1):
        stack[m] = bfmodel.tokenize(row, config)[0]
    return stack, enc.astype(dtype), np.asarray(targets, dtype=dtype)


def _micro_batch_size(n_tokens, batch_size, config, itemsize):
    t = n_tokens + 1
    scores = t * t * config.heads
    acts = t * (8 * config.embed_dim + 2 * config.mlp_dim)
    per_sample = config.depth * (scores + acts) * itemsize
    mb = int(_GRAPH_BYTE_BUDGET / max(1, per_sample))
    mb = max(1, min(batch_size, mb))
    # balance the chunks so no tiny remainder micro-batch is left over
    return math.ceil(batch_size / math.ceil(batch_size / mb))


def _batch_pass(batch, model, train, opt=None):
    """One forward (and optionally backward + update) over a batch.

    Gradients accumulate across micro-batches so the update sees the mean
    loss over the whole batch regardless of the micro-batch size.
    """
    patches, enc, targets = batch
    ad.clear_buffer_pool()  # token counts change from batch to batch
    bsz, n_tokens, _ = patches.shape
    mb = _micro_batch_size(n_tokens, bsz, model.config, patches.itemsize)
    total = 0.0
    if train:
        accum = {}
    for lo in range(0, bsz, mb):
        hi = min(bsz, lo + mb)
        if train:
            raw = bfmodel.forward_tokens(patches[lo:hi], enc, model)
            u = ad.sigmoid(raw)
            diff = ad.sub(u, Tensor(targets[lo:hi]))
            # sum of squares over the slice divided by the full batch size,
            # so slice losses add up to the batch mean
            loss = ad.scale(ad.sum_(ad.mul(diff, diff)), 1.0 / bsz)
            ad.zero_grads(model.params)
            loss.backward()
            for name, p in model.params.items():
                if p.grad is None:
                    continue
                acc = accum.get(name)
                accum[name] = p.grad if acc is None else acc + p.grad
            total += float(loss.values)
        else:
            with ad.no_grad():
                raw = bfmodel.forward_tokens(patches[lo:hi], enc, model)
                u = ad.sigmoid(raw)
                d = u.values - targets[lo:hi]
                total += float(np.sum(d * d)) / bsz
    if train:
        ad.adam_step(model.params, accum, opt)
    return total


def train(cfg, progress=None):
    """Returns (best ModelState, per-epoch log records)."""
    np_dtype = np.float32 if cfg.dtype == "float32" else np.float64
    spec = cfg.batch_spec()
    seeds = [batch_seed(cfg.seed, b) for b in range(cfg.n_batches)]
    batches = []
    for s in seeds:
        rows, targets = generate_training_batch(spec, s)
        batches.append(_tokenize_batch(rows, targets, cfg.model, np_dtype))

    n_val = max(1, round(cfg.val_fraction * cfg.n_batches))
    perm = np.random.default_rng([int(cfg.seed), 1]).permutation(cfg.n_batches)
    val_idx = sorted(int(i) for i in perm[:n_val])
    train_idx = sorted(int(i) for i in perm[n_val:])
    if not train_idx:
        raise MapError("validation split leaves no training batches")

    model = bfmodel.init_model(cfg.model, seed=cfg.seed, dtype=np_dtype)
    opt = OptimizerState(learning_rate=cfg.learning_rate)
    order_rng = np.random.default_rng([int(cfg.seed), 2])
    log = []
    best = None
    best_val = np.inf
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        train_loss = 0.0
        for b in order_rng.permutation(train_idx):
            loss = _batch_pass(batches[b], model, train=True, opt=opt)
            if not np.isfinite(loss):
                raise GradientError(
                    f"non-finite loss at epoch {epoch}, batch seed {seeds[b]}")
            train_loss += loss
        train_loss /= len(train_idx)
        val_loss = sum(_batch_pass(batches[b], model, train=False)
                       for b in val_idx) / len(val_idx)
        record = {"epoch": epoch, "train_loss": train_loss,
                  "val_loss": val_loss,
                  "wallclock": time.perf_counter() - t0}
        log.append(record)
        if progress is not None:
            progress(record)
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
    return best, log
