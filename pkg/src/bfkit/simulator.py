"""Synthetic contact map generation.

Each trans block receives a localized spot at the position pair implied
by the parameters, multiplied by an intensity factor, plus Gaussian
background noise scaled to the block maximum, and finally a zeroed cross
through the spot center. Only trans blocks carry signal; the full map is
symmetrized from its upper blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .genome import (ContactMap, Genome, MapError, ParamVector, TransRow,
                     normalize_row_01)

SPOT_SHAPES = ("gaussian", "square", "ellipse", "ring")

# Priors used both for training data and for ABC nuisance marginalization.
SPOT_VARIANCE_RANGE = (0.1, 10.0)
INTENSITY_RANGE = (1, 1000)


@dataclass(frozen=True)
class SimConfig:
    spot_variance: float = 1.0
    intensity: int = 100
    noise_level: float = 0.10
    cross_width: float | None = None
    spot_shape: str = "gaussian"
    auxiliary_spot: tuple | None = None  # (relative amplitude, relative size)
    trap_pixels: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.spot_variance <= 0:
            raise MapError(f"spot variance must be positive, got {self.spot_variance}")
        if not (0 <= self.noise_level <= 1):
            raise MapError(f"noise level must be in [0, 1], got {self.noise_level}")
        if self.intensity < 1:
            raise MapError(f"intensity must be >= 1, got {self.intensity}")
        if self.spot_shape not in SPOT_SHAPES:
            raise MapError(f"unknown spot shape '{self.spot_shape}'")

    @property
    def effective_cross_width(self):
        if self.cross_width is not None:
            return int(self.cross_width)
        return math.ceil(math.sqrt(self.spot_variance))


def block_rng(seed, i, j):
    """Independent stream per (seed, block) so partial rows match full maps."""
    return np.random.default_rng([int(seed), int(i), int(j)])


def _spot(shape_rc, ci, cj, cfg, rng):
    """Unit-amplitude spot on a (rows, cols) grid centered at (ci, cj)."""
    rows, cols = shape_rc
    y = np.arange(rows)[:, None] - ci
    x = np.arange(cols)[None, :] - cj
    var = cfg.spot_variance
    if cfg.spot_shape == "gaussian":
        return np.exp(-(y * y + x * x) / (2.0 * var))
    if cfg.spot_shape == "square":
        half = max(1.0, 2.0 * math.sqrt(var)) / 2.0
        return ((np.abs(y) <= half) & (np.abs(x) <= half)).astype(np.float64)
    if cfg.spot_shape == "ellipse":
        a = rng.uniform(1.5, 3.0)
        return np.exp(-(y * y / (var * a) + x * x / (var / a)) / 2.0)
    if cfg.spot_shape == "ring":
        radius = 2.0 * math.sqrt(var)
        d = np.sqrt(y * y + x * x)
        return np.exp(-((d - radius) ** 2) / (2.0 * var))
    raise MapError(f"unknown spot shape '{cfg.spot_shape}'")


def _simulate_block(genome, theta, cfg, i, j):
    """Upper-orientation trans block for the chromosome pair (i, j)."""
    r = genome.resolution
    rows, cols = genome.n_bins(i), genome.n_bins(j)
    rng = block_rng(cfg.seed, i, j)
    ci, cj = theta.positions[i] / r, theta.positions[j] / r
    blk = _spot((rows, cols), ci, cj, cfg, rng)
    if cfg.auxiliary_spot is not None:
        # separate stream: a zero-amplitude auxiliary spot must leave the
        # main draws (noise, traps) untouched
        aux_rng = np.random.default_rng([int(cfg.seed), int(i), int(j), 1])
        rel_amp, rel_size = cfg.auxiliary_spot
        aux_ci = aux_rng.uniform(0, rows)
        aux_cj = aux_rng.uniform(0, cols)
        aux_cfg = replace(cfg, spot_shape="gaussian",
                          spot_variance=cfg.spot_variance * rel_size,
                          auxiliary_spot=None)
        blk = blk + rel_amp * _spot((rows, cols), aux_ci, aux_cj, aux_cfg, aux_rng)
    blk *= cfg.intensity
    cross_rows, cross_cols = _cross_indices((rows, cols), ci, cj,
                                            cfg.effective_cross_width)
    if cfg.noise_level > 0:
        # mean and std both at half the noise level times the block max, so
        # the whole block stays proportional to the intensity factor
        level = blk.max() * cfg.noise_level / 2.0
        blk += level * (1.0 + rng.standard_normal((rows, cols)))
        np.clip(blk, 0.0, None, out=blk)
    if cfg.trap_pixels > 0:
        mask = np.ones((rows, cols), dtype=bool)
        mask[cross_rows, :] = False
        mask[:, cross_cols] = False
        flat = np.flatnonzero(mask.ravel())
        picks = rng.choice(flat, size=min(cfg.trap_pixels, flat.size),
                           replace=False)
        blk.ravel()[picks] = blk.max()
    blk[cross_rows, :] = 0.0
    blk[:, cross_cols] = 0.0
    return blk


def _cross_indices(shape_rc, ci, cj, width):
    rows, cols = shape_rc
    ri = min(int(round(ci)), rows - 1)
    rj = min(int(round(cj)), cols - 1)
    lo_r = max(0, ri - (width - 1) // 2)
    lo_c = max(0, rj - (width - 1) // 2)
    return (np.arange(lo_r, min(rows, lo_r + width)),
            np.arange(lo_c, min(cols, lo_c + width)))


def simulate(genome, theta, cfg):
    """Full genome-wide map: upper trans blocks generated, then symmetrized."""
    if theta.genome.chromosome_lengths != genome.chromosome_lengths:
        raise MapError("parameter vector does not match genome")
    n = genome.total_bins
    upper = np.zeros((n, n))
    offs = genome.block_offsets
    L = genome.n_chromosomes
    for i in range(L):
        for j in range(i + 1, L):
            upper[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = _simulate_block(
                genome, theta, cfg, i, j)
    return ContactMap(genome, upper + upper.T)


def simulate_trans_row(genome, theta, cfg, target):
    """Only the trans blocks of `target`, identical to extracting them from
    the full simulated map with the same seed."""
    blocks = []
    for j in range(genome.n_chromosomes):
        if j == target:
            continue
        if target < j:
            mat = _simulate_block(genome, theta, cfg, target, j)
        else:
            mat = _simulate_block(genome, theta, cfg, j, target).T.copy()
        blocks.append((j, mat))
    return TransRow(genome, target, blocks)


@dataclass(frozen=True)
class TrainBatchSpec:
    """Sampling ranges for one training batch sharing a synthetic genome."""

    chromosome_count_range: tuple = (2, 10)
    chromosome_count_choices: tuple | None = None
    chromosome_length_range_bp: tuple = (200_000, 2_000_000)
    resolution: int = 32_000
    batch_size: int = 200
    max_block_bins: int = 62
    spot_variance_range: tuple = SPOT_VARIANCE_RANGE
    intensity_range: tuple = INTENSITY_RANGE
    noise_level: float = 0.10
    fixed_spot_variance: float | None = None


def sample_batch_genome(spec, rng):
    """Synthetic genome plus target chromosome shared by a whole batch."""
    if spec.chromosome_count_choices is not None:
        L = int(rng.choice(np.asarray(spec.chromosome_count_choices)))
    else:
        lo, hi = spec.chromosome_count_range
        L = int(rng.integers(lo, hi + 1))
    max_len = min(spec.chromosome_length_range_bp[1],
                  spec.max_block_bins * spec.resolution)
    lengths = rng.integers(spec.chromosome_length_range_bp[0], max_len + 1,
                           size=L)
    target = int(rng.integers(0, L))
    return Genome(tuple(int(l) for l in lengths), spec.resolution), target


def sample_eval_map(n_chromosomes, seed, spec=None):
    """One held-out (ContactMap, ParamVector) pair with the training
    priors: random lengths, spot position, size, intensity and noise."""
    if spec is None:
        spec = TrainBatchSpec()
    rng = np.random.default_rng([int(seed), 1])
    max_len = min(spec.chromosome_length_range_bp[1],
                  spec.max_block_bins * spec.resolution)
    lengths = rng.integers(spec.chromosome_length_range_bp[0], max_len + 1,
                           size=n_chromosomes)
    genome = Genome(tuple(int(l) for l in lengths), spec.resolution)
    lengths = np.array(genome.chromosome_lengths, dtype=np.float64)
    theta = ParamVector(genome, rng.uniform(1.0, lengths - 1.0))
    if spec.fixed_spot_variance is not None:
        var = spec.fixed_spot_variance
    else:
        var = rng.uniform(*spec.spot_variance_range)
    alpha = int(rng.integers(spec.intensity_range[0],
                             spec.intensity_range[1] + 1))
    cfg = SimConfig(spot_variance=var, intensity=alpha,
                    noise_level=spec.noise_level,
                    seed=int(rng.integers(0, 2 ** 62)))
    return simulate(genome, theta, cfg), theta


def generate_training_batch(spec, seed):
    """One batch of (normalized TransRow, normalized target) pairs.

    All members share the same synthetic genome and target chromosome;
    spot position, size, intensity and noise vary per sample.
    """
    rng = np.random.default_rng([int(seed), 0])
    genome, target = sample_batch_genome(spec, rng)
    lengths = np.array(genome.chromosome_lengths, dtype=np.float64)
    rows, targets = [], []
    for m in range(spec.batch_size):
        theta = ParamVector(genome, rng.uniform(1.0, lengths - 1.0))
        if spec.fixed_spot_variance is not None:
            var = spec.fixed_spot_variance
        else:
            var = rng.uniform(*spec.spot_variance_range)
        alpha = int(rng.integers(spec.intensity_range[0],
                                 spec.intensity_range[1] + 1))
        cfg = SimConfig(spot_variance=var, intensity=alpha,
                        noise_level=spec.noise_level,
                        seed=int(rng.integers(0, 2 ** 62)))
        row = simulate_trans_row(genome, theta, cfg, target)
        rows.append(normalize_row_01(row))
        targets.append(theta.positions[target] / lengths[target])
    return rows, np.array(targets)
