"""Coordinate system and block-structured matrix operations.

A `Genome` fixes the block structure: one block of bins per chromosome at
a given resolution. `ContactMap` is the dense genome-wide matrix and
`TransRow` the sequence of inter-chromosome blocks describing one
chromosome's interactions with all the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MapError(ValueError):
    pass


@dataclass(frozen=True)
class Genome:
    """Chromosome lengths (bp) plus the map resolution (bp per bin)."""

    chromosome_lengths: tuple
    resolution: int
    chromosome_names: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "chromosome_lengths",
                           tuple(int(l) for l in self.chromosome_lengths))
        if self.resolution <= 0:
            raise MapError(f"resolution must be positive, got {self.resolution}")
        for i, l in enumerate(self.chromosome_lengths):
            if l < 2 * self.resolution:
                raise MapError(
                    f"chromosome {i} length {l} < 2x resolution {self.resolution}")
        if self.chromosome_names is not None:
            names = tuple(self.chromosome_names)
            if len(names) != len(self.chromosome_lengths):
                raise MapError("chromosome_names length mismatch")
            object.__setattr__(self, "chromosome_names", names)

    @property
    def n_chromosomes(self):
        return len(self.chromosome_lengths)

    def n_bins(self, i):
        return math.ceil(self.chromosome_lengths[i] / self.resolution)

    @property
    def bins_per_chromosome(self):
        return tuple(self.n_bins(i) for i in range(self.n_chromosomes))

    @property
    def total_bins(self):
        return sum(self.bins_per_chromosome)

    @property
    def block_offsets(self):
        offs = [0]
        for b in self.bins_per_chromosome:
            offs.append(offs[-1] + b)
        return tuple(offs)

    def names(self):
        if self.chromosome_names is not None:
            return self.chromosome_names
        return tuple(f"chr{i + 1}" for i in range(self.n_chromosomes))


@dataclass
class ContactMap:
    """Dense nonnegative matrix over a genome, addressed by blocks."""

    genome: Genome
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = self.genome.total_bins
        if self.values.shape != (n, n):
            raise MapError(
                f"values shape {self.values.shape} != ({n}, {n}) from genome")

    def block(self, i, j):
        offs = self.genome.block_offsets
        return self.values[offs[i]:offs[i + 1], offs[j]:offs[j + 1]]

    def copy(self):
        return ContactMap(self.genome, self.values.copy())


@dataclass
class TransRow:
    """Inter-chromosome blocks of one target chromosome, in source order.

    Each entry is (source_chromosome_index, matrix) with the target
    chromosome indexing rows.
    """

    genome: Genome
    target_index: int
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        rows = self.genome.n_bins(self.target_index)
        for src, mat in self.blocks:
            if src == self.target_index:
                raise MapError("TransRow must not contain the cis block")
            if mat.shape[0] != rows:
                raise MapError(
                    f"block from source {src} has {mat.shape[0]} rows, expected {rows}")

    @property
    def n_blocks(self):
        return len(self.blocks)

    def matrices(self):
        return [mat for _, mat in self.blocks]


@dataclass
class RawRow:
    """Unvalidated block sequence (e.g. cropped windows) with the same
    block interface as TransRow, so it can feed the same tokenizer."""

    blocks: list

    @property
    def n_blocks(self):
        return len(self.blocks)

    def matrices(self):
        return [mat for _, mat in self.blocks]


@dataclass
class ParamVector:
    """One position per chromosome, in bp."""

    genome: Genome
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.shape != (self.genome.n_chromosomes,):
            raise MapError("one position per chromosome required")
        for i, (p, l) in enumerate(zip(self.positions, self.genome.chromosome_lengths)):
            if not (0 < p < l):
                raise MapError(
                    f"position {p} outside (0, {l}) for chromosome {i}")


def ice_normalize(cmap, max_iters=200, tol=1e-8):
    """Iterative matrix balancing (Sinkhorn-style on the symmetric matrix).

    All-zero rows/columns (sum below 1e-12) are excluded from balancing and
    left untouched; all other row sums converge to 1 within relative `tol`.
    """
    w = np.asarray(cmap.values, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise MapError(f"ICE requires a square matrix, got {w.shape}")
    if np.any(w < 0):
        raise MapError("ICE requires nonnegative entries")
    w = w.copy()
    keep = w.sum(axis=1) > 1e-12
    if not np.any(keep):
        return ContactMap(cmap.genome, w)
    for _ in range(max_iters):
        s = w.sum(axis=1)
        t = s[keep] / s[keep].mean()
        if np.max(np.abs(t - 1.0)) < tol:
            break
        scal = np.ones_like(s)
        scal[keep] = t
        w /= np.outer(scal, scal)
    s = w.sum(axis=1)
    w[np.ix_(keep, keep)] /= s[keep].mean()
    return ContactMap(cmap.genome, w)


def normalize_01(values):
    """Affine rescale to [0, 1]; constant input maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise MapError("cannot normalize an empty array")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def normalize_row_01(row):
    """Jointly rescale all blocks of a TransRow to [0, 1]."""
    mats = row.matrices()
    lo = min(m.min() for m in mats)
    hi = max(m.max() for m in mats)
    if hi == lo:
        blocks = [(s, np.zeros_like(m)) for s, m in row.blocks]
    else:
        blocks = [(s, (m - lo) / (hi - lo)) for s, m in row.blocks]
    if isinstance(row, TransRow):
        return TransRow(row.genome, row.target_index, blocks)
    return RawRow(blocks)


def extract_trans_row(cmap, i):
    """All trans blocks of chromosome `i`, target indexing rows."""
    g = cmap.genome
    if not (0 <= i < g.n_chromosomes):
        raise MapError(f"chromosome index {i} out of range")
    blocks = []
    for j in range(g.n_chromosomes):
        if j == i:
            continue
        blocks.append((j, cmap.block(i, j).copy()))
    return TransRow(g, i, blocks)


def subsample_blocks(row, k, seed):
    """Choose k distinct blocks uniformly, preserving their order."""
    if not (1 <= k <= row.n_blocks):
        raise MapError(f"k={k} out of range for {row.n_blocks} blocks")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(row.n_blocks, size=k, replace=False))
    return TransRow(row.genome, row.target_index,
                    [row.blocks[i] for i in idx])


def downsample(cmap, factor, aggregate="sum"):
    """Coarsen each block independently by k x k neighborhood aggregation.

    Ragged edge bins aggregate partial neighborhoods; block sums are
    preserved exactly for the default sum aggregation.
    """
    k = int(factor)
    if k < 1:
        raise MapError(f"downsample factor must be >= 1, got {factor}")
    if k == 1:
        return cmap.copy()
    if aggregate not in ("sum", "mean"):
        raise MapError(f"unknown aggregation '{aggregate}'")
    g = cmap.genome
    coarse = Genome(g.chromosome_lengths, g.resolution * k, g.chromosome_names)
    out = np.zeros((coarse.total_bins, coarse.total_bins))
    offs_f, offs_c = g.block_offsets, coarse.block_offsets
    for i in range(g.n_chromosomes):
        for j in range(g.n_chromosomes):
            blk = cmap.block(i, j)
            agg = _pool_block(blk, k, aggregate)
            out[offs_c[i]:offs_c[i] + agg.shape[0],
                offs_c[j]:offs_c[j] + agg.shape[1]] = agg
    return ContactMap(coarse, out)


def _pool_block(blk, k, aggregate):
    nr, nc = blk.shape
    cr, cc = math.ceil(nr / k), math.ceil(nc / k)
    padded = np.zeros((cr * k, cc * k))
    padded[:nr, :nc] = blk
    pooled = padded.reshape(cr, k, cc, k).sum(axis=(1, 3))
    if aggregate == "mean":
        counts = np.zeros((cr * k, cc * k))
        counts[:nr, :nc] = 1.0
        pooled /= counts.reshape(cr, k, cc, k).sum(axis=(1, 3))
    return pooled


def observed_over_expected(block):
    """Divide each entry by the mean of its |i-j| diagonal-distance class.

    Distance classes with zero mean map to 0 so downstream peak detection
    stays finite.
    """
    c = np.asarray(block, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise MapError(f"observed/expected requires a square block, got {c.shape}")
    n = c.shape[0]
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :])
    means = np.zeros(n)
    for d in range(n):
        means[d] = c[dist == d].mean()
    expected = means[dist]
    out = np.zeros_like(c)
    np.divide(c, expected, out=out, where=expected != 0)
    return out


def depth_subsample(cmap, fraction, seed):
    """Binomially thin integer counts to a fraction of the total depth.

    Applied on the upper triangle (diagonal included) and mirrored so the
    output stays symmetric.
    """
    p = float(fraction)
    if not (0 < p <= 1):
        raise MapError(f"fraction must be in (0, 1], got {fraction}")
    counts = np.rint(cmap.values).astype(np.int64)
    if p == 1.0:
        return ContactMap(cmap.genome, counts.astype(np.float64))
    rng = np.random.default_rng(seed)
    upper = np.triu(counts)
    thinned = rng.binomial(upper, p).astype(np.float64)
    out = thinned + np.triu(thinned, 1).T
    return ContactMap(cmap.genome, out)


def zero_block_borders(cmap, width=1):
    """Zero the first/last `width` rows and columns of every block."""
    out = cmap.copy()
    offs = out.genome.block_offsets
    L = out.genome.n_chromosomes
    for i in range(L):
        lo, hi = offs[i], offs[i + 1]
        out.values[lo:lo + width, :] = 0.0
        out.values[hi - width:hi, :] = 0.0
        out.values[:, lo:lo + width] = 0.0
        out.values[:, hi - width:hi] = 0.0
    return out
