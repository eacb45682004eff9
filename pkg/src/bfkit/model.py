"""Block-aware transformer regressor.

Per-block patching (blocks are padded independently so no patch straddles
two blocks), fixed sine-cosine positional encoding of (block, patch row,
patch col) triples, a learnable class token, a stack of pre-norm
transformer blocks, and a sigmoid head whose output is rescaled to the
target chromosome's coordinate range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .genome import MapError

POS_SCHEMES = ("pos3d_per_block", "pos2d_per_block", "pos2d", "pos2d_pad",
               "pos1d", "none")

_COORDS_PER_SCHEME = {"pos3d_per_block": 3, "pos2d_per_block": 2, "pos2d": 2,
                      "pos2d_pad": 2, "pos1d": 1, "none": 0}

# factor applied to the O(1) sine-cosine encodings before they are added to
# the patch embeddings, so position does not drown out patch content inside
# the first layer norm (learnable ViT position embeddings are born small for
# the same reason)
POSITION_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    embed_dim: int = 24
    depth: int = 4
    heads: int = 4
    pos_encoding: str = "pos3d_per_block"

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise MapError("embed_dim must be divisible by heads")
        if self.pos_encoding not in POS_SCHEMES:
            raise MapError(f"unknown positional scheme '{self.pos_encoding}'")
        c = _COORDS_PER_SCHEME[self.pos_encoding]
        if c and self.embed_dim % (2 * c) != 0:
            raise MapError(
                f"embed_dim {self.embed_dim} not divisible by 2x{c} coordinates")

    @property
    def mlp_dim(self):
        return 4 * self.embed_dim


@dataclass
class ModelState:
    config: ModelConfig
    params: dict

    def param_arrays(self):
        return {k: v.values for k, v in self.params.items()}

    def copy(self):
        return ModelState(self.config,
                          {k: Tensor(v.values.copy(), requires_grad=True)
                           for k, v in self.params.items()})


def _truncated_normal(rng, shape, std=0.02, bound=2.0):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def init_model(config, seed=0, dtype=np.float64):
    """Fan-in-scaled truncated-normal projections, zero biases, identity
    layer norms.

    Each weight matrix uses std = 1/sqrt(fan_in). At the short training
    budgets this model targets, Adam moves every weight by at most
    lr * steps, so solutions must lie near the starting point; fan-in
    scaling keeps unit-scale solutions reachable where a much smaller
    init leaves the network stuck predicting the batch mean.
    """
    rng = np.random.default_rng(seed)
    d, p = config.embed_dim, config.patch_size
    params = {}

    def par(name, values):
        params[name] = Tensor(np.asarray(values, dtype=dtype), requires_grad=True)

    def w(shape):
        return _truncated_normal(rng, shape, std=1.0 / np.sqrt(shape[0]))

    par("patch_w", w((p * p, d)))
    par("patch_b", np.zeros(d))
    par("cls", _truncated_normal(rng, (1, d), std=1.0 / np.sqrt(d)))
    for b in range(config.depth):
        for wn in ("wq", "wk", "wv", "wo"):
            par(f"blk{b}_{wn}", w((d, d)))
            par(f"blk{b}_{wn[1]}b", np.zeros(d))
        par(f"blk{b}_ln1_g", np.ones(d))
        par(f"blk{b}_ln1_b", np.zeros(d))
        par(f"blk{b}_ln2_g", np.ones(d))
        par(f"blk{b}_ln2_b", np.zeros(d))
        par(f"blk{b}_mlp_w1", w((d, config.mlp_dim)))
        par(f"blk{b}_mlp_b1", np.zeros(config.mlp_dim))
        par(f"blk{b}_mlp_w2", w((config.mlp_dim, d)))
        par(f"blk{b}_mlp_b2", np.zeros(d))
    par("head_w", w((d, 1)))
    par("head_b", np.zeros(1))
    return ModelState(config, params)


def _pad_to_multiple(mat, p):
    rows, cols = mat.shape
    pr, pc = math.ceil(rows / p) * p, math.ceil(cols / p) * p
    if (pr, pc) == (rows, cols):
        return mat
    out = np.zeros((pr, pc), dtype=mat.dtype)
    out[:rows, :cols] = mat
    return out


def _cut_patches(mat, p):
    """(gr*gc, p*p) patches in row-major order plus the grid shape."""
    gr, gc = mat.shape[0] // p, mat.shape[1] // p
    patches = mat.reshape(gr, p, gc, p).transpose(0, 2, 1, 3).reshape(gr * gc, p * p)
    return patches, (gr, gc)


def patchify(row, patch_size):
    """Per-block patching: each block zero-padded to a multiple of the
    patch size, scanned block-major then row-major, positions as
    (block index, patch row, patch col) triples local to each block."""
    if row.n_blocks == 0:
        raise MapError("cannot patchify an empty block sequence")
    p = patch_size
    all_patches, positions = [], []
    for bi, (_, mat) in enumerate(row.blocks):
        patches, (gr, gc) = _cut_patches(_pad_to_multiple(mat, p), p)
        all_patches.append(patches)
        jj, kk = np.meshgrid(np.arange(gr), np.arange(gc), indexing="ij")
        pos = np.stack([np.full(gr * gc, bi), jj.ravel(), kk.ravel()], axis=1)
        positions.append(pos)
    return np.concatenate(all_patches), np.concatenate(positions)


def patchify_padded_row(row, patch_size):
    """Ablation variant: blocks concatenated, then one bottom-right pad of
    the whole row; positions are global 2D patch coordinates."""
    if row.n_blocks == 0:
        raise MapError("cannot patchify an empty block sequence")
    full = np.concatenate(row.matrices(), axis=1)
    patches, (gr, gc) = _cut_patches(_pad_to_multiple(full, patch_size), patch_size)
    jj, kk = np.meshgrid(np.arange(gr), np.arange(gc), indexing="ij")
    return patches, np.stack([jj.ravel(), kk.ravel()], axis=1)


def _sincos(coords, dims):
    """Classic fixed encoding of one integer coordinate into `dims` values."""
    half = dims // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half) / dims))
    angles = np.asarray(coords, dtype=np.float64)[:, None] * freqs[None, :]
    out = np.empty((len(coords), dims))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def encode_positions(positions, embed_dim, scheme):
    """(N, D) fixed encodings: D is split evenly across the coordinates of
    the scheme, each segment sine-cosine encoded."""
    n = len(positions)
    if scheme == "none":
        return np.zeros((n, embed_dim))
    coords = _COORDS_PER_SCHEME[scheme]
    if embed_dim % (2 * coords) != 0:
        raise MapError(
            f"embed_dim {embed_dim} not divisible for scheme '{scheme}'")
    positions = np.asarray(positions)
    if scheme == "pos1d":
        cols = [np.arange(n)]
    else:
        cols = [positions[:, c] for c in range(coords)]
    seg = embed_dim // coords
    return np.concatenate([_sincos(c, seg) for c in cols], axis=1)


def tokenize(row, config):
    """Patches plus positional encodings for a normalized TransRow."""
    scheme = config.pos_encoding
    if scheme == "pos2d_pad":
        patches, positions = patchify_padded_row(row, config.patch_size)
    else:
        patches, positions = patchify(row, config.patch_size)
        if scheme == "pos2d_per_block":
            positions = positions[:, 1:]
        elif scheme == "pos2d":
            # global column patch index across the concatenated row
            positions = positions.copy()
            offset, prev_block = 0, -1
            width = 0
            global_k = np.empty(len(positions), dtype=np.int64)
            for idx, (b, _, k) in enumerate(positions):
                if b != prev_block:
                    offset += width
                    width = 0
                    prev_block = b
                global_k[idx] = offset + k
                width = max(width, k + 1)
            positions = np.stack([positions[:, 1], global_k], axis=1)
    enc = POSITION_SCALE * encode_positions(positions, config.embed_dim, scheme)
    return patches, enc, positions


def forward_tokens(patches, pos_encoding, model):
    """Raw pre-sigmoid scalar(s) from token arrays.

    `patches` is (N, P^2) or batched (B, N, P^2); `pos_encoding` is (N, D)
    and shared across the batch. Returns a Tensor of shape () or (B,).
    """
    cfg = model.config
    p = model.params
    dtype = p["patch_w"].dtype
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    bsz, n, _ = patches.shape
    x = ad.linear(Tensor(np.ascontiguousarray(patches, dtype=dtype)),
                  p["patch_w"], p["patch_b"])
    cls = ad.broadcast_to(ad.reshape(p["cls"], (1, 1, cfg.embed_dim)),
                          (bsz, 1, cfg.embed_dim))
    x = ad.concat([cls, x], axis=1)
    # class token carries no positional information: its encoding row is zero
    enc = np.zeros((n + 1, cfg.embed_dim), dtype=dtype)
    enc[1:] = pos_encoding
    x = ad.add(x, Tensor(enc))
    for b in range(cfg.depth):
        h = ad.layer_norm(x, p[f"blk{b}_ln1_g"], p[f"blk{b}_ln1_b"])
        h = ad.multi_head_attention(
            h, cfg.heads,
            p[f"blk{b}_wq"], p[f"blk{b}_wk"], p[f"blk{b}_wv"], p[f"blk{b}_wo"],
            p[f"blk{b}_qb"], p[f"blk{b}_kb"], p[f"blk{b}_vb"], p[f"blk{b}_ob"])
        x = ad.add(x, h)
        h = ad.layer_norm(x, p[f"blk{b}_ln2_g"], p[f"blk{b}_ln2_b"])
        h = ad.linear(h, p[f"blk{b}_mlp_w1"], p[f"blk{b}_mlp_b1"])
        h = ad.gelu(h)
        h = ad.linear(h, p[f"blk{b}_mlp_w2"], p[f"blk{b}_mlp_b2"])
        x = ad.add(x, h)
    cls_out = ad.reshape(ad.slice_(x, (slice(None), slice(0, 1))),
                         (bsz, cfg.embed_dim))
    raw = ad.reshape(ad.linear(cls_out, p["head_w"], p["head_b"]), (bsz,))
    if single:
        raw = ad.reshape(raw, ())
    return raw


def forward(row, model):
    """Raw scalar for one normalized TransRow."""
    patches, enc, _ = tokenize(row, model.config)
    return forward_tokens(patches, enc, model)


def predict_normalized(row, model):
    """Sigmoid output in (0, 1) for one normalized TransRow."""
    with ad.no_grad():
        return float(ad.sigmoid(forward(row, model)).values)


def predict(row, genome, i, model):
    """Position estimate in bp: sigmoid output rescaled by the chromosome
    length, so the estimate always lies strictly inside (0, l_i)."""
    return predict_normalized(row, model) * genome.chromosome_lengths[i]
