"""File formats for contact maps.

Two formats:

* ``BFMAP1`` dense binary: magic bytes ``BFMAP1``, little-endian header
  (resolution u64, chromosome count u32, lengths u64 each), then the
  row-major float64 matrix. Round trips are bit exact.
* COO text: ``#resolution``, ``#chrom name length`` and ``#symmetric 0|1``
  header lines, then ``bin_i<TAB>bin_j<TAB>count`` body lines with global
  bin indices. Missing entries load as 0; the symmetric flag mirrors each
  entry.
"""

from __future__ import annotations

import struct

import numpy as np

from .genome import ContactMap, Genome, MapError

MAGIC_DENSE = b"BFMAP1"


class FormatError(MapError):
    pass


def save_map(cmap, path, format="dense"):
    if format == "dense":
        _save_dense(cmap, path)
    elif format == "coo":
        save_coo(cmap, path, symmetric=True)
    else:
        raise FormatError(f"unknown map format '{format}'")


def load_map(path, format=None):
    if format is None:
        with open(path, "rb") as fh:
            format = "dense" if fh.read(len(MAGIC_DENSE)) == MAGIC_DENSE else "coo"
    if format == "dense":
        return _load_dense(path)
    if format == "coo":
        return load_coo(path)
    raise FormatError(f"unknown map format '{format}'")


def _save_dense(cmap, path):
    g = cmap.genome
    with open(path, "wb") as fh:
        fh.write(MAGIC_DENSE)
        fh.write(struct.pack("<QI", g.resolution, g.n_chromosomes))
        fh.write(struct.pack(f"<{g.n_chromosomes}Q", *g.chromosome_lengths))
        fh.write(np.ascontiguousarray(cmap.values, dtype="<f8").tobytes())


def _load_dense(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC_DENSE))
        if magic != MAGIC_DENSE:
            raise FormatError(f"bad magic bytes in {path!r}")
        res, L = struct.unpack("<QI", fh.read(12))
        lengths = struct.unpack(f"<{L}Q", fh.read(8 * L))
        genome = Genome(lengths, res)
        n = genome.total_bins
        payload = fh.read(8 * n * n)
        if len(payload) != 8 * n * n:
            raise FormatError(
                f"truncated matrix payload in {path!r}: "
                f"expected {8 * n * n} bytes, got {len(payload)}")
        values = np.frombuffer(payload, dtype="<f8").reshape(n, n)
    return ContactMap(genome, values.copy())


def save_coo(cmap, path, symmetric=True):
    g = cmap.genome
    with open(path, "w") as fh:
        fh.write(f"#resolution {g.resolution}\n")
        for name, length in zip(g.names(), g.chromosome_lengths):
            fh.write(f"#chrom {name} {length}\n")
        fh.write(f"#symmetric {1 if symmetric else 0}\n")
        vals = cmap.values
        rows, cols = np.nonzero(np.triu(vals) if symmetric else vals)
        for i, j in zip(rows, cols):
            fh.write(f"{i}\t{j}\t{vals[i, j]:.17g}\n")


def load_coo(path):
    resolution = None
    names, lengths = [], []
    symmetric = False
    entries = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = line[1:].split()
                try:
                    if fields[0] == "resolution":
                        resolution = int(fields[1])
                    elif fields[0] == "chrom":
                        names.append(fields[1])
                        lengths.append(int(fields[2]))
                    elif fields[0] == "symmetric":
                        symmetric = fields[1] == "1"
                    else:
                        raise FormatError(
                            f"{path}:{lineno}: unknown header '{fields[0]}'")
                except (IndexError, ValueError) as exc:
                    raise FormatError(f"{path}:{lineno}: malformed header") from exc
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                i, j, c = int(fields[0]), int(fields[1]), float(fields[2])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: malformed entry") from exc
            if c < 0:
                raise FormatError(f"{path}:{lineno}: negative count {c}")
            entries.append((lineno, i, j, c))
    if resolution is None or not lengths:
        raise FormatError(f"{path}: missing #resolution or #chrom headers")
    genome = Genome(lengths, resolution, tuple(names))
    n = genome.total_bins
    values = np.zeros((n, n))
    for lineno, i, j, c in entries:
        if not (0 <= i < n and 0 <= j < n):
            raise FormatError(
                f"{path}:{lineno}: bin index ({i}, {j}) out of range for {n} bins")
        values[i, j] = c
        if symmetric:
            values[j, i] = c
    return ContactMap(genome, values)
