"""Command-line entry point.

Subcommands: simulate, train, infer, abc, loops, eval, ablate. Every run
writes a manifest (command, config hash, seed, versions, wallclock) next
to its artifacts; tables are tab-separated text.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, checkpoint, inference, loops as loops_mod
from . import training
from .abc import AbcConfig, abc_summary, smc_abc
from .genome import (Genome, MapError, ParamVector, extract_trans_row,
                     observed_over_expected)
from .io import load_map, save_map
from .model import ModelConfig, POS_SCHEMES
from .simulator import SimConfig, sample_eval_map, simulate


def _cap_threads():
    cap = os.environ.get("BFKIT_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def parse_config_file(path):
    """`key = value` lines; '#' starts a comment; values are parsed as
    int, float, bool, comma tuple, or kept as strings."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise MapError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = _parse_value(value)
    return out


def _parse_value(value):
    if "," in value:
        return tuple(_parse_value(v.strip()) for v in value.split(","))
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def write_manifest(outdir, command, config, seed, t0):
    payload = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(payload.encode()).hexdigest(),
        "seed": seed,
        "versions": {"bfkit": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "wallclock_seconds": time.perf_counter() - t0,
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def write_table(path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def render_scatter_svg(path, points, width=480, height=320, margin=40):
    """Tiny dependency-free scatter plot: points are (x, y, label)."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    if not points:
        xs, ys = [0.0], [0.0]
    x0, x1 = min(xs), max(xs) or 1.0
    y0, y1 = min(ys), max(ys) or 1.0
    sx = (width - 2 * margin) / max(1e-12, x1 - x0)
    sy = (height - 2 * margin) / max(1e-12, y1 - y0)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for x, y, *label in points:
        px = margin + (x - x0) * sx
        py = height - margin - (y - y0) * sy
        parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="3" '
                     'fill="steelblue"/>')
        if label:
            parts.append(f'<text x="{px + 5:.1f}" y="{py:.1f}" '
                         f'font-size="9">{label[0]}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def save_theta(path, theta):
    with open(path, "w") as fh:
        fh.write(f"#resolution {theta.genome.resolution}\n")
        for i, (length, pos) in enumerate(zip(theta.genome.chromosome_lengths,
                                              theta.positions)):
            fh.write(f"{i}\t{length}\t{pos:.17g}\n")


def load_theta(path, genome=None):
    resolution = None
    lengths, positions = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = line[1:].split()
                if fields[0] == "resolution":
                    resolution = int(fields[1])
                continue
            _, length, pos = line.split("\t")
            lengths.append(int(length))
            positions.append(float(pos))
    if genome is None:
        if resolution is None:
            raise MapError(f"{path}: missing #resolution header")
        genome = Genome(tuple(lengths), resolution)
    return ParamVector(genome, np.array(positions))


def _cmd_simulate(args):
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng([int(args.seed), 100])
    if args.lengths:
        lengths = tuple(int(v) for v in args.lengths.split(","))
    else:
        lengths = tuple(int(v) for v in rng.integers(
            200_000, 1_984_000 + 1, size=args.chroms))
    genome = Genome(lengths, args.resolution)
    arr = np.array(genome.chromosome_lengths, dtype=np.float64)
    theta = ParamVector(genome, rng.uniform(1.0, arr - 1.0))
    cfg = SimConfig(spot_variance=args.sigma2, intensity=args.intensity,
                    noise_level=args.noise, spot_shape=args.shape,
                    trap_pixels=args.trap_pixels, seed=args.seed)
    cmap = simulate(genome, theta, cfg)
    save_map(cmap, os.path.join(args.out, "map.bfmap"), format=args.format)
    save_theta(os.path.join(args.out, "theta.tsv"), theta)
    write_manifest(args.out, "simulate", vars(args), args.seed, t0)
    return 0


def _train_config_from_file(path):
    raw = parse_config_file(path) if path else {}
    model_keys = {"patch_size", "embed_dim", "depth", "heads", "pos_encoding"}
    model_cfg = ModelConfig(**{k: v for k, v in raw.items() if k in model_keys})
    rest = {k: v for k, v in raw.items() if k not in model_keys}
    return training.TrainConfig(model=model_cfg, **rest)


def _cmd_train(args):
    t0 = time.perf_counter()
    outdir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(outdir, exist_ok=True)
    cfg = _train_config_from_file(args.config)
    if args.seed is not None:
        cfg = training.TrainConfig(**{**cfg.__dict__, "seed": args.seed,
                                      "model": cfg.model})
    log_path = args.log or os.path.join(outdir, "train_log.jsonl")
    with open(log_path, "w") as fh:
        def progress(record):
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            if args.verbose:
                print(f"epoch {record['epoch']}: "
                      f"train {record['train_loss']:.6f} "
                      f"val {record['val_loss']:.6f}", flush=True)
        model, _ = training.train(cfg, progress=progress)
    checkpoint.save_model(args.out, model, {"train_seed": cfg.seed})
    write_manifest(outdir, "train", {"config": args.config,
                                     "train": {**cfg.__dict__,
                                               "model": cfg.model.__dict__}},
                   cfg.seed, t0)
    return 0


def _cmd_infer(args):
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    cmap = load_map(args.map)
    cmap = inference.preprocess_map(cmap, ice=args.ice,
                                    zero_borders=args.zero_borders)
    model = checkpoint.load_model(args.ckpt)
    ref = load_theta(args.ref, cmap.genome) if args.ref else None
    report = inference.evaluate(cmap, model, theta_ref=ref, k=args.k,
                                repeats=args.repeats, seed=args.seed,
                                fit=args.fit, multires=args.multires)
    rows = []
    for i, pos in enumerate(report.positions):
        err = "" if report.abs_errors is None else f"{report.abs_errors[i]:.6g}"
        rows.append((i, f"{pos:.6g}", err))
    write_table(os.path.join(args.out, "estimate.tsv"),
                ("chromosome", "theta_bp", "abs_error_bp"), rows)
    summary = {"method": report.method, "wallclock": report.wallclock,
               "normalized_error": report.normalized_error}
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    write_manifest(args.out, "infer", vars(args), args.seed, t0)
    if report.normalized_error is not None:
        print(f"normalized error: {report.normalized_error:.4f}")
    return 0


def _cmd_abc(args):
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    cmap = load_map(args.map)
    row = extract_trans_row(cmap, args.chrom)
    cfg = AbcConfig(rounds=args.rounds, population=args.pop,
                    criterion=args.criterion)
    if args.criterion == "summary":
        if not args.ckpt:
            raise MapError("--ckpt is required for the summary criterion")
        model = checkpoint.load_model(args.ckpt)
        rounds = abc_summary(row, args.chrom, cfg, model, seed=args.seed)
    else:
        rounds = smc_abc(row, args.chrom, cfg, seed=args.seed)
    rows = []
    for pop in rounds:
        for theta, w in zip(pop.particles, pop.weights):
            rows.append((pop.round_index, f"{theta:.6g}", f"{w:.8g}"))
    write_table(os.path.join(args.out, "population.tsv"),
                ("round", "theta_bp", "weight"), rows)
    final = rounds[-1]
    keep_highest = args.criterion == "pearson"
    summary = {"mean_bp": final.mean(), "std_bp": final.std(),
               "best5_mean_bp": final.best_fraction_mean(
                   0.05, keep_highest=keep_highest),
               "rounds": len(rounds)}
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    write_manifest(args.out, "abc", vars(args), args.seed, t0)
    print(f"posterior mean: {summary['mean_bp']:.1f} bp "
          f"(std {summary['std_bp']:.1f})")
    return 0


def _cmd_loops(args):
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    cmap = load_map(args.map)
    model = checkpoint.load_model(args.ckpt)
    g = cmap.genome
    rows = []
    for c in range(g.n_chromosomes):
        block = cmap.block(c, c)
        for cand, (tx, ty) in loops_mod.detect_loops(
                block, model, resolution=g.resolution,
                percentile=args.percentile, min_diag=args.min_diag):
            rows.append((c, cand.bin_i, cand.bin_j,
                         f"{cand.intensity:.6g}", f"{tx:.6g}", f"{ty:.6g}"))
    write_table(os.path.join(args.out, "loops.tsv"),
                ("chromosome", "bin_i", "bin_j", "intensity",
                 "theta_x_bp", "theta_y_bp"), rows)
    write_manifest(args.out, "loops", vars(args), 0, t0)
    print(f"{len(rows)} loop candidates")
    return 0


def _cmd_eval(args):
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    model = checkpoint.load_model(args.ckpt)
    rows = []
    points = []
    for name in sorted(os.listdir(args.dir)):
        if not name.endswith(".bfmap"):
            continue
        stem = name[:-len(".bfmap")]
        ref_path = os.path.join(args.dir, stem + ".theta")
        cmap = load_map(os.path.join(args.dir, name))
        ref = load_theta(ref_path, cmap.genome) if os.path.exists(ref_path) \
            else None
        report = inference.evaluate(cmap, model, theta_ref=ref, k=args.k,
                                    repeats=args.repeats, seed=args.seed,
                                    fit=args.fit, multires=args.multires)
        err = "" if report.normalized_error is None \
            else f"{report.normalized_error:.6g}"
        rows.append((stem, report.method, err, f"{report.wallclock:.3f}"))
        if report.normalized_error is not None:
            points.append((len(points), report.normalized_error, stem))
    write_table(os.path.join(args.out, "results.tsv"),
                ("map", "method", "normalized_error", "time_s"), rows)
    if args.svg:
        render_scatter_svg(os.path.join(args.out, "errors.svg"), points)
    write_manifest(args.out, "eval", vars(args), args.seed, t0)
    return 0


def _scheme_errors(scheme, args):
    """Train one model under the desk budget and collect per-map errors
    grouped by held-out block count."""
    model_cfg = ModelConfig(pos_encoding=scheme)
    cfg = training.TrainConfig(
        model=model_cfg, total_samples=args.samples, epochs=args.epochs,
        seed=args.seed, chromosome_count_range=(2, 5))
    model, _ = training.train(cfg)
    per_block = {}
    for n_blocks in args.block_counts:
        errors = []
        for m in range(args.maps_per_cell):
            cmap, theta = sample_eval_map(n_blocks + 1,
                                          [args.seed, 7, n_blocks, m])
            k = min(2, n_blocks)
            est = inference.estimate(cmap, model, k=k, repeats=args.repeats,
                                     seed=args.seed)
            errors.append(inference.normalized_error(
                est, theta, cmap.genome.resolution))
        per_block[n_blocks] = errors
    return per_block


def _cmd_ablate(args):
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    args.block_counts = [int(b) for b in args.blocks.split(",")]
    schemes = args.schemes.split(",")
    for s in schemes:
        if s not in POS_SCHEMES:
            raise MapError(f"unknown scheme '{s}'")
    summary_rows = []
    raw_rows = []
    for scheme in schemes:
        per_block = _scheme_errors(scheme, args)
        for n_blocks, errors in per_block.items():
            arr = np.array(errors)
            lo, hi = np.percentile(arr, [2.5, 97.5])
            summary_rows.append((scheme, n_blocks, f"{arr.mean():.4f}",
                                 f"{arr.std():.4f}",
                                 f"{np.median(arr):.4f}",
                                 f"{lo:.4f}", f"{hi:.4f}"))
            for m, e in enumerate(errors):
                raw_rows.append((scheme, n_blocks, m, f"{e:.6g}"))
    write_table(os.path.join(args.out, "ablation.tsv"),
                ("scheme", "blocks", "mean", "std", "median",
                 "ci2.5", "ci97.5"), summary_rows)
    write_table(os.path.join(args.out, "ablation_raw.tsv"),
                ("scheme", "blocks", "map", "normalized_error"), raw_rows)
    write_manifest(args.out, "ablate", vars(args), args.seed, t0)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="bfkit",
                                 description="Block-structured interaction "
                                             "map toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic map")
    p.add_argument("--chroms", type=int, default=3)
    p.add_argument("--lengths", default="")
    p.add_argument("--resolution", type=int, default=32000)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--intensity", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.10)
    p.add_argument("--shape", default="gaussian")
    p.add_argument("--trap-pixels", type=int, default=0)
    p.add_argument("--format", default="dense", choices=("dense", "coo"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="estimate positions from a map")
    p.add_argument("--map", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref", default=None)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--fit", action="store_true")
    p.add_argument("--multires", type=int, default=None)
    p.add_argument("--ice", action="store_true")
    p.add_argument("--zero-borders", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("abc", help="posterior sampling for one chromosome")
    p.add_argument("--map", required=True)
    p.add_argument("--chrom", type=int, required=True)
    p.add_argument("--criterion", default="pearson",
                   choices=("pearson", "summary"))
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--pop", type=int, default=2000)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_abc)

    p = sub.add_parser("loops", help="detect loops in cis blocks")
    p.add_argument("--map", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--percentile", type=float, default=92.0)
    p.add_argument("--min-diag", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_loops)

    p = sub.add_parser("eval", help="evaluate a directory of maps")
    p.add_argument("--dir", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--fit", action="store_true")
    p.add_argument("--multires", type=int, default=None)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="positional-encoding sweep")
    p.add_argument("--schemes", default="pos3d_per_block,none")
    p.add_argument("--blocks", default="1,4")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--maps-per-cell", type=int, default=50)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)
    return ap


def main(argv=None):
    _cap_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
