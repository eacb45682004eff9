"""Command-line interface: subcommands, config parsing, artifacts."""

import json
import os

import numpy as np
import pytest

from bfkit.checkpoint import save_model
from bfkit.cli import (load_theta, main, parse_config_file, save_theta)
from bfkit.genome import Genome, ParamVector
from bfkit.io import save_map
from bfkit.model import ModelConfig, init_model
from bfkit.simulator import SimConfig, simulate


def tiny_ckpt(tmp_path):
    path = tmp_path / "model.bfwt"
    save_model(path, init_model(ModelConfig(), seed=0))
    return str(path)


def tiny_map(tmp_path, n_chroms=3, seed=0):
    g = Genome((200_000,) * n_chroms, 32_000)
    theta = ParamVector(g, np.full(n_chroms, 90_000.0))
    cmap = simulate(g, theta, SimConfig(seed=seed))
    path = tmp_path / "map.bfmap"
    save_map(cmap, path)
    return str(path), theta


class TestConfigParsing:
    def test_typed_values(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("a = 3\nb = 0.5  # comment\nflag = true\n"
                        "pair = 2, 5\nname = pos2d\nmaybe = none\n")
        cfg = parse_config_file(path)
        assert cfg == {"a": 3, "b": 0.5, "flag": True, "pair": (2, 5),
                       "name": "pos2d", "maybe": None}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("no equals sign\n")
        from bfkit.genome import MapError
        with pytest.raises(MapError):
            parse_config_file(path)


class TestThetaFiles:
    def test_round_trip(self, tmp_path):
        g = Genome((200_000, 300_000), 32_000)
        theta = ParamVector(g, np.array([90_000.123, 150_000.456]))
        path = tmp_path / "t.tsv"
        save_theta(path, theta)
        loaded = load_theta(path)
        assert loaded.genome.chromosome_lengths == g.chromosome_lengths
        assert np.array_equal(loaded.positions, theta.positions)


class TestSimulateCommand:
    def test_deterministic_artifacts(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            rc = main(["simulate", "--chroms", "3", "--seed", "7",
                       "--out", str(out)])
            assert rc == 0
        assert (out1 / "map.bfmap").read_bytes() == \
               (out2 / "map.bfmap").read_bytes()
        assert (out1 / "theta.tsv").read_text() == \
               (out2 / "theta.tsv").read_text()
        manifest = json.loads((out1 / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["seed"] == 7
        assert "config_hash" in manifest

    def test_explicit_lengths(self, tmp_path):
        out = tmp_path / "o"
        rc = main(["simulate", "--lengths", "200000,300000", "--seed", "1",
                   "--out", str(out)])
        assert rc == 0


class TestInferCommand:
    def test_estimate_table_and_report(self, tmp_path):
        ckpt = tiny_ckpt(tmp_path)
        map_path, theta = tiny_map(tmp_path)
        ref = tmp_path / "ref.tsv"
        save_theta(ref, theta)
        out = tmp_path / "out"
        rc = main(["infer", "--map", map_path, "--ckpt", ckpt,
                   "--ref", str(ref), "--repeats", "2", "--out", str(out)])
        assert rc == 0
        lines = (out / "estimate.tsv").read_text().strip().split("\n")
        assert lines[0] == "chromosome\ttheta_bp\tabs_error_bp"
        assert len(lines) == 4
        report = json.loads((out / "report.json").read_text())
        assert report["normalized_error"] is not None

    def test_missing_map_exits_nonzero(self, tmp_path):
        rc = main(["infer", "--map", str(tmp_path / "nope.bfmap"),
                   "--ckpt", tiny_ckpt(tmp_path),
                   "--out", str(tmp_path / "o")])
        assert rc == 1


class TestAbcCommand:
    def test_pearson_outputs(self, tmp_path):
        map_path, _ = tiny_map(tmp_path)
        out = tmp_path / "out"
        rc = main(["abc", "--map", map_path, "--chrom", "0",
                   "--rounds", "1", "--pop", "200", "--out", str(out)])
        assert rc == 0
        lines = (out / "population.tsv").read_text().strip().split("\n")
        assert lines[0] == "round\ttheta_bp\tweight"
        assert len(lines) == 11  # 10 survivors
        summary = json.loads((out / "summary.json").read_text())
        assert summary["rounds"] == 1

    def test_summary_requires_ckpt(self, tmp_path):
        map_path, _ = tiny_map(tmp_path)
        rc = main(["abc", "--map", map_path, "--chrom", "0",
                   "--criterion", "summary", "--rounds", "1", "--pop", "200",
                   "--out", str(tmp_path / "o")])
        assert rc == 1


class TestLoopsCommand:
    def test_candidate_table(self, tmp_path):
        from bfkit.loops import synthetic_loop_map
        from bfkit.genome import ContactMap
        g = Genome((1_920_000,), 32_000)  # one 60-bin chromosome
        block = synthetic_loop_map(60, 15, 40, amplitude=10.0, noise_level=0.0)
        map_path = tmp_path / "loop.bfmap"
        save_map(ContactMap(g, block), map_path)
        out = tmp_path / "out"
        rc = main(["loops", "--map", str(map_path),
                   "--ckpt", tiny_ckpt(tmp_path), "--out", str(out)])
        assert rc == 0
        lines = (out / "loops.tsv").read_text().strip().split("\n")
        assert lines[0].startswith("chromosome\tbin_i\tbin_j")
        assert len(lines) >= 2


class TestEvalCommand:
    def test_one_row_per_map(self, tmp_path):
        ckpt = tiny_ckpt(tmp_path)
        data = tmp_path / "maps"
        data.mkdir()
        for s in range(2):
            g = Genome((200_000, 250_000, 300_000), 32_000)
            lengths = np.array(g.chromosome_lengths, dtype=float)
            theta = ParamVector(g, lengths * 0.4)
            cmap = simulate(g, theta, SimConfig(seed=s))
            save_map(cmap, data / f"m{s}.bfmap")
            save_theta(data / f"m{s}.theta", theta)
        out = tmp_path / "out"
        rc = main(["eval", "--dir", str(data), "--ckpt", ckpt,
                   "--repeats", "1", "--svg", "--out", str(out)])
        assert rc == 0
        lines = (out / "results.tsv").read_text().strip().split("\n")
        assert lines[0] == "map\tmethod\tnormalized_error\ttime_s"
        assert len(lines) == 3
        assert (out / "errors.svg").exists()


class TestTrainCommand:
    def test_tiny_training_run(self, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("total_samples = 40\nbatch_size = 10\nepochs = 1\n"
                       "chromosome_count_range = 2, 3\ndtype = float64\n")
        ckpt = tmp_path / "model.bfwt"
        log = tmp_path / "log.jsonl"
        rc = main(["train", "--config", str(cfg), "--out", str(ckpt),
                   "--log", str(log)])
        assert rc == 0
        from bfkit.checkpoint import load_model
        model = load_model(ckpt)
        assert model.config.embed_dim == 24
        records = [json.loads(l) for l in log.read_text().strip().split("\n")]
        assert len(records) == 1
        assert np.isfinite(records[0]["val_loss"])


class TestUsageErrors:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--bogus"])
        assert exc.value.code == 2

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
