"""Synthetic map generation: spot placement, noise, variants, batching."""

import numpy as np
import pytest

from bfkit.genome import Genome, MapError, ParamVector, extract_trans_row
from bfkit.simulator import (SimConfig, TrainBatchSpec, generate_training_batch,
                             sample_batch_genome, sample_eval_map, simulate,
                             simulate_trans_row)


def genome3():
    return Genome((200_000, 300_000, 250_000), 32_000)


def theta_for(genome, frac=0.4):
    lengths = np.array(genome.chromosome_lengths, dtype=float)
    return ParamVector(genome, lengths * frac)


class TestSimConfig:
    def test_validation(self):
        with pytest.raises(MapError):
            SimConfig(spot_variance=0.0)
        with pytest.raises(MapError):
            SimConfig(noise_level=1.5)
        with pytest.raises(MapError):
            SimConfig(intensity=0)
        with pytest.raises(MapError):
            SimConfig(spot_shape="star")

    def test_cross_width_default(self):
        assert SimConfig(spot_variance=4.0).effective_cross_width == 2
        assert SimConfig(spot_variance=1.0).effective_cross_width == 1
        assert SimConfig(spot_variance=1.0, cross_width=3).effective_cross_width == 3


class TestSimulate:
    def test_symmetric_nonnegative(self):
        g = genome3()
        cmap = simulate(g, theta_for(g), SimConfig(seed=1))
        assert np.array_equal(cmap.values, cmap.values.T)
        assert np.all(cmap.values >= 0)

    def test_cis_blocks_zero(self):
        g = genome3()
        cmap = simulate(g, theta_for(g), SimConfig(seed=2))
        for i in range(3):
            assert np.all(cmap.block(i, i) == 0)

    def test_noiseless_argmax_at_spot(self):
        g = genome3()
        theta = theta_for(g, 0.37)
        cfg = SimConfig(noise_level=0.0, cross_width=0, seed=0)
        cmap = simulate(g, theta, cfg)
        r = g.resolution
        for i in range(3):
            for j in range(i + 1, 3):
                blk = cmap.block(i, j)
                ai, aj = np.unravel_index(np.argmax(blk), blk.shape)
                assert ai == round(theta.positions[i] / r)
                assert aj == round(theta.positions[j] / r)

    def test_cross_zeroed(self):
        g = genome3()
        theta = theta_for(g)
        cfg = SimConfig(spot_variance=4.0, seed=3)  # cross width 2
        cmap = simulate(g, theta, cfg)
        r = g.resolution
        blk = cmap.block(0, 1)
        ri = round(theta.positions[0] / r)
        rj = round(theta.positions[1] / r)
        assert np.all(blk[ri, :] == 0)
        assert np.all(blk[:, rj] == 0)

    def test_determinism(self):
        g = genome3()
        a = simulate(g, theta_for(g), SimConfig(seed=9)).values
        b = simulate(g, theta_for(g), SimConfig(seed=9)).values
        c = simulate(g, theta_for(g), SimConfig(seed=10)).values
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_intensity_cancels_under_normalization(self):
        from bfkit.genome import normalize_01
        g = genome3()
        theta = theta_for(g)
        a = simulate(g, theta, SimConfig(intensity=1, seed=4)).block(0, 1)
        b = simulate(g, theta, SimConfig(intensity=1000, seed=4)).block(0, 1)
        assert np.max(np.abs(normalize_01(a) - normalize_01(b))) < 1e-9

    def test_noiseless_matches_ideal_gaussian_off_cross(self):
        g = genome3()
        theta = theta_for(g, 0.5)
        cfg = SimConfig(spot_variance=2.0, intensity=50, noise_level=0.0, seed=0)
        cmap = simulate(g, theta, cfg)
        r = g.resolution
        blk = cmap.block(0, 1)
        ci, cj = theta.positions[0] / r, theta.positions[1] / r
        y = np.arange(blk.shape[0])[:, None] - ci
        x = np.arange(blk.shape[1])[None, :] - cj
        ideal = 50 * np.exp(-(y * y + x * x) / 4.0)
        off_cross = blk != 0
        assert np.max(np.abs(blk[off_cross] - ideal[off_cross])) < 1e-12

    def test_theta_genome_mismatch(self):
        g = genome3()
        other = Genome((200_000, 300_000), 32_000)
        with pytest.raises(MapError):
            simulate(g, theta_for(other), SimConfig())


class TestTransRowSimulation:
    def test_matches_full_map_extraction(self):
        g = genome3()
        theta = theta_for(g, 0.3)
        cfg = SimConfig(seed=17, trap_pixels=2)
        full = simulate(g, theta, cfg)
        for i in range(3):
            row = simulate_trans_row(g, theta, cfg, i)
            ref = extract_trans_row(full, i)
            for (s1, m1), (s2, m2) in zip(row.blocks, ref.blocks):
                assert s1 == s2
                assert np.array_equal(m1, m2)


class TestVariants:
    def test_trap_pixels_count(self):
        g = genome3()
        cfg = SimConfig(trap_pixels=5, noise_level=0.10, seed=6)
        cmap = simulate(g, theta_for(g), cfg)
        blk = cmap.block(0, 1)
        # traps sit outside the zeroed cross, so exactly 5 pixels hold the max
        assert np.count_nonzero(blk == blk.max()) >= 5

    def test_square_spot_constant_plateau(self):
        g = genome3()
        cfg = SimConfig(spot_shape="square", spot_variance=4.0, intensity=10,
                        noise_level=0.0, cross_width=0, seed=0)
        blk = simulate(g, theta_for(g), cfg).block(0, 1)
        vals = np.unique(blk)
        assert set(vals) == {0.0, 10.0}

    def test_ring_center_depleted(self):
        g = genome3()
        theta = theta_for(g, 0.5)
        cfg = SimConfig(spot_shape="ring", spot_variance=4.0, noise_level=0.0,
                        cross_width=0, seed=0)
        blk = simulate(g, theta, cfg).block(0, 1)
        r = g.resolution
        ci = int(round(theta.positions[0] / r))
        cj = int(round(theta.positions[1] / r))
        radius = int(round(2.0 * np.sqrt(4.0)))
        assert blk[ci, cj] < blk[ci, cj + radius]

    def test_ellipse_anisotropic(self):
        g = genome3()
        cfg = SimConfig(spot_shape="ellipse", spot_variance=2.0,
                        noise_level=0.0, cross_width=0, seed=0)
        blk = simulate(g, theta_for(g), cfg).block(0, 1)
        assert blk.max() > 0

    def test_zero_amplitude_auxiliary_is_identity(self):
        g = genome3()
        theta = theta_for(g)
        plain = simulate(g, theta, SimConfig(seed=8)).values
        aux = simulate(g, theta, SimConfig(seed=8, auxiliary_spot=(0.0, 1.0))).values
        assert np.array_equal(plain, aux)

    def test_auxiliary_spot_adds_mass(self):
        g = genome3()
        theta = theta_for(g)
        plain = simulate(g, theta, SimConfig(seed=8, noise_level=0.0,
                                             cross_width=0)).values
        aux = simulate(g, theta, SimConfig(seed=8, noise_level=0.0, cross_width=0,
                                           auxiliary_spot=(0.5, 1.0))).values
        assert aux.sum() > plain.sum()


class TestBatchGeneration:
    def test_targets_in_unit_interval(self):
        spec = TrainBatchSpec(batch_size=20)
        rows, targets = generate_training_batch(spec, seed=0)
        assert len(rows) == 20
        assert np.all((targets > 0) & (targets < 1))

    def test_shared_structure(self):
        spec = TrainBatchSpec(batch_size=10)
        rows, _ = generate_training_batch(spec, seed=1)
        shapes0 = [m.shape for m in rows[0].matrices()]
        for row in rows[1:]:
            assert [m.shape for m in row.matrices()] == shapes0
            assert row.target_index == rows[0].target_index

    def test_rows_normalized(self):
        spec = TrainBatchSpec(batch_size=5)
        rows, _ = generate_training_batch(spec, seed=2)
        for row in rows:
            mats = row.matrices()
            assert min(m.min() for m in mats) == 0.0
            assert max(m.max() for m in mats) == 1.0

    def test_block_height_range(self):
        spec = TrainBatchSpec(batch_size=1)
        heights = set()
        for seed in range(100):
            rows, _ = generate_training_batch(spec, seed=seed)
            for m in rows[0].matrices():
                assert 6 <= m.shape[0] <= 62
                assert 6 <= m.shape[1] <= 62
            heights.add(rows[0].matrices()[0].shape[0])
        span = max(heights) - min(heights)
        assert span >= 0.8 * (62 - 6) * 0.5  # broad coverage of the range

    def test_chromosome_count_choices(self):
        spec = TrainBatchSpec(chromosome_count_choices=(3,), batch_size=1)
        for seed in range(10):
            rows, _ = generate_training_batch(spec, seed=seed)
            assert rows[0].n_blocks == 2

    def test_determinism(self):
        spec = TrainBatchSpec(batch_size=4)
        r1, t1 = generate_training_batch(spec, seed=5)
        r2, t2 = generate_training_batch(spec, seed=5)
        assert np.array_equal(t1, t2)
        for a, b in zip(r1, r2):
            for (s1, m1), (s2, m2) in zip(a.blocks, b.blocks):
                assert s1 == s2 and np.array_equal(m1, m2)


class TestSampleEvalMap:
    def test_valid_output(self):
        cmap, theta = sample_eval_map(3, seed=0)
        assert cmap.genome.n_chromosomes == 3
        assert np.array_equal(cmap.values, cmap.values.T)
        for p, l in zip(theta.positions, cmap.genome.chromosome_lengths):
            assert 0 < p < l

    def test_deterministic(self):
        a, ta = sample_eval_map(2, seed=3)
        b, tb = sample_eval_map(2, seed=3)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(ta.positions, tb.positions)


class TestRandomConfigInvariants:
    def test_many_random_configs(self):
        # broad sweep: symmetry and nonnegativity must hold for any config
        rng = np.random.default_rng(0)
        for trial in range(25):
            L = int(rng.integers(2, 5))
            g, _ = sample_batch_genome(TrainBatchSpec(
                chromosome_count_choices=(L,)), rng)
            lengths = np.array(g.chromosome_lengths, dtype=float)
            theta = ParamVector(g, rng.uniform(1.0, lengths - 1.0))
            cfg = SimConfig(spot_variance=float(rng.uniform(0.1, 10)),
                            intensity=int(rng.integers(1, 1000)),
                            noise_level=float(rng.uniform(0, 0.3)),
                            spot_shape=str(rng.choice(["gaussian", "square",
                                                       "ellipse", "ring"])),
                            seed=int(rng.integers(0, 2 ** 62)))
            cmap = simulate(g, theta, cfg)
            assert np.array_equal(cmap.values, cmap.values.T)
            assert np.all(cmap.values >= 0)
