"""Sequential Monte Carlo ABC over per-chromosome position marginals.

Two comparison criteria share one SMC engine: a per-block Pearson
correlation between simulated and reference trans rows (higher is
better), and the distance between learned summary statistics, i.e. the
trained model's normalized predictions (lower is better). Nuisance
parameters (other chromosomes' positions, spot size, intensity) are
redrawn from their priors for every simulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .genome import MapError, TransRow
from .inference import _predict_row
from .simulator import (INTENSITY_RANGE, SPOT_VARIANCE_RANGE, SimConfig,
                        simulate_trans_row)
from .genome import ParamVector


class AbcError(RuntimeError):
    pass


@dataclass(frozen=True)
class AbcConfig:
    rounds: int = 3
    population: int = 2000
    acceptance: float = 0.05
    kernel_std: float | None = None  # defaults to the map resolution (bp)
    criterion: str = "pearson"

    def __post_init__(self):
        if self.criterion not in ("pearson", "summary"):
            raise MapError(f"unknown criterion '{self.criterion}'")
        if self.rounds < 1 or self.population < 1:
            raise MapError("rounds and population must be positive")
        if self.survivors < 10:
            raise MapError(
                f"population {self.population} too small: "
                f"{self.survivors} survivors < 10")

    @property
    def survivors(self):
        return round(self.acceptance * self.population)


@dataclass
class WeightedPopulation:
    particles: np.ndarray  # bp
    weights: np.ndarray  # normalized to sum 1
    round_index: int
    scores: np.ndarray | None = None

    def mean(self):
        return float(np.sum(self.weights * self.particles))

    def std(self):
        m = self.mean()
        return float(np.sqrt(np.sum(self.weights * (self.particles - m) ** 2)))

    def best_fraction_mean(self, fraction=0.05, keep_highest=True):
        """Plain mean over the best-scoring fraction of the population."""
        if self.scores is None:
            raise MapError("population carries no scores")
        n = max(1, round(fraction * len(self.particles)))
        order = np.argsort(self.scores)
        idx = order[-n:] if keep_highest else order[:n]
        return float(np.mean(self.particles[idx]))


def pearson_criterion(row, row_ref):
    """Mean over blocks of the Pearson correlation between vectorized
    blocks; zero-variance blocks are skipped."""
    if [s for s, _ in row.blocks] != [s for s, _ in row_ref.blocks]:
        raise MapError("rows must share block structure")
    corrs = []
    for (_, a), (_, b) in zip(row.blocks, row_ref.blocks):
        if a.shape != b.shape:
            raise MapError(f"block shapes differ: {a.shape} vs {b.shape}")
        va, vb = a.ravel(), b.ravel()
        if va.std() == 0 or vb.std() == 0:
            continue
        corrs.append(float(np.corrcoef(va, vb)[0, 1]))
    if not corrs:
        raise MapError("all blocks constant: correlation undefined")
    return float(np.mean(corrs))


def make_marginal_simulator(genome, target, noise_level=0.10):
    """Simulator for one chromosome's marginal: the target position is the
    argument, everything else is redrawn from the priors per call."""
    lengths = np.array(genome.chromosome_lengths, dtype=np.float64)

    def simulate_fn(theta_target, seed):
        rng = np.random.default_rng(seed)
        positions = rng.uniform(1.0, lengths - 1.0)
        positions[target] = theta_target
        var = rng.uniform(*SPOT_VARIANCE_RANGE)
        alpha = int(rng.integers(INTENSITY_RANGE[0], INTENSITY_RANGE[1] + 1))
        cfg = SimConfig(spot_variance=var, intensity=alpha,
                        noise_level=noise_level,
                        seed=int(rng.integers(0, 2 ** 62)))
        return simulate_trans_row(genome, ParamVector(genome, positions),
                                  cfg, target)

    return simulate_fn


def _run_smc(score_fn, keep_highest, prior_lo, prior_hi, cfg, kernel_std,
             simulate_fn, seed):
    n, m = cfg.population, cfg.survivors
    prior_density = 1.0 / (prior_hi - prior_lo)
    rounds = []
    prev = None
    for t in range(cfg.rounds):
        thetas = np.empty(n)
        for p in range(n):
            rng = np.random.default_rng([int(seed), t, p])
            if t == 0:
                thetas[p] = rng.uniform(prior_lo, prior_hi)
            else:
                k = rng.choice(m, p=prev.weights)
                src = prev.particles[k]
                cand = src + kernel_std * rng.standard_normal()
                # out-of-prior perturbations fall back to their source
                thetas[p] = cand if prior_lo < cand < prior_hi else src
        scores = np.array([
            score_fn(simulate_fn(thetas[p], [int(seed), t, p, 1]))
            for p in range(n)])
        order = np.argsort(scores)
        survivors = order[-m:] if keep_highest else order[:m]
        kept = thetas[survivors]
        kept_scores = scores[survivors]
        if t == 0:
            weights = np.full(m, 1.0 / m)
        else:
            kern = np.exp(-0.5 * ((kept[:, None] - prev.particles[None, :])
                                  / kernel_std) ** 2) / (
                kernel_std * np.sqrt(2.0 * np.pi))
            denom = kern @ prev.weights
            weights = np.where(denom > 0, prior_density / denom, 0.0)
            total = weights.sum()
            if not np.isfinite(total) or total <= 0:
                raise AbcError(f"degenerate weights at round {t}")
            weights /= total
        prev = WeightedPopulation(kept, weights, t, kept_scores)
        rounds.append(prev)
    return rounds


def smc_abc(row_ref, target, cfg, simulate_fn=None, seed=0,
            noise_level=0.10):
    """Pearson-criterion SMC; returns one WeightedPopulation per round."""
    g = row_ref.genome
    kernel_std = cfg.kernel_std if cfg.kernel_std is not None else g.resolution
    if simulate_fn is None:
        simulate_fn = make_marginal_simulator(g, target, noise_level)
    return _run_smc(lambda row: pearson_criterion(row, row_ref),
                    True, 1.0, g.chromosome_lengths[target] - 1.0,
                    cfg, kernel_std, simulate_fn, seed)


def abc_summary(row_ref, target, cfg, model, simulate_fn=None, seed=0,
                noise_level=0.10):
    """Learned-summary SMC: distance between the model's normalized
    predictions on candidate and reference rows, lowest kept."""
    g = row_ref.genome
    kernel_std = cfg.kernel_std if cfg.kernel_std is not None else g.resolution
    if simulate_fn is None:
        simulate_fn = make_marginal_simulator(g, target, noise_level)
    u_ref = _predict_row(row_ref, model)  # computed once and cached
    return _run_smc(lambda row: abs(_predict_row(row, model) - u_ref),
                    False, 1.0, g.chromosome_lengths[target] - 1.0,
                    cfg, kernel_std, simulate_fn, seed)
