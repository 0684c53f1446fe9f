"""Adaptive Metropolis-within-Gibbs machinery and chain orchestration.

Each free coordinate is updated by a Gaussian random-walk proposal on the
unconstrained scale; simplex coordinate blocks move jointly. Proposal scales
adapt during burn-in by stochastic approximation toward fixed acceptance
targets and are frozen afterwards, so retained draws come from a fixed
transition kernel. Chains run serially, each on its own generator spawned
from the root seed, which makes runs bit-reproducible.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

SEED_ENV_VAR = "MPES_SEED"
DEFAULT_SEED = 20110613

STALL_RATE = 0.01
STALL_MIN_TRIALS = 1000


@dataclass
class UpdateUnit:
    """One sweep step: a single coordinate or a joint simplex block."""

    name: str
    coord_idx: tuple[int, ...]
    role: tuple
    target_accept: float
    init_scale: float
    # indices of items / constraints / prior terms this unit can move,
    # filled in by dependency probing
    items: tuple[int, ...] = ()
    margins: tuple[int, ...] = ()
    priors: tuple[int, ...] = ()
    aux: object = None  # role-specific precomputed lookup
    # units whose moves share a Jacobian term (simplex coordinates) point
    # at the owning unit's slot so the term is counted once
    jac_slot: int | None = None


class AdaptiveWalker:
    """Shared proposal/accept/adapt loop; subclasses supply the evaluation.

    Subclass hooks:
      propose(j, scale)        -> proposed values for unit j
      try_unit(j, vals)        -> (delta log-posterior, undo trail); the
                                  subclass applies the proposal eagerly
      undo(trail)              -> roll the proposal back
      after_sweep()            -> optional bookkeeping
    """

    def __init__(self, units: list[UpdateUnit], rng: np.random.Generator):
        self.units = units
        self.unit_idx = [list(u.coord_idx) for u in units]
        self.rng = rng
        self.log_scales = np.array([math.log(u.init_scale) for u in units])
        self._adapt_n = np.zeros(len(units), dtype=np.int64)
        self.reset_acceptance()

    def reset_acceptance(self) -> None:
        self._accepted = np.zeros(len(self.units), dtype=np.int64)
        self._proposed = np.zeros(len(self.units), dtype=np.int64)

    def acceptance_rates(self) -> dict[str, float]:
        out = {}
        for j, u in enumerate(self.units):
            n = int(self._proposed[j])
            out[u.name] = float(self._accepted[j]) / n if n else float("nan")
        return out

    @property
    def trial_counts(self) -> np.ndarray:
        return self._proposed.copy()

    def sweep(self, adapt: bool, greedy: bool = False) -> None:
        """One pass over all units.

        greedy accepts only uphill moves; it is used at the start of burn-in
        to climb from a dispersed initial state into the posterior bulk,
        where ordinary Metropolis transitions take over.
        """
        for j, unit in enumerate(self.units):
            vals = self.propose(j, math.exp(self.log_scales[j]))
            delta, trail = self.try_unit(j, vals)
            if greedy:
                accept = delta > 0.0
            else:
                accept = math.log(self.rng.uniform()) < delta
            if accept:
                self._accepted[j] += 1
            else:
                self.undo(trail)
            self._proposed[j] += 1
            if adapt:
                self._adapt_n[j] += 1
                step = float(self._adapt_n[j]) ** -0.7
                p_acc = math.exp(min(0.0, delta))
                self.log_scales[j] += step * (p_acc - unit.target_accept)
        self.after_sweep()

    # hooks ------------------------------------------------------------------

    def propose(self, j: int, scale: float):
        raise NotImplementedError

    def try_unit(self, j: int, vals):
        raise NotImplementedError

    def undo(self, trail) -> None:
        raise NotImplementedError

    def after_sweep(self) -> None:
        pass


class GenericDensityModel:
    """Arbitrary log-density over R^dim with the same chain protocol.

    Used for sampler self-checks against closed-form posteriors; every
    update re-evaluates the full density.
    """

    def __init__(self, dim: int, logpost, names: list[str] | None = None,
                 initial=None, init_scale: float = 0.5):
        self.dim = dim
        self._logpost = logpost
        self.coord_names = names if names is not None else [
            f"x[{i}]" for i in range(dim)]
        self._initial = initial
        self.units = [UpdateUnit(self.coord_names[i], (i,), ("free", i),
                                 0.44, init_scale) for i in range(dim)]

    def logpost(self, u: np.ndarray) -> float:
        return float(self._logpost(np.asarray(u, dtype=float)))

    def initial_u(self, rng: np.random.Generator) -> np.ndarray:
        if self._initial is not None:
            return np.array(self._initial, dtype=float)
        return rng.standard_normal(self.dim)

    def new_runner(self, u0: np.ndarray, rng: np.random.Generator):
        return _GenericChain(self, u0, rng)


class _GenericChain(AdaptiveWalker):
    def __init__(self, model: GenericDensityModel, u0, rng):
        super().__init__(model.units, rng)
        self.model = model
        self.u = np.array(u0, dtype=float)
        self.lp = model.logpost(self.u)
        if self.lp == -math.inf:
            raise RuntimeError("chain initialized at a zero-density state")

    def propose(self, j, scale):
        idx = list(self.units[j].coord_idx)
        return self.u[idx] + self.rng.standard_normal(len(idx)) * scale

    def try_unit(self, j, vals):
        idx = list(self.units[j].coord_idx)
        old = self.u[idx].copy()
        old_lp = self.lp
        self.u[idx] = vals
        self.lp = self.model.logpost(self.u)
        return self.lp - old_lp, (idx, old, old_lp)

    def undo(self, trail):
        idx, old, old_lp = trail
        self.u[idx] = old
        self.lp = old_lp


# ---------------------------------------------------------------------------
# chain orchestration


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")


@dataclass
class SamplerConfig:
    n_chains: int = 3
    n_burn: int = 30_000
    n_keep: int = 30_000  # total retained draws across chains
    thin: int = 3
    seed: int = field(default_factory=default_seed)
    psrf_threshold: float = 1.05

    def __post_init__(self):
        if self.n_chains < 1 or self.thin < 1 or self.n_keep < self.n_chains:
            raise ValueError("invalid sampler settings")

    @property
    def keep_per_chain(self) -> int:
        return self.n_keep // self.n_chains


@dataclass
class PosteriorSample:
    """Retained draws on the unconstrained scale, one matrix per chain."""

    chains: list[np.ndarray]  # each [draws, dim]
    coord_names: list[str]
    acceptance: list[dict[str, float]]
    seed: int
    space: object | None = None
    log_scales: list[np.ndarray] | None = None

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def dim(self) -> int:
        return self.chains[0].shape[1]

    def matrix(self) -> np.ndarray:
        """All chains stacked, [total draws, dim]."""
        return np.concatenate(self.chains, axis=0)

    def column(self, name: str) -> np.ndarray:
        j = self.coord_names.index(name)
        return self.matrix()[:, j]

    def states(self):
        """Iterate constrained states over all pooled draws."""
        if self.space is None:
            raise ValueError("sample carries no parameter space")
        for row in self.matrix():
            yield self.space.to_constrained(row)


def run_chains(model, config: SamplerConfig, progress: bool = False) -> PosteriorSample:
    """Run independent adaptive chains and collect thinned post-burn draws."""
    root = np.random.SeedSequence(config.seed)
    children = root.spawn(config.n_chains)
    chains, acceptance, scales = [], [], []
    post_sweeps = config.keep_per_chain * config.thin
    greedy_sweeps = min(1500, config.n_burn // 4)
    for c, child in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(child))
        u0 = model.initial_u(rng)
        runner = model.new_runner(u0, rng)
        for t in range(config.n_burn):
            runner.sweep(adapt=True, greedy=t < greedy_sweeps)
            if progress and (t + 1) % 5000 == 0:
                print(f"chain {c + 1}: burn {t + 1}/{config.n_burn}")
        runner.reset_acceptance()
        draws = np.empty((config.keep_per_chain, model.dim))
        kept = 0
        for t in range(post_sweeps):
            runner.sweep(adapt=False)
            if (t + 1) % config.thin == 0:
                draws[kept] = runner.u
                kept += 1
            if progress and (t + 1) % 5000 == 0:
                print(f"chain {c + 1}: sampling {t + 1}/{post_sweeps}")
        _warn_on_stalls(runner, c)
        chains.append(draws[:kept])
        acceptance.append(runner.acceptance_rates())
        scales.append(runner.log_scales.copy())
    return PosteriorSample(chains, list(model.coord_names), acceptance,
                           config.seed, getattr(model, "space", None), scales)


def _warn_on_stalls(runner: AdaptiveWalker, chain_index: int) -> None:
    trials = runner.trial_counts
    rates = runner.acceptance_rates()
    for j, unit in enumerate(runner.units):
        if trials[j] >= STALL_MIN_TRIALS and rates[unit.name] < STALL_RATE:
            warnings.warn(
                f"chain {chain_index + 1}: update {unit.name!r} accepted "
                f"{rates[unit.name]:.4f} of {trials[j]} post-burn proposals; "
                "the coordinate may be stuck", RuntimeWarning)


def run_subset(model, config: SamplerConfig, evidence_filter: str) -> PosteriorSample:
    """Posterior using only direct, only indirect, or all evidence items."""
    return run_chains(model.with_items_filter(evidence_filter), config)


# ---------------------------------------------------------------------------
# convergence and summaries


def psrf(sequences) -> float | None:
    """Potential scale reduction factor across chains for one scalar.

    Returns None when the between/within variance ratio is undefined
    (fewer than two chains, too-short chains, or zero within-chain
    variance).
    """
    seqs = np.asarray(sequences, dtype=float)
    if seqs.ndim != 2:
        raise ValueError("psrf expects a [chains, draws] array")
    m, n = seqs.shape
    if m < 2 or n < 2:
        return None
    means = seqs.mean(axis=1)
    variances = seqs.var(axis=1, ddof=1)
    w = variances.mean()
    b = n * means.var(ddof=1)
    if not np.isfinite(w) or w <= 0.0:
        return None
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def psrf_by_coordinate(sample: PosteriorSample) -> list[tuple[str, float | None]]:
    out = []
    stacked = np.stack(sample.chains)  # [C, T, D]
    for j, name in enumerate(sample.coord_names):
        out.append((name, psrf(stacked[:, :, j])))
    return out


def effective_sample_size(sequences) -> float:
    """Initial-positive-sequence autocorrelation estimate, summed over chains."""
    seqs = np.atleast_2d(np.asarray(sequences, dtype=float))
    total = 0.0
    for x in seqs:
        n = len(x)
        xc = x - x.mean()
        denom = float(np.dot(xc, xc))
        if denom <= 0.0 or n < 4:
            total += float(n)
            continue

        def rho(k: int) -> float:
            return float(np.dot(xc[:-k], xc[k:])) / denom

        acf_sum = 0.0
        k = 1
        while k + 1 < n // 2:
            pair = rho(k) + rho(k + 1)
            if pair <= 0.0:
                break
            acf_sum += pair
            k += 2
        total += n / (1.0 + 2.0 * acf_sum)
    return total


def summarize(sample: PosteriorSample, evaluator) -> tuple[float, float, float]:
    """Posterior median and central 95% interval of evaluator(state).

    The evaluator must be a pure function of one constrained state; it is
    applied draw by draw over all pooled chains.
    """
    values = np.array([evaluator(s) for s in sample.states()], dtype=float)
    lo, med, hi = np.percentile(values, [2.5, 50.0, 97.5])
    return float(med), float(lo), float(hi)
