"""Evolutionary stage: differential evolution (rand/1/bin) over flat
parameter vectors.

Generational scheme: every member of generation g is paired against one
trial vector built from generation-g members only, and the survivor is
chosen by strict fitness comparison (ties keep the parent).  All trial
constructions and evaluations inside a generation are independent, so
they may run on a thread pool; per-individual RNG streams are derived
from (seed, generation, individual), which makes results identical for
any worker count.

RNG namespaces under the config seed: child(2, g, i) drives member i of
generation g, child(3, r) draws fitness subset r, child(4, i) seeds
soup member i.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import (ConfigError, MissingArtifactError, PopulationError,
                     ShapeMismatchError)
from .network import NetworkSpec, init_params, loss
from .rng import RngStream

_NS_DE = 2
_NS_SUBSET = 3
_NS_SOUP = 4

DEFAULT_GRID = {
    "F": [0.01, 0.1, 1.0, 2.0],
    "Cr": [0.0, 0.05, 0.5, 1.0],
    "lr": [0.01, 0.02],
}


@dataclass(frozen=True)
class DeConfig:
    F: float = 0.5
    Cr: float = 0.5
    max_generations: int = 200
    delta2: float = 0.0
    min_improve: float = 1e-5
    window: int = 20
    fitness_subset: int = 10000
    resample_every: int = 0
    force_jrand: bool = False
    seed: int = 0

    def __post_init__(self):
        checks = [
            (math.isfinite(self.F), "/de/F", "must be finite"),
            (0.0 <= self.Cr <= 1.0, "/de/Cr", "must be in [0, 1]"),
            (self.max_generations >= 0, "/de/max_generations", "must be >= 0"),
            (self.delta2 >= 0, "/de/delta2", "must be >= 0"),
            (self.min_improve >= 0, "/de/min_improve", "must be >= 0"),
            (self.window >= 1, "/de/window", "must be >= 1"),
            (self.fitness_subset >= 1, "/de/fitness_subset", "must be >= 1"),
            (self.resample_every >= 0, "/de/resample_every", "must be >= 0"),
            (self.seed >= 0, "/de/seed", "must be >= 0"),
        ]
        for ok, path, msg in checks:
            if not ok:
                raise ConfigError(path, msg)


@dataclass
class Population:
    """Fixed-size set of candidate vectors with a fitness cache.

    fitness[i] is NaN while stale; members all share one length/dtype.
    """

    members: list
    fitness: np.ndarray
    generation: int = 0

    def __post_init__(self):
        self.members = list(self.members)
        if not self.members:
            raise PopulationError("population must be nonempty")
        d = self.members[0].shape
        for v in self.members:
            if v.ndim != 1 or v.shape != d:
                raise PopulationError(
                    f"members disagree on shape: {tuple(v.shape)} vs {tuple(d)}")
        self.fitness = np.asarray(self.fitness, dtype=np.float64)
        if self.fitness.shape != (len(self.members),):
            raise PopulationError(
                f"fitness cache length {self.fitness.shape} does not match "
                f"{len(self.members)} members")

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def best_index(self) -> int:
        if np.isnan(self.fitness).any():
            raise PopulationError("fitness cache is stale")
        return int(np.argmin(self.fitness))


@dataclass(frozen=True)
class FitnessContext:
    """Frozen evaluation data; equal subset_id means equal data, so
    comparisons within a generation are paired."""

    spec: NetworkSpec
    images: np.ndarray
    labels: np.ndarray
    subset_id: int = 0

    def evaluate(self, member: np.ndarray) -> float:
        # fitness is plain mean cross-entropy: no penalty term
        return loss(self.spec, member, self.images, self.labels, 0.0)


def sample_context(spec: NetworkSpec, data, size: int, stream: RngStream,
                   subset_id: int = 0) -> FitnessContext:
    """Fixed evaluation subset drawn without replacement (all data if
    size >= N)."""
    n = len(data.labels)
    if size >= n:
        return FitnessContext(spec, data.images, data.labels, subset_id)
    idx = np.sort(stream.generator().choice(n, size=size, replace=False))
    return FitnessContext(spec, data.images[idx], data.labels[idx], subset_id)


def fitness(member: np.ndarray, ctx) -> float:
    """Score one member on the context's data (lower is better)."""
    return ctx.evaluate(member)


def seed_population(mode: str, source, m: int, jitter_sigma: float = 0.0,
                    stream: Optional[RngStream] = None) -> Population:
    """Build the generation-0 population.

    mode 'ancestors': members are the checkpoint ring's vectors, newest
    last; a ring longer than m contributes its newest m.  A ring shorter
    than m is topped up with jittered copies of the newest vector
    (Gaussian, sd jitter_sigma), or rejected when jitter is disabled.

    mode 'soup': m independent fresh initializations of `source` (a
    NetworkSpec) — no pretraining signal at all.
    """
    if m < 4:
        raise PopulationError(f"population size must be >= 4, got {m}")
    if mode == "ancestors":
        if hasattr(source, "entries"):
            vectors = [e.params for e in source.entries]
        else:
            vectors = list(source)
        if not vectors:
            raise PopulationError("ancestor ring is empty")
        vectors = [np.asarray(v) for v in vectors[-m:]]
        members = [v.copy() for v in vectors]
        missing = m - len(members)
        if missing > 0:
            if jitter_sigma <= 0:
                raise PopulationError(
                    f"ring holds {len(members)} < m={m} vectors and jitter "
                    f"is disabled")
            if stream is None:
                raise PopulationError("jitter fill requires an RNG stream")
            newest = members[-1]
            gen = stream.generator()
            for _ in range(missing):
                noise = gen.normal(0.0, jitter_sigma, newest.shape[0])
                members.append(newest + noise.astype(newest.dtype))
    elif mode == "soup":
        if not isinstance(source, NetworkSpec):
            raise PopulationError("soup seeding requires a NetworkSpec")
        if stream is None:
            raise PopulationError("soup seeding requires an RNG stream")
        members = [init_params(source, stream.child(_NS_SOUP, i))
                   for i in range(m)]
    else:
        raise PopulationError(f"unknown seeding mode {mode!r}")
    return Population(members, np.full(m, np.nan), generation=0)


def mutate(pop: Population, i: int, F: float, gen: np.random.Generator,
           counter=None) -> np.ndarray:
    """theta_j + F (theta_k - theta_l) with j,k,l distinct and != i."""
    if pop.m < 4:
        raise PopulationError(
            f"mutation needs at least 4 members, got {pop.m}")
    if not 0 <= i < pop.m:
        raise PopulationError(f"member index {i} out of range [0, {pop.m})")
    others = np.delete(np.arange(pop.m), i)
    j, k, l = gen.choice(others, size=3, replace=False)
    if counter is not None:
        counter.add_de_mutation(pop.members[0].shape[0])
    return pop.members[j] + F * (pop.members[k] - pop.members[l])


def crossover(parent: np.ndarray, mutant: np.ndarray, Cr: float,
              force_jrand: bool, gen: np.random.Generator,
              counter=None) -> np.ndarray:
    """Per-coordinate: mutant where the draw lands inside probability
    mass Cr, parent otherwise.

    The draw is mapped to (0, 1], so Cr=0 never takes the mutant and
    Cr=1 always does, both exactly.  force_jrand additionally copies one
    uniformly chosen coordinate from the mutant (off by default).
    """
    if parent.shape != mutant.shape:
        raise ShapeMismatchError(
            f"crossover: parent {tuple(parent.shape)} vs mutant "
            f"{tuple(mutant.shape)}")
    d = parent.shape[0]
    u = 1.0 - gen.random(d)
    mask = u <= Cr
    if force_jrand:
        mask[int(gen.integers(d))] = True
    if counter is not None:
        counter.add_de_crossover(int(mask.sum()))
    return np.where(mask, mutant, parent)


def ensure_fitness(pop: Population, ctx, pool=None):
    """Evaluate members whose cached fitness is stale (NaN), in place."""
    stale = [i for i in range(pop.m) if np.isnan(pop.fitness[i])]
    if not stale:
        return
    if pool is not None:
        values = list(pool.map(lambda i: fitness(pop.members[i], ctx), stale))
    else:
        values = [fitness(pop.members[i], ctx) for i in stale]
    for i, v in zip(stale, values):
        pop.fitness[i] = v


def evolve_generation(pop: Population, cfg: DeConfig, ctx,
                      stream: Optional[RngStream] = None, pool=None,
                      counter=None) -> Population:
    """One synchronous generation: per member build a trial (mutation +
    crossover from generation-g members), evaluate it on the shared
    context, and keep it only if strictly fitter than its parent."""
    if pop.m < 4:
        raise PopulationError(
            f"evolution needs at least 4 members, got {pop.m}")
    if stream is None:
        stream = RngStream(cfg.seed).child(_NS_DE)
    ensure_fitness(pop, ctx, pool)

    def build_and_score(i):
        gen = stream.child(pop.generation, i).generator()
        mutant = mutate(pop, i, cfg.F, gen, counter)
        trial = crossover(pop.members[i], mutant, cfg.Cr, cfg.force_jrand,
                          gen, counter)
        return trial, fitness(trial, ctx)

    if pool is not None:
        results = list(pool.map(build_and_score, range(pop.m)))
    else:
        results = [build_and_score(i) for i in range(pop.m)]

    members = []
    fit = np.empty(pop.m, dtype=np.float64)
    for i, (trial, tf) in enumerate(results):
        if counter is not None:
            counter.add_de_selection(1)
        if tf < pop.fitness[i]:
            members.append(trial)
            fit[i] = tf
        else:
            members.append(pop.members[i])
            fit[i] = pop.fitness[i]
    return Population(members, fit, pop.generation + 1)


@dataclass(frozen=True)
class GenMetrics:
    generation: int
    best_fit: float
    mean_fit: float
    accepts: int
    wall_ms: float = 0.0


@dataclass(frozen=True)
class DeResult:
    best: np.ndarray
    best_fitness: float
    population: Population
    history: list


def run_de(pop: Population, cfg: DeConfig, ctx_factory,
           stream: Optional[RngStream] = None, pool=None, callback=None,
           counter=None) -> DeResult:
    """Generation loop with stopping rules and optional subset renewal.

    ctx_factory is either a fixed context or a callable round -> context;
    with resample_every > 0 the round advances at that cadence and all
    cached fitness is re-evaluated on the new context before any
    comparison.  Stops at max_generations, when best fitness drops below
    delta2, or when the best fitness gained less than min_improve over
    the last `window` generations (windows never straddle a resample).
    """
    factory: Callable = ctx_factory if callable(ctx_factory) else (lambda r: ctx_factory)
    if stream is None:
        stream = RngStream(cfg.seed).child(_NS_DE)
    round_no = 0
    ctx = factory(round_no)
    ensure_fitness(pop, ctx, pool)
    history: list = []
    round_start = 0

    for g in range(cfg.max_generations):
        t0 = time.perf_counter()
        if cfg.resample_every > 0 and g > 0 and g % cfg.resample_every == 0:
            round_no += 1
            ctx = factory(round_no)
            pop.fitness[:] = np.nan
            ensure_fitness(pop, ctx, pool)
            round_start = g
        old_fit = pop.fitness.copy()
        pop = evolve_generation(pop, cfg, ctx, stream=stream, pool=pool,
                                counter=counter)
        accepts = int(np.sum(pop.fitness < old_fit))
        best = float(np.min(pop.fitness))
        metrics = GenMetrics(pop.generation, best,
                             float(np.mean(pop.fitness)), accepts,
                             (time.perf_counter() - t0) * 1000.0)
        history.append(metrics)
        if callback is not None:
            callback(metrics)
        if best < cfg.delta2:
            break
        in_round = len(history) - round_start
        if in_round > cfg.window:
            gain = history[-cfg.window - 1].best_fit - best
            if gain < cfg.min_improve:
                break

    i = pop.best_index
    return DeResult(pop.members[i].copy(), float(pop.fitness[i]), pop, history)


@dataclass(frozen=True)
class GridResult:
    lr: float
    F: float
    Cr: float
    seed_fitness: float
    best_fitness: float
    test_accuracy: float


def grid_search(spec: NetworkSpec, train_data, test_data, bp_cfg, de_cfg,
                grid=None, master_seed: int = 0, rings=None,
                jitter_sigma: float = 0.0, pool=None,
                callback=None) -> list:
    """Cartesian sweep over {lr} x {F} x {Cr}.

    One gradient pretraining per lr (reused from `rings` when given:
    a missing lr there is an error, never a silent retrain), then one
    DE run per (F, Cr) seeded from that lr's ring.  Rows come back
    ranked by held-out accuracy, ties broken by (lr, F, Cr).  Every
    stochastic piece derives from master_seed.
    """
    from .evaluation import evaluate
    from .training import train

    grid = dict(DEFAULT_GRID if grid is None else grid)
    for axis in ("F", "Cr", "lr"):
        if not grid.get(axis):
            raise ConfigError(f"/grid/{axis}", "axis must be nonempty")

    master = RngStream(master_seed)
    results = []
    for li, lr in enumerate(grid["lr"]):
        if rings is not None:
            if lr not in rings:
                raise MissingArtifactError(
                    f"no pretrained run for lr={lr}; grid search does not "
                    f"retrain implicitly")
            ring = rings[lr]
        else:
            bp = replace(bp_cfg, lr=lr)
            _, ring, _ = train(spec, train_data, bp, stream=master.child(0, li))
        m = max(4, bp_cfg.ring_size)

        def make_factory(li):
            def factory(r):
                return sample_context(spec, train_data, de_cfg.fitness_subset,
                                      master.child(_NS_SUBSET, li, r), r)
            return factory

        factory = make_factory(li)
        for fi, F in enumerate(grid["F"]):
            for ci, Cr in enumerate(grid["Cr"]):
                de = replace(de_cfg, F=F, Cr=Cr)
                seed_stream = master.child(1, li, fi, ci)
                pop = seed_population("ancestors", ring, m, jitter_sigma,
                                      seed_stream)
                ensure_fitness(pop, factory(0), pool)
                seed_fit = float(np.min(pop.fitness))
                de_stream = master.child(_NS_DE, li, fi, ci)
                out = run_de(pop, de, factory, stream=de_stream, pool=pool)
                acc = evaluate(spec, out.best, test_data).accuracy
                row = GridResult(lr, F, Cr, seed_fit, out.best_fitness, acc)
                results.append(row)
                if callback is not None:
                    callback(row)
    return sorted(results,
                  key=lambda r: (-r.test_accuracy, r.lr, r.F, r.Cr))
