"""Iterative balanced-batch (IBB) training.

Each phase cycle runs three SGD+momentum phases against the same global
composite objective, each on its own balanced batch stream:

    S1  encoder weights      batches balanced by subject
    S2  unary parameters     batches balanced by (node, level)
    S3  copula parameters    batches balanced by (edge, level pair)

Parameters outside the active phase are frozen. With several datasets the
per-dataset batch streams are interleaved round-robin with a random starting
dataset per cycle, and gradients of shared unaries accumulate across
datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MISSING, Dataset
from .errors import DivergenceError
from .graph import CrfGraph, CrfModel, composite_nll_grads, multi_dataset_nll_grads

PHASES = ("S1", "S2", "S3")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 128
    lambda_default: float = 1e-4
    lambdas: dict[str, float] = field(default_factory=dict)
    phase_steps: int = 50
    epochs: int = 10
    seed: int = 0
    edge_topology: str = "full"     # full | none | "a~b,c~d" explicit list
    theta_max: float = 35.0
    patience: int = 10


@dataclass
class OptState:
    learning_rate: float
    momentum: float
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0


def sgd_momentum_step(params: dict, grads: dict, state: OptState) -> dict:
    """Classical momentum: v <- m*v - lr*g; p <- p + v.

    Only blocks present in grads move; their velocity buffers update in
    place inside state.
    """
    updated = {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(g)
        v = state.momentum * v - state.learning_rate * g
        state.velocities[name] = v
        updated[name] = params[name] + v
    state.iteration += 1
    return updated


# ---------------------------------------------------------------------------
# balanced batch construction

def _strata(dataset: Dataset, criterion: str, edges=None):
    Y = dataset.label_matrix()
    order = {q: j for j, q in enumerate(dataset.nodes)}
    strata = []
    if criterion == "subject":
        groups: dict[str, list[int]] = {}
        for i, inst in enumerate(dataset.instances):
            groups.setdefault(inst.subject_id, []).append(i)
        strata = [np.array(groups[s]) for s in sorted(groups)]
    elif criterion == "level":
        for q in dataset.nodes:
            col = Y[:, order[q]]
            for lvl in range(1, dataset.levels[q] + 1):
                idx = np.flatnonzero(col == lvl)
                if len(idx):
                    strata.append(idx)
    elif criterion == "cooccurrence":
        if edges is None:
            edges = [(dataset.nodes[i], dataset.nodes[j])
                     for i in range(len(dataset.nodes))
                     for j in range(i + 1, len(dataset.nodes))]
        for r, s in edges:
            cr, cs = Y[:, order[r]], Y[:, order[s]]
            present = (cr != MISSING) & (cs != MISSING)
            for lr in range(1, dataset.levels[r] + 1):
                for ls in range(1, dataset.levels[s] + 1):
                    idx = np.flatnonzero(present & (cr == lr) & (cs == ls))
                    if len(idx):
                        strata.append(idx)
    else:
        raise ValueError(f"unknown balance criterion {criterion!r}")
    return strata


def make_balanced_batches(dataset: Dataset, criterion: str, batch_size: int,
                          rng_seed: int, edges=None):
    """Infinite stream of index batches, stratified with replacement.

    Every draw picks a non-empty stratum uniformly, then an instance
    uniformly within it, so each stratum's expected share per batch is
    1 / (number of non-empty strata).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    strata = _strata(dataset, criterion, edges)
    if not strata:
        raise ValueError(f"no non-empty strata for criterion {criterion!r}")
    rng = np.random.default_rng(rng_seed)

    def stream():
        while True:
            counts = np.bincount(rng.integers(0, len(strata), size=batch_size),
                                 minlength=len(strata))
            parts = [strata[k][rng.integers(0, len(strata[k]), size=c)]
                     for k, c in enumerate(counts) if c]
            batch = np.concatenate(parts)
            rng.shuffle(batch)
            yield batch

    return stream()


@dataclass
class BatchPlan:
    """The three balanced batch streams for one dataset."""

    bb_n: object   # subject-balanced, feeds the encoder phase
    bb_m: object   # level-balanced, feeds the unary phase
    bb_e: object   # co-occurrence-balanced, feeds the copula phase
    batch_size: int


def make_batch_plan(dataset: Dataset, batch_size: int, rng_seed: int,
                    edges=None) -> BatchPlan:
    seeds = np.random.default_rng(rng_seed).integers(0, 2 ** 63, size=3)
    has_cooc = bool(_strata(dataset, "cooccurrence", edges))
    return BatchPlan(
        bb_n=make_balanced_batches(dataset, "subject", batch_size, int(seeds[0])),
        bb_m=make_balanced_batches(dataset, "level", batch_size, int(seeds[1])),
        bb_e=(make_balanced_batches(dataset, "cooccurrence", batch_size,
                                    int(seeds[2]), edges) if has_cooc else None),
        batch_size=batch_size,
    )


def interleave_multi_dataset_batches(plans, rng_seed: int):
    """Round-robin over per-dataset batch streams, random start per cycle.

    plans is a list of iterators; yields (dataset_index, batch). Each cycle
    visits every dataset exactly once, starting from a uniformly random one
    to avoid dataset-order bias.
    """
    if not plans:
        raise ValueError("need at least one batch stream")
    rng = np.random.default_rng(rng_seed)
    K = len(plans)
    while True:
        start = int(rng.integers(0, K))
        for j in range(K):
            k = (start + j) % K
            yield k, next(plans[k])


# ---------------------------------------------------------------------------
# the IBB optimizer

@dataclass
class TrainTrace:
    steps: list = field(default_factory=list)    # (iteration, phase, batch loss)
    cycles: list = field(default_factory=list)   # full-data objective per cycle


def _phase_blocks(model: CrfModel, phase: str):
    if phase == "S1":
        return ["encoder"] if model.encoder.n_params() > 0 else []
    if phase == "S2":
        return model.unary_block_names()
    return model.theta_block_names()


def _full_objective(model, train_sets):
    loss, _ = multi_dataset_nll_grads(
        model, [(g, ds.instances) for g, ds in train_sets], blocks=())
    return loss


def ibb_train(model: CrfModel, train_sets, config: TrainConfig,
              val_sets=None):
    """Three-phase IBB optimization of the (multi-)dataset objective.

    train_sets: list of (CrfGraph, Dataset). Returns (model, TrainTrace);
    the model is updated in place. Early-stops on the validation objective
    after `patience` cycles without improvement when val_sets is given.
    """
    if not train_sets:
        raise ValueError("no training data")
    rng = np.random.default_rng(config.seed)
    opt = OptState(config.learning_rate, config.momentum)
    trace = TrainTrace()

    plans = [make_batch_plan(ds, config.batch_size, int(rng.integers(2 ** 63)),
                             edges=g.edges)
             for g, ds in train_sets]
    streams = {}
    for phase, attr in (("S1", "bb_n"), ("S2", "bb_m"), ("S3", "bb_e")):
        per_ds = [getattr(p, attr) for p in plans]
        if any(s is None for s in per_ds):
            streams[phase] = None
        else:
            streams[phase] = interleave_multi_dataset_batches(
                per_ds, int(rng.integers(2 ** 63)))

    best_val = np.inf
    bad_cycles = 0
    it = 0
    for _cycle in range(config.epochs):
        for phase in PHASES:
            blocks = _phase_blocks(model, phase)
            if not blocks or streams[phase] is None:
                continue
            for _step in range(config.phase_steps):
                k, batch_idx = next(streams[phase])
                g, ds = train_sets[k]
                instances = [ds.instances[i] for i in batch_idx]
                loss, grads = composite_nll_grads(model, g, instances,
                                                  blocks=blocks)
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss {loss} at iteration {it} "
                        f"(phase {phase}, dataset {g.context!r})")
                params = {name: model.get_block(name) for name in grads}
                updated = sgd_momentum_step(params, grads, opt)
                for name, arr in updated.items():
                    if name.startswith("theta:"):
                        arr = np.clip(arr, -config.theta_max, config.theta_max)
                    model.set_block(name, arr)
                trace.steps.append((it, phase, loss))
                it += 1
        trace.cycles.append(_full_objective(model, train_sets))

        if val_sets:
            val_loss = _full_objective(model, val_sets)
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                bad_cycles = 0
            else:
                bad_cycles += 1
                if bad_cycles >= config.patience:
                    break
    return model, trace


# ---------------------------------------------------------------------------
# gradient checking harness

def grad_check(model: CrfModel, dataset_batches, epsilon: float = 1e-6,
               blocks=None) -> dict[str, float]:
    """Central-difference check of the full objective per parameter block.

    Returns block name -> relative error ||g_a - g_n|| / (||g_a|| + ||g_n||).
    Intended for small models; cost scales with parameter count.
    """
    _, grads = multi_dataset_nll_grads(model, dataset_batches, blocks=blocks)
    report = {}
    for name in (blocks if blocks is not None else model.block_names()):
        analytic = np.asarray(grads.get(name, 0.0), dtype=float)
        base = model.get_block(name)
        if analytic.shape != base.shape:
            analytic = np.zeros_like(base) + analytic
        numeric = np.zeros_like(base)
        for i in range(len(base)):
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[i] += sign * epsilon
                model.set_block(name, pert)
                loss, _ = multi_dataset_nll_grads(model, dataset_batches,
                                                  blocks=())
                numeric[i] += sign * loss
            numeric[i] /= 2.0 * epsilon
        model.set_block(name, base)
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        report[name] = float(np.linalg.norm(analytic - numeric) / denom)
    return report
