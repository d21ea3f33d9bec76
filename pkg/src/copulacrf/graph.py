"""CRF graph assembly and training objectives.

The model scores a full label configuration as score(y) = sum_q log U_q +
sum_(r,s) log V_rs (energy = -score). Training minimizes the composite
negative log-likelihood: the sum of unary and pairwise log factors, batch-
averaged, plus an l2 penalty on the unary parameters only. A tiny-graph
fully-normalized likelihood (explicit partition function by enumeration)
serves as the oracle the composite objective is checked against.

Unary parameters are shared across dataset contexts by node name; copula
edge parameters are specific to (context, edge).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import encoder as enc
from .copula import CopulaEdgeParams, _edge_nll_grads_batch, pairwise_joint_table
from .data import MISSING, LabeledInstance
from .errors import CapacityError, ConfigurationError
from .ordinal import (
    PROB_FLOOR,
    OrdinalUnaryParams,
    _nll_grads_batch,
    _thresh_weight_to_raw_grad,
    level_probs,
)

ENUMERATION_BOUND = 10 ** 6


@dataclass
class CrfGraph:
    """Output graph for one dataset context: nodes, level counts, edges."""

    nodes: list[str]
    levels: dict[str, int]
    edges: list[tuple[str, str]]
    context: str = "default"

    def __post_init__(self):
        order = {q: i for i, q in enumerate(self.nodes)}
        if len(order) != len(self.nodes):
            raise ConfigurationError("duplicate node names in graph")
        canon = []
        seen = set()
        for r, s in self.edges:
            if r not in order or s not in order:
                raise ConfigurationError(f"edge ({r}, {s}) references unknown node")
            if r == s:
                raise ConfigurationError(f"self-edge on {r}")
            if order[r] > order[s]:
                r, s = s, r
            if (r, s) in seen:
                raise ConfigurationError(f"duplicate edge ({r}, {s})")
            seen.add((r, s))
            canon.append((r, s))
        self.edges = canon
        for q in self.nodes:
            if self.levels.get(q, 0) < 2:
                raise ConfigurationError(f"node {q} needs a level count >= 2")

    def config_count(self) -> int:
        n = 1
        for q in self.nodes:
            n *= self.levels[q]
        return n

    @classmethod
    def fully_connected(cls, nodes, levels, context="default") -> "CrfGraph":
        edges = [(nodes[i], nodes[j])
                 for i in range(len(nodes)) for j in range(i + 1, len(nodes))]
        return cls(list(nodes), dict(levels), edges, context)


@dataclass
class CrfModel:
    """Encoder weights, shared unaries, and per-(context, edge) copulas."""

    encoder: enc.EncoderParams
    unaries: dict[str, OrdinalUnaryParams]
    edges: dict[tuple[str, tuple[str, str]], CopulaEdgeParams] = field(default_factory=dict)
    lambda_default: float = 1e-4
    lambdas: dict[str, float] = field(default_factory=dict)
    theta_max: float = 35.0

    def lam(self, node: str) -> float:
        return self.lambdas.get(node, self.lambda_default)

    def edge_params(self, context: str, r: str, s: str) -> CopulaEdgeParams:
        try:
            return self.edges[(context, (r, s))]
        except KeyError:
            raise ConfigurationError(
                f"no copula parameters for edge ({r}, {s}) in context {context!r}")

    # --- flat parameter-block interface (SGD, grad checks, serialization)

    def block_names(self) -> list[str]:
        names = []
        if self.encoder.n_params() > 0:
            names.append("encoder")
        names += [f"unary:{q}" for q in sorted(self.unaries)]
        names += [f"theta:{ctx}:{r}~{s}" for ctx, (r, s) in sorted(self.edges)]
        return names

    def unary_block_names(self) -> list[str]:
        return [f"unary:{q}" for q in sorted(self.unaries)]

    def theta_block_names(self) -> list[str]:
        return [f"theta:{ctx}:{r}~{s}" for ctx, (r, s) in sorted(self.edges)]

    def _edge_key(self, name: str):
        ctx, pair = name.split(":", 2)[1:]
        r, s = pair.split("~")
        return (ctx, (r, s))

    def get_block(self, name: str) -> np.ndarray:
        if name == "encoder":
            return self.encoder.pack()
        if name.startswith("unary:"):
            return self.unaries[name[6:]].pack()
        if name.startswith("theta:"):
            return np.array([self.edges[self._edge_key(name)].theta])
        raise KeyError(name)

    def set_block(self, name: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if name == "encoder":
            self.encoder.unpack(values)
        elif name.startswith("unary:"):
            self.unaries[name[6:]].unpack(values)
        elif name.startswith("theta:"):
            self.edges[self._edge_key(name)].theta = float(values[0])
        else:
            raise KeyError(name)


def init_model(graphs, encoder_params: enc.EncoderParams, seed: int = 0,
               lambda_default: float = 1e-4, lambdas=None,
               theta_max: float = 35.0) -> CrfModel:
    """Default-initialized model covering the union of the graphs' nodes.

    Nodes appearing in several graphs share one unary block; every
    (context, edge) gets its own copula parameter, started at independence.
    """
    rng = np.random.default_rng(seed)
    unaries: dict[str, OrdinalUnaryParams] = {}
    edges = {}
    for g in graphs:
        for q in g.nodes:
            if q in unaries:
                if unaries[q].levels != g.levels[q]:
                    raise ConfigurationError(
                        f"node {q} has {g.levels[q]} levels in context "
                        f"{g.context!r} but {unaries[q].levels} elsewhere")
            else:
                unaries[q] = OrdinalUnaryParams.default_init(
                    g.levels[q], encoder_params.feature_dim, rng)
        for r, s in g.edges:
            edges[(g.context, (r, s))] = CopulaEdgeParams(0.0, (r, s), g.context)
    return CrfModel(encoder_params, unaries, edges, lambda_default,
                    dict(lambdas or {}), theta_max)


def check_model_graph(model: CrfModel, graph: CrfGraph) -> None:
    for q in graph.nodes:
        if q not in model.unaries:
            raise ConfigurationError(f"model lacks unary parameters for node {q}")
        phi = model.unaries[q]
        if phi.levels != graph.levels[q]:
            raise ConfigurationError(
                f"node {q}: graph declares {graph.levels[q]} levels, "
                f"model has {phi.levels}")
        if phi.feature_dim != model.encoder.feature_dim:
            raise ConfigurationError(
                f"node {q}: unary feature_dim {phi.feature_dim} != encoder "
                f"feature_dim {model.encoder.feature_dim}")
    for r, s in graph.edges:
        model.edge_params(graph.context, r, s)


# ---------------------------------------------------------------------------
# potentials and configuration scores

def features(model: CrfModel, x) -> np.ndarray:
    return enc.forward(x, model.encoder)


def log_potential_tables(model: CrfModel, graph: CrfGraph, x):
    """Per-node (L,) and per-edge (L_r, L_s) log-potential tables for x."""
    f = features(model, x)
    node_tbl = {}
    for q in graph.nodes:
        p = level_probs(f, model.unaries[q])
        node_tbl[q] = np.log(np.maximum(p, PROB_FLOOR))
    edge_tbl = {}
    for r, s in graph.edges:
        e = model.edge_params(graph.context, r, s)
        t = pairwise_joint_table(f, model.unaries[r], model.unaries[s], e)
        edge_tbl[(r, s)] = np.log(np.maximum(t, PROB_FLOOR))
    return node_tbl, edge_tbl


def score_tensor(graph: CrfGraph, node_tbl, edge_tbl) -> np.ndarray:
    """Dense score over all configurations; axis i enumerates node i's levels."""
    if graph.config_count() > ENUMERATION_BOUND:
        raise CapacityError(
            f"{graph.config_count()} configurations exceed the enumeration "
            f"bound {ENUMERATION_BOUND}")
    order = {q: i for i, q in enumerate(graph.nodes)}
    dims = [graph.levels[q] for q in graph.nodes]
    total = np.zeros(dims)
    for q, tbl in node_tbl.items():
        shape = [1] * len(dims)
        shape[order[q]] = dims[order[q]]
        total = total + tbl.reshape(shape)
    for (r, s), tbl in edge_tbl.items():
        i, j = order[r], order[s]   # i < j: edges are canonicalized in node order
        shape = [1] * len(dims)
        shape[i], shape[j] = dims[i], dims[j]
        total = total + tbl.reshape(shape)
    return total


def score(model: CrfModel, graph: CrfGraph, x, y) -> float:
    """sum_q log U + sum_(r,s) log V for a full configuration y (1-based)."""
    y = np.asarray(y, dtype=int)
    if y.shape != (len(graph.nodes),):
        raise ValueError(f"configuration must assign all {len(graph.nodes)} nodes")
    order = {q: i for i, q in enumerate(graph.nodes)}
    node_tbl, edge_tbl = log_potential_tables(model, graph, x)
    total = 0.0
    for q in graph.nodes:
        total += node_tbl[q][y[order[q]] - 1]
    for (r, s), tbl in edge_tbl.items():
        total += tbl[y[order[r]] - 1, y[order[s]] - 1]
    return float(total)


def energy(model: CrfModel, graph: CrfGraph, x, y) -> float:
    """Negated configuration score (lower energy = more probable)."""
    return -score(model, graph, x, y)


# ---------------------------------------------------------------------------
# composite (piecewise) objective

def _batch_features(model: CrfModel, instances):
    return np.stack([enc.forward(inst.input, model.encoder)
                     for inst in instances])


def _label_matrix(graph: CrfGraph, instances) -> np.ndarray:
    Y = np.empty((len(instances), len(graph.nodes)), dtype=int)
    for i, inst in enumerate(instances):
        if len(inst.labels) != len(graph.nodes):
            raise ConfigurationError(
                f"instance has {len(inst.labels)} labels, graph {graph.context!r} "
                f"has {len(graph.nodes)} nodes")
        Y[i] = inst.labels
    return Y


def _unary_reg_grad(phi: OrdinalUnaryParams, lam: float):
    """lam * ||(psi, beta, sigma)||^2 and its raw-parameter gradient."""
    psi = phi.thresholds
    sigma = phi.sigma
    reg = lam * float(psi @ psi + phi.beta @ phi.beta + sigma * sigma)
    t_w = np.zeros(phi.levels + 1)
    t_w[1:phi.levels] = 2.0 * lam * psi
    grad = np.concatenate([
        _thresh_weight_to_raw_grad(phi, t_w),
        2.0 * lam * phi.beta,
        [2.0 * lam * sigma * sigma],
    ])
    return reg, grad


def composite_nll(model: CrfModel, graph: CrfGraph, instances) -> float:
    return composite_nll_grads(model, graph, instances, blocks=())[0]


def composite_nll_grads(model: CrfModel, graph: CrfGraph, instances,
                        blocks=None):
    """Batch-averaged composite NLL plus l2 penalty, with block gradients.

    Unary terms with a missing label and pairwise terms with any missing
    endpoint are skipped. `blocks` restricts which gradients are returned
    (None = all); the loss itself is always complete.
    """
    if not instances:
        raise ValueError("empty batch")
    if blocks is None:
        blocks = set(model.block_names())
    else:
        blocks = set(blocks)
    want_encoder = "encoder" in blocks and model.encoder.n_params() > 0
    N = len(instances)
    order = {q: i for i, q in enumerate(graph.nodes)}

    F = _batch_features(model, instances)
    Y = _label_matrix(graph, instances)
    grads: dict[str, np.ndarray] = {}
    grad_F = np.zeros_like(F) if want_encoder else None

    loss = 0.0
    for q in graph.nodes:
        phi = model.unaries[q]
        lam = model.lam(q)
        reg, reg_grad = _unary_reg_grad(phi, lam)
        loss += reg
        obs = np.flatnonzero(Y[:, order[q]] != MISSING)
        gq = reg_grad
        if len(obs):
            nll, graw, gF = _nll_grads_batch(
                F[obs], Y[obs, order[q]], phi, want_f_grad=want_encoder)
            loss += nll / N
            gq = gq + graw / N
            if want_encoder:
                grad_F[obs] += gF / N
        name = f"unary:{q}"
        if name in blocks:
            grads[name] = grads.get(name, 0.0) + gq

    for r, s in graph.edges:
        e = model.edge_params(graph.context, r, s)
        obs = np.flatnonzero((Y[:, order[r]] != MISSING)
                             & (Y[:, order[s]] != MISSING))
        if not len(obs):
            continue
        nll, g_theta, graw_r, graw_s, gF = _edge_nll_grads_batch(
            F[obs], Y[obs, order[r]], Y[obs, order[s]],
            model.unaries[r], model.unaries[s], e.theta,
            want_f_grad=want_encoder)
        loss += nll / N
        tname = f"theta:{graph.context}:{r}~{s}"
        if tname in blocks:
            grads[tname] = grads.get(tname, 0.0) + np.array([g_theta / N])
        for q, graw in ((r, graw_r), (s, graw_s)):
            name = f"unary:{q}"
            if name in blocks:
                grads[name] = grads.get(name, 0.0) + graw / N
        if want_encoder:
            grad_F[obs] += gF / N

    if want_encoder:
        total = np.zeros(model.encoder.n_params())
        for i, inst in enumerate(instances):
            gflat, _ = enc.backward(inst.input, model.encoder, grad_F[i])
            total += gflat
        grads["encoder"] = total

    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite composite loss {loss}")
    return loss, grads


def exact_nll(model: CrfModel, graph: CrfGraph, instances) -> float:
    """Fully normalized NLL via explicit enumeration (tiny graphs only).

    Missing labels are marginalized by summing the matching configurations.
    """
    if not instances:
        raise ValueError("empty batch")
    order = {q: i for i, q in enumerate(graph.nodes)}
    total = 0.0
    for inst in instances:
        node_tbl, edge_tbl = log_potential_tables(model, graph, inst.input)
        tensor = score_tensor(graph, node_tbl, edge_tbl)
        log_z = float(logsumexp(tensor))
        idx = tuple(
            int(inst.labels[order[q]]) - 1 if inst.labels[order[q]] != MISSING
            else slice(None)
            for q in graph.nodes)
        sub = tensor[idx]
        log_num = float(sub) if np.ndim(sub) == 0 else float(logsumexp(sub))
        total += log_z - log_num
    return total / len(instances)


# ---------------------------------------------------------------------------
# multi-dataset objective with shared marginals

def multi_dataset_nll(model: CrfModel, dataset_batches) -> float:
    return multi_dataset_nll_grads(model, dataset_batches, blocks=())[0]


def multi_dataset_nll_grads(model: CrfModel, dataset_batches, blocks=None):
    """Sum of per-dataset composite NLLs over [(graph, instances), ...].

    Shared unary blocks accumulate gradient contributions from every dataset
    that annotates the node.
    """
    if not dataset_batches:
        raise ValueError("no datasets")
    contexts = [g.context for g, _ in dataset_batches]
    if len(set(contexts)) != len(contexts):
        raise ConfigurationError("duplicate dataset contexts")
    for g, _ in dataset_batches:
        check_model_graph(model, g)
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for g, instances in dataset_batches:
        part, part_grads = composite_nll_grads(model, g, instances, blocks)
        loss += part
        for name, val in part_grads.items():
            grads[name] = grads.get(name, 0.0) + val
    return loss, grads
