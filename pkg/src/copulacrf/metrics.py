"""Evaluation metrics: ICC(3,1) consistency and MAE, per node.

ICC(3,1) is the two-way mixed, consistency, single-rater intraclass
correlation with k=2 raters (truth, prediction):

    ICC = (BMS - EMS) / (BMS + (k-1) * EMS)

where BMS is the between-target mean square and EMS the residual mean
square of the two-way ANOVA. The consistency form ignores rater mean
offsets, so a constant shift between prediction and truth scores 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MISSING

_DEGENERATE_EPS = 1e-15


def _icc31_anova(pred, truth):
    """(icc, degenerate) from the two-way ANOVA decomposition."""
    x = np.column_stack([np.asarray(truth, dtype=float),
                         np.asarray(pred, dtype=float)])
    n, k = x.shape
    if n < 2:
        raise ValueError("ICC needs at least two targets")
    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_rows = k * float(np.sum((row_means - grand) ** 2))
    ss_cols = n * float(np.sum((col_means - grand) ** 2))
    ss_total = float(np.sum((x - grand) ** 2))
    ss_err = ss_total - ss_rows - ss_cols
    bms = ss_rows / (n - 1)
    ems = ss_err / ((n - 1) * (k - 1))
    denom = bms + (k - 1) * ems
    scale = max(ss_total / (n * k), 1.0)
    if abs(denom) < _DEGENERATE_EPS * scale or ss_total < _DEGENERATE_EPS:
        return 0.0, True
    return (bms - ems) / denom, False


def icc31(pred, truth) -> float:
    """ICC(3,1) between prediction and truth; 0 when variance degenerates."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    value, _ = _icc31_anova(pred, truth)
    return float(value)


def mae(pred, truth) -> float:
    """Mean absolute error."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty arrays")
    return float(np.mean(np.abs(pred - truth)))


@dataclass
class EvalReport:
    nodes: list[str]
    icc: dict[str, float]
    mae: dict[str, float]
    degenerate: dict[str, bool]
    n_instances: int

    @property
    def avg_icc(self) -> float:
        return float(np.mean([self.icc[q] for q in self.nodes]))

    @property
    def avg_mae(self) -> float:
        return float(np.mean([self.mae[q] for q in self.nodes]))

    def to_text(self) -> str:
        lines = ["node\ticc\tmae"]
        for q in self.nodes:
            flag = " (degenerate)" if self.degenerate[q] else ""
            lines.append(f"{q}\t{self.icc[q]!r}\t{self.mae[q]!r}{flag}")
        lines.append(f"avg\t{self.avg_icc!r}\t{self.avg_mae!r}")
        lines.append(f"# instances: {self.n_instances}")
        return "\n".join(lines) + "\n"


def evaluate(pred_labels: np.ndarray, true_labels: np.ndarray,
             nodes: list[str]) -> EvalReport:
    """Per-node ICC/MAE over aligned (N, Q) label matrices.

    Rows where either side is MISSING for a node are excluded pairwise
    for that node.
    """
    pred_labels = np.asarray(pred_labels, dtype=int)
    true_labels = np.asarray(true_labels, dtype=int)
    if pred_labels.shape != true_labels.shape:
        raise ValueError("prediction and truth matrices must align")
    if pred_labels.shape[1] != len(nodes):
        raise ValueError("column count must match node count")
    icc_d, mae_d, deg_d = {}, {}, {}
    for j, q in enumerate(nodes):
        mask = (pred_labels[:, j] != MISSING) & (true_labels[:, j] != MISSING)
        if mask.sum() < 2:
            raise ValueError(f"node {q}: fewer than two evaluable pairs")
        p = pred_labels[mask, j]
        t = true_labels[mask, j]
        value, degenerate = _icc31_anova(p, t)
        icc_d[q] = float(value)
        deg_d[q] = degenerate
        mae_d[q] = mae(p, t)
    return EvalReport(list(nodes), icc_d, mae_d, deg_d, pred_labels.shape[0])
