"""Evaluation metrics: AUROC, macro AUROC, rank correlations, paired deltas.

AUROC uses the rank-sum formulation with tie-averaged ranks (ties count
half); single-class tasks are undefined and excluded from the macro mean
rather than imputed. Spearman is the Pearson correlation of average ranks;
Kendall is tau-b with the standard tie correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EvalResult:
    per_task: list[float | None]
    macro: float


def tied_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties replaced by the group average rank."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sorted_vals[1:] != sorted_vals[:-1]
    group_id = np.cumsum(new_group) - 1
    starts = np.flatnonzero(new_group)
    counts = np.diff(np.append(starts, n))
    group_avg = starts + (counts + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = group_avg[group_id]
    return ranks


def auroc(scores, labels) -> float | None:
    """Probability a random positive outscores a random negative.

    Returns None when only one class is present (undefined).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = tied_ranks(scores)
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auroc(per_task: list[float | None]) -> float:
    defined = [v for v in per_task if v is not None]
    if not defined:
        raise ValueError("macro AUROC undefined: every task is single-class")
    return float(np.mean(defined))


def eval_result(score_matrix: np.ndarray, label_matrix: np.ndarray) -> EvalResult:
    """Per-task and macro AUROC for (n, t) score and label matrices."""
    per_task = [auroc(score_matrix[:, c], label_matrix[:, c])
                for c in range(score_matrix.shape[1])]
    return EvalResult(per_task, macro_auroc(per_task))


def _check_rank_inputs(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("need two equal-length vectors of length >= 2")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ValueError("rank correlation undefined for constant input")
    return xs, ys


def spearman(xs, ys) -> float:
    xs, ys = _check_rank_inputs(xs, ys)
    rx = tied_ranks(xs)
    ry = tied_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


def kendall(xs, ys) -> float:
    """Kendall tau-b (tie-corrected)."""
    xs, ys = _check_rank_inputs(xs, ys)
    sx = np.sign(xs[:, None] - xs[None, :])
    sy = np.sign(ys[:, None] - ys[None, :])
    concordance = float((sx * sy).sum()) / 2.0  # C - D over unordered pairs
    n = xs.size
    n0 = n * (n - 1) / 2.0

    def tie_pairs(v):
        _, counts = np.unique(v, return_counts=True)
        return float((counts * (counts - 1) / 2.0).sum())

    denom = np.sqrt((n0 - tie_pairs(xs)) * (n0 - tie_pairs(ys)))
    return float(concordance / denom)


def performance_delta(with_run: dict, without_run: dict, subject: str) -> float:
    """Host-performance change from adding one subject to a federation.

    Both runs must be the paired cells of a sweep: identical host, algorithm
    and seed, with the remaining participants identical. Run dicts carry at
    least host, algorithm, seed, subset (candidate ids) and
    host_test_macro_auroc.
    """
    for key in ("host", "algorithm", "seed"):
        if with_run[key] != without_run[key]:
            raise ValueError(f"paired runs differ in {key}")
    if subject == with_run["host"]:
        raise ValueError("the host is not a selectable subject")
    with_subset = set(with_run["subset"])
    without_subset = set(without_run["subset"])
    if subject not in with_subset or with_subset - {subject} != without_subset:
        raise ValueError("runs do not differ by exactly the target subject")
    return float(with_run["host_test_macro_auroc"] - without_run["host_test_macro_auroc"])
