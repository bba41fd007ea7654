"""Rating-error and ranking metrics, macro-averaged over tasks."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Task


@dataclass(frozen=True)
class MetricsReport:
    """MSE and MAE on the normalized scale and nDCG, all in percent."""

    mse: float
    mae: float
    ndcg3: float
    ndcg5: float
    n_tasks: int
    sd: Optional[dict] = None
    extra_ndcg: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("a report covers at least one task")
        for v in (self.ndcg3, self.ndcg5, *self.extra_ndcg.values()):
            if not -1e-9 <= v <= 100 + 1e-9:
                raise ValueError(f"nDCG {v} outside [0, 100]")

    def ndcg(self, k: int) -> float:
        if k == 3:
            return self.ndcg3
        if k == 5:
            return self.ndcg5
        return self.extra_ndcg[k]

    def row(self, ks: Sequence[int] = (3, 5)) -> dict:
        out = {"MSE": self.mse, "MAE": self.mae}
        out.update({f"nDCG{k}": self.ndcg(k) for k in ks})
        out["n_tasks"] = self.n_tasks
        return out

    def formatted(self, ks: Sequence[int] = (3, 5)) -> dict:
        """Values as ``mean_(sd)`` strings when standard deviations are known."""
        out = {}
        for name, v in self.row(ks).items():
            if name == "n_tasks":
                continue
            sd = (self.sd or {}).get(name)
            out[name] = f"{v:.2f}" if sd is None else f"{v:.2f}_({sd:.2f})"
        return out

    def to_json(self) -> str:
        return json.dumps({**self.row(sorted({3, 5, *self.extra_ndcg})), "sd": self.sd})


def mse_mae(preds, truths) -> tuple[float, float]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {t.size} truths")
    if p.size == 0:
        raise ValueError("empty prediction list")
    d = p - t
    return float(np.mean(d * d) * 100.0), float(np.mean(np.abs(d)) * 100.0)


def dcg_at(k: int, gains_in_order: np.ndarray) -> float:
    g = np.asarray(gains_in_order, dtype=np.float64)[:k]
    return float(np.sum(g / np.log2(np.arange(2, g.size + 2))))


def ndcg_at(k: int, preds, truths) -> float:
    """Linear-gain nDCG@k; equal predictions are ordered by ascending position."""
    if k <= 0:
        raise ValueError("k must be positive")
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and truths must be equal-length and non-empty")
    if np.any(t < 0):
        raise ValueError("relevances must be non-negative")
    order = np.lexsort((np.arange(p.size), -p))
    ideal = dcg_at(k, np.sort(t)[::-1])
    if ideal == 0.0:
        return 1.0
    return dcg_at(k, t[order]) / ideal


def task_metrics(preds_norm: np.ndarray, truths_norm: np.ndarray, truths_raw: np.ndarray,
                 ks: Sequence[int] = (3, 5)) -> dict:
    mse, mae = mse_mae(preds_norm, truths_norm)
    out = {"MSE": mse, "MAE": mae}
    for k in ks:
        out[f"nDCG{k}"] = 100.0 * ndcg_at(k, preds_norm, truths_raw)
    return out


def _report(per_task: list[dict], ks: Sequence[int]) -> MetricsReport:
    avg = {name: float(np.mean([m[name] for m in per_task])) for name in per_task[0]}
    extra = {k: avg[f"nDCG{k}"] for k in ks if k not in (3, 5)}
    return MetricsReport(avg["MSE"], avg["MAE"], avg.get("nDCG3", math.nan), avg.get("nDCG5", math.nan),
                         len(per_task), extra_ndcg=extra)


def evaluate(model, tasks: Sequence[Task], structure=None, ks: Sequence[int] = (3, 5)) -> MetricsReport:
    """Adapt on each task's full support set and score every query.

    ``structure`` is accepted for symmetry with the training API; it must
    match the structure the model was built with.
    """
    if not tasks:
        raise ValueError("no tasks to evaluate")
    if structure is not None:
        from .model import Structure

        if Structure.coerce(structure, model.config.n_layers) != model.structure:
            raise ValueError("structure differs from the one the model was built with")
    ks = tuple(sorted(set(ks) | {3, 5}))
    ordered = sorted(tasks, key=lambda t: t.user_id)
    preds = model.predict_tasks(ordered)
    per_task = []
    for t, p in zip(ordered, preds):
        raw = t.query_arrays.rating
        per_task.append(task_metrics(p, model.schema.normalize(raw), raw, ks))
    return _report(per_task, ks)


def evaluate_predictor(predict, tasks: Sequence[Task], schema, ks: Sequence[int] = (3, 5)) -> MetricsReport:
    """Evaluate any callable ``predict(task) -> normalized predictions`` (baselines, oracles)."""
    if not tasks:
        raise ValueError("no tasks to evaluate")
    ks = tuple(sorted(set(ks) | {3, 5}))
    per_task = []
    for t in sorted(tasks, key=lambda t: t.user_id):
        raw = t.query_arrays.rating
        per_task.append(task_metrics(np.asarray(predict(t), dtype=np.float64), schema.normalize(raw), raw, ks))
    return _report(per_task, ks)


def mean_rating_baseline(train_tasks: Iterable[Task], schema):
    """Predicts the training split's mean normalized rating for every query."""
    ratings = np.concatenate([np.r_[t.support_arrays.rating, t.query_arrays.rating] for t in train_tasks])
    mu = float(np.mean(schema.normalize(ratings)))
    return lambda task: np.full(len(task.query), mu)


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean over runs with the sample standard deviation of every metric."""
    if not reports:
        raise ValueError("nothing to aggregate")
    names = ("MSE", "MAE", "nDCG3", "nDCG5")
    rows = [r.row() for r in reports]
    mean = {n: float(np.mean([row[n] for row in rows])) for n in names}
    sd = {n: float(np.std([row[n] for row in rows], ddof=1)) if len(rows) > 1 else 0.0 for n in names}
    return MetricsReport(mean["MSE"], mean["MAE"], mean["nDCG3"], mean["nDCG5"],
                         reports[0].n_tasks, sd=sd)
