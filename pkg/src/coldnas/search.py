"""Supernet search, Top-K selection, retraining, and random-search baselines."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import DatasetSchema, Task, TaskSplit
from .model import Batch, ColdStartModel, ModelConfig, Structure
from .modulation import ModulationAssignment, ModulationExpr, SupernetAlphas, select_topk
from .numerics import BinaryOpKind, MacCounter, Tensor

logger = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {json.dumps(diagnostics)}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    K: int = 4
    rng_seed: int = 0
    optimizer: str = "sgd"
    patience: int = 5
    min_delta: float = 1e-4
    alpha_lr: Optional[float] = None  # defaults to learning_rate
    alpha_optimizer: Optional[str] = None  # defaults to optimizer
    alpha_steps: int = 1  # bilevel: alpha updates per theta update
    alpha_init: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        for name in (self.optimizer, self.alpha_optimizer or self.optimizer):
            if name not in ("sgd", "adam"):
                raise ValueError(f"unknown optimizer {name!r}")
        if self.K < 1:
            raise ValueError("K must be at least 1")


# --- optimizers ---------------------------------------------------------------


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params, self.lr = list(params), lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.values = p.values - self.lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = list(params), lr, betas, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            p.values = p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: Sequence[Tensor], lr: float):
    return Adam(params, lr) if name == "adam" else SGD(params, lr)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- logging ------------------------------------------------------------------


@dataclass
class MetricsLog:
    """Per-epoch records; written as JSON lines when ``path`` is set."""

    path: Optional[Path] = None
    records: list[dict] = field(default_factory=list)

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def checksum(self) -> str:
        """Digest of every record with wall-clock fields removed."""
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps({k: v for k, v in r.items() if k != "elapsed_sec"}, sort_keys=True).encode())
        return h.hexdigest()


@dataclass
class TrainResult:
    model: ColdStartModel
    curve: list[dict]
    epochs: int
    best_val: float
    seconds: float


# --- episodic training ----------------------------------------------------------


def batches(tasks: Sequence[Task], batch_size: int, rng: np.random.Generator) -> list[list[Task]]:
    order = rng.permutation(len(tasks))
    return [[tasks[i] for i in order[s:s + batch_size]] for s in range(0, len(tasks), batch_size)]


def mean_task_loss(model: ColdStartModel, tasks: Sequence[Task], chunk: int = 64) -> float:
    losses = []
    for i in range(0, len(tasks), chunk):
        _, per_task = model.batch_loss(Batch.from_tasks(tasks[i:i + chunk], model.schema))
        losses.append(per_task)
    return float(np.mean(np.concatenate(losses)))


def _check_finite(loss: float, where: dict, last: Optional[float]) -> None:
    if not math.isfinite(loss):
        raise DivergenceError("training loss is not finite", {**where, "loss": repr(loss), "last_finite_loss": last})


def train_episodic(model: ColdStartModel, split: TaskSplit, cfg: TrainConfig, phase: str,
                   log: Optional[MetricsLog] = None, restore_best: bool = False,
                   max_epochs: Optional[int] = None, alpha_on_val: bool = False) -> TrainResult:
    """Episodic loop shared by supernet training, retraining and random-search candidates.

    With ``alpha_on_val`` the architecture weights are excluded from the
    theta step and updated instead on validation batches (first-order
    bilevel scheme); otherwise every parameter takes the same step.
    """
    if not split.train:
        raise ValueError("empty training split")
    log = log if log is not None else MetricsLog()
    rng = np.random.default_rng(cfg.rng_seed + 1)
    theta = model.trainable()
    alphas = model.alpha_tensors()
    opt = make_optimizer(cfg.optimizer, theta, cfg.learning_rate)
    a_opt = make_optimizer(cfg.alpha_optimizer or cfg.optimizer, alphas, cfg.alpha_lr or cfg.learning_rate)
    all_params = theta + alphas
    val_cache = [Batch.from_tasks(list(split.val[i:i + 64]), model.schema) for i in range(0, len(split.val), 64)]
    max_epochs = max_epochs or cfg.max_epochs

    start = time.perf_counter()
    best, best_state, stale, last = math.inf, None, 0, None
    curve: list[dict] = []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        per_task = []
        for step, chunk in enumerate(batches(split.train, cfg.batch_size, rng)):
            zero_grads(all_params)
            loss, losses = model.batch_loss(Batch.from_tasks(chunk, model.schema))
            _check_finite(loss.item(), {"phase": phase, "epoch": epoch, "batch": step}, last)
            loss.backward()
            opt.step()
            if not alpha_on_val:
                a_opt.step()
            last = loss.item()
            per_task.append(losses)
            if alpha_on_val and alphas and cfg.alpha_steps > 0:
                for _ in range(cfg.alpha_steps):
                    vb = [split.val[i] for i in rng.choice(len(split.val), size=min(cfg.batch_size, len(split.val)), replace=False)]
                    zero_grads(all_params)
                    vloss, _ = model.batch_loss(Batch.from_tasks(vb, model.schema))
                    _check_finite(vloss.item(), {"phase": phase, "epoch": epoch, "batch": step, "alpha_step": True}, last)
                    vloss.backward()
                    a_opt.step()
        train_loss = float(np.mean(np.concatenate(per_task)))
        val_loss = float(np.mean(np.concatenate([model.batch_loss(b)[1] for b in val_cache]))) if val_cache else train_loss
        _check_finite(val_loss, {"phase": phase, "epoch": epoch, "batch": "val"}, last)
        rec = {"phase": phase, "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
               "elapsed_sec": round(time.perf_counter() - start, 6)}
        if model.alphas is not None:
            rec["alphas"] = model.supernet_alphas().to_list()
        log.write(rec)
        curve.append(rec)
        if val_loss < best - cfg.min_delta:
            best, stale = val_loss, 0
            if restore_best:
                best_state = model.state()
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if restore_best and best_state is not None:
        model.load_state(best_state)
    return TrainResult(model, curve, epoch, min(r["val_loss"] for r in curve), time.perf_counter() - start)


def train_supernet(split: TaskSplit, schema: DatasetSchema, cfg: TrainConfig = TrainConfig(),
                   model_cfg: ModelConfig = ModelConfig(), log: Optional[MetricsLog] = None) -> TrainResult:
    """Single-level search: alpha and all weights follow the training loss jointly."""
    model = ColdStartModel(schema, model_cfg, Structure.make_supernet(model_cfg.n_layers), cfg.rng_seed, cfg.alpha_init)
    return train_episodic(model, split, cfg, "supernet", log)


def train_supernet_bilevel(split: TaskSplit, schema: DatasetSchema, cfg: TrainConfig = TrainConfig(),
                           model_cfg: ModelConfig = ModelConfig(), log: Optional[MetricsLog] = None) -> TrainResult:
    if not split.val:
        raise ValueError("bilevel search needs a validation split")
    model = ColdStartModel(schema, model_cfg, Structure.make_supernet(model_cfg.n_layers), cfg.rng_seed, cfg.alpha_init)
    return train_episodic(model, split, cfg, "supernet_bilevel", log, alpha_on_val=True)


def retrain(split: TaskSplit, schema: DatasetSchema, structure: Union[ModulationAssignment, Structure],
            cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
            log: Optional[MetricsLog] = None, phase: str = "retrain"):
    """Fresh model with the given structure, trained to early stop; returns (TrainResult, test MetricsReport)."""
    from .evaluation import evaluate

    model = ColdStartModel(schema, model_cfg, structure, cfg.rng_seed)
    result = train_episodic(model, split, cfg, phase, log, restore_best=True)
    report = evaluate(model, split.test) if split.test else None
    return result, report


# --- random search ----------------------------------------------------------------

OPS = tuple(BinaryOpKind)


def sample_structure(rng: np.random.Generator, space: str, n_layers: int, C: int = 4) -> Structure:
    if space == "original":
        return Structure(tuple(tuple(OPS[i] for i in rng.integers(0, len(OPS), size=C)) for _ in range(n_layers)))
    if space == "transformed":
        return Structure.from_assignment(ModulationAssignment.from_mask(rng.integers(0, 2, size=(n_layers, 4)).astype(bool)))
    raise ValueError(f"unknown search space {space!r}")


@dataclass
class Candidate:
    index: int
    structure: Structure
    val_loss: float
    seconds: float
    diverged: bool = False


@dataclass
class RandomSearchResult:
    best: Candidate
    candidates: list[Candidate]

    def best_so_far(self) -> list[tuple[int, float, float]]:
        """(candidates tried, cumulative seconds, best validation loss so far)."""
        out, best, t = [], math.inf, 0.0
        for c in self.candidates:
            t += c.seconds
            best = min(best, c.val_loss)
            out.append((c.index + 1, t, best))
        return out

    def candidates_to_reach(self, target: float) -> Optional[int]:
        for n, _, best in self.best_so_far():
            if best <= target:
                return n
        return None


def random_search(split: TaskSplit, schema: DatasetSchema, space: str, budget: int,
                  cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(), C: int = 4,
                  epoch_fraction: float = 0.2, log: Optional[MetricsLog] = None) -> RandomSearchResult:
    """Train ``budget`` uniformly sampled structures briefly; keep the best by validation loss."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = np.random.default_rng(cfg.rng_seed)
    epochs = max(1, round(epoch_fraction * cfg.max_epochs))
    out = []
    for i in range(budget):
        s = sample_structure(rng, space, model_cfg.n_layers, C)
        model = ColdStartModel(schema, model_cfg, s, cfg.rng_seed + 1000 * (i + 1))
        t0 = time.perf_counter()
        try:
            r = train_episodic(model, split, replace(cfg, rng_seed=cfg.rng_seed + i), f"random_{space}", log,
                               max_epochs=epochs)
            out.append(Candidate(i, s, r.best_val, time.perf_counter() - t0))
        except DivergenceError:
            out.append(Candidate(i, s, math.inf, time.perf_counter() - t0, diverged=True))
    best = min(out, key=lambda c: (c.val_loss, c.index))
    return RandomSearchResult(best, out)


# --- end-to-end -----------------------------------------------------------------


@dataclass
class SearchResult:
    alphas: Optional[SupernetAlphas]
    assignment: ModulationAssignment
    supernet: Optional[ColdStartModel]
    model: ColdStartModel
    report: object
    curves: dict[str, list[dict]]
    timings: dict[str, float]


def run_search(split: TaskSplit, schema: DatasetSchema, strategy: str = "oneshot",
               cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
               budget: int = 10, C: int = 4, log: Optional[MetricsLog] = None) -> SearchResult:
    """Search with ``strategy``, pick a structure, retrain it from scratch and evaluate on test."""
    from .evaluation import evaluate

    log = log if log is not None else MetricsLog()
    t0 = time.perf_counter()
    alphas, supernet = None, None
    if strategy in ("oneshot", "bilevel"):
        fn = train_supernet if strategy == "oneshot" else train_supernet_bilevel
        res = fn(split, schema, cfg, model_cfg, log)
        supernet = res.model
        alphas = supernet.supernet_alphas()
        assignment = select_topk(alphas, cfg.K)
    elif strategy == "fixed_film":
        assignment = ModulationAssignment.film(model_cfg.n_layers)
    elif strategy in ("random_transformed", "random_original"):
        space = strategy.split("_", 1)[1]
        rs = random_search(split, schema, space, budget, cfg, model_cfg, C, log=log)
        best = rs.best.structure
        assignment = best.assignment() if best.is_canonical else None
        if assignment is None:
            from .algebra import canonicalize

            assignment = ModulationAssignment(tuple(canonicalize(ModulationExpr.of(*c))[0] for c in best.chains))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    t1 = time.perf_counter()
    model = ColdStartModel(schema, model_cfg, assignment, cfg.rng_seed)
    train_episodic(model, split, cfg, "retrain", log, restore_best=True)
    t2 = time.perf_counter()
    report = evaluate(model, split.test) if split.test else None
    t3 = time.perf_counter()
    curves = {}
    for r in log.records:
        curves.setdefault(r["phase"], []).append(r)
    return SearchResult(alphas, assignment, supernet, model, report, curves,
                        {"search": t1 - t0, "retrain": t2 - t1, "eval": t3 - t2, "total": t3 - t0})


# --- complexity accounting --------------------------------------------------------


@dataclass(frozen=True)
class Complexity:
    adapt_macs: int
    predict_macs_per_query: int
    n_support: int
    n_query: int

    @property
    def per_task(self) -> int:
        return self.adapt_macs + self.n_query * self.predict_macs_per_query

    @property
    def per_query(self) -> float:
        return self.predict_macs_per_query + self.adapt_macs / self.n_query


def complexity_audit(model: ColdStartModel, n_support: int, n_query: int) -> Complexity:
    """Closed-form multiply-accumulates for one task: N rows through the first adaptation
    layer plus one pooled row through the second, and M rows through the predictor."""
    cfg = model.config
    a_in = model.emb_width + 1
    adapt = n_support * a_in * cfg.r_dim + cfg.r_dim * model.phi_dim
    predict = sum(i * o for i, o in zip(model.in_widths, cfg.hidden))
    return Complexity(adapt, predict, n_support, n_query)


def measure_macs(model: ColdStartModel, task: Task) -> int:
    with MacCounter() as counter:
        model.forward_batch(Batch.from_tasks([task], model.schema))
    return counter.macs
