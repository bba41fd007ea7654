import json
import math

import numpy as np
import pytest

from coldnas.data import make_synthetic, prepare_split
from coldnas.model import ColdStartModel, ModelConfig, Structure
from coldnas.modulation import ModulationAssignment
from coldnas.numerics import Tensor
from coldnas.search import (SGD, Adam, DivergenceError, MetricsLog, TrainConfig, complexity_audit,
                            mean_task_loss, measure_macs, random_search, retrain, run_search,
                            sample_structure, train_episodic, train_supernet, train_supernet_bilevel)

TINY = ModelConfig(emb_dim=4, hidden=(8, 4, 1), r_dim=8)
FAST = TrainConfig(optimizer="adam", learning_rate=3e-3, max_epochs=6, patience=50, batch_size=8)


@pytest.fixture(scope="module")
def data():
    ds, _ = make_synthetic("h*p1+p2", n_users=40, n_items=70, rng_seed=0)
    return prepare_split(ds.interactions, "synthetic", rng_seed=0), ds.schema


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(alpha_optimizer="lbfgs")
    with pytest.raises(ValueError):
        TrainConfig(K=0)


@pytest.mark.parametrize("opt_cls,lr", [(SGD, 0.1), (Adam, 0.1)])
def test_optimizers_minimise_a_quadratic(opt_cls, lr):
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = opt_cls([x], lr)
    for _ in range(300):
        x.grad = 2 * x.values
        opt.step()
    assert np.abs(x.values).max() < 1e-2


def test_metrics_log_checksum_ignores_wall_clock(tmp_path):
    a = MetricsLog(tmp_path / "a.jsonl")
    b = MetricsLog()
    a.write({"epoch": 1, "val_loss": 0.5, "elapsed_sec": 1.0})
    b.write({"epoch": 1, "val_loss": 0.5, "elapsed_sec": 9.0})
    assert a.checksum() == b.checksum()
    b.write({"epoch": 2, "val_loss": 0.4, "elapsed_sec": 9.5})
    assert a.checksum() != b.checksum()
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["val_loss"] == 0.5


def test_training_reduces_loss_and_logs_each_epoch(data):
    split, schema = data
    model = ColdStartModel(schema, TINY, ModulationAssignment.film(3), rng_seed=0)
    before = mean_task_loss(model, split.val)
    log = MetricsLog()
    result = train_episodic(model, split, FAST, "retrain", log)
    assert result.epochs == 6 and len(log.records) == 6
    assert result.best_val < before
    assert {"phase", "epoch", "train_loss", "val_loss", "elapsed_sec"} <= set(log.records[0])


def test_early_stopping_and_restore_best(data):
    split, schema = data
    cfg = TrainConfig(optimizer="sgd", learning_rate=1e-9, max_epochs=50, patience=2, min_delta=1.0)
    model = ColdStartModel(schema, TINY, None, rng_seed=0)
    result = train_episodic(model, split, cfg, "retrain", restore_best=True)
    assert result.epochs == 3
    assert mean_task_loss(model, split.val) == pytest.approx(result.curve[0]["val_loss"], abs=1e-9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(data):
    split, schema = data
    model = ColdStartModel(schema, TINY, ModulationAssignment.full(3), rng_seed=0)
    with pytest.raises(DivergenceError) as err:
        train_episodic(model, split, TrainConfig(learning_rate=1e12, max_epochs=3), "retrain")
    assert err.value.diagnostics["phase"] == "retrain"


def test_supernet_training_is_deterministic(data):
    split, schema = data
    logs = [MetricsLog(), MetricsLog()]
    models = [train_supernet(split, schema, FAST, TINY, log).model for log in logs]
    assert logs[0].checksum() == logs[1].checksum()
    assert models[0].checksum() == models[1].checksum()
    assert "alphas" in logs[0].records[-1]
    assert not np.allclose(models[0].supernet_alphas().values, 0.5)


def test_bilevel_only_moves_alphas_on_validation(data):
    split, schema = data
    cfg = TrainConfig(optimizer="adam", learning_rate=1e-12, alpha_lr=1e-2, max_epochs=2, batch_size=8)
    result = train_supernet_bilevel(split, schema, cfg, TINY)
    fresh = ColdStartModel(schema, TINY, Structure.make_supernet(3), cfg.rng_seed)
    assert not np.allclose(result.model.supernet_alphas().values, 0.5)
    for k, v in fresh.state().items():
        np.testing.assert_allclose(result.model.params[k].values, v, atol=1e-6)


def test_retrain_returns_test_report(data):
    split, schema = data
    result, report = retrain(split, schema, ModulationAssignment.film(3), FAST, TINY)
    assert report.n_tasks == len(split.test)
    assert math.isfinite(report.mse) and result.model.structure.is_canonical


def test_sample_structure_spaces():
    rng = np.random.default_rng(0)
    original = sample_structure(rng, "original", 4, C=3)
    assert [len(c) for c in original.chains] == [3] * 4
    assert sample_structure(rng, "transformed", 4).is_canonical
    with pytest.raises(ValueError):
        sample_structure(rng, "both", 4)


def test_random_search_tracks_best(data):
    split, schema = data
    rs = random_search(split, schema, "transformed", 3, FAST, TINY, epoch_fraction=0.34)
    curve = rs.best_so_far()
    assert [n for n, _, _ in curve] == [1, 2, 3]
    assert all(a[2] >= b[2] for a, b in zip(curve, curve[1:]))
    assert rs.best.val_loss == curve[-1][2]
    assert rs.candidates_to_reach(rs.best.val_loss) <= 3
    assert rs.candidates_to_reach(-1.0) is None


@pytest.mark.parametrize("strategy", ["fixed_film", "oneshot", "random_original"])
def test_run_search_strategies(data, strategy):
    split, schema = data
    res = run_search(split, schema, strategy, FAST, TINY, budget=2, C=2)
    assert len(res.assignment) == 3
    assert res.model.structure == Structure.from_assignment(res.assignment)
    assert set(res.timings) == {"search", "retrain", "eval", "total"}
    assert "retrain" in res.curves
    if strategy == "oneshot":
        assert res.assignment.n_ops == FAST.K and res.alphas is not None
    if strategy == "fixed_film":
        assert res.assignment == ModulationAssignment.film(3)


def test_unknown_strategy(data):
    split, schema = data
    with pytest.raises(ValueError):
        run_search(split, schema, "evolution", FAST, TINY)


def test_complexity_audit_matches_counted_macs(data):
    split, schema = data
    model = ColdStartModel(schema, TINY, ModulationAssignment.full(3))
    task = split.test[0]
    audit = complexity_audit(model, len(task.support), len(task.query))
    assert measure_macs(model, task) == audit.per_task
    assert audit.per_query == pytest.approx(audit.per_task / len(task.query))
