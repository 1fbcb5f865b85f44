"""Shared training helpers: best-epoch tracking, batching, divergence guard."""

import numpy as np
import pytest
import torch
from torch import nn

from ctexperts.training import (BestTracker, TrainingDiverged,
                                binary_validation_metrics, check_finite_loss,
                                frozen_drift, make_optimizer, minibatches,
                                snapshot_params)


def tiny_module(value):
    m = nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        m.weight.fill_(value)
    return m


# ---------------------------------------------------------------------------
# best-epoch tracking


def test_best_tracker_prefers_higher_macro_f1():
    t = BestTracker()
    m = tiny_module(0.0)
    assert t.update(m, {"macro_f1": 0.5, "auc": 0.5}, 0)
    m = tiny_module(1.0)
    assert t.update(m, {"macro_f1": 0.8, "auc": 0.4}, 1)
    m = tiny_module(2.0)
    assert not t.update(m, {"macro_f1": 0.7, "auc": 0.9}, 2)
    assert t.best_epoch == 1
    target = tiny_module(9.0)
    t.restore(target)
    assert float(target.weight) == 1.0


def test_best_tracker_breaks_f1_tie_by_auc_then_earlier_epoch():
    t = BestTracker()
    t.update(tiny_module(0.0), {"macro_f1": 0.8, "auc": 0.6}, 0)
    assert t.update(tiny_module(1.0), {"macro_f1": 0.8, "auc": 0.7}, 1)
    # same f1 and auc at a later epoch loses to the earlier one
    assert not t.update(tiny_module(2.0), {"macro_f1": 0.8, "auc": 0.7}, 2)
    assert t.best_epoch == 1


def test_best_tracker_treats_nan_auc_as_worst():
    t = BestTracker()
    t.update(tiny_module(0.0), {"macro_f1": 0.8, "auc": float("nan")}, 0)
    assert t.update(tiny_module(1.0), {"macro_f1": 0.8, "auc": 0.1}, 1)
    assert t.best_epoch == 1


def test_best_tracker_restore_without_update_is_noop():
    t = BestTracker()
    m = tiny_module(3.0)
    t.restore(m)
    assert float(m.weight) == 3.0


# ---------------------------------------------------------------------------
# batching and optimization helpers


def test_minibatches_cover_every_index_once():
    rng = np.random.default_rng(0)
    batches = list(minibatches(10, 4, rng))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_minibatches_shuffle_depends_on_rng():
    a = np.concatenate(list(minibatches(10, 4, np.random.default_rng(1))))
    b = np.concatenate(list(minibatches(10, 4, np.random.default_rng(2))))
    assert not np.array_equal(a, b)


def test_make_optimizer_returns_adam_and_cosine():
    m = tiny_module(0.0)
    opt, sched = make_optimizer(m.parameters(), 1e-3, 10)
    assert isinstance(opt, torch.optim.Adam)
    assert opt.param_groups[0]["lr"] == 1e-3
    m(torch.ones(1)).backward()
    for _ in range(10):
        opt.step()
        sched.step()
    assert opt.param_groups[0]["lr"] < 1e-3


def test_check_finite_loss_raises_on_nan():
    with pytest.raises(TrainingDiverged, match="stagex"):
        check_finite_loss(torch.tensor(float("nan")), "stagex", 3, 7)
    check_finite_loss(torch.tensor(1.5), "stagex", 0, 0)  # finite passes


# ---------------------------------------------------------------------------
# snapshots and metrics glue


def test_snapshot_and_drift():
    m = nn.Linear(2, 2)
    m.bias.requires_grad = False
    frozen = snapshot_params(m, trainable=False)
    assert set(frozen) == {"bias"}
    assert frozen_drift(m, frozen) == 0.0
    with torch.no_grad():
        m.bias += 0.25
    assert frozen_drift(m, frozen) == pytest.approx(0.25)


def test_binary_validation_metrics_keys():
    out = binary_validation_metrics([0, 1, 1, 0], [0, 1, 0, 0], [0.2, 0.9, 0.4, 0.1])
    assert set(out) == {"macro_f1", "acc", "auc"}
    assert out["acc"] == 0.75


def test_binary_validation_metrics_degenerate_auc_is_nan():
    with pytest.warns(UserWarning, match="AUC skipped"):
        out = binary_validation_metrics([1, 1], [1, 1], [0.9, 0.8])
    assert np.isnan(out["auc"])
    assert out["acc"] == 1.0
