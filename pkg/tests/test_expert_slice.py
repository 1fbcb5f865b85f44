"""Slice expert: sampling windows, probability averaging, loss semantics.

The scan-level loss applies the log *after* averaging per-slice
probabilities; a dedicated test pins that against the log-before-mean
variant with hand-computed values so the two can never be silently swapped.
"""

import math

import numpy as np
import pytest
import torch
from torch import nn

from ctexperts.checkpoint import CheckpointError, state_checksum
from ctexperts.expert_slice import (SliceEncoder, SliceEncoderConfig,
                                    SliceModelError, Stage2aTrainConfig,
                                    load_stage2a, loss_slice, make_head,
                                    predict_stage2a, pretrain_encoder,
                                    sample_contiguous, sample_depth_random,
                                    save_stage2a, scan_probability,
                                    scan_probability_tensor,
                                    slice_probabilities, train_stage2a)
from ctexperts.training import frozen_drift, snapshot_params

from .fd import run_gradcheck

SMALL = SliceEncoderConfig(stem_pool=(2, 2), channels=(3, 4), embed_dim=8)


class LogitPassthrough(nn.Module):
    """Stub encoder: flattens each (1, 1, 2) slice into its 2 logit values."""

    def forward(self, x):
        return x.flatten(1)


def logit_stack(prob_pairs):
    """Stack of (1, 2) slices whose softmax equals the given probabilities."""
    return np.log(np.asarray(prob_pairs, dtype=np.float64))[:, None, :].astype(np.float32)


# ---------------------------------------------------------------------------
# probability averaging (mean of per-slice probabilities)


def test_scan_probability_is_mean_of_slice_probabilities():
    stack = logit_stack([(0.9, 0.1), (0.3, 0.7)])
    encoder, head = LogitPassthrough(), nn.Identity()
    x = torch.from_numpy(stack).unsqueeze(1)
    per_slice = slice_probabilities(encoder, head, x).detach().numpy()
    np.testing.assert_allclose(per_slice, [[0.9, 0.1], [0.3, 0.7]], atol=1e-6)
    scan = scan_probability_tensor(encoder, head, x).detach().numpy()
    assert scan == pytest.approx([0.6, 0.4], abs=1e-6)


def test_loss_applies_log_after_the_mean_not_before():
    # true-class probabilities 0.9 and 0.1: the two orderings differ sharply
    stack = logit_stack([(0.9, 0.1), (0.1, 0.9)])
    encoder, head = LogitPassthrough(), nn.Identity()
    x = torch.from_numpy(stack).unsqueeze(1)
    scan = scan_probability_tensor(encoder, head, x)

    ours = float(loss_slice(scan, 0))
    assert ours == pytest.approx(-math.log(0.5), abs=1e-6)          # 0.6931
    log_before_mean = -np.mean([math.log(0.9), math.log(0.1)])
    assert log_before_mean == pytest.approx(1.2039728, abs=1e-6)    # 1.2040
    assert abs(ours - log_before_mean) > 0.5


def test_loss_slice_float_and_tensor_paths_agree():
    probs = (0.35, 0.65)
    t = float(loss_slice(torch.tensor(probs), 1))
    f = loss_slice(probs, 1)
    assert t == pytest.approx(f, abs=1e-6)
    assert f == pytest.approx(-math.log(0.65), abs=1e-9)


def test_loss_slice_clamps_zero_probability():
    val = loss_slice((1.0, 0.0), 1)
    assert np.isfinite(val)
    assert val == pytest.approx(-math.log(1e-12), rel=1e-6)


def test_scan_probability_wrapper_matches_tensor_path():
    torch.manual_seed(0)
    encoder = SliceEncoder(SMALL)
    head = make_head(SMALL.embed_dim)
    stack = np.random.default_rng(0).random((5, 8, 8)).astype(np.float32)
    sub = sample_contiguous(stack, 5)
    p0, p1 = scan_probability(encoder, head, sub)
    x = torch.from_numpy(stack).unsqueeze(1)
    with torch.no_grad():
        ref = scan_probability_tensor(encoder, head, x).numpy()
    assert (p0, p1) == pytest.approx(tuple(ref), abs=1e-6)
    assert p0 + p1 == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------------------
# subsequence sampling


def test_contiguous_offsets_cover_every_legal_start():
    stack = np.arange(20 * 4, dtype=np.float32).reshape(20, 2, 2)
    rng = np.random.default_rng(7)
    seen = set()
    for _ in range(400):
        sub = sample_contiguous(stack, k=12, rng=rng)
        assert sub.contiguous
        assert len(sub.indices) == 12
        assert 0 <= sub.start_offset <= 8
        np.testing.assert_array_equal(sub.slices, stack[sub.start_offset:sub.start_offset + 12])
        seen.add(sub.start_offset)
    assert seen == set(range(9))  # uniform draw over {0..n-k}


def test_contiguous_full_stack_needs_no_rng():
    stack = np.zeros((12, 2, 2), dtype=np.float32)
    sub = sample_contiguous(stack, k=12)
    assert sub.indices == tuple(range(12))


def test_contiguous_requires_rng_when_offset_is_free():
    stack = np.zeros((13, 2, 2), dtype=np.float32)
    with pytest.raises(SliceModelError, match="rng required"):
        sample_contiguous(stack, k=12)


@pytest.mark.parametrize("k", [0, 21])
def test_contiguous_rejects_bad_k(k):
    stack = np.zeros((20, 2, 2), dtype=np.float32)
    with pytest.raises(SliceModelError, match="invalid"):
        sample_contiguous(stack, k=k, rng=np.random.default_rng(0))


def test_depth_random_draws_distinct_sorted_depths():
    stack = np.arange(20 * 4, dtype=np.float32).reshape(20, 2, 2)
    rng = np.random.default_rng(8)
    starts = set()
    for _ in range(200):
        sub = sample_depth_random(stack, k=12, rng=rng)
        assert len(set(sub.indices)) == 12
        assert list(sub.indices) == sorted(sub.indices)
        np.testing.assert_array_equal(sub.slices, stack[list(sub.indices)])
        starts.add(sub.contiguous)
    assert False in starts  # non-contiguous draws dominate


def test_depth_random_full_stack_is_identity():
    stack = np.zeros((12, 2, 2), dtype=np.float32)
    sub = sample_depth_random(stack, k=12)
    assert sub.indices == tuple(range(12))


# ---------------------------------------------------------------------------
# gradients


def test_gradcheck_scan_loss_through_encoder(rng):
    torch.manual_seed(3)
    bundle = nn.ModuleDict({"encoder": SliceEncoder(SMALL),
                            "head": make_head(SMALL.embed_dim)}).double()
    n_params = sum(p.numel() for p in bundle.parameters())
    assert n_params < 5000
    x = torch.from_numpy(np.random.default_rng(4).random((6, 1, 8, 8)))

    def loss_fn():
        return loss_slice(scan_probability_tensor(bundle["encoder"], bundle["head"], x), 1)

    err, _, _ = run_gradcheck(bundle, loss_fn, rng, n_coords=100)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# batch-partition invariance (per-sample normalization only)


def test_slice_probabilities_independent_of_batching():
    torch.manual_seed(4)
    encoder = SliceEncoder(SMALL).eval()
    head = make_head(SMALL.embed_dim)
    stack = np.random.default_rng(5).random((24, 8, 8)).astype(np.float32)
    x = torch.from_numpy(stack).unsqueeze(1)
    with torch.no_grad():
        whole = slice_probabilities(encoder, head, x).numpy()
        parts = np.concatenate([
            slice_probabilities(encoder, head, x[i:i + 6]).numpy()
            for i in range(0, 24, 6)
        ])
    assert np.max(np.abs(whole - parts)) < 1e-5


# ---------------------------------------------------------------------------
# layer freezing


def test_freeze_all_but_last_two():
    encoder = SliceEncoder()
    encoder.freeze_all_but_last_two()
    assert encoder.layer_trainable_flags() == [False, False, False, True, True]
    trainable = [n for n, p in encoder.named_parameters() if p.requires_grad]
    assert all(n.startswith(("layers.3", "layers.4")) for n in trainable)


def test_set_layer_trainable_length_check():
    encoder = SliceEncoder(SMALL)
    with pytest.raises(SliceModelError, match="flags"):
        encoder.set_layer_trainable([True, False])


# ---------------------------------------------------------------------------
# training


def stack_items(n, seed, n_slices=16, side=8):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        label = i % 2
        stack = rng.random((n_slices, side, side), dtype=np.float64).astype(np.float32) * 0.2
        if label:
            stack[:, 2:6, 2:6] += 0.6
        items.append({"item_id": f"sc{i}", "scan_id": f"sc{i}", "label": label,
                      "stack": stack})
    return items


def small_stage2a_config(**kw):
    defaults = dict(sampling="crs", k=12, epochs=2, lr=1e-3, scans_per_batch=4,
                    encoder=SliceEncoderConfig(stem_pool=(1, 1), channels=(3, 4),
                                               embed_dim=8),
                    pretrain_steps=4)
    defaults.update(kw)
    return Stage2aTrainConfig(**defaults)


def test_train_stage2a_deterministic_per_seed():
    train, val = stack_items(6, 0), stack_items(4, 1)
    sums = []
    for seed in (21, 21, 22):
        enc, head, _ = train_stage2a(train, val, small_stage2a_config(), master_seed=seed)
        sums.append(state_checksum(nn.ModuleDict({"encoder": enc, "head": head})))
    assert sums[0] == sums[1]
    assert sums[0] != sums[2]


def test_train_stage2a_partial_freeze_keeps_early_layers_bitwise():
    train, val = stack_items(6, 2), stack_items(4, 3)
    cfg = small_stage2a_config(encoder_fully_trainable=False)
    torch.manual_seed(9)
    encoder = SliceEncoder(cfg.encoder)
    before = {n: p.detach().clone() for n, p in encoder.named_parameters()}
    enc, head, _ = train_stage2a(train, val, cfg, master_seed=5, encoder=encoder)
    frozen_names = [n for n, p in enc.named_parameters() if not p.requires_grad]
    assert frozen_names  # the early conv layers really are frozen
    for name in frozen_names:
        assert torch.equal(dict(enc.named_parameters())[name], before[name])
    moved = any(not torch.equal(dict(enc.named_parameters())[n], before[n])
                for n, p in enc.named_parameters() if p.requires_grad)
    assert moved
    assert head is not None


def test_train_stage2a_drs_mode_runs():
    train, val = stack_items(4, 4), stack_items(2, 5)
    enc, head, history = train_stage2a(train, val, small_stage2a_config(sampling="drs"),
                                       master_seed=6)
    assert len(history["epochs"]) == 2
    pred = predict_stage2a(enc, head, val[0]["stack"], scan_id="v0")
    assert pred.probs[0] + pred.probs[1] == pytest.approx(1.0, abs=1e-6)


def test_stage2a_config_rejects_unknown_sampling():
    with pytest.raises(ValueError, match="sampling"):
        Stage2aTrainConfig(sampling="all")


def test_predict_uses_every_slice():
    stack = logit_stack([(0.9, 0.1), (0.5, 0.5), (0.1, 0.9), (0.1, 0.9)])
    pred = predict_stage2a(LogitPassthrough(), nn.Identity(), stack, scan_id="s")
    assert pred.probs == pytest.approx((0.4, 0.6), abs=1e-6)
    assert pred.label == 1


def test_pretrain_encoder_deterministic():
    pool = np.random.default_rng(6).random((10, 8, 8)).astype(np.float32)
    cfg = SliceEncoderConfig(stem_pool=(1, 1), channels=(3, 4), embed_dim=8)
    a = pretrain_encoder(pool, cfg, master_seed=7, steps=3)
    b = pretrain_encoder(pool, cfg, master_seed=7, steps=3)
    assert state_checksum(a) == state_checksum(b)


def test_snapshot_and_drift_helpers_see_frozen_params():
    encoder = SliceEncoder(SMALL)
    encoder.freeze_all_but_last_two()
    snap = snapshot_params(encoder, trainable=False)
    assert snap
    assert frozen_drift(encoder, snap) == 0.0


# ---------------------------------------------------------------------------
# checkpointing


def test_save_load_round_trip(tmp_path):
    torch.manual_seed(11)
    encoder = SliceEncoder(SMALL)
    encoder.freeze_all_but_last_two()
    head = make_head(SMALL.embed_dim)
    stack = np.random.default_rng(11).random((6, 8, 8)).astype(np.float32)
    before = predict_stage2a(encoder, head, stack).probs
    save_stage2a(encoder, head, tmp_path / "s2a.npz")
    enc2, head2, meta = load_stage2a(tmp_path / "s2a.npz")
    assert predict_stage2a(enc2, head2, stack).probs == before
    assert meta["kind"] == "stage2a"
    assert meta["layer_trainable"] == [False, False, True, True]


def test_load_rejects_wrong_kind(tmp_path):
    from ctexperts.expert3d import Expert3DConfig, Volume3DModel, save_stage1

    save_stage1(Volume3DModel(Expert3DConfig(in_shape=(8, 16, 16),
                                             stem_pool=(2, 2, 2), channels=(2,),
                                             blocks_per_stage=1)),
                tmp_path / "other.npz")
    with pytest.raises(CheckpointError, match="not a stage2a checkpoint"):
        load_stage2a(tmp_path / "other.npz")
