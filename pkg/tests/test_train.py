import math

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from echoact.dataset import LabeledDataset, LabeledWindow, make_class_table
from echoact.echo import EchoProfile, FlowWindow
from echoact.errors import ConfigError, DataError
from echoact.learn.network import Architecture
from echoact.learn.train import (
    Adam,
    MaskConfig,
    TrainConfig,
    classifier_forward,
    cosine_lr,
    finetune,
    focal_loss,
    loss_and_gradients,
    mse_loss,
    predict,
    pretrain,
    random_mask,
)
from gradcheck import small_network

TABLE = make_class_table(["chew", "walk", "null"])
SHAPE = (2, 13, 11)
SMALL = Architecture(in_channels=2, height=13, width=11, widths=(3, 4, 5, 6), decoder_widths=(4, 3, 2),
                     hidden=5, n_classes=3)


def toy_dataset(classes=(0, 1, 2), per_class=4, seed=0):
    """Classes differ in which rows carry energy, so a tiny network can separate them."""
    rng = np.random.default_rng(seed)
    items = []
    for g in ("A", "B"):
        for c in classes:
            for _ in range(per_class):
                x = rng.random(SHAPE).astype(np.float32) * 0.1
                x[:, 4 * c : 4 * c + 4, :] += 1.0
                items.append(LabeledWindow(FlowWindow(x), TABLE[c], g))
    return LabeledDataset(items, TABLE)


def tiny_finetune(ds, cfg, dtype=np.float32):
    from echoact.learn import train as T

    # finetune builds the default widths for the window shape; swap in the small encoder
    model, _ = T.pretrain([it.window for it in ds.items], TrainConfig(pretrain_epochs=0, rng_seed=cfg.rng_seed),
                          arch=SMALL, dtype=dtype)
    return finetune(model, ds, cfg, dtype=dtype)


# ------------------------------------------------------------------ losses


def test_focal_worked_value_and_zero_gamma():
    assert focal_loss([0.25, 0.75], 0, 0.5) == pytest.approx(1.20057, abs=1e-4)
    assert abs(focal_loss([0.25, 0.75], 0, 0.0) - math.log(4)) <= 1e-12
    with pytest.raises(DataError):
        focal_loss([0.5, 0.5], 2, 0.5)


def test_mse_worked_value():
    assert mse_loss([[1.0, 2.0], [0.0, 3.0]], np.zeros((2, 2))) == pytest.approx(3.5)
    with pytest.raises(DataError):
        mse_loss(np.zeros(3), np.zeros(4))


def test_objective_errors():
    net, rng = small_network()
    x = rng.random((2, *SHAPE))
    with pytest.raises(DataError):
        loss_and_gradients(net, x, "focal-finetune", rng=rng)
    with pytest.raises(DataError):
        loss_and_gradients(net, x, "focal-finetune", labels=np.array([0, 3]), rng=rng)
    with pytest.raises(ConfigError):
        loss_and_gradients(net, x, "hinge")
    with pytest.raises(DataError):
        loss_and_gradients(net, x[:0], "mse-pretrain")


def test_masked_only_loss_ignores_visible_entries():
    net, rng = small_network()
    x = rng.random((2, *SHAPE))
    masks = np.zeros(x.shape, bool)
    masks[:, :, :3, :4] = True
    full, _ = loss_and_gradients(net, x, "mse-pretrain", masks=masks)
    only, _ = loss_and_gradients(net, x, "mse-pretrain", masks=masks, masked_only=True)
    assert full != only


# ------------------------------------------------------------------ masking


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(295, 166), (13, 11), (40, 7)]))
@example(1293, (13, 11))  # a single 10x3 rectangle once overshot 20 %
def test_mask_fraction_and_patch_count(seed, hw):
    rng = np.random.default_rng(seed)
    x = np.ones((4, *hw), np.float32)
    masked, mask = random_mask(x, MaskConfig(), rng)
    frac = mask.reshape(4, -1).mean(axis=1)
    assert np.all(frac >= 0.15) and np.all(frac <= 0.20)
    assert np.array_equal(masked == 0, mask)


def test_mask_is_deterministic_and_keeps_window_metadata():
    w = FlowWindow(np.ones((4, 295, 166), np.float32), 3.0, 80.0)
    a, ma = random_mask(w, MaskConfig(), np.random.default_rng(7))
    b, mb = random_mask(w, MaskConfig(), np.random.default_rng(7))
    assert np.array_equal(ma, mb) and a.start_time == 3.0 and a.frame_rate == 80.0


def test_mask_config_validation():
    with pytest.raises(ConfigError):
        MaskConfig(mask_fraction_range=(0.3, 0.2))
    with pytest.raises(ConfigError):
        MaskConfig(n_patches_range=(0, 2))
    with pytest.raises(ConfigError):
        TrainConfig(loss="hinge")
    with pytest.raises(ConfigError):
        TrainConfig(dropout_p=1.0)


# ------------------------------------------------------------------ optimisation


def test_cosine_schedule_endpoints():
    assert cosine_lr(1e-3, 0, 10) == 1e-3
    assert cosine_lr(1e-3, 5, 10) == pytest.approx(5e-4)
    assert cosine_lr(1e-3, 10, 10) == pytest.approx(0.0)
    lrs = [cosine_lr(1.0, e, 20) for e in range(20)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_adam_zero_learning_rate_leaves_parameters():
    params = {"w": np.arange(4.0)}
    before = params["w"].copy()
    opt = Adam(params)
    opt.step({"w": np.ones(4)}, 0.0)
    assert np.array_equal(params["w"], before)
    opt.step({"w": np.ones(4)}, 0.1)
    assert np.allclose(params["w"], before - 0.1, atol=1e-6)


def test_finetune_with_zero_learning_rate_changes_no_parameter():
    ds = toy_dataset()
    base, _ = pretrain([it.window for it in ds.items], TrainConfig(pretrain_epochs=0), arch=SMALL)
    model, _ = finetune(base, ds, TrainConfig(finetune_epochs=2, lr_init=0.0, batch_size=4))
    start = base.with_head(3, np.random.default_rng([0, 1]))
    for k in model.params:
        assert np.array_equal(model.params[k], start.params[k]), k


def test_training_is_deterministic():
    ds = toy_dataset()
    cfg = TrainConfig(finetune_epochs=3, batch_size=4, rng_seed=3)
    a, ha = tiny_finetune(ds, cfg)
    b, hb = tiny_finetune(ds, cfg)
    assert ha == hb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_zero_gamma_focal_matches_cross_entropy_trajectory():
    ds = toy_dataset()
    _, focal = tiny_finetune(ds, TrainConfig(finetune_epochs=4, batch_size=4, gamma_focal=0.0), np.float64)
    _, ce = tiny_finetune(ds, TrainConfig(finetune_epochs=4, batch_size=4, loss="ce"), np.float64)
    assert np.max(np.abs(np.array(focal) - np.array(ce))) <= 1e-9


def test_finetune_learns_a_separable_toy_problem():
    ds = toy_dataset()
    model, hist = tiny_finetune(ds, TrainConfig(finetune_epochs=30, batch_size=8, lr_init=1e-2))
    assert hist[-1][1] < hist[0][1]
    preds = [int(np.argmax(classifier_forward(model, it.window))) for it in ds.items]
    assert np.mean(np.array(preds) == ds.targets()) >= 0.9


def test_pretraining_reduces_reconstruction_loss():
    ds = toy_dataset()
    _, hist = pretrain([it.window for it in ds.items], TrainConfig(pretrain_epochs=15, batch_size=8, lr_init=1e-2),
                       arch=SMALL)
    assert hist[-1][1] < hist[0][1]


def test_single_class_finetune_is_flagged_degenerate():
    ds = toy_dataset(classes=(1,))
    model, _ = tiny_finetune(ds, TrainConfig(finetune_epochs=3, batch_size=4))
    assert model.degenerate
    assert not tiny_finetune(toy_dataset(), TrainConfig(finetune_epochs=1, batch_size=4))[0].degenerate


def test_training_input_errors():
    empty = LabeledDataset([], TABLE)
    with pytest.raises(DataError):
        finetune(None, empty)
    with pytest.raises(DataError):
        pretrain([])
    model, _ = tiny_finetune(toy_dataset(), TrainConfig(finetune_epochs=0))
    with pytest.raises(ConfigError):
        finetune(model.with_head(4, np.random.default_rng(0)), toy_dataset(), TrainConfig(finetune_epochs=0),
                 keep_head=True)


# ------------------------------------------------------------------ inference


def test_predict_emits_one_label_per_hop():
    model, _ = tiny_finetune(toy_dataset(), TrainConfig(finetune_epochs=0))
    rate = 10.0
    flow = EchoProfile(np.random.default_rng(0).random((2, 13, 11 + 6 * 10)), rate)
    preds = predict(model, flow, TABLE, hop_frames=10)
    assert len(preds) == 7
    assert [p.time_s for p in preds] == pytest.approx([i * 1.0 for i in range(7)])
    assert all(p.label in TABLE and abs(p.probs.sum() - 1) < 1e-9 for p in preds)
    with pytest.raises(ConfigError):
        predict(model, flow, TABLE[:2])
