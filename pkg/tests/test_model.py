"""Tests for the weight-inference model: configs, loss terms, training,
stopping, injection, and checkpoints."""

import numpy as np
import pytest

from icis.data import ClassifierHead, PairSet, make_pairs, synth_generate
from icis.errors import ClassIdError, DataFormatError, DivergenceError, IcisError
from icis.model import (
    IcisModel,
    LossConfig,
    LossTrace,
    TrainConfig,
    _proportional_slice,
    ablation_variants,
    infer_and_inject,
    infer_weights,
    inject,
    load_checkpoint,
    loss_a_to_a,
    loss_a_to_w,
    loss_w_to_a,
    loss_w_to_w,
    save_checkpoint,
    should_stop,
    stopping_threshold,
    total_loss,
    train,
)
from icis.nn import LinearLayer
from icis.tensor import RngState

# ---------------------------------------------------------------------------
# configs


def test_loss_config_validates_distance_and_regression_term():
    with pytest.raises(IcisError):
        LossConfig(distance="hamming")
    with pytest.raises(IcisError):
        LossConfig(use_a_to_w=False)


def test_loss_config_enabled_terms():
    assert LossConfig().enabled_terms() == ("reg", "a_to_a", "w_to_w", "w_to_a")
    assert LossConfig(use_a_to_a=False, use_w_to_w=False, use_w_to_a=False).enabled_terms() == ("reg",)
    assert LossConfig(use_w_to_w=False).enabled_terms() == ("reg", "a_to_a", "w_to_a")


def test_train_config_validation():
    TrainConfig(max_epochs=0)  # zero epochs is legal
    with pytest.raises(IcisError):
        TrainConfig(batch_size=0)
    with pytest.raises(IcisError):
        TrainConfig(max_epochs=-1)
    with pytest.raises(IcisError):
        TrainConfig(stop_window=0)
    with pytest.raises(IcisError):
        TrainConfig(stop_threshold=0.0)
    with pytest.raises(IcisError):
        TrainConfig(hidden_dim=0)


def test_stopping_threshold_shrinks_for_squared_error():
    cfg = TrainConfig(stop_threshold=2e-4)
    assert stopping_threshold(LossConfig(), cfg) == pytest.approx(2e-4)
    assert stopping_threshold(LossConfig(distance="l2"), cfg) == pytest.approx(2e-7)


# ---------------------------------------------------------------------------
# slope stopping


def test_should_stop_needs_two_full_windows():
    assert not should_stop([1.0] * 19, window=10, threshold=1e-3)
    assert should_stop([1.0] * 20, window=10, threshold=1e-3)


def test_should_stop_flat_trace_stops():
    assert should_stop([0.5] * 8, window=4, threshold=2e-4)


def test_should_stop_steep_decline_keeps_going():
    losses = [1.0 - 0.05 * i for i in range(20)]
    # window means differ by 0.05 * window = 0.5 >> threshold
    assert not should_stop(losses, window=10, threshold=2e-4)


def test_should_stop_threshold_boundary():
    # previous window mean 1.0, latest 1.0 - delta; stop iff delta < threshold
    def trace(delta):
        return [1.0] * 10 + [1.0 - delta] * 10

    assert should_stop(trace(1e-5), window=10, threshold=2e-4)
    assert not should_stop(trace(1e-3), window=10, threshold=2e-4)


def test_loss_trace_records_and_serialises(tmp_path):
    trace = LossTrace()
    trace.append(1.0, {"reg": 0.6, "a_to_a": 0.4})
    trace.append(0.5, {"reg": 0.3, "a_to_a": 0.2})
    assert trace.epochs_run == 2
    trace.to_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,total,reg,a_to_a,w_to_w,w_to_a"
    assert lines[1].startswith("0,1.0,0.6,0.4")


# ---------------------------------------------------------------------------
# model structure


def test_model_init_shapes_and_determinism():
    m1 = IcisModel.init(5, 7, 16, RngState(3))
    m2 = IcisModel.init(5, 7, 16, RngState(3))
    assert m1.d_a == 5 and m1.d_w == 7 and m1.hidden == 16
    assert m1.a_to_w.in_dim == 5 and m1.a_to_w.out_dim == 7
    assert m1.w_to_a.in_dim == 7 and m1.w_to_a.out_dim == 5
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(p, q)
    m3 = IcisModel.init(5, 7, 16, RngState(4))
    assert not all(np.array_equal(p, q) for p, q in zip(m1.parameters(), m3.parameters()))


def test_model_views_share_layers():
    m = IcisModel.init(3, 4, 8, RngState(0))
    assert m.a_to_w.layer1 is m.a_to_a.layer1 is m.desc_encoder
    assert m.a_to_w.layer2 is m.w_to_w.layer2 is m.weight_decoder
    assert m.w_to_w.layer1 is m.w_to_a.layer1 is m.weight_encoder
    assert m.a_to_a.layer2 is m.w_to_a.layer2 is m.desc_decoder


def test_model_copy_detaches_parameters():
    m = IcisModel.init(3, 4, 8, RngState(1))
    dup = m.copy()
    dup.desc_encoder.weight[0, 0] += 1.0
    assert m.desc_encoder.weight[0, 0] != dup.desc_encoder.weight[0, 0]


def test_model_rejects_mismatched_latents():
    ok = lambda i, o: LinearLayer(np.ones((o, i)), np.zeros(o))
    with pytest.raises(IcisError):
        IcisModel(ok(3, 8), ok(8, 3), ok(4, 9), ok(9, 4))


# ---------------------------------------------------------------------------
# loss terms


def _identity_layers(d):
    # relu-safe identity: route positive and negative parts separately
    up = np.vstack([np.eye(d), -np.eye(d)])
    down = np.hstack([np.eye(d), -np.eye(d)])
    return (
        LinearLayer(up.copy(), np.zeros(2 * d)),
        LinearLayer(down.copy(), np.zeros(d)),
    )


def _identity_model(d):
    e1, d1 = _identity_layers(d)
    e2, d2 = _identity_layers(d)
    return IcisModel(e1, d1, e2, d2)


def test_identity_model_has_zero_loss_on_matched_pairs():
    m = _identity_model(3)
    a = np.array([[1.0, -2.0, 0.5], [0.25, 3.0, -1.0]])
    values = total_loss(m, a, a, LossConfig())
    for name in ("reg", "a_to_a", "w_to_w", "w_to_a", "total"):
        assert values[name] == pytest.approx(0.0, abs=1e-12)


def test_infer_weights_uses_regression_path():
    m = _identity_model(3)
    a = np.array([[0.5, -1.5, 2.0]])
    assert np.allclose(infer_weights(m, a), a, atol=1e-12)
    with pytest.raises(IcisError):
        infer_weights(m, np.ones((1, 4)))


def test_total_loss_matches_named_terms():
    m = IcisModel.init(4, 6, 10, RngState(5))
    a = RngState(6).normal(5, 4)
    w = RngState(7).normal(5, 6)
    values = total_loss(m, a, w, LossConfig())
    assert values["reg"] == pytest.approx(loss_a_to_w(m, a, w, "cosine"), abs=1e-12)
    assert values["a_to_a"] == pytest.approx(loss_a_to_a(m, a, "cosine"), abs=1e-12)
    assert values["w_to_w"] == pytest.approx(loss_w_to_w(m, w, "cosine"), abs=1e-12)
    assert values["w_to_a"] == pytest.approx(loss_w_to_a(m, w, a, "cosine"), abs=1e-12)
    assert values["total"] == pytest.approx(
        values["reg"] + values["a_to_a"] + values["w_to_w"] + values["w_to_a"], abs=1e-12
    )


def test_total_loss_disabled_terms_are_absent():
    m = IcisModel.init(4, 6, 10, RngState(5))
    a = RngState(6).normal(5, 4)
    w = RngState(7).normal(5, 6)
    only_reg = total_loss(m, a, w, LossConfig(use_a_to_a=False, use_w_to_w=False, use_w_to_a=False))
    assert set(only_reg) == {"reg", "total"}
    assert only_reg["total"] == pytest.approx(only_reg["reg"], abs=1e-15)


def test_total_gradient_is_sum_of_term_gradients():
    m = IcisModel.init(4, 6, 10, RngState(8))
    a = RngState(9).normal(5, 4)
    w = RngState(10).normal(5, 6)
    m.zero_grad()
    total_loss(m, a, w, LossConfig(), accumulate_grads=True)
    combined = [g.copy() for g in m.gradients()]

    m.zero_grad()
    loss_a_to_w(m, a, w, "cosine", accumulate_grads=True)
    loss_a_to_a(m, a, "cosine", accumulate_grads=True)
    loss_w_to_w(m, w, "cosine", accumulate_grads=True)
    loss_w_to_a(m, w, a, "cosine", accumulate_grads=True)
    for got, expected in zip(combined, m.gradients()):
        assert np.allclose(got, expected, atol=1e-10)


def test_unseen_descriptors_feed_only_the_descriptor_autoencoder():
    m = IcisModel.init(4, 6, 10, RngState(11))
    a = RngState(12).normal(5, 4)
    w = RngState(13).normal(5, 6)
    extra = RngState(14).normal(3, 4)
    with_extra = total_loss(m, a, w, LossConfig(), unseen_descriptors=extra)
    without = total_loss(m, a, w, LossConfig(), unseen_descriptors=None)
    assert with_extra["reg"] == pytest.approx(without["reg"], abs=1e-15)
    assert with_extra["w_to_w"] == pytest.approx(without["w_to_w"], abs=1e-15)
    assert with_extra["w_to_a"] == pytest.approx(without["w_to_a"], abs=1e-15)
    assert with_extra["a_to_a"] != pytest.approx(without["a_to_a"], abs=1e-9)
    # and the config switch removes them again
    off = total_loss(m, a, w, LossConfig(include_unseen_descriptors=False), unseen_descriptors=extra)
    assert off["a_to_a"] == pytest.approx(without["a_to_a"], abs=1e-15)


def test_proportional_slice_partitions_the_target_range():
    n_src, n_dst, batch = 23, 7, 5
    covered = []
    for start in range(0, n_src, batch):
        end = min(start + batch, n_src)
        s = _proportional_slice(start, end, n_src, n_dst)
        covered.extend(range(n_dst)[s])
    assert covered == list(range(n_dst))


# ---------------------------------------------------------------------------
# training


def _toy_pairs(n=8, d_a=4, d_w=6, seed=0):
    rng = RngState(seed)
    return PairSet([f"c{i}" for i in range(n)], rng.normal(n, d_a), rng.normal(n, d_w))


def test_train_zero_epochs_returns_empty_trace_and_leaves_model_alone():
    pairs = _toy_pairs()
    m = IcisModel.init(4, 6, 8, RngState(0))
    before = [p.copy() for p in m.parameters()]
    trace = train(m, pairs, train_config=TrainConfig(max_epochs=0, hidden_dim=8))
    assert trace.total == [] and not trace.stopped_early
    for p, q in zip(m.parameters(), before):
        assert np.array_equal(p, q)


def test_train_requires_two_pairs():
    single = PairSet(["a"], np.ones((1, 4)), np.ones((1, 6)))
    m = IcisModel.init(4, 6, 8, RngState(0))
    with pytest.raises(IcisError):
        train(m, single)


def test_train_rejects_dim_mismatch():
    pairs = _toy_pairs(d_a=4, d_w=6)
    m = IcisModel.init(5, 6, 8, RngState(0))
    with pytest.raises(IcisError):
        train(m, pairs)


def test_train_reduces_regression_loss_on_synthetic_task():
    task = synth_generate(seed=0, n_seen=24, n_unseen=0, d_a=8, d_w=12, samples_per_class=1)
    pairs = make_pairs(task.descriptors.subset(task.manifest.seen), task.head)
    m = IcisModel.init(8, 12, 64, RngState(1))
    trace = train(m, pairs, train_config=TrainConfig(lr=1e-3, max_epochs=60, hidden_dim=64))
    assert trace.terms["reg"][-1] < trace.terms["reg"][0] * 0.5


def test_train_equal_seeds_are_bit_identical():
    pairs = _toy_pairs()
    cfg = TrainConfig(lr=1e-3, max_epochs=8, hidden_dim=8, seed=4)
    m1 = IcisModel.init(4, 6, 8, RngState(2))
    m2 = IcisModel.init(4, 6, 8, RngState(2))
    t1 = train(m1, pairs, train_config=cfg)
    t2 = train(m2, pairs, train_config=cfg)
    assert t1.total == t2.total
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(p, q)


def test_train_shuffle_seed_changes_trajectory():
    pairs = _toy_pairs(n=20)
    m1 = IcisModel.init(4, 6, 8, RngState(2))
    m2 = IcisModel.init(4, 6, 8, RngState(2))
    t1 = train(m1, pairs, train_config=TrainConfig(lr=1e-3, max_epochs=5, hidden_dim=8, batch_size=4, seed=0))
    t2 = train(m2, pairs, train_config=TrainConfig(lr=1e-3, max_epochs=5, hidden_dim=8, batch_size=4, seed=1))
    assert t1.total != t2.total


def test_train_flat_loss_stops_after_two_windows():
    pairs = _toy_pairs()
    m = IcisModel.init(4, 6, 8, RngState(3))
    # zero learning rate keeps the loss exactly flat
    cfg = TrainConfig(lr=0.0, max_epochs=50, stop_window=10, hidden_dim=8)
    trace = train(m, pairs, train_config=cfg)
    assert trace.stopped_early
    assert trace.epochs_run == 20


def test_train_divergence_carries_partial_trace():
    pairs = _toy_pairs()
    m = IcisModel.init(4, 6, 8, RngState(4))
    cfg = TrainConfig(lr=1e9, max_epochs=50, hidden_dim=8)
    with pytest.raises(DivergenceError) as err:
        train(m, pairs, loss_config=LossConfig(distance="l2"), train_config=cfg)
    assert err.value.trace is not None
    assert err.value.trace.epochs_run >= 1


def test_train_callback_sees_every_epoch():
    pairs = _toy_pairs()
    m = IcisModel.init(4, 6, 8, RngState(5))
    seen = []
    train(m, pairs, train_config=TrainConfig(lr=1e-4, max_epochs=6, hidden_dim=8),
          callback=lambda e, loss: seen.append((e, loss)))
    assert [e for e, _ in seen] == list(range(6))


# ---------------------------------------------------------------------------
# injection


def _head(ids=("a", "b", "c")):
    return ClassifierHead(list(ids), np.eye(len(ids)) + 0.1)


def test_inject_empty_is_a_no_op():
    head = _head()
    out = inject(head, [], np.zeros((0, 3)))
    assert out.class_ids == head.class_ids
    assert np.array_equal(out.weights, head.weights)
    assert out.seen.all()


def test_inject_appends_rows_and_flags_them_unseen():
    head = _head()
    out = inject(head, ["d", "e"], np.full((2, 3), 0.5))
    assert out.class_ids == ["a", "b", "c", "d", "e"]
    assert out.seen.tolist() == [True, True, True, False, False]
    assert np.array_equal(out.weights[:3], head.weights)
    assert np.array_equal(out.weights[3:], np.full((2, 3), 0.5))


def test_inject_preserves_seen_logits_bit_for_bit():
    head = _head()
    x = RngState(0).normal(10, 3)
    before = head.logits(x)
    out = inject(head, ["z"], np.ones((1, 3)))
    after = out.logits(x)[:, :3]
    assert np.array_equal(before, after)


def test_inject_id_collision_is_an_error():
    with pytest.raises(ClassIdError):
        inject(_head(), ["b"], np.ones((1, 3)))


def test_inject_zsl_only_keeps_just_new_rows():
    out = inject(_head(), ["d", "e"], np.eye(3)[:2] + 0.5, zsl_only=True)
    assert out.class_ids == ["d", "e"]
    assert not out.seen.any()


def test_inject_merges_biases_with_zero_fill():
    head = _head()
    out = inject(head, ["d"], np.ones((1, 3)), new_biases=[2.5])
    assert out.biases.tolist() == [0.0, 0.0, 0.0, 2.5]


def test_inject_shape_errors():
    with pytest.raises(ClassIdError):
        inject(_head(), ["d", "e"], np.ones((1, 3)))
    with pytest.raises(IcisError):
        inject(_head(), ["d"], np.ones((1, 4)))


def test_infer_and_inject_splits_bias_column():
    # model output dim = head dim + 1; trailing coordinate becomes the bias
    m = _identity_model(3)
    head = ClassifierHead(["a"], np.ones((1, 2)), biases=[0.0])
    desc = np.array([[0.5, -0.5, 2.0]])
    out = infer_and_inject(m, head, desc, ["new"], include_bias=True)
    assert np.allclose(out.weights[1], [0.5, -0.5], atol=1e-12)
    assert out.biases[1] == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(IcisError):
        infer_and_inject(m, ClassifierHead(["a"], np.ones((1, 3))), desc, ["new"], include_bias=True)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    m = IcisModel.init(4, 6, 10, RngState(6))
    lc = LossConfig(distance="l2", use_w_to_a=False, include_unseen_descriptors=False)
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, m, lc, include_bias=True, seed=42)
    back, lc2, meta = load_checkpoint(p)
    assert (back.d_a, back.d_w, back.hidden) == (4, 6, 10)
    assert lc2.distance == "l2" and not lc2.use_w_to_a and not lc2.include_unseen_descriptors
    assert lc2.use_a_to_a
    assert meta["include_bias"] == "1" and meta["seed"] == "42"
    for a, b in zip(m.parameters(), back.parameters()):
        assert np.allclose(a, b, atol=1e-6)  # 32-bit storage


def test_checkpoint_predictions_survive_storage(tmp_path):
    m = IcisModel.init(4, 6, 10, RngState(7))
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, m, LossConfig())
    back, _, _ = load_checkpoint(p)
    x = RngState(8).normal(3, 4)
    assert np.allclose(infer_weights(m, x), infer_weights(back, x), atol=1e-5)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" * 10)
    with pytest.raises(DataFormatError):
        load_checkpoint(p)


def test_checkpoint_truncation(tmp_path):
    m = IcisModel.init(3, 3, 4, RngState(0))
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, m, LossConfig())
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(DataFormatError):
        load_checkpoint(p)


def test_checkpoint_trailing_bytes(tmp_path):
    m = IcisModel.init(3, 3, 4, RngState(0))
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, m, LossConfig())
    p.write_bytes(p.read_bytes() + b"extra")
    with pytest.raises(DataFormatError):
        load_checkpoint(p)


# ---------------------------------------------------------------------------
# ablation ladder


def test_ablation_ladder_names_and_order():
    assert list(ablation_variants()) == ["base_l2", "cosine", "within_spaces", "across_spaces", "full"]


def test_ablation_ladder_is_cumulative():
    v = ablation_variants()
    base = v["base_l2"]
    assert base.distance == "l2"
    assert base.enabled_terms() == ("reg",)
    assert v["cosine"].distance == "cosine"
    assert v["cosine"].enabled_terms() == ("reg",)
    assert v["within_spaces"].enabled_terms() == ("reg", "a_to_a", "w_to_w")
    assert v["across_spaces"].enabled_terms() == ("reg", "a_to_a", "w_to_w", "w_to_a")
    assert not v["across_spaces"].include_unseen_descriptors
    assert v["full"].include_unseen_descriptors
