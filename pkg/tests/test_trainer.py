import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radnet import tensor as T
from radnet.errors import ConfigError, DataError, FormatError, ShapeError, UsageError
from radnet.model import RadnetConfig, build_radnet, pad_to_multiple
from radnet.phantom import PhantomSpec, generate_phantom
from radnet.sequences import batch_sequences
from radnet.trainer import (CKPT_MAGIC, LOG_HEADER, TrainConfig, apply_transform, augment, decode_checkpoint,
                            encode_checkpoint, epoch_stream, load_checkpoint, lr_at_epoch, model_input,
                            recalibrate_bn, save_checkpoint, sgd_step, time_major, train, write_log)
from radnet.io import read_csv

MCFG = RadnetConfig(growth_rate=2, init_channels=4, layers_per_block=2, lstm_hidden=4, input_size=32)


def tcfg(**kw):
    base = dict(epochs=3, seq_len=4, seed=11)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def cases():
    return generate_phantom(PhantomSpec(seed=7, n_volumes=2, slices=8, size=32, positive_fraction=0.5))


# --- schedule and optimizer ------------------------------------------------------

@pytest.mark.parametrize("e,lr", [(0, 1e-3), (19, 1e-3), (20, 1e-4), (39, 1e-4), (40, 1e-5), (59, 1e-5)])
def test_lr_schedule_60(e, lr):
    assert lr_at_epoch(e, TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_lr_schedule_200_boundaries():
    cfg = TrainConfig(epochs=200)
    assert cfg.boundaries == (67, 133)
    assert lr_at_epoch(66, cfg) == 1e-3 and lr_at_epoch(67, cfg) == pytest.approx(1e-4)
    assert lr_at_epoch(133, cfg) == pytest.approx(1e-5)


@pytest.mark.parametrize("epochs", [1, 2, 3, 7, 60, 200])
def test_lr_schedule_monotone(epochs):
    cfg = TrainConfig(epochs=epochs)
    lrs = [lr_at_epoch(e, cfg) for e in range(epochs)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert set(lrs) <= {1e-3, 1e-3 / 10, 1e-3 / 100}
    if epochs >= 3:
        assert len(set(lrs)) == 3


def test_lr_out_of_range():
    with pytest.raises(UsageError):
        lr_at_epoch(60, TrainConfig())
    with pytest.raises(UsageError):
        lr_at_epoch(-1, TrainConfig())


def test_sgd_examples():
    w, v = sgd_step(np.array([1.0]), np.array([1.0]), np.array([0.0]), 0.1, 0.9)
    assert v[0] == pytest.approx(-0.1) and w[0] == pytest.approx(0.9)
    w, v = sgd_step(w, np.array([1.0]), v, 0.1, 0.9)
    assert v[0] == pytest.approx(-0.19) and w[0] == pytest.approx(0.71)


def test_sgd_zero_grad_decays_velocity():
    w, v = np.array([0.0]), np.array([1.0])
    for k in range(1, 6):
        w, v = sgd_step(w, np.zeros(1), v, 0.1, 0.9)
        assert v[0] == pytest.approx(0.9 ** k)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_velocity_independent_of_params(seed):
    rng = np.random.default_rng(seed)
    grads = rng.standard_normal((5, 3))
    va, vb = np.zeros(3), np.zeros(3)
    wa, wb = rng.standard_normal(3), rng.standard_normal(3) * 100
    for g in grads:
        wa, va = sgd_step(wa, g, va, 0.01, 0.9)
        wb, vb = sgd_step(wb, g, vb, 0.01, 0.9)
    assert np.array_equal(va, vb)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1, 0.9)


# --- augmentation ---------------------------------------------------------------------

def test_identity_transform():
    rng = np.random.default_rng(0)
    img, mask = rng.random((16, 16)).astype(np.float32), (rng.random((16, 16)) > 0.5).astype(np.uint8)
    out_img, out_mask = apply_transform(img, mask, 0.0, False)
    assert np.array_equal(out_img, img) and np.array_equal(out_mask, mask)


def test_flip_is_involution():
    rng = np.random.default_rng(1)
    img, mask = rng.random((2, 8, 12)), (rng.random((2, 8, 12)) > 0.5).astype(np.uint8)
    i1, m1 = apply_transform(img, mask, 0.0, True)
    i2, m2 = apply_transform(i1, m1, 0.0, True)
    assert np.array_equal(i2, img) and np.array_equal(m2, mask)
    assert np.array_equal(i1, img[..., ::-1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_augment_keeps_mask_binary_and_shape(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((24, 24)).astype(np.float32)
    mask = np.zeros((24, 24), np.uint8)
    mask[8:16, 6:14] = 1
    out_img, out_mask = augment(img, mask, rng)
    assert out_img.shape == img.shape and out_img.dtype == img.dtype
    assert set(np.unique(out_mask)) <= {0, 1}
    assert out_img.min() >= 0 and out_img.max() <= 1


def test_rotation_moves_blob_consistently():
    img = np.zeros((33, 33), np.float32)
    mask = np.zeros((33, 33), np.uint8)
    img[16, 24], mask[16, 24] = 1, 1
    out_img, out_mask = apply_transform(img, mask, 90.0, False)
    assert out_mask.sum() == 1
    assert np.unravel_index(out_img.argmax(), img.shape) == tuple(np.argwhere(out_mask)[0])


# --- windows and balancing --------------------------------------------------------------------

def test_batch_sequences_examples():
    w = batch_sequences(10, 4, 4)
    assert [s.indices for s in w] == [(0, 1, 2, 3), (4, 5, 6, 7), (8, 9, 9, 9)]
    assert w[2].pad_mask.tolist() == [1, 1, 0, 0]
    w = batch_sequences(3, 8)
    assert len(w) == 1 and w[0].n_real == 3 and int((w[0].pad_mask == 0).sum()) == 5
    w = batch_sequences(5, 3, 1)
    assert len(w) == 3 and all(s.n_real == 3 for s in w)


def test_batch_sequences_errors():
    with pytest.raises(DataError):
        batch_sequences(0, 4)
    with pytest.raises(UsageError):
        batch_sequences(5, 4, 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 50), st.integers(1, 10), st.data())
def test_every_slice_covered(n, seq_len, data):
    stride = data.draw(st.integers(1, seq_len))
    seen = set()
    for s in batch_sequences(n, seq_len, stride):
        assert len(s.indices) == seq_len
        seen.update(s.indices[:s.n_real])
    assert seen == set(range(n))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 8))
def test_balanced_stream(seed, seq_len):
    rng = np.random.default_rng(seed)
    labels = []
    for _ in range(3):
        lab = np.zeros(int(rng.integers(4, 30)), np.int64)
        a = int(rng.integers(0, len(lab)))
        lab[a:a + int(rng.integers(1, 6))] = 1
        labels.append(lab)
    windows = [(ci, w) for ci, lab in enumerate(labels) for w in batch_sequences(len(lab), seq_len)]
    stream = epoch_stream(windows, labels, rng, True, seq_len)
    pos = neg = 0
    for item in stream:
        lab = labels[item.case][list(item.window.indices)]
        pos += int((lab * item.loss_mask).sum())
        neg += int(((1 - lab) * item.loss_mask).sum())
    assert abs(pos - neg) <= seq_len


def test_unbalanceable_dataset():
    labels = [np.zeros(6, np.int64)]
    windows = [(0, w) for w in batch_sequences(6, 3)]
    with pytest.raises(DataError):
        epoch_stream(windows, labels, np.random.default_rng(0), True, 3)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(seq_len=2)
    with pytest.raises(ConfigError):
        TrainConfig(seq_len=4, seq_stride=5)
    with pytest.raises(ConfigError):
        TrainConfig(decay_epochs=(10, 5))


# --- training, checkpoints, resume --------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(cases):
    return train(cases, tcfg(), MCFG)


def test_log_rows(trained, tmp_path):
    _, rows = trained
    assert len(rows) == 3 and [r["epoch"] for r in rows] == [0, 1, 2]
    write_log(rows, tmp_path / "log.csv")
    assert len(read_csv(tmp_path / "log.csv", LOG_HEADER)) == 3


def test_seeded_runs_are_byte_identical(cases, trained):
    again, _ = train(cases, tcfg(), MCFG)
    assert encode_checkpoint(again) == encode_checkpoint(trained[0])


def test_checkpoint_round_trip(trained, tmp_path):
    ckpt, _ = trained
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes().startswith(CKPT_MAGIC)


def test_checkpoint_corruption(trained):
    buf = encode_checkpoint(trained[0])
    with pytest.raises(FormatError) as exc:
        decode_checkpoint(b"RCKPT2\n" + buf[7:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:-4])
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:20])


def test_resume_matches_uninterrupted(cases, trained, tmp_path):
    partial, first = train(cases, tcfg(), MCFG, stop_after=1)
    assert partial.epoch == 1 and len(first) == 1
    save_checkpoint(partial, tmp_path / "p.ckpt")
    final, rest = train(cases, tcfg(), MCFG, resume=load_checkpoint(tmp_path / "p.ckpt"))
    assert [r["epoch"] for r in rest] == [1, 2]
    assert encode_checkpoint(final) == encode_checkpoint(trained[0])


def test_training_needs_both_classes(cases):
    negatives = [c for c in cases if c.ct_label == 0]
    with pytest.raises(DataError):
        train(negatives, tcfg(epochs=1), MCFG)


# --- batchnorm recalibration ------------------------------------------------------------------

def _stem_stats(params, windows):
    """Per-window mean and unbiased variance of the first BN layer's input (the stem conv output)."""
    stats = []
    with T.no_grad():
        for w in windows:
            h = T.conv2d(T.Tensor(w[:, None]), params["conv0.weight"], stride=2, padding=1).data.astype(np.float64)
            stats.append((h.mean(axis=(0, 2, 3)), h.var(axis=(0, 2, 3), ddof=1)))
    return stats


def test_recalibrate_bn_averages_batch_statistics(cases):
    params = build_radnet(MCFG, seed=3)
    volumes = [pad_to_multiple(model_input(c))[0] for c in cases]
    for buf in params.buffers.values():
        buf[...] = 123.0
    n = recalibrate_bn(params, MCFG, volumes, seq_len=4)
    windows = [v[list(w.indices)] for v in volumes for w in batch_sequences(v.shape[0], 4)]
    assert n == len(windows) == 4
    stats = _stem_stats(params, windows)
    mean = np.mean([m for m, _ in stats], axis=0)
    var = np.mean([v for _, v in stats], axis=0)
    np.testing.assert_allclose(params.buffers["block1.layer01.bn.running_mean"], mean, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(params.buffers["block1.layer01.bn.running_var"], var, rtol=1e-5, atol=1e-6)
    assert all(np.all(buf != 123.0) for buf in params.buffers.values())


def test_recalibrate_bn_single_window_is_batch_statistics(cases):
    params = build_radnet(MCFG, seed=3)
    vol = pad_to_multiple(model_input(cases[0]))[0][:4]
    recalibrate_bn(params, MCFG, [vol], seq_len=4)
    (mean, var), = _stem_stats(params, [vol])
    np.testing.assert_allclose(params.buffers["block1.layer01.bn.running_mean"], mean, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(params.buffers["block1.layer01.bn.running_var"], var, rtol=1e-5, atol=1e-6)


def test_trained_buffers_are_recalibrated(cases, trained):
    ckpt, _ = trained
    before = {k: v.copy() for k, v in ckpt.params.buffers.items()}
    recalibrate_bn(ckpt.params, MCFG, [pad_to_multiple(model_input(c))[0] for c in cases], seq_len=4)
    for k, v in before.items():
        np.testing.assert_allclose(ckpt.params.buffers[k], v, rtol=1e-5, atol=1e-6)
        ckpt.params.buffers[k][...] = v


def test_recalibration_can_be_disabled(cases, trained):
    plain, _ = train(cases, tcfg(epochs=1, recalibrate_bn=False), MCFG)
    recal, _ = train(cases, tcfg(epochs=1), MCFG)
    assert all(np.array_equal(plain.params[k].data, recal.params[k].data) for k in plain.params.tensors)
    assert any(not np.allclose(plain.params.buffers[k], recal.params.buffers[k]) for k in plain.params.buffers)


# --- several sequences per batch --------------------------------------------------------------

def test_time_major_layout():
    a, b = np.array([[1, 2], [3, 4], [5, 6]]), np.array([[7, 8], [9, 10], [11, 12]])
    np.testing.assert_array_equal(time_major([a, b]), [[1, 2], [7, 8], [3, 4], [9, 10], [5, 6], [11, 12]])
    np.testing.assert_array_equal(time_major([np.arange(3), np.arange(3) + 10]), [0, 10, 1, 11, 2, 12])


def test_multi_sequence_batches_train(cases):
    one, _ = train(cases, tcfg(epochs=2, seqs_per_batch=1), MCFG)
    two, rows2 = train(cases, tcfg(epochs=2, seqs_per_batch=2), MCFG)
    assert len(rows2) == 2 and all(np.isfinite(r["total_loss"]) for r in rows2)
    assert any(not np.array_equal(one.params[k].data, two.params[k].data) for k in one.params.tensors)
    again, _ = train(cases, tcfg(epochs=2, seqs_per_batch=2), MCFG)
    assert encode_checkpoint(again) == encode_checkpoint(two)


def test_seqs_per_batch_validation():
    with pytest.raises(ConfigError):
        TrainConfig(seqs_per_batch=0)
