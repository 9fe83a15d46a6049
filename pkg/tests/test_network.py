"""Classifier tests: forward oracle, finite-difference gradients, training
determinism and convergence, evaluation tie-breaking."""

import numpy as np
import pytest

from roarlab import autodiff as ad
from roarlab.autodiff import Tensor
from roarlab.datasets import Dataset
from roarlab.network import (
    CONV1_CHANNELS,
    CONV2_CHANNELS,
    Model,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    gradient_check,
    input_gradient,
    train,
)


def _toy_dataset(n=64, c=2, seed=0, sep=True):
    """Linearly separable two-class set: class decides the mean intensity."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, c, n)
    base = 0.15 + 0.6 * labels / (c - 1) if sep else np.full(n, 0.5)
    images = np.clip(base[:, None, None, None]
                     + rng.normal(0, 0.05, (n, 1, 8, 8)), 0, 1).astype(np.float32)
    return Dataset(images, labels, c)


def test_param_count_is_pure_function_of_shape():
    m = Model(1, 4, seed=0)
    expected = (CONV1_CHANNELS * 1 * 9 + CONV1_CHANNELS
                + CONV2_CHANNELS * CONV1_CHANNELS * 9 + CONV2_CHANNELS
                + CONV2_CHANNELS * 4 + 4)
    assert m.num_params() == expected
    assert Model(1, 4, seed=9).num_params() == expected
    assert Model(3, 7, seed=0).num_params() == (
        CONV1_CHANNELS * 3 * 9 + CONV1_CHANNELS
        + CONV2_CHANNELS * CONV1_CHANNELS * 9 + CONV2_CHANNELS
        + CONV2_CHANNELS * 7 + 7)


def test_forward_shape_and_purity():
    m = Model(1, 4, seed=1)
    x = np.random.default_rng(0).uniform(0, 1, (5, 1, 16, 16))
    a = m.forward(x).data
    b = m.forward(x).data
    assert a.shape == (5, 4)
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_wrong_channels():
    m = Model(1, 4, seed=1)
    with pytest.raises(ValueError, match="batch shape"):
        m.forward(np.zeros((2, 3, 16, 16)))


def test_zero_dense_weights_give_zero_logits():
    m = Model(1, 4, seed=1)
    m.w3.data[:] = 0.0
    m.b3.data[:] = 0.0
    x = np.random.default_rng(0).uniform(0, 1, (3, 1, 16, 16))
    np.testing.assert_array_equal(m.forward(x).data, np.zeros((3, 4)))


def _forward_loops(model, x):
    """Fully independent forward recomputation with explicit loops (NCHW)."""
    n, _, h, w = x.shape

    def conv(inp, wt, bias):
        ni, ci, hi, wi = inp.shape
        co = wt.shape[0]
        out = np.zeros((ni, co, hi, wi))
        for s in range(ni):
            for o in range(co):
                for i in range(hi):
                    for j in range(wi):
                        acc = bias[o]
                        for c in range(ci):
                            for di in range(3):
                                for dj in range(3):
                                    ii, jj = i + di - 1, j + dj - 1
                                    if 0 <= ii < hi and 0 <= jj < wi:
                                        acc += wt[o, c, di, dj] * inp[s, c, ii, jj]
                        out[s, o, i, j] = acc
        return out

    a1 = np.maximum(conv(x, model.w1.data, model.b1.data), 0)
    n_, c_, h_, w_ = a1.shape
    p1 = np.zeros((n_, c_, h_ // 2, w_ // 2))
    for s in range(n_):
        for c in range(c_):
            for i in range(h_ // 2):
                for j in range(w_ // 2):
                    p1[s, c, i, j] = a1[s, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    a2 = np.maximum(conv(p1, model.w2.data, model.b2.data), 0)
    pooled = a2.mean(axis=(2, 3))
    return pooled @ model.w3.data + model.b3.data


def test_forward_matches_loop_oracle():
    m = Model(2, 3, seed=7)
    x = np.random.default_rng(1).normal(size=(2, 2, 8, 8))
    np.testing.assert_allclose(m.forward(x).data, _forward_loops(m, x),
                               rtol=1e-10, atol=1e-12)


def test_input_gradient_matches_finite_differences():
    m = Model(1, 4, seed=3)
    rng = np.random.default_rng(4)
    x = rng.uniform(0.1, 0.9, (1, 16, 16))
    y = 2
    g = input_gradient(m, x, y)
    assert g.shape == x.shape
    h = 1e-3
    for flat in rng.choice(x.size, size=25, replace=False):
        xp, xm = x.copy(), x.copy()
        xp.reshape(-1)[flat] += h
        xm.reshape(-1)[flat] -= h
        fd = (m.forward(xp[None]).data[0, y] - m.forward(xm[None]).data[0, y]) / (2 * h)
        assert abs(fd - g.reshape(-1)[flat]) <= 1e-4 * max(1.0, abs(fd))


def test_input_gradient_deterministic_and_nonmutating():
    m = Model(1, 4, seed=3)
    x = np.random.default_rng(5).uniform(0, 1, (1, 16, 16))
    before = m.param_checksum()
    g1 = input_gradient(m, x, 0)
    g2 = input_gradient(m, x, 0)
    np.testing.assert_array_equal(g1, g2)
    assert m.param_checksum() == before


def test_input_gradient_rejects_bad_class():
    m = Model(1, 4, seed=3)
    with pytest.raises(ValueError, match="out of range"):
        input_gradient(m, np.zeros((1, 16, 16)), 4)


def test_gradient_check_full_net():
    m = Model(1, 3, seed=11)
    x = np.random.default_rng(6).uniform(0, 1, (1, 1, 16, 16))
    report = gradient_check(m, x, tol=1e-4, max_coords=250, seed=0)
    assert report.passed, f"max rel err {report.max_rel_error}"
    assert report.n_checked > 0


def test_gradient_check_linear_regime_is_exact():
    # large positive conv biases keep every ReLU active and the logit
    # locally affine, so central differences are exact up to rounding
    m = Model(1, 3, seed=2)
    m.b1.data[:] = 10.0
    m.b2.data[:] = 10.0
    x = np.random.default_rng(8).uniform(0.2, 0.8, (1, 1, 8, 8))
    report = gradient_check(m, x, tol=1e-8, max_coords=120, seed=3)
    assert report.passed, f"max rel err {report.max_rel_error}"


def test_gradient_check_flags_kink_coordinates_as_excluded():
    # a coarse step straddles ReLU/pool kinks for some coordinates; those
    # are excluded rather than failed
    m = Model(1, 3, seed=4)
    x = np.random.default_rng(9).uniform(0, 1, (1, 1, 16, 16))
    report = gradient_check(m, x, tol=1e-4, h=5e-2, max_coords=200, seed=5)
    assert report.n_excluded > 0
    assert report.passed


def test_gradient_check_rejects_bad_tol():
    with pytest.raises(ValueError, match="tol"):
        gradient_check(Model(1, 3, seed=0), np.zeros((1, 1, 16, 16)), tol=0.0)


def test_train_reaches_high_accuracy_on_separable_data():
    ds = _toy_dataset(n=128, seed=0)
    trained = train(Model(1, 2, 0), ds, TrainConfig(epochs=8, batch_size=32,
                                                    learning_rate=0.1, seed=1))
    assert evaluate(trained, ds) >= 0.99


def test_train_is_bitwise_reproducible():
    ds = _toy_dataset(n=96, seed=2)
    cfg = TrainConfig(epochs=3, batch_size=32, seed=17)
    a = train(Model(1, 2, 0), ds, cfg)
    b = train(Model(1, 2, 0), ds, cfg)
    for pa, pb in zip(a.params, b.params):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert a.param_checksum() == b.param_checksum()


def test_train_rejects_zero_epochs():
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)


def test_train_rejects_empty_dataset():
    ds = Dataset(np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64), 2)
    with pytest.raises(ValueError, match="empty"):
        train(Model(1, 2, 0), ds, TrainConfig(epochs=1, seed=0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reports_epoch():
    ds = _toy_dataset(n=64, seed=3)
    with pytest.raises(TrainingDivergedError) as err:
        train(Model(1, 2, 0), ds, TrainConfig(epochs=4, learning_rate=1e150, seed=0))
    assert err.value.epoch >= 0


def test_cosine_schedule_runs():
    ds = _toy_dataset(n=64, seed=4)
    trained = train(Model(1, 2, 0), ds,
                    TrainConfig(epochs=3, lr_schedule="cosine", seed=5))
    assert evaluate(trained, ds) > 0.4


def test_evaluate_constant_logits_tie_break():
    # constant logits -> argmax picks class 0 -> accuracy = fraction labeled 0
    m = Model(1, 4, seed=0)
    m.w3.data[:] = 0.0
    m.b3.data[:] = 0.0
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(4), 25)
    images = rng.uniform(0, 1, (100, 1, 16, 16)).astype(np.float32)
    ds = Dataset(images, labels, 4)
    assert evaluate(m, ds) == 0.25


def test_evaluate_hand_built_logits():
    # dense layer rigged so logits = (mean intensity) * [1, -1] + [0, 0.3]:
    # samples with mean > 0.3 go to class 0, below to class 1
    m = Model(1, 2, seed=0)
    m.w1.data[:] = 0.0
    m.b1.data[:] = 1.0  # conv1 outputs 1 everywhere -> pooled path constant
    m.w2.data[:] = 0.0
    m.b2.data[:] = 1.0
    m.w3.data[:] = 0.0
    m.b3.data[:] = np.array([0.0, 0.3])
    images = np.stack([np.full((1, 8, 8), v, np.float32) for v in (0.1, 0.5, 0.9)])
    # every feature is the constant 1, so logits are [0, 0.3]: always class 1
    ds = Dataset(images, np.array([1, 1, 0]), 2)
    assert evaluate(m, ds) == pytest.approx(2 / 3)


def test_perfect_memorizer_scores_one():
    ds = _toy_dataset(n=128, seed=8)
    trained = train(Model(1, 2, 0), ds, TrainConfig(epochs=10, batch_size=32,
                                                    learning_rate=0.1, seed=2))
    assert evaluate(trained, ds) == pytest.approx(1.0, abs=0.01)
