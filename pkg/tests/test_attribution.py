"""Estimator tests: exact linear-model identities, loop/re-implementation
oracles for the ensemble family, hand-built feature-map attribution, and
the model-independence of the baselines."""

import numpy as np
import pytest
import scipy.ndimage as ndi

from roarlab import autodiff as ad
from roarlab.attribution import (
    AttributionMap,
    EstimatorConfig,
    batch_gradcam,
    batch_raw_maps,
    batch_sobel,
    block_random,
    grad,
    grad_times_input,
    gradcam,
    integrated_gradients,
    pixel_random,
    resolve_token,
    smoothgrad,
    sobel,
    square,
    vargrad,
)
from roarlab.autodiff import Tensor
from roarlab.datasets import SynthSpec, generate
from roarlab.masking import top_t_mask
from roarlab.network import Model, TrainConfig, input_gradient, train
from roarlab.seeding import derive_seed, rng_for


class LinearModel:
    """Duck-typed classifier: logits = W @ flatten(x). Gradients are exact
    rows of W, which pins down every gradient-family identity."""

    def __init__(self, weights: np.ndarray, shape: tuple[int, int, int]):
        self.w = Tensor(np.asarray(weights, dtype=np.float64).T, requires_grad=True)
        self.b = Tensor(np.zeros(weights.shape[0]), requires_grad=True)
        self.input_shape = shape
        self.in_channels = shape[0]
        self.num_classes = weights.shape[0]

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        n = x.data.shape[0]
        flat = Tensor(x.data.reshape(n, -1))
        flat.requires_grad = x.requires_grad
        if x.requires_grad:
            flat._parents = (x,)

            def backward_fn(g):
                ad._accumulate(x, g.reshape(x.data.shape))

            flat._backward_fn = backward_fn
        return ad.dense(flat, self.w, self.b)

    def zero_grads(self):
        self.w.grad = None
        self.b.grad = None


@pytest.fixture(scope="module")
def linear_model():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 2 * 4 * 4))
    return LinearModel(w, (2, 4, 4)), w


def test_grad_linear_model_is_weight_row(linear_model):
    model, w = linear_model
    x = np.random.default_rng(1).uniform(0, 1, (2, 4, 4))
    for y in range(3):
        a = grad(model, x, y)
        np.testing.assert_array_equal(a.values, w[y].reshape(2, 4, 4))


def test_grad_repeated_call_identical(linear_model):
    model, _ = linear_model
    x = np.random.default_rng(2).uniform(0, 1, (2, 4, 4))
    np.testing.assert_array_equal(grad(model, x, 1).values, grad(model, x, 1).values)


def test_grad_times_input_identities(linear_model):
    model, w = linear_model
    x = np.random.default_rng(3).uniform(0, 1, (2, 4, 4))
    gi = grad_times_input(model, x, 2)
    np.testing.assert_allclose(gi.values, x * w[2].reshape(2, 4, 4), rtol=1e-15)
    np.testing.assert_array_equal(grad_times_input(model, np.zeros((2, 4, 4)), 0).values,
                                  np.zeros((2, 4, 4)))
    # compositional oracle
    np.testing.assert_array_equal(gi.values, grad(model, x, 2).values * x)


def test_ig_linear_model_exact_any_steps(linear_model):
    model, w = linear_model
    x = np.random.default_rng(4).uniform(0, 1, (2, 4, 4))
    expected = x * w[1].reshape(2, 4, 4)
    for k in (1, 25):
        a = integrated_gradients(model, x, 1, EstimatorConfig(ig_steps=k))
        np.testing.assert_allclose(a.values, expected, rtol=1e-12, atol=1e-15)


def test_ig_zero_input_gives_zero_map(linear_model):
    model, _ = linear_model
    a = integrated_gradients(model, np.zeros((2, 4, 4)), 0, EstimatorConfig(ig_steps=5))
    np.testing.assert_array_equal(a.values, np.zeros((2, 4, 4)))


def test_ig_completeness_small_net():
    model = Model(1, 3, seed=5)
    rng = np.random.default_rng(6)
    cfg = EstimatorConfig(ig_steps=300)
    for _ in range(3):
        x = rng.uniform(0, 1, (1, 16, 16))
        y = 1
        a = integrated_gradients(model, x, y, cfg)
        fx = float(model.forward(x[None]).data[0, y])
        f0 = float(model.forward(np.zeros((1, 1, 16, 16))).data[0, y])
        gap = fx - f0
        assert abs(a.values.sum() - gap) <= 1e-3 * abs(gap) + 1e-6


def test_smoothgrad_zero_noise_equals_grad(linear_model):
    model, w = linear_model
    x = np.random.default_rng(7).uniform(0, 1, (2, 4, 4))
    cfg = EstimatorConfig(sg_noise_frac=0.0, ensemble_n=5)
    sg = smoothgrad(model, x, 0, cfg)
    np.testing.assert_array_equal(sg.values, grad(model, x, 0).values)
    vg = vargrad(model, x, 0, cfg)
    np.testing.assert_array_equal(vg.values, np.zeros((2, 4, 4)))


def test_smoothgrad_linear_model_any_noise(linear_model):
    # constant gradient: the smoothed mean is the weight row, variance ~ 0
    model, w = linear_model
    x = np.random.default_rng(8).uniform(0, 1, (2, 4, 4))
    cfg = EstimatorConfig(sg_noise_frac=0.3, ensemble_n=8, seed=3)
    sg = smoothgrad(model, x, 1, cfg)
    np.testing.assert_allclose(sg.values, w[1].reshape(2, 4, 4), rtol=1e-12)
    # variance of identical gradients: zero up to moment-form cancellation
    vg = vargrad(model, x, 1, cfg)
    np.testing.assert_allclose(vg.values, np.zeros((2, 4, 4)), atol=1e-12)


def test_smoothgrad_matches_loop_oracle():
    model = Model(1, 3, seed=9)
    x = np.random.default_rng(10).uniform(0, 1, (1, 8, 8))
    cfg = EstimatorConfig(sg_noise_frac=0.15, ensemble_n=6, seed=21)
    sample_id = 4
    got = smoothgrad(model, x, 2, cfg, sample_id=sample_id)

    sigma = cfg.sg_noise_frac * (x.max() - x.min())
    rng = rng_for(cfg.seed, "sg_noise", sample_id)
    acc = np.zeros_like(x)
    for _ in range(cfg.ensemble_n):
        noisy = x + sigma * rng.standard_normal(x.shape)
        acc += input_gradient(model, noisy, 2)
    np.testing.assert_allclose(got.values, acc / cfg.ensemble_n, rtol=1e-12, atol=1e-15)


def test_vargrad_needs_two_samples():
    model = Model(1, 3, seed=9)
    with pytest.raises(ValueError, match="ensemble_n"):
        vargrad(model, np.zeros((1, 8, 8)), 0, EstimatorConfig(ensemble_n=1))


class FeatureStub:
    """Exposes fixed 1-channel 2x2 feature maps (NHWC) whose pooled values
    feed a known linear head, so the class-activation map is hand-computable."""

    def __init__(self, head: np.ndarray):
        self.head = head  # (1, num_classes)
        self.num_classes = head.shape[1]
        self.in_channels = 1

    def forward_with_features(self, x):
        x = Tensor(np.asarray(x, dtype=np.float64)) if not isinstance(x, Tensor) else x
        n, _, h, w = x.data.shape
        feats = Tensor(x.data.transpose(0, 2, 3, 1)[:, :h // 2, :w // 2, :])
        feats.requires_grad = True
        pooled = ad.global_avg_pool(feats)
        return ad.dense(pooled, Tensor(self.head), Tensor(np.zeros(self.num_classes))), feats

    def forward(self, x):
        return self.forward_with_features(x)[0]

    def zero_grads(self):
        pass


def test_gradcam_hand_case():
    # features A = [[1, -2], [3, 0]]; head weight for class 0 is 2
    # d logit0 / dA = 2 / 4 everywhere -> channel weight w = 0.5
    # cam = relu(w * A) = [[0.5, 0], [1.5, 0]]
    head = np.array([[2.0, -1.0]]).T.reshape(1, 2)
    stub = FeatureStub(head)
    x = np.zeros((1, 4, 4))
    x[0, :2, :2] = np.array([[1.0, -2.0], [3.0, 0.0]])
    cam = batch_gradcam(stub, x[None], np.array([0]))[0]
    np.testing.assert_allclose(cam, np.array([[0.5, 0.0], [1.5, 0.0]]))


def test_gradcam_negative_weight_gives_zero_map():
    head = np.array([[2.0, -1.0]]).T.reshape(1, 2)
    stub = FeatureStub(head)
    x = np.zeros((1, 4, 4))
    x[0, :2, :2] = np.array([[1.0, 2.0], [3.0, 4.0]])  # positive feats
    cam = batch_gradcam(stub, x[None], np.array([1]))[0]  # class 1: weight -1/4
    np.testing.assert_array_equal(cam, np.zeros((2, 2)))


def test_gradcam_zero_features_zero_map():
    model = Model(1, 4, seed=0)
    model.w1.data[:] = 0.0  # conv1 output 0 -> relu 0 -> conv2 sees 0
    model.b1.data[:] = 0.0
    model.w2.data[:] = 0.0
    model.b2.data[:] = 0.0
    cam = gradcam(model, np.random.default_rng(0).uniform(0, 1, (1, 16, 16)), 0)
    np.testing.assert_array_equal(cam.values, np.zeros((8, 8)))


def test_gradcam_native_resolution():
    model = Model(1, 4, seed=1)
    cam = gradcam(model, np.random.default_rng(1).uniform(0, 1, (1, 16, 16)), 2)
    assert cam.values.shape == (8, 8)
    assert (cam.values >= 0).all()


def test_sobel_constant_image_zero():
    a = sobel(np.full((1, 8, 8), 0.7))
    np.testing.assert_allclose(a.values, np.zeros((8, 8)), atol=1e-25)


def test_sobel_vertical_edge_hand_case():
    # step edge between columns 3 and 4: gx response 16 on the two columns
    # adjacent to the edge (kernel rows sum 1+2+1 squared), gy = 0
    img = np.zeros((1, 8, 8))
    img[0, :, 4:] = 1.0
    a = sobel(img)
    expected_cols = np.zeros(8)
    expected_cols[3] = expected_cols[4] = 16.0
    for i in range(8):
        np.testing.assert_allclose(a.values[i], expected_cols)


def test_sobel_matches_scipy():
    img = np.random.default_rng(11).uniform(0, 1, (1, 16, 16))
    ours = sobel(img).values
    gx = ndi.sobel(img[0], axis=1, mode="reflect")
    gy = ndi.sobel(img[0], axis=0, mode="reflect")
    np.testing.assert_allclose(ours, gx * gx + gy * gy, rtol=1e-10, atol=1e-12)


def test_model_free_methods_ignore_model():
    spec = SynthSpec(kind="shapes", n_train=40, n_test=10, seed=0)
    train_ds, _, _ = generate(spec)
    cfg_a = TrainConfig(epochs=1, seed=1)
    cfg_b = TrainConfig(epochs=1, seed=2)
    m_a = train(Model(1, 4, 0), train_ds, cfg_a)
    m_b = train(Model(1, 4, 0), train_ds, cfg_b)
    assert m_a.param_checksum() != m_b.param_checksum()
    images = train_ds.images[:6].astype(np.float64)
    labels = np.zeros(6, dtype=np.int64)
    est = EstimatorConfig(seed=5)
    for token in ("sobel2", "pixel_random", "block_random"):
        map_a = batch_raw_maps(m_a, images, labels, token, est, sample_ids=range(6))
        map_b = batch_raw_maps(m_b, images, labels, token, est, sample_ids=range(6))
        np.testing.assert_array_equal(map_a, map_b)


def test_pixel_random_exact_count():
    a = pixel_random((16, 16), seed=3, sample_id=7)
    m = top_t_mask(a.values, 0.5)
    assert m.popcount() == 128


def test_pixel_random_deterministic_per_sample():
    a1 = pixel_random((8, 8), seed=3, sample_id=7)
    a2 = pixel_random((8, 8), seed=3, sample_id=7)
    a3 = pixel_random((8, 8), seed=3, sample_id=8)
    np.testing.assert_array_equal(a1.values, a2.values)
    assert not np.array_equal(a1.values, a3.values)


def _flood_fill_components(bits: np.ndarray) -> int:
    """Count 4-connected components (independent flood-fill oracle)."""
    seen = np.zeros_like(bits, dtype=bool)
    h, w = bits.shape
    components = 0
    for si in range(h):
        for sj in range(w):
            if bits[si, sj] and not seen[si, sj]:
                components += 1
                stack = [(si, sj)]
                seen[si, sj] = True
                while stack:
                    i, j = stack.pop()
                    for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                        if 0 <= ni < h and 0 <= nj < w and bits[ni, nj] and not seen[ni, nj]:
                            seen[ni, nj] = True
                            stack.append((ni, nj))
    return components


def test_block_random_masks_are_single_rectangles_at_configured_rates():
    from roarlab.masking import drop_count

    rates = (0.1, 0.3, 0.5)
    for sid in range(8):
        a = block_random((16, 16), seed=9, sample_id=sid, drop_rates=rates)
        for t in rates:
            bits = top_t_mask(a.values, t).bits
            assert _flood_fill_components(bits) == 1
            target = drop_count(t, 256)
            achieved = a.meta["rect_areas"][target]
            rows = np.flatnonzero(bits.any(axis=1))
            cols = np.flatnonzero(bits.any(axis=0))
            bbox_area = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
            if achieved == target:
                # exact rectangle: bounding box area equals popcount
                assert bbox_area == bits.sum()
            else:
                # nearest-area fallback: rectangle plus a connected ring remnant
                assert a.meta.get("area_fallback") is True
                assert abs(achieved - target) <= max(4, target // 5)


def test_block_random_exact_rectangles_when_area_factors():
    # 77 = 7x11 and 128 = 8x16 fit 16x16 within aspect bounds
    a = block_random((16, 16), seed=9, sample_id=1, drop_rates=(0.3, 0.5))
    for t, dims in ((0.3, 77), (0.5, 128)):
        bits = top_t_mask(a.values, t).bits
        rows = np.flatnonzero(bits.any(axis=1))
        cols = np.flatnonzero(bits.any(axis=0))
        assert (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1) == bits.sum() == dims


def test_block_random_connected_at_any_rate():
    a = block_random((16, 16), seed=2, sample_id=0, drop_rates=(0.1, 0.3, 0.5))
    for t in (0.05, 0.17, 0.42, 0.66, 0.99):
        bits = top_t_mask(a.values, t).bits
        assert _flood_fill_components(bits) == 1


def test_block_random_area_fallback_metadata():
    # 16x16 at t=0.99 targets 253 pixels, which has no feasible rectangle
    a = block_random((16, 16), seed=2, sample_id=0, drop_rates=(0.99,))
    assert a.meta.get("area_fallback") is True


def test_square_basics():
    a = AttributionMap(np.array([[1.0, -1.0], [-1.0, 1.0]]), method="grad")
    sq = square(a)
    np.testing.assert_array_equal(sq.values, np.ones((2, 2)))
    assert sq.squared
    with pytest.raises(ValueError, match="already squared"):
        square(sq)
    vg = AttributionMap(np.ones((2, 2)), method="vargrad", squared=True)
    with pytest.raises(ValueError, match="variance"):
        square(vg)


def test_square_matches_elementwise_multiply():
    rng = np.random.default_rng(12)
    values = rng.normal(size=(5, 5))
    sq = square(AttributionMap(values, method="grad"))
    np.testing.assert_array_equal(sq.values, values * values)
    assert (sq.values >= 0).all()


def test_grad_concentrates_on_ground_truth():
    spec = SynthSpec(kind="shapes", n_train=400, n_test=40, seed=13, noise_std=0.05)
    train_ds, test_ds, masks = generate(spec)
    trained = train(Model(1, 4, 0), train_ds,
                    TrainConfig(epochs=6, batch_size=32, learning_rate=0.15,
                                lr_schedule="cosine", seed=3))
    test_masks = masks[len(train_ds):]
    in_ratio = []
    for i in range(20):
        g = np.abs(grad(trained, test_ds.images[i].astype(np.float64),
                        int(test_ds.labels[i])).values[0])
        bits = test_masks[i].bits
        in_ratio.append(g[bits].mean() / max(g[~bits].mean(), 1e-12))
    assert np.mean(in_ratio) > 1.0


def test_unknown_token_rejected():
    with pytest.raises(ValueError, match="unknown attribution method"):
        resolve_token("deeplift")


def test_alias_rand():
    assert resolve_token("rand").token == "pixel_random"
