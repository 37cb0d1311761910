import numpy as np
import pytest

from s2fp8 import engine as E
from s2fp8 import tensor as T
from s2fp8.codec import s2fp8_truncate
from s2fp8.data import blobs
from s2fp8.formats import FP8, truncate_tensor

FP32 = E.QuantConfig(E.Mode.FP32)
FP8Q = E.QuantConfig(E.Mode.FP8_RNE)
S2 = E.QuantConfig(E.Mode.S2FP8)


def small_data(n=256, seed=0):
    rng = np.random.default_rng(seed)
    x, y, _ = blobs(n, 8, 3, rng, separation=6.0)
    return x, y


def test_quant_config_validation():
    assert E.QuantConfig("s2fp8").mode is E.Mode.S2FP8
    for bad in (0.0, -1.0, float("inf")):
        with pytest.raises(ValueError):
            E.QuantConfig(E.Mode.FP8_LOSS_SCALED, loss_scale=bad)
    with pytest.raises(ValueError):
        E.QuantConfig("int8")


def test_quantize_boundary_examples():
    x = np.array([1.0625], np.float32)
    assert E.quantize_boundary(x, FP8Q).tolist() == [1.0]
    assert E.quantize_boundary(x, FP32) is x
    assert E.quantize_boundary(np.array([1.0, 4.0], np.float32), S2).tolist() == [1.0, 4.0]


def test_forward_fp32_matches_reference():
    rng = np.random.default_rng(0)
    model = E.build_mlp([8, 16, 3], rng)
    for layer in model.gemm_layers():
        layer.bias[:] = rng.standard_normal(layer.bias.shape)
    x = rng.standard_normal((5, 8)).astype(np.float32)
    d0, d1 = model.layers[0], model.layers[2]
    h = T.relu(T.matmul(x, d0.weight) + d0.bias)
    want = T.matmul(h, d1.weight) + d1.bias
    got, _ = E.forward(model, x, FP32)
    assert np.array_equal(got, want)


def test_dense_fp8_single_layer():
    rng = np.random.default_rng(1)
    model = E.build_mlp([4, 2], rng, bias=False)
    w = truncate_tensor(model.layers[0].weight, FP8)
    model.layers[0].weight[:] = w
    x = truncate_tensor(rng.standard_normal((3, 4)).astype(np.float32), FP8)
    got, _ = E.forward(model, x, FP8Q)
    exact = x.astype(np.float64) @ w.astype(np.float64)
    assert np.array_equal(got, truncate_tensor(exact.astype(np.float32), FP8))


def test_s2fp8_keeps_underflowing_layer_alive():
    rng = np.random.default_rng(2)
    model = E.build_mlp([16, 4], rng, bias=False)
    x = (rng.choice([-1, 1], (8, 16)) * np.exp2(rng.uniform(-30, -20, (8, 16)))).astype(np.float32)
    out_fp8, _ = E.forward(model, x, FP8Q)
    out_s2, _ = E.forward(model, x, S2)
    assert not out_fp8.any()
    # a few small sums may still flush through the squeeze itself
    assert np.count_nonzero(out_s2) >= 0.75 * out_s2.size


def test_gradcheck_mlp_and_cnn():
    rng = np.random.default_rng(3)
    mlp = E.build_mlp([5, 7, 3], rng, dtype=np.float64)
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 3, 6)
    assert E.model_gradcheck(mlp, x, y) < 1e-4
    cnn = E.build_cnn((5, 5, 2), 2, 3, [4], 3, rng, stride=2, pad=1, dtype=np.float64)
    assert cnn.n_parameters() <= 1000
    x = rng.standard_normal((4, 5, 5, 2))
    assert E.model_gradcheck(cnn, x, rng.integers(0, 3, 4)) < 1e-4


def test_gradcheck_catches_corrupt_backward():
    rng = np.random.default_rng(4)
    mlp = E.build_mlp([5, 7, 3], rng, dtype=np.float64)
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 3, 6)

    def corrupt(model, caches, g, q):
        grads = E.backward(model, caches, g, q)
        grads["dense0.weight"] = grads["dense0.weight"] * 1.01
        return grads

    assert E.model_gradcheck(mlp, x, y, backward_fn=corrupt) > 1e-4


def test_one_parameter_analytic():
    w = np.array([0.7])
    x, t = 1.3, 2.0

    def loss():
        return 0.5 * (w[0] * x - t) ** 2

    grad = {"w": np.array([(w[0] * x - t) * x])}
    assert E.check_gradients(loss, {"w": w}, grad) < 1e-6


def test_linear_model_gradient_is_input_gemm():
    rng = np.random.default_rng(5)
    model = E.build_mlp([4, 3], rng, bias=False)
    x = rng.standard_normal((6, 4)).astype(np.float32)
    logits, caches = E.forward(model, x, FP32)
    g = rng.standard_normal(logits.shape).astype(np.float32)
    grads = E.backward(model, caches, g, FP32)
    assert np.array_equal(grads["dense0.weight"], T.matmul(np.ascontiguousarray(x.T), g))


def test_backward_cache_mismatch():
    rng = np.random.default_rng(6)
    model = E.build_mlp([4, 3, 2], rng)
    with pytest.raises(ValueError):
        E.backward(model, [], np.zeros((1, 2), np.float32), FP32)


def train_run(q, seed=0, steps_epochs=2, opt=None, **kw):
    x, y = small_data()
    model = E.build_mlp([8, 16, 3], np.random.default_rng(seed))
    opt = opt or E.make_optimizer({"kind": "sgd_momentum", "lr": 0.05})
    res = E.train(model, x, y, opt, q, steps_epochs, 32, seed=seed, **kw)
    return model, res


def test_loss_scale_one_reduces_to_fp8():
    m1, r1 = train_run(FP8Q)
    m2, r2 = train_run(E.QuantConfig(E.Mode.FP8_LOSS_SCALED, loss_scale=1.0))
    for a, b in zip(m1.parameters().values(), m2.parameters().values()):
        assert np.array_equal(a, b)
    assert [m.loss for m in r1.metrics] == [m.loss for m in r2.metrics]


def test_loss_scale_identity_fp32():
    m1, _ = train_run(FP32, steps_epochs=3)
    m2, _ = train_run(E.QuantConfig(E.Mode.FP32, loss_scale=100.0), steps_epochs=3)
    for a, b in zip(m1.parameters().values(), m2.parameters().values()):
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(a)


def test_loss_scale_helps_fp8_with_tiny_gradients():
    opt = lambda: E.make_optimizer({"kind": "sgd_momentum", "lr": 0.05})  # noqa: E731
    _, plain = train_run(FP8Q, opt=opt(), loss_multiplier=2.0**-12)
    m, scaled = train_run(E.QuantConfig(E.Mode.FP8_LOSS_SCALED, loss_scale=2.0**12), opt=opt(),
                          loss_multiplier=2.0**-12)
    # the plain FP8 run sees every weight gradient flushed to zero
    assert all(s.stats["dense0.weight"] == plain.metrics[0].stats["dense0.weight"] for s in plain.metrics)
    assert scaled.metrics[-1].stats["dense0.weight"] != scaled.metrics[0].stats["dense0.weight"]


def test_apply_update_examples():
    w = np.array([1.0], np.float32)
    opt = E.make_optimizer({"kind": "sgd_momentum", "lr": 0.1, "momentum": 0.0})
    E.apply_update({"w": w}, {"w": np.array([1.0], np.float32)}, opt, FP32)
    assert w[0] == np.float32(1.0) - np.float32(0.1)

    w = np.array([2.0, -3.0], np.float32)
    opt = E.make_optimizer({"kind": "sgd_momentum", "lr": 0.1, "momentum": 0.9})
    E.apply_update({"w": w}, {"w": np.array([1.0, 1.0], np.float32)}, opt, FP32)
    before = w.copy()
    v = opt.velocity["w"].copy()
    E.apply_update({"w": w}, {"w": np.zeros(2, np.float32)}, opt, FP32)
    assert np.array_equal(opt.velocity["w"], v * np.float32(0.9))
    assert np.array_equal(w, before - np.float32(0.1) * opt.velocity["w"])
    E.apply_update({"w": w}, {"w": np.zeros(2, np.float32)}, E.make_optimizer({"kind": "adam"}), FP32)
    with pytest.raises(ValueError):
        E.apply_update({"w": w}, {"w": np.zeros(3, np.float32)}, opt, FP32)


def test_adam_first_step():
    w = np.array([1.0, -1.0], np.float32)
    opt = E.make_optimizer({"kind": "adam", "lr": 0.01})
    E.apply_update({"w": w}, {"w": np.array([0.5, -2.0], np.float32)}, opt, FP32)
    # bias-corrected first Adam step moves each weight by ~lr against the gradient sign
    assert w.tolist() == pytest.approx([0.99, -0.99], abs=1e-6)
    assert opt.m["w"].dtype == np.float32 and opt.v["w"].shape == w.shape


def test_lr_schedule_and_bad_optimizer():
    s = E.LRSchedule(0.1, (2, 4), 0.5)
    assert [s(e) for e in range(6)] == [0.1, 0.1, 0.05, 0.05, 0.025, 0.025]
    with pytest.raises(ValueError):
        E.make_optimizer({"kind": "rmsprop"})


@pytest.mark.parametrize("q", [FP8Q, S2, E.QuantConfig(E.Mode.FP8_LOSS_SCALED, loss_scale=64.0)])
def test_master_weight_purity(q):
    x, y = small_data()
    model = E.build_mlp([8, 16, 3], np.random.default_rng(0))
    params = model.parameters()
    opt = E.make_optimizer({"kind": "sgd_momentum", "lr": 0.05, "momentum": 0.0})
    for step in range(10):
        xb, yb = x[step * 16 : step * 16 + 16], y[step * 16 : step * 16 + 16]
        before = {k: v.copy() for k, v in params.items()}
        logits, caches = E.forward(model, xb, q)
        assert all(np.array_equal(before[k], v) for k, v in params.items())
        _, g = T.softmax_cross_entropy(logits, yb)
        grads = E.backward(model, caches, g, q)
        E.apply_update(params, grads, opt, q)
        for k, w in params.items():
            gk = grads[k] / np.float32(q.loss_scale) if q.loss_scale != 1 else grads[k]
            assert np.array_equal(w, before[k] - np.float32(0.05) * gk)
    # master weights are not confined to the FP8 grid
    w = params["dense0.weight"]
    assert not np.array_equal(w, truncate_tensor(w, FP8))
    assert not np.array_equal(w, s2fp8_truncate(w))


def test_determinism():
    _, r1 = train_run(S2)
    _, r2 = train_run(S2)
    assert r1.metrics == r2.metrics
    assert len({m.step for m in r1.metrics}) == len(r1.metrics)


def test_batch_order_shared_across_modes():
    _, a = train_run(FP32)
    _, b = train_run(S2)
    assert [m.batch_hash for m in a.metrics] == [m.batch_hash for m in b.metrics]


def test_quantization_locality():
    x, y = small_data(64)
    model = E.build_mlp([8, 16, 16, 3], np.random.default_rng(0))
    for layer in model.gemm_layers():
        layer.bias[:] = 0.01
    seen = {}

    def trace(site, t):
        seen.setdefault(site, []).append(t.copy())

    logits, caches = E.forward(model, x, FP8Q, trace)
    _, g = T.softmax_cross_entropy(logits, y)
    E.backward(model, caches, g, FP8Q, trace)
    for site, ts in seen.items():
        for t in ts:
            on_grid = np.array_equal(t, truncate_tensor(t, FP8))
            if site.endswith(".q"):
                assert on_grid, site
    # relu sees the truncated GEMM output plus the binary32 bias, untouched
    relu_in = seen["dense0.gemm.q"][0] + model.layers[0].bias
    assert np.array_equal(seen["relu0.out"][0], T.relu(relu_in))
    assert not np.array_equal(seen["relu0.out"][0], truncate_tensor(seen["relu0.out"][0], FP8))
    # instrumenting does not perturb the computation
    plain, _ = E.forward(model, x, FP8Q)
    assert np.array_equal(plain, logits)


def test_divergence_is_reported():
    x, y = small_data(64)
    model = E.build_mlp([8, 16, 3], np.random.default_rng(0))
    opt = E.make_optimizer({"kind": "sgd_momentum", "lr": 1e36})
    res = E.train(model, x, y, opt, FP32, 3, 16)
    assert res.status == "diverged" and res.error


def test_tracking_defaults_and_errors():
    model = E.build_cnn((6, 6, 1), 2, 3, [8, 8], 3, np.random.default_rng(0))
    names = E.default_tracked(model)
    assert names[:2] == ["conv0.weight", "conv0.weight.grad"] and len(names) == 8
    x, y = small_data(32)
    with pytest.raises(ValueError):
        E.train(E.build_mlp([8, 3], np.random.default_rng(0)), x, y, E.make_optimizer({}), FP32, 1, track=["nope"])


def test_cnn_trains_in_s2fp8():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 6, 6, 1)).astype(np.float32)
    y = (x[:, :3].sum(axis=(1, 2, 3)) > x[:, 3:].sum(axis=(1, 2, 3))).astype(np.int64)
    model = E.build_cnn((6, 6, 1), 3, 3, [8], 2, rng, pad=1)
    res = E.train(model, x, y, E.make_optimizer({"lr": 0.02}), S2, 2, 16)
    assert res.status == "ok" and len(res.metrics) == 8
    assert all(s.alpha > 0 for m in res.metrics for s in m.stats.values())
