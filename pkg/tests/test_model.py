import numpy as np
import numpy.testing as npt
import pytest

from bellcnn import (
    AdamHyper,
    AdamState,
    BellConfig,
    Mode,
    Tensor,
    adam_step,
    backward,
    build_bellcnn,
    conv_out_dims,
    forward,
    one_hot,
    predict,
    softmax_cross_entropy,
)
from bellcnn.model import loss_and_gradients
from bellcnn.errors import (
    BadConfigError,
    BadInputSizeError,
    FrozenGraphImmutableError,
    ShapeMismatchError,
    StaleCacheError,
)

from helpers import max_rel_err, param_count_reference


def rand_image(rng, size=64, depth=1):
    return Tensor(rng.random((size, size, depth)))


class TestBuild:
    def test_spatial_trace_and_flatten_width(self):
        g = build_bellcnn(BellConfig(seed=1))
        pool_outs = [rec.out_shape for rec in g.layers if rec.kind == "pool"]
        assert [s[0] for s in pool_outs] == [32, 16, 8, 4, 2]
        flat = next(rec for rec in g.layers if rec.kind == "flatten")
        assert flat.out_shape == (128,)

    def test_parameter_count_against_closed_form(self):
        g = build_bellcnn(BellConfig(seed=1))
        total, per_layer = param_count_reference(64, 64, 1, 5,
                                                 (32, 64, 128, 64, 32), 1024, 2)
        assert per_layer == [832, 51264, 204928, 204864, 51232, 132096, 2050]
        assert total == 647266
        assert g.param_count() == total
        # per-layer audit
        audited = []
        for rec in g.layers:
            if rec.kind in ("conv", "dense"):
                audited.append(rec.layer.weights.size + rec.layer.bias.size)
        assert audited == per_layer

    def test_param_count_property_random_configs(self, rng):
        for _ in range(10):
            stages = int(rng.integers(1, 4))
            filters = tuple(int(f) for f in rng.integers(1, 9, size=stages))
            mult = 2 ** stages
            size = mult * int(rng.integers(1, 4))
            kernel = int(rng.choice([1, 3, 5]))
            fc = int(rng.integers(1, 40))
            cfg = BellConfig(input_w=size, input_h=size, kernel_extent=kernel,
                             conv_filters=filters, fc_units=fc, seed=3)
            g = build_bellcnn(cfg)
            total, _ = param_count_reference(size, size, 1, kernel, filters, fc, 2)
            assert g.param_count() == total

    def test_bad_input_size(self):
        with pytest.raises(BadInputSizeError):
            build_bellcnn(BellConfig(input_w=48, input_h=48))

    def test_bad_config(self):
        with pytest.raises(BadConfigError):
            build_bellcnn(BellConfig(kernel_extent=4))  # even kernel
        with pytest.raises(BadConfigError):
            build_bellcnn(BellConfig(keep_prob=0.0))
        with pytest.raises(BadConfigError):
            build_bellcnn(BellConfig(fc_activation="tanh"))
        with pytest.raises(BadConfigError):
            build_bellcnn(BellConfig(num_classes=1))

    def test_shape_composition_matches_conv_out_dims(self):
        g = build_bellcnn(BellConfig(seed=2))
        for rec in g.layers:
            if rec.kind == "conv":
                h, w, _ = rec.in_shape
                out_w, out_h = conv_out_dims(w, h, rec.layer.geom)
                assert rec.out_shape == (out_h, out_w, rec.layer.geom.k)
        for prev, nxt in zip(g.layers, g.layers[1:]):
            assert prev.out_shape == nxt.in_shape

    def test_seed_determinism(self):
        g1 = build_bellcnn(BellConfig(seed=5))
        g2 = build_bellcnn(BellConfig(seed=5))
        for (_, _, t1), (_, _, t2) in zip(g1.parameters(), g2.parameters()):
            npt.assert_array_equal(t1.array, t2.array)


class TestForward:
    def test_infer_mode_deterministic(self, rng):
        g = build_bellcnn(BellConfig(seed=3))
        g.mode = Mode.INFER
        x = rand_image(rng)
        _, p1, _ = forward(g, x)
        _, p2, _ = forward(g, x)
        npt.assert_array_equal(p1.array, p2.array)

    def test_probs_sum_to_one(self, rng):
        g = build_bellcnn(BellConfig(seed=4))
        g.mode = Mode.INFER
        for _ in range(5):
            _, probs, _ = forward(g, rand_image(rng))
            assert abs(float(probs.array.sum()) - 1.0) < 1e-12

    def test_zero_weights_give_uniform_probs(self, rng):
        g = build_bellcnn(BellConfig(seed=5))
        for i, name, t in g.parameters():
            g.set_parameter(i, name, Tensor(np.zeros(t.dims)))
        g.mode = Mode.INFER
        _, probs, _ = forward(g, rand_image(rng))
        npt.assert_array_equal(probs.array, [0.5, 0.5])

    def test_shape_mismatch(self, rng):
        g = build_bellcnn(BellConfig(seed=5))
        with pytest.raises(ShapeMismatchError):
            forward(g, Tensor(rng.random((32, 32, 1))))

    def test_train_keep_prob_one_equals_infer_bitwise(self, rng):
        cfg = BellConfig(input_w=32, input_h=32, keep_prob=1.0, seed=6)
        g = build_bellcnn(cfg)
        x = rand_image(rng, 32)
        _, p_train, _ = forward(g, x, np.random.default_rng(0))
        g.mode = Mode.INFER
        _, p_infer, _ = forward(g, x)
        npt.assert_array_equal(p_train.array, p_infer.array)


class TestBackward:
    def test_target_equal_probs_zeroes_output_gradient(self, small_graph, rng):
        x = rand_image(rng, 32)
        _, probs, caches = forward(small_graph, x, np.random.default_rng(1))
        grads = backward(small_graph, caches, Tensor(probs.array))
        # with d_logits = probs - target = 0, every gradient collapses to 0
        for lg in grads:
            if lg is not None:
                assert float(np.abs(lg.d_weights.array).max()) == 0.0
                assert float(np.abs(lg.d_bias.array).max()) == 0.0

    def test_near_perfect_prediction_gives_tiny_gradients(self, rng):
        # force a huge logit margin so probs are a clamped-perfect prediction
        cfg = BellConfig(input_w=32, input_h=32, keep_prob=1.0, seed=8)
        g = build_bellcnn(cfg)
        head_idx = len(g.layers) - 1
        g.set_parameter(head_idx, "bias", Tensor([60.0, -60.0]))
        x = rand_image(rng, 32)
        _, probs, caches = forward(g, x, np.random.default_rng(1))
        grads = backward(g, caches, one_hot(0, 2))
        for lg in grads:
            if lg is not None:
                assert float(np.abs(lg.d_weights.array).max()) <= 1e-10
                assert float(np.abs(lg.d_bias.array).max()) <= 1e-10

    def test_stale_cache_from_other_graph(self, rng):
        g1 = build_bellcnn(BellConfig(input_w=32, input_h=32, seed=1))
        g2 = build_bellcnn(BellConfig(input_w=32, input_h=32, seed=2))
        x = rand_image(rng, 32)
        _, _, caches = forward(g1, x, np.random.default_rng(0))
        with pytest.raises(StaleCacheError):
            backward(g2, caches, one_hot(0, 2))

    def test_stale_cache_from_infer_forward(self, small_graph, rng):
        small_graph.mode = Mode.INFER
        x = rand_image(rng, 32)
        _, _, caches = forward(small_graph, x)
        small_graph.mode = Mode.TRAIN
        with pytest.raises(StaleCacheError):
            backward(small_graph, caches, one_hot(0, 2))

    def test_frozen_graph_rejects_backward(self, small_graph, rng, tmp_path):
        from bellcnn import freeze, thaw
        freeze(small_graph, tmp_path / "m.bcnn")
        thawed = thaw(tmp_path / "m.bcnn")
        x = rand_image(rng, 32)
        _, _, caches = forward(thawed, x)
        thawed_caches_mode = caches.mode
        assert thawed_caches_mode is Mode.INFER
        with pytest.raises(FrozenGraphImmutableError):
            backward(thawed, caches, one_hot(0, 2))

    def test_full_network_gradient_check(self):
        # keep_prob 1 keeps the loss deterministic; dropout gradients are
        # covered by the fixed-mask layer check
        cfg = BellConfig(input_w=32, input_h=32, keep_prob=1.0, seed=11)
        g = build_bellcnn(cfg)
        rng = np.random.default_rng(42)
        x = Tensor(rng.random((32, 32, 1)))
        target = one_hot(1, 2)

        _, _, caches = forward(g, x, np.random.default_rng(0))
        grads = backward(g, caches, target)

        eps = 1e-5
        checked = 0
        worst = 0.0
        sample_rng = np.random.default_rng(7)
        for i, rec in enumerate(g.layers):
            if grads[i] is None:
                continue
            for name, grad_t in (("weights", grads[i].d_weights),
                                 ("bias", grads[i].d_bias)):
                base = getattr(rec.layer, name).array.copy()
                flat_grad = grad_t.array.reshape(-1)
                n_samples = min(40, base.size)
                idx = sample_rng.choice(base.size, size=n_samples, replace=False)
                for j in idx:
                    pert = base.reshape(-1).copy()
                    pert[j] = base.reshape(-1)[j] + eps
                    g.set_parameter(i, name, Tensor(pert.reshape(base.shape)))
                    hi, _ = softmax_cross_entropy(
                        forward(g, x, np.random.default_rng(0))[0], target)
                    pert[j] = base.reshape(-1)[j] - eps
                    g.set_parameter(i, name, Tensor(pert.reshape(base.shape)))
                    lo, _ = softmax_cross_entropy(
                        forward(g, x, np.random.default_rng(0))[0], target)
                    g.set_parameter(i, name, Tensor(base))
                    numeric = (hi - lo) / (2 * eps)
                    err = abs(numeric - flat_grad[j]) / max(
                        abs(numeric), abs(flat_grad[j]), 1e-6)
                    worst = max(worst, err)
                    checked += 1
        assert checked >= 500
        assert worst < 1e-3


class TestPredict:
    def test_closed_form_scores(self, small_graph):
        head_idx = len(small_graph.layers) - 1
        # zero weights, bias = logits makes the output independent of x
        for i, name, t in small_graph.parameters():
            small_graph.set_parameter(i, name, Tensor(np.zeros(t.dims)))
        small_graph.set_parameter(head_idx, "bias", Tensor([2.0, -1.0]))
        small_graph.mode = Mode.INFER
        x = Tensor(np.zeros((32, 32, 1)))
        cls, scores = predict(small_graph, x)
        assert cls == 0
        npt.assert_allclose(scores.array, [0.95257413, 0.04742587], atol=5e-9)

    def test_tie_breaks_to_lowest_index(self, small_graph):
        for i, name, t in small_graph.parameters():
            small_graph.set_parameter(i, name, Tensor(np.zeros(t.dims)))
        small_graph.mode = Mode.INFER
        cls, scores = predict(small_graph, Tensor(np.zeros((32, 32, 1))))
        assert cls == 0
        npt.assert_array_equal(scores.array, [0.5, 0.5])

    def test_argmax_invariant_under_softmax(self, rng):
        g = build_bellcnn(BellConfig(input_w=32, input_h=32, seed=13))
        g.mode = Mode.INFER
        for _ in range(10):
            x = rand_image(rng, 32)
            logits, probs, _ = forward(g, x)
            assert int(np.argmax(logits.array)) == int(np.argmax(probs.array))
            cls, _ = predict(g, x)
            assert cls == int(np.argmax(logits.array))


class TestSingleStepDescent:
    def test_one_step_decreases_loss_on_20_seeds(self):
        hyper = AdamHyper(alpha=1e-4)
        for seed in range(20):
            cfg = BellConfig(input_w=32, input_h=32, keep_prob=1.0, seed=seed)
            g = build_bellcnn(cfg)
            rng = np.random.default_rng(1000 + seed)
            x = Tensor(rng.random((32, 32, 1)))
            target = one_hot(seed % 2, 2)

            loss_before, _, grads = loss_and_gradients(
                g, x, target, np.random.default_rng(0))
            for i, rec in enumerate(g.layers):
                if grads[i] is None:
                    continue
                for name, grad_t in (("weights", grads[i].d_weights),
                                     ("bias", grads[i].d_bias)):
                    param = getattr(rec.layer, name)
                    new_param, _ = adam_step(param, grad_t,
                                             AdamState.initial(param), hyper)
                    g.set_parameter(i, name, new_param)
            logits_after, _, _ = forward(g, x, np.random.default_rng(0))
            loss_after, _ = softmax_cross_entropy(logits_after, target)
            assert loss_after < loss_before
