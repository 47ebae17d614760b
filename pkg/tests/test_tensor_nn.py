"""Unit tests for the numpy network core."""

import numpy as np
import pytest

from itl_sim.errors import AlignmentError, ConfigurationError, DataError
from itl_sim.tensor_nn import (
    Conv2D,
    CrossEntropy,
    Dense,
    Dice,
    Flatten,
    MaxPool2D,
    ModelSpec,
    MultiHead,
    ReLU,
    backward,
    copy_params,
    extract_features,
    forward,
    forward_pass,
    head_param_names,
    init_params,
    loss_and_grad,
    merge_params,
    mlp_spec,
    parameter_shapes,
    params_equal,
    replace_head,
    score,
    split_params,
    task_loss,
)
from tests.grad_utils import numerical_gradient, numerical_param_gradient, param_relative_error, relative_error

TOLERANCE = 1e-5
INSTANCES = 20


def conv_model(head_setting=None):
    features = (Conv2D(2, 3, 3), ReLU(), MaxPool2D(2), Flatten())
    head = (Dense(12, 4),)
    if head_setting is None:
        return ModelSpec((2, 6, 6), features, head)
    return ModelSpec((2, 6, 6), features, head, head_setting)


def loop_forward(x, conv_w, conv_b, pool, dense_w, dense_b):
    """Conv (valid, stride 1) -> ReLU -> max pool -> flatten -> dense, one scalar at a time."""
    out_c, in_c, k, _ = conv_w.shape
    _, height, width = x.shape
    conv_h, conv_w_ = height - k + 1, width - k + 1
    conv = [[[0.0] * conv_w_ for _ in range(conv_h)] for _ in range(out_c)]
    for o in range(out_c):
        for r in range(conv_h):
            for c in range(conv_w_):
                total = conv_b[o]
                for ch in range(in_c):
                    for i in range(k):
                        for j in range(k):
                            total += x[ch, r + i, c + j] * conv_w[o, ch, i, j]
                conv[o][r][c] = max(total, 0.0)
    flat = []
    for o in range(out_c):
        for r in range(conv_h // pool):
            for c in range(conv_w_ // pool):
                flat.append(max(conv[o][r * pool + i][c * pool + j] for i in range(pool) for j in range(pool)))
    return [dense_b[n] + sum(flat[m] * dense_w[m, n] for m in range(len(flat))) for n in range(dense_w.shape[1])]


@pytest.mark.unit
class TestModelSpec:
    def test_mlp_shapes(self):
        model = mlp_spec(6, [8, 5], 3)
        assert model.feature_shape == (5,)
        assert model.output_dim == 3
        assert parameter_shapes(model) == {
            "features.00.bias": (8,),
            "features.00.weight": (6, 8),
            "features.02.bias": (5,),
            "features.02.weight": (8, 5),
            "head.00.bias": (3,),
            "head.00.weight": (5, 3),
        }

    def test_conv_shapes(self):
        model = conv_model()
        assert model.feature_shape == (12,)
        assert parameter_shapes(model)["features.00.weight"] == (3, 2, 3, 3)

    def test_mismatched_layers_rejected(self):
        with pytest.raises(AlignmentError):
            ModelSpec((6,), (Dense(6, 8),), (Dense(7, 3),))

    def test_head_required(self):
        with pytest.raises(ConfigurationError):
            ModelSpec((6,), (Dense(6, 8),), ())

    def test_multi_head_names(self):
        model = mlp_spec(6, [8], 3, MultiHead(2))
        assert head_param_names(model, 1) == ["heads.01.00.bias", "heads.01.00.weight"]
        assert model.is_multi_head


@pytest.mark.unit
class TestParameters:
    def test_init_is_deterministic(self, tiny_model):
        assert params_equal(init_params(tiny_model, 7), init_params(tiny_model, 7))
        assert not params_equal(init_params(tiny_model, 7), init_params(tiny_model, 8))

    def test_init_sorted_and_biases_zero(self, tiny_model):
        params = init_params(tiny_model, 0)
        assert list(params) == sorted(params)
        assert all(not params[k].any() for k in params if k.endswith(".bias"))

    def test_split_and_merge(self, tiny_model, tiny_params):
        features, heads = split_params(tiny_model, tiny_params)
        assert all(k.startswith("features.") for k in features)
        assert all(k.startswith("head.") for k in heads)
        assert params_equal(merge_params(heads, features), tiny_params)

    def test_merge_overlap_rejected(self, tiny_params):
        with pytest.raises(AlignmentError):
            merge_params(tiny_params, tiny_params)

    def test_replace_head_touches_one_head(self, tiny_multi_model):
        params = init_params(tiny_multi_model, 0)
        replaced = replace_head(tiny_multi_model, params, new_seed=99, head_index=1)
        changed = {k for k in params if not np.array_equal(params[k], replaced[k])}
        assert changed == {"heads.01.00.weight"}
        assert list(replaced) == list(params)
        assert replaced["features.00.weight"] is params["features.00.weight"]

    def test_replace_head_needs_multi_head(self, tiny_model, tiny_params):
        with pytest.raises(ConfigurationError):
            replace_head(tiny_model, tiny_params, new_seed=1)


@pytest.mark.unit
class TestForward:
    def test_logit_shape(self, tiny_model, tiny_params):
        x = np.random.default_rng(0).random((5, 6))
        assert forward(tiny_model, tiny_params, x).shape == (5, 3)
        assert extract_features(tiny_model, tiny_params, x).shape == (5, 8)

    @pytest.mark.parametrize(
        "input_shape, conv, pool, dense",
        [
            ((2, 6, 6), Conv2D(2, 3, 3), 2, Dense(12, 4)),
            ((1, 7, 7), Conv2D(1, 2, 2), 4, Dense(2, 3)),
        ],
    )
    def test_conv_stack_matches_loops(self, input_shape, conv, pool, dense):
        model = ModelSpec(input_shape, (conv, ReLU(), MaxPool2D(pool), Flatten()), (dense,))
        rng = np.random.default_rng(4)
        params = {k: rng.normal(size=v.shape) for k, v in init_params(model, 0).items()}
        x = rng.normal(size=(3,) + input_shape)
        expected = [
            loop_forward(
                xi,
                params["features.00.weight"],
                params["features.00.bias"],
                pool,
                params["head.00.weight"],
                params["head.00.bias"],
            )
            for xi in x
        ]
        np.testing.assert_allclose(forward(model, params, x), expected, rtol=1e-12, atol=1e-12)

    def test_dense_stack_matches_loops(self, tiny_model, tiny_params):
        x = np.random.default_rng(5).normal(size=(4, 6))
        w1, b1 = tiny_params["features.00.weight"], tiny_params["features.00.bias"] + 0.1
        w2, b2 = tiny_params["head.00.weight"], tiny_params["head.00.bias"] - 0.2
        params = {**tiny_params, "features.00.bias": b1, "head.00.bias": b2}
        expected = []
        for xi in x:
            hidden = [max(b1[h] + sum(xi[i] * w1[i, h] for i in range(6)), 0.0) for h in range(8)]
            expected.append([b2[n] + sum(hidden[h] * w2[h, n] for h in range(8)) for n in range(3)])
        np.testing.assert_allclose(forward(tiny_model, params, x), expected, rtol=1e-12, atol=1e-12)

    def test_batch_shape_checked(self, tiny_model, tiny_params):
        with pytest.raises(AlignmentError):
            forward(tiny_model, tiny_params, np.zeros((5, 7)))

    def test_params_checked(self, tiny_model, tiny_params):
        broken = dict(tiny_params)
        broken.pop("head.00.bias")
        with pytest.raises(AlignmentError):
            forward(tiny_model, broken, np.zeros((2, 6)))

    def test_multi_head_needs_index(self, tiny_multi_model):
        params = init_params(tiny_multi_model, 0)
        with pytest.raises(ConfigurationError):
            forward(tiny_multi_model, params, np.zeros((2, 6)))
        with pytest.raises(ConfigurationError):
            forward(tiny_multi_model, params, np.zeros((2, 6)), head_index=3)

    def test_heads_differ(self, tiny_multi_model):
        params = init_params(tiny_multi_model, 0)
        x = np.random.default_rng(0).random((4, 6))
        assert not np.allclose(forward(tiny_multi_model, params, x, 0), forward(tiny_multi_model, params, x, 1))

    def test_max_pool_drops_ragged_edge(self):
        model = ModelSpec((1, 5, 5), (MaxPool2D(2), Flatten()), (Dense(4, 2),))
        assert model.feature_shape == (4,)


@pytest.mark.unit
class TestLosses:
    def test_cross_entropy_uniform_logits(self):
        value, grad = task_loss(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
        assert value == pytest.approx(np.log(5))
        assert grad.sum() == pytest.approx(0.0)

    def test_cross_entropy_stable_for_large_logits(self):
        value, _ = task_loss(np.array([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(value)
        assert value == pytest.approx(0.0)

    def test_labels_validated(self):
        with pytest.raises(DataError):
            task_loss(np.zeros((2, 3)), np.array([0, 3]))
        with pytest.raises(DataError):
            task_loss(np.zeros((2, 3)), np.array([0.5, 1]))

    def test_empty_batch(self, tiny_model, tiny_params):
        with pytest.raises(DataError):
            loss_and_grad(tiny_model, tiny_params, np.zeros((0, 6)), np.zeros(0))

    def test_dice_perfect_prediction(self):
        mask = np.array([[1.0, 0.0, 1.0]])
        value, _ = task_loss(np.array([[50.0, -50.0, 50.0]]), mask, Dice(1.0))
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_dice_requires_binary_masks(self):
        with pytest.raises(DataError):
            task_loss(np.zeros((1, 2)), np.array([[0.5, 1.0]]), Dice())

    def test_dice_smoothing_positive(self):
        with pytest.raises(ConfigurationError):
            Dice(0.0)

    def test_score_accuracy(self):
        logits = np.array([[2.0, 0.0], [0.0, 1.0], [3.0, 1.0], [0.0, 5.0]])
        assert score(logits, np.array([0, 1, 1, 1])) == pytest.approx(75.0)

    def test_score_dice(self):
        logits = np.array([[1.0, -1.0]])
        assert score(logits, np.array([[1.0, 0.0]]), Dice(1.0)) == pytest.approx(100.0)


@pytest.mark.unit
class TestGradients:
    """Analytic gradients against central finite differences in float64."""

    @pytest.mark.parametrize("loss_kind", ["ce", "dice"])
    def test_logit_gradient(self, loss_kind):
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            logits = rng.normal(size=(4, 3))
            if loss_kind == "ce":
                labels, loss = rng.integers(0, 3, size=4), CrossEntropy()
            else:
                labels, loss = (rng.random((4, 3)) > 0.5).astype(float), Dice(1.0)
            _, grad = task_loss(logits, labels, loss)
            numeric = numerical_gradient(lambda: task_loss(logits, labels, loss)[0], logits)
            assert relative_error(grad, numeric) < TOLERANCE

    def test_dense_relu_network(self):
        model = mlp_spec(5, [7, 4], 3, head_hidden=[4])
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            params = init_params(model, seed)
            params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
            x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, size=6)
            _, grad = loss_and_grad(model, params, x, y)
            numeric = numerical_param_gradient(lambda p: loss_and_grad(model, p, x, y)[0], params)
            assert param_relative_error(grad, numeric) < TOLERANCE

    def test_conv_pool_network(self):
        model = conv_model()
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            params = init_params(model, seed)
            params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
            x, y = rng.normal(size=(3, 2, 6, 6)), rng.integers(0, 4, size=3)
            _, grad = loss_and_grad(model, params, x, y)
            numeric = numerical_param_gradient(lambda p: loss_and_grad(model, p, x, y)[0], params)
            assert param_relative_error(grad, numeric) < TOLERANCE

    def test_dice_through_network(self):
        model = mlp_spec(4, [6], 3)
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            params = init_params(model, seed)
            x, y = rng.normal(size=(5, 4)), (rng.random((5, 3)) > 0.5).astype(float)
            _, grad = loss_and_grad(model, params, x, y, Dice(1.0))
            numeric = numerical_param_gradient(lambda p: loss_and_grad(model, p, x, y, Dice(1.0))[0], params)
            assert param_relative_error(grad, numeric) < TOLERANCE

    def test_feature_gradient_path(self, tiny_model):
        """``d_features`` enters the extractor as the derivative of an extra feature-level objective."""
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            params = init_params(tiny_model, seed)
            x = rng.normal(size=(4, 6))
            weights = rng.normal(size=(4, 8))

            def objective(p):
                return float((extract_features(tiny_model, p, x) * weights).sum())

            fp = forward_pass(tiny_model, params, x)
            grad = backward(tiny_model, params, fp, np.zeros_like(fp.logits), weights)
            numeric = numerical_param_gradient(objective, params)
            assert param_relative_error(grad, numeric) < TOLERANCE

    def test_inactive_heads_get_exact_zeros(self, tiny_multi_model):
        params = init_params(tiny_multi_model, 0)
        x, y = np.random.default_rng(0).random((4, 6)), np.array([0, 1, 2, 0])
        _, grad = loss_and_grad(tiny_multi_model, params, x, y, head_index=1)
        for h in (0, 2):
            for name in head_param_names(tiny_multi_model, h):
                assert not grad[name].any()
        assert any(grad[name].any() for name in head_param_names(tiny_multi_model, 1))

    def test_gradient_does_not_modify_params(self, tiny_model, tiny_params):
        before = copy_params(tiny_params)
        loss_and_grad(tiny_model, tiny_params, np.ones((2, 6)), np.array([0, 1]))
        assert params_equal(before, tiny_params)
