import itertools

import numpy as np
import pytest

from iwsgd.errors import DimensionError
from iwsgd.net import (
    Activation,
    Dense,
    DenseParams,
    NetworkParams,
    NetworkSpec,
    Noise,
    NoiseDraw,
    NoiseMode,
    NoiseSpec,
    Phase,
    backward,
    backward_rows,
    backward_weighted,
    forward,
    init_params,
    inject_noise,
    log_likelihood,
    mlp_spec,
    concat_draws,
    sample_draw,
    sample_draw_block,
    stack_draws,
)
from iwsgd.rng import DrawCoordinates

DROPOUT = NoiseSpec(NoiseMode.BERNOULLI, keep_prob=0.5)


def _random_params(spec, seed):
    params = init_params(spec, seed)
    rng = np.random.default_rng(seed)
    return params.with_flat(params.flat() + 0.1 * rng.standard_normal(params.size))


def test_inject_noise_examples():
    h = np.array([2.0, 4.0])
    np.testing.assert_array_equal(inject_noise(h, np.array([1.0, 0.0]), DROPOUT, Phase.TRAIN), [2.0, 0.0])
    np.testing.assert_array_equal(inject_noise(h, None, DROPOUT, Phase.INFERENCE), [1.0, 2.0])
    keep_all = NoiseSpec(NoiseMode.BERNOULLI, keep_prob=1.0)
    np.testing.assert_array_equal(inject_noise(h, np.ones(2), keep_all, Phase.TRAIN), h)
    np.testing.assert_array_equal(inject_noise(h, None, keep_all, Phase.INFERENCE), h)


def test_inject_noise_gaussian():
    h = np.array([2.0, 4.0])
    spec = NoiseSpec(NoiseMode.GAUSSIAN, sigma=0.3)
    np.testing.assert_array_equal(inject_noise(h, np.array([0.5, -1.0]), spec, Phase.TRAIN), [2.5, 3.0])
    np.testing.assert_array_equal(inject_noise(h, None, spec, Phase.INFERENCE), h)


def test_inject_noise_inverted_dropout():
    spec = NoiseSpec(NoiseMode.BERNOULLI, keep_prob=0.5, inverted=True)
    h = np.array([2.0, 4.0])
    np.testing.assert_array_equal(inject_noise(h, np.array([1.0, 0.0]), spec, Phase.TRAIN), [4.0, 0.0])
    np.testing.assert_array_equal(inject_noise(h, None, spec, Phase.INFERENCE), h)


def test_inject_noise_errors():
    with pytest.raises(DimensionError):
        inject_noise(np.ones(2), np.ones(3), DROPOUT, Phase.TRAIN)
    with pytest.raises(ValueError):
        inject_noise(np.ones(2), None, DROPOUT, Phase.TRAIN)


@pytest.mark.parametrize("kwargs", [
    dict(mode=NoiseMode.BERNOULLI, keep_prob=0.0),
    dict(mode=NoiseMode.BERNOULLI, keep_prob=1.5),
    dict(mode=NoiseMode.GAUSSIAN, sigma=-0.1),
])
def test_noise_spec_validation(kwargs):
    with pytest.raises(ValueError):
        NoiseSpec(**kwargs)


def test_network_spec_rejects_broken_chain():
    with pytest.raises(DimensionError) as info:
        NetworkSpec((Dense(2, 3), Activation("relu"), Dense(4, 2)))
    assert info.value.layer_index == 2
    assert str(info.value).startswith("layer 2:")


def test_forward_identity_network():
    spec = NetworkSpec((Dense(2, 2),))
    params = NetworkParams([DenseParams(np.eye(2), np.zeros(2))])
    trace = forward(spec, params, [3.0, 4.0])
    np.testing.assert_array_equal(trace.logits, [3.0, 4.0])


def test_forward_dense_relu():
    spec = NetworkSpec((Dense(2, 1), Activation("relu")))
    params = NetworkParams([DenseParams(np.array([[1.0, 2.0]]), np.array([0.5]))])
    np.testing.assert_array_equal(forward(spec, params, [3.0, 4.0]).logits, [11.5])


def test_forward_matches_straight_line_evaluation():
    spec = mlp_spec([2, 4, 2], "tanh", DROPOUT)
    params = _random_params(spec, 7)
    draw = sample_draw(spec, DrawCoordinates(seed=11, epoch=1, batch_index=2, example_index=3))
    x = np.array([0.3, -1.2])

    w1, b1 = params.layers[0].weight, params.layers[0].bias
    w2, b2 = params.layers[1].weight, params.layers[1].bias
    mask = draw.eps[2]
    hidden = [np.tanh(sum(w1[j, i] * x[i] for i in range(2)) + b1[j]) * mask[j] for j in range(4)]
    expected = [sum(w2[k, j] * hidden[j] for j in range(4)) + b2[k] for k in range(2)]

    trace = forward(spec, params, x, draw, Phase.TRAIN)
    np.testing.assert_allclose(trace.logits, expected, rtol=0, atol=1e-12)


def test_forward_is_reproducible_from_trace_noise():
    spec = mlp_spec([3, 5, 5, 2], "relu", DROPOUT)
    params = _random_params(spec, 1)
    draw = sample_draw(spec, DrawCoordinates(seed=2))
    x = np.array([1.0, -0.5, 0.2])
    first = forward(spec, params, x, draw, Phase.TRAIN)
    replay = forward(spec, params, x, NoiseDraw(first.eps), Phase.TRAIN)
    np.testing.assert_array_equal(first.logits, replay.logits)


def test_forward_block_rows_match_single_rows():
    spec = mlp_spec([3, 5, 2], "relu", DROPOUT)
    params = _random_params(spec, 4)
    draws = [sample_draw(spec, DrawCoordinates(seed=9, sample_index=s)) for s in range(3)]
    x = np.array([0.4, 0.1, -0.9])
    block = forward(spec, params, np.tile(x, (3, 1)), stack_draws(draws), Phase.TRAIN)
    for s, draw in enumerate(draws):
        single = forward(spec, params, x, draw, Phase.TRAIN)
        np.testing.assert_allclose(block.logits[s], single.logits, rtol=0, atol=1e-14)


def test_forward_errors():
    spec = mlp_spec([3, 4, 2], "relu", DROPOUT)
    params = init_params(spec, 0)
    with pytest.raises(DimensionError):
        forward(spec, params, np.ones(4), sample_draw(spec, DrawCoordinates(seed=0)))
    with pytest.raises(ValueError):
        forward(spec, params, np.ones(3), None, Phase.TRAIN)
    bad = NetworkParams([DenseParams(np.ones((4, 2)), np.zeros(4)), params.layers[1]])
    with pytest.raises(DimensionError) as info:
        forward(spec, bad, np.ones(3), None, Phase.INFERENCE)
    assert info.value.layer_index == 0


def test_log_likelihood_examples():
    spec = NetworkSpec((Dense(2, 2),))
    params = NetworkParams([DenseParams(np.eye(2), np.zeros(2))])
    assert log_likelihood(forward(spec, params, [1.7, 1.7]), 0) == pytest.approx(np.log(0.5), abs=1e-15)
    assert log_likelihood(forward(spec, params, [0.0, np.log(3.0)]), 1) == pytest.approx(np.log(0.75), abs=1e-15)
    with pytest.raises(IndexError):
        log_likelihood(forward(spec, params, [0.0, 0.0]), 2)


def test_log_likelihood_is_never_positive():
    spec = mlp_spec([3, 6, 4], "relu", DROPOUT)
    params = _random_params(spec, 5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        trace = forward(spec, params, rng.standard_normal(3) * 10, None, Phase.INFERENCE)
        assert log_likelihood(trace, int(rng.integers(0, 4))) <= 0.0


def test_backward_softmax_regression_closed_form():
    spec = NetworkSpec((Dense(3, 2),))
    params = NetworkParams([DenseParams(np.array([[0.2, -0.1, 0.4], [0.3, 0.5, -0.6]]), np.array([0.1, -0.2]))])
    x = np.array([1.0, 2.0, -1.0])
    trace = forward(spec, params, x)
    logits = trace.logits
    probs = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    residual = np.array([1.0, 0.0]) - probs

    grad = backward(spec, params, trace, 0)
    np.testing.assert_allclose(grad.layers[0].weight, np.outer(residual, x), atol=1e-15)
    np.testing.assert_allclose(grad.layers[0].bias, residual, atol=1e-15)


def test_backward_dead_units_have_zero_gradient():
    spec = mlp_spec([2, 3, 2], "tanh", DROPOUT)
    params = _random_params(spec, 3)
    draw = NoiseDraw({2: np.zeros(3)})
    trace = forward(spec, params, np.array([0.5, -0.5]), draw, Phase.TRAIN)
    grad = backward(spec, params, trace, 1)
    np.testing.assert_array_equal(grad.layers[1].weight, np.zeros((2, 3)))
    np.testing.assert_array_equal(grad.layers[0].weight, np.zeros((3, 2)))
    np.testing.assert_array_equal(grad.layers[0].bias, np.zeros(3))
    assert np.any(grad.layers[1].bias != 0.0)


def test_backward_requires_train_trace():
    spec = mlp_spec([2, 3, 2], "relu", DROPOUT)
    params = init_params(spec, 0)
    trace = forward(spec, params, np.ones(2), None, Phase.INFERENCE)
    with pytest.raises(ValueError):
        backward(spec, params, trace, 0)


def test_backward_weighted_equals_weighted_row_gradients():
    spec = mlp_spec([3, 6, 6, 4], "relu", DROPOUT)
    params = _random_params(spec, 8)
    draws = [sample_draw(spec, DrawCoordinates(seed=1, sample_index=s)) for s in range(4)]
    rows = np.tile(np.array([0.2, -0.7, 1.1]), (4, 1))
    trace = forward(spec, params, rows, stack_draws(draws), Phase.TRAIN)
    weights = np.array([0.1, 0.2, 0.3, 0.4])

    expected = sum(w * g.flat() for w, g in zip(weights, backward_rows(spec, params, trace, 2)))
    combined = backward_weighted(spec, params, trace, 2, weights).flat()
    np.testing.assert_allclose(combined, expected, rtol=0, atol=1e-12)


def test_inference_is_expectation_over_masks_for_linear_tail():
    keep = 0.3
    spec = mlp_spec([2, 3, 2], "relu", NoiseSpec(NoiseMode.BERNOULLI, keep_prob=keep))
    params = _random_params(spec, 12)
    x = np.array([0.8, -0.3])

    expected = np.zeros(2)
    for bits in itertools.product([0.0, 1.0], repeat=3):
        mask = np.array(bits)
        prob = np.prod(np.where(mask == 1.0, keep, 1 - keep))
        expected += prob * forward(spec, params, x, NoiseDraw({2: mask}), Phase.TRAIN).logits

    inference = forward(spec, params, x, None, Phase.INFERENCE).logits
    np.testing.assert_allclose(inference, expected, rtol=0, atol=1e-12)


def test_sample_draw_is_reproducible_and_binary():
    spec = mlp_spec([2, 16, 16, 2], "relu", DROPOUT)
    coords = DrawCoordinates(seed=42, epoch=3, batch_index=5, example_index=7, sample_index=1)
    first = sample_draw(spec, coords)
    second = sample_draw(spec, coords)
    for index in first.eps:
        np.testing.assert_array_equal(first.eps[index], second.eps[index])
        assert set(np.unique(first.eps[index])) <= {0.0, 1.0}
    other = sample_draw(spec, coords.with_sample(2))
    assert any(np.any(first.eps[i] != other.eps[i]) for i in first.eps)
    assert first.rng_coordinates(2) == [(42, 3, 5, 7, 1, 2)]


@pytest.mark.parametrize("noise", [DROPOUT, NoiseSpec(NoiseMode.GAUSSIAN, sigma=0.7)])
def test_draw_rows_do_not_depend_on_sample_count(noise):
    spec = mlp_spec([3, 5, 7, 2], "tanh", noise)
    example = DrawCoordinates(seed=8, epoch=1, batch_index=4, example_index=2)
    wide = sample_draw_block(spec, example, 8)
    narrow = sample_draw_block(spec, example, 3)
    for s in range(8):
        single = sample_draw(spec, example.with_sample(s))
        for index in wide.eps:
            np.testing.assert_array_equal(single.eps[index], wide.eps[index][s])
            if s < 3:
                np.testing.assert_array_equal(narrow.eps[index][s], wide.eps[index][s])
    assert wide.rng_coordinates(2)[5] == (8, 1, 4, 2, 5, 2)


def test_concat_draws_keeps_row_order():
    spec = mlp_spec([3, 4, 2], "relu", DROPOUT)
    blocks = [sample_draw_block(spec, DrawCoordinates(seed=1, example_index=i), 2) for i in range(3)]
    joined = concat_draws(blocks)
    np.testing.assert_array_equal(joined.eps[2], np.vstack([b.eps[2] for b in blocks]))
    assert [c.example_index for c in joined.coordinates] == [0, 0, 1, 1, 2, 2]


def test_init_params_is_seeded():
    spec = mlp_spec([4, 8, 3], "relu", DROPOUT)
    np.testing.assert_array_equal(init_params(spec, 5).flat(), init_params(spec, 5).flat())
    assert np.any(init_params(spec, 5).flat() != init_params(spec, 6).flat())
    assert init_params(spec, 5).shapes() == [(8, 4), (8,), (3, 8), (3,)]


def test_params_flat_round_trip_and_noise_layers():
    spec = mlp_spec([4, 8, 3], "tanh", DROPOUT)
    params = init_params(spec, 1)
    assert params.with_flat(params.flat()).shapes() == params.shapes()
    np.testing.assert_array_equal(params.with_flat(params.flat()).flat(), params.flat())
    assert spec.noise_unit_count == 8
    assert [type(layer) for layer in spec.layers] == [Dense, Activation, Noise, Dense]
