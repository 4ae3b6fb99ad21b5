import os
import sys
import tempfile

import numpy as np
import pytest

# Ensure we can import from repo root
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from main import InvalidHyperparameterError, InvalidInputError, NumericError
from modules.datagen import LabeledDataset, MixtureComponent, MixtureSpec, Provenance, gen_gaussian_mixture
from modules.losses import LossFamily, RobustLossConfig
from modules.model import (
    Activation,
    DenseLayer,
    Gradients,
    MlpClassifier,
    SgdConfig,
    SgdState,
    backward,
    evaluate_accuracy,
    forward,
    init_model,
    load_checkpoint,
    predict,
    predict_proba_batch,
    save_checkpoint,
    sgd_step,
    train,
    with_weights,
)

CE = RobustLossConfig(family=LossFamily.CE)


def _linear(weights, bias):
    return MlpClassifier(layers=(DenseLayer(weights=weights, bias=bias),), hidden_activation=Activation.RELU)


def _blobs(seed, count=100, gap=6.0):
    eye = np.eye(2)
    spec = MixtureSpec(
        components=(MixtureComponent((0.0, 0.0), eye, count, 0), MixtureComponent((gap, gap), eye, count, 1)),
        num_classes=2,
    )
    return gen_gaussian_mixture(spec, seed)


def test_init_model_shapes_and_determinism():
    a = init_model([2, 3], seed=4)
    b = init_model([2, 3], seed=4)
    assert np.array_equal(a.layers[0].weights, b.layers[0].weights)
    assert np.all(a.layers[0].bias == 0.0)
    deep = init_model([2, 4, 3], seed=0)
    assert [layer.weights.shape for layer in deep.layers] == [(4, 2), (3, 4)]
    assert deep.layer_dims == [2, 4, 3]
    limit = np.sqrt(6.0 / (2 + 4))
    assert np.all(np.abs(deep.layers[0].weights) <= limit)


def test_init_model_rejects_bad_dims():
    with pytest.raises(InvalidInputError):
        init_model([3])
    with pytest.raises(InvalidInputError):
        init_model([2, 0, 3])


def test_forward_identity_and_zero_cases():
    zero = _linear(np.zeros((3, 2)), np.zeros(3))
    assert np.allclose(forward(zero, [1.0, -2.0]), 0.0)
    assert np.allclose(predict_proba_batch(zero, [[1.0, -2.0]]), 1 / 3)
    ident = _linear(np.eye(3), np.zeros(3))
    assert np.allclose(forward(ident, [0.5, -1.0, 2.0]), [0.5, -1.0, 2.0])
    with pytest.raises(InvalidInputError):
        forward(ident, [1.0, 2.0])


def test_predict_argmax_and_tie_break():
    ident = _linear(np.eye(3), np.zeros(3))
    assert predict(ident, [0.2, 0.9, 0.1]) == 1
    assert predict(_linear(np.eye(2), np.zeros(2)), [0.5, 0.5]) == 0


def test_dense_layer_rejects_non_finite():
    with pytest.raises((InvalidInputError, NumericError)):
        DenseLayer(weights=np.array([[np.nan]]), bias=np.zeros(1))


def test_backward_matches_closed_form_for_linear_ce():
    model = init_model([2, 3], seed=1)
    X = np.array([[1.0, 2.0], [-0.5, 0.25]])
    y = np.array([2, 0])
    grads = backward(model, X, y, [CE, CE])
    probs = predict_proba_batch(model, X)
    delta = probs.copy()
    delta[np.arange(2), y] -= 1.0
    delta /= 2
    assert np.allclose(grads.weights[0], delta.T @ X)
    assert np.allclose(grads.biases[0], delta.sum(axis=0))


def test_backward_per_sample_configs_average():
    model = init_model([2, 5, 3], seed=2)
    X = np.array([[0.3, -1.0], [1.5, 0.5]])
    y = np.array([1, 2])
    mae = RobustLossConfig(family=LossFamily.MAE)
    mixed = backward(model, X, y, [CE, mae])
    first = backward(model, X[:1], y[:1], [CE])
    second = backward(model, X[1:], y[1:], [mae])
    for idx in range(2):
        assert np.allclose(mixed.weights[idx], (first.weights[idx] + second.weights[idx]) / 2)
        assert np.allclose(mixed.biases[idx], (first.biases[idx] + second.biases[idx]) / 2)
    assert mixed.loss == pytest.approx((first.loss + second.loss) / 2)


def test_sgd_step_vanilla_and_fixed_point():
    model = _linear(np.array([[1.0, -1.0]]), np.array([0.5]))
    grads = Gradients(weights=(np.array([[0.2, 0.4]]),), biases=(np.array([1.0]),))
    cfg = SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
    stepped, _state = sgd_step(model, grads, SgdState.zeros_like(model), cfg)
    assert np.allclose(stepped.layers[0].weights, [[0.98, -1.04]])
    assert np.allclose(stepped.layers[0].bias, [0.4])

    zero = Gradients(weights=(np.zeros((1, 2)),), biases=(np.zeros(1),))
    same, _state = sgd_step(model, zero, SgdState.zeros_like(model), cfg)
    assert np.array_equal(same.layers[0].weights, model.layers[0].weights)


def test_sgd_momentum_two_steps_by_hand():
    model = _linear(np.array([[1.0]]), np.array([0.0]))
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    grads = Gradients(weights=(np.array([[1.0]]),), biases=(np.array([0.0]),))
    state = SgdState.zeros_like(model)
    model, state = sgd_step(model, grads, state, cfg)
    assert state.weights[0][0, 0] == pytest.approx(1.0)
    assert model.layers[0].weights[0, 0] == pytest.approx(0.9)
    model, state = sgd_step(model, grads, state, cfg)
    # v2 = 0.9 * 1 + 1 = 1.9 ; w2 = 0.9 - 0.19
    assert state.weights[0][0, 0] == pytest.approx(1.9)
    assert model.layers[0].weights[0, 0] == pytest.approx(0.71)


def test_sgd_config_validation_and_schedule():
    with pytest.raises(InvalidHyperparameterError):
        SgdConfig(learning_rate=0.0)
    with pytest.raises(InvalidHyperparameterError):
        SgdConfig(momentum=1.0)
    with pytest.raises(InvalidHyperparameterError):
        SgdConfig(epochs=10, lr_schedule=((5, 0.01), (3, 0.001)))
    cfg = SgdConfig(learning_rate=0.1, epochs=10, lr_schedule=((3, 0.01), (6, 0.001)))
    assert [cfg.rate_for_epoch(e) for e in (0, 3, 5, 6, 9)] == [0.1, 0.01, 0.01, 0.001, 0.001]


def test_train_zero_epochs_is_identity():
    ds = _blobs(0, count=10)
    model = init_model([2, 2], seed=0)
    trained, record = train(model, ds, {Provenance.TRUE_LABEL: CE}, SgdConfig(epochs=0))
    assert len(record) == 0
    assert np.array_equal(trained.layers[0].weights, model.layers[0].weights)


def test_train_is_deterministic():
    ds = _blobs(1, count=40)
    cfg = SgdConfig(learning_rate=0.05, epochs=5, batch_size=16, seed=9)
    a, rec_a = train(init_model([2, 8, 2], seed=3), ds, {Provenance.TRUE_LABEL: CE}, cfg)
    b, rec_b = train(init_model([2, 8, 2], seed=3), ds, {Provenance.TRUE_LABEL: CE}, cfg)
    assert rec_a.losses == rec_b.losses
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weights, lb.weights)
        assert np.array_equal(la.bias, lb.bias)


def test_train_separable_blobs_reaches_high_accuracy():
    accs = []
    for seed in range(5):
        ds = _blobs(seed)
        cfg = SgdConfig(learning_rate=0.05, epochs=50, batch_size=32, seed=seed)
        model, _record = train(init_model([2, 2], seed=seed), ds, {Provenance.TRUE_LABEL: CE}, cfg)
        accs.append(evaluate_accuracy(model, ds))
    assert np.mean(accs) >= 0.99


def test_epoch_loss_falls_over_first_epochs():
    falling = 0
    for seed in range(5):
        ds = _blobs(seed)
        cfg = SgdConfig(learning_rate=0.01, epochs=5, batch_size=32, seed=seed)
        _model, record = train(init_model([2, 2], seed=seed), ds, {Provenance.TRUE_LABEL: CE}, cfg)
        losses = record.losses
        assert len(losses) == 5
        falling += all(b <= a for a, b in zip(losses, losses[1:]))
    assert falling >= 4


def test_train_requires_loss_for_every_provenance():
    ds = _blobs(0, count=5)
    pseudo = LabeledDataset.from_arrays(ds.features, ds.labels, 2, Provenance.PSEUDO_LABEL)
    with pytest.raises(InvalidInputError):
        train(init_model([2, 2]), ds.concat(pseudo), {Provenance.TRUE_LABEL: CE}, SgdConfig(epochs=1))


def test_evaluate_accuracy_cases():
    always_zero = _linear(np.zeros((3, 2)), np.array([1.0, 0.0, 0.0]))
    ds = LabeledDataset.from_arrays(np.ones((4, 2)), [0, 0, 0, 0], 3)
    assert evaluate_accuracy(always_zero, ds) == 1.0
    balanced = LabeledDataset.from_arrays(np.ones((6, 2)), [0, 1, 2, 0, 1, 2], 3)
    assert evaluate_accuracy(always_zero, balanced) == pytest.approx(1 / 3)
    with pytest.raises(InvalidInputError):
        evaluate_accuracy(always_zero, LabeledDataset.from_arrays(np.empty((0, 2)), [], 3))


def test_checkpoint_round_trip_is_byte_identical():
    model = init_model([2, 4, 3], seed=12)
    with tempfile.TemporaryDirectory() as tmp:
        first = os.path.join(tmp, "a.json")
        second = os.path.join(tmp, "b.json")
        save_checkpoint(model, first)
        loaded = load_checkpoint(first)
        save_checkpoint(loaded, second)
        with open(first, "rb") as fa, open(second, "rb") as fb:
            assert fa.read() == fb.read()
        for la, lb in zip(model.layers, loaded.layers):
            assert np.array_equal(la.weights, lb.weights)


def test_with_weights_replaces_one_layer():
    model = init_model([2, 3], seed=0)
    swapped = with_weights(model, 0, weights=np.ones((3, 2)))
    assert np.all(swapped.layers[0].weights == 1.0)
    assert not np.all(model.layers[0].weights == 1.0)
