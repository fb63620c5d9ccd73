import numpy as np
import pytest

from signattack.data import DatasetSplit, LabeledExample, synth_signs
from signattack.model import (
    Model,
    ModelConfig,
    TrainConfig,
    WeightFileError,
    dump_weights,
    evaluate,
    load_weights,
    loads_weights,
    lr_at,
    predict,
    predict_batch,
    prediction_from_probs,
    save_weights,
    sgd_step,
    train,
)

SMALL = ModelConfig(input_resolution=8, num_classes=4, conv_blocks=((4, 3),), dense_width=8)


def zero_model(cfg):
    m = Model(cfg, seed=0)
    for v in m.params.values():
        v[...] = 0.0
    return m


def test_default_architecture():
    m = Model(ModelConfig())
    shapes = m.param_shapes()
    assert shapes["conv1.weight"] == (16, 3, 3, 3)
    assert shapes["conv3.weight"] == (64, 32, 3, 3)
    assert shapes["dense1.weight"] == (4 * 4 * 64, 128)
    assert shapes["head.weight"] == (128, 29)
    assert m.conv_layer_names == ["conv1", "conv2", "conv3"]


@pytest.mark.parametrize("kwargs", [
    {"num_classes": 1},
    {"input_resolution": 20},
    {"conv_blocks": ((8, 2),)},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_glorot_bounds_and_zero_bias():
    m = Model(SMALL, seed=1)
    w = m.params["conv1.weight"]
    bound = np.sqrt(6.0 / (3 * 9 + 4 * 9))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.8 * bound
    assert not m.params["conv1.bias"].any()


def test_uniform_output_is_not_recognized():
    m = zero_model(ModelConfig(input_resolution=8, conv_blocks=((4, 3),), dense_width=8))
    p = predict(m, np.full((8, 8, 3), 0.5), 0.25)
    assert not p.recognized
    assert p.label == 0  # ties resolve to the lowest index
    assert p.score == pytest.approx(1 / 29)
    assert predict(m, np.full((8, 8, 3), 0.5), 0.0).recognized


def test_tie_breaking_and_threshold_rule():
    p = prediction_from_probs(np.array([0.1, 0.45, 0.45]), 0.45)
    assert (p.label, p.recognized) == (1, True)
    assert not prediction_from_probs(np.array([0.3, 0.3, 0.4 - 1e-9]), 0.4).recognized


def test_probabilities_sum_to_one(rng):
    m = Model(SMALL, seed=2)
    probs = m.probabilities(rng.uniform(size=(10, 8, 8, 3)))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    for p, pred in zip(probs, predict_batch(m, rng.uniform(size=(10, 8, 8, 3)))):
        assert 0 <= pred.score <= 1


def test_wrong_resolution():
    with pytest.raises(ValueError, match="does not match"):
        predict(Model(SMALL), np.zeros((16, 16, 3)))


def _examples(labels, rng, res=8):
    return [LabeledExample(rng.uniform(size=(res, res, 3)), int(c)) for c in labels]


def test_constant_model_accuracy_is_one_over_c(rng):
    m = zero_model(SMALL)
    m.params["head.bias"][2] = 1.0
    examples = _examples(np.repeat(np.arange(4), 5), rng)
    acc, conf = evaluate(m, examples)
    assert acc == 0.25
    np.testing.assert_array_equal(conf.sum(axis=1), [5, 5, 5, 5])
    np.testing.assert_array_equal(conf[:, 2], [5, 5, 5, 5])


def test_overfit_small_set_gives_identity_confusion():
    data = synth_signs(4, 5, 8, seed=1)
    tiny = DatasetSplit(data.train, data.train, [], 1)
    model, _ = train(SMALL, tiny, TrainConfig(epochs=150, learning_rate=0.1,
                                               weight_decay=0.0, batch_size=7, seed=0))
    acc, conf = evaluate(model, data.train)
    assert acc == 1.0
    assert np.count_nonzero(conf - np.diag(np.diag(conf))) == 0


def test_zero_learning_rate_keeps_weights():
    start = Model(SMALL, seed=5)
    before = {k: v.copy() for k, v in start.params.items()}
    data = synth_signs(4, 10, 8, seed=0)
    model, _ = train(SMALL, data, TrainConfig(epochs=2, learning_rate=0.0, weight_decay=0.0),
                     model=start)
    for k in before:
        assert np.array_equal(model.params[k], before[k])


def test_decay_only_step_shrinks_weights_not_biases():
    m = Model(SMALL, seed=0)
    m.params["conv1.bias"][:] = 1.0
    zero = {k: np.zeros_like(v) for k, v in m.params.items()}
    norm = sum(np.sum(v**2) for k, v in m.params.items() if k.endswith(".weight"))
    sgd_step(m.params, zero, 0.1, 0.0005)
    after = sum(np.sum(v**2) for k, v in m.params.items() if k.endswith(".weight"))
    assert after < norm
    assert np.all(m.params["conv1.bias"] == 1.0)


def test_step_schedule():
    cfg = TrainConfig(epochs=20, learning_rate=0.05)
    assert [lr_at(e, cfg) for e in (0, 9, 10, 14, 15, 19)] == pytest.approx(
        [0.05, 0.05, 0.005, 0.005, 0.0005, 0.0005])


def test_separable_toy_loss_non_increasing(rng):
    dark = [LabeledExample(np.clip(rng.normal(0.2, 0.05, (8, 8, 3)), 0, 1), 0) for _ in range(40)]
    light = [LabeledExample(np.clip(rng.normal(0.8, 0.05, (8, 8, 3)), 0, 1), 1) for _ in range(40)]
    ex = dark + light
    data = DatasetSplit(ex[::2], ex[1::2], [], 0)
    cfg = ModelConfig(input_resolution=8, num_classes=2, conv_blocks=((4, 3),), dense_width=8)
    _, hist = train(cfg, data, TrainConfig(epochs=12, weight_decay=0.0, batch_size=8, seed=2))
    losses = [h.train_loss for h in hist]
    assert all(b <= a for a, b in zip(losses[1:], losses[2:]))


def test_training_is_deterministic():
    data = synth_signs(4, 10, 8, seed=0)
    a, ha = train(SMALL, data, TrainConfig(epochs=3, seed=9))
    b, hb = train(SMALL, data, TrainConfig(epochs=3, seed=9))
    assert dump_weights(a) == dump_weights(b)
    assert ha == hb


def test_train_errors(rng):
    good = _examples([0, 1, 2, 3], rng)
    with pytest.raises(ValueError, match="empty"):
        train(SMALL, DatasetSplit([], good, [], 0), TrainConfig(epochs=1))
    bad = good + [LabeledExample(np.zeros((8, 8, 3)), 9, source_path="odd.ppm")]
    with pytest.raises(ValueError, match="odd.ppm"):
        train(SMALL, DatasetSplit(bad, good, [], 0), TrainConfig(epochs=1))


def test_round_trip_preserves_predictions(tmp_path, rng):
    m = Model(SMALL, seed=3)
    path = tmp_path / "m.sgn"
    save_weights(m, path)
    back = load_weights(path, expected=SMALL)
    x = rng.uniform(size=(20, 8, 8, 3))
    assert back.logits(x).tobytes() == m.logits(x).tobytes()
    assert path.read_bytes()[:8] == b"SGNSTRM1"


def test_truncated_file_reports_offset():
    blob = dump_weights(Model(SMALL))
    with pytest.raises(WeightFileError, match="offset"):
        loads_weights(blob[: len(blob) // 2])


def test_bad_magic():
    blob = bytearray(dump_weights(Model(SMALL)))
    blob[0:1] = b"X"
    with pytest.raises(WeightFileError, match="unrecognized format"):
        loads_weights(bytes(blob))


def test_checksum_detects_flipped_byte():
    blob = bytearray(dump_weights(Model(SMALL)))
    blob[-20] ^= 0x40
    with pytest.raises(WeightFileError, match="checksum"):
        loads_weights(bytes(blob))


def test_config_mismatch():
    blob = dump_weights(Model(SMALL))
    other = ModelConfig(input_resolution=8, num_classes=5, conv_blocks=((4, 3),), dense_width=8)
    with pytest.raises(WeightFileError, match="does not match"):
        loads_weights(blob, expected=other)
