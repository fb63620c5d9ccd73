import numpy as np
import pytest

from signattack.gradcam import (
    GUTTER,
    SaliencyMap,
    colormap,
    explanation_triptych,
    gradcam,
    normalize_max,
    overlay,
)
from signattack.model import Conv2D, Dense, Flatten, Model, ModelConfig


def linear_cam_model(rng, res=6, k=4, classes=3):
    """1x1 conv -> flatten -> dense: every logit is linear in the conv output."""
    cfg = ModelConfig(input_resolution=res, num_classes=classes, conv_blocks=((k, 1),),
                      dense_width=0)
    layers = [Conv2D("conv1", 3, k, 1, pad=0), Flatten(), Dense("head", res * res * k, classes)]
    params = {
        "conv1.weight": rng.normal(size=(k, 3, 1, 1)),
        "conv1.bias": rng.normal(size=k),
        "head.weight": rng.normal(size=(res * res * k, classes)),
        "head.bias": rng.normal(size=classes),
    }
    return Model(cfg, layers, params)


def closed_form_cam(model, image, c):
    w = model.params["conv1.weight"][:, :, 0, 0]  # (K, 3)
    acts = image @ w.T + model.params["conv1.bias"]  # (H, W, K)
    h, wd, k = acts.shape
    weights = model.params["head.weight"][:, c].reshape(h, wd, k).mean(axis=(0, 1))
    cam = np.maximum(acts @ weights, 0.0)
    return cam / cam.max() if cam.max() > 0 else cam


@pytest.mark.parametrize("seed", range(5))
def test_matches_closed_form_on_linear_model(seed):
    rng = np.random.default_rng(seed)
    model = linear_cam_model(rng)
    image = rng.uniform(size=(6, 6, 3))
    for c in range(3):
        sal = gradcam(model, image, c)
        assert sal.source_layer == "conv1" and sal.target_class == c
        np.testing.assert_allclose(sal.values, closed_form_cam(model, image, c), rtol=0, atol=1e-10)


def test_zero_gradient_gives_zero_map(rng):
    model = linear_cam_model(rng)
    model.params["head.weight"][...] = 0.0
    sal = gradcam(model, rng.uniform(size=(6, 6, 3)), 1)
    assert not sal.values.any()


def test_default_class_and_layer(mini_model, mini_test):
    x = mini_test[0][0]
    sal = gradcam(mini_model, x)
    assert sal.source_layer == mini_model.conv_layer_names[-1]
    assert sal.target_class == int(np.argmax(mini_model.logits(x)))


def test_contract_on_trained_model(mini_model, mini_test):
    for x in mini_test[0][:10]:
        for c in range(mini_model.num_classes):
            v = gradcam(mini_model, x, c).values
            assert v.shape == (8, 8)
            assert v.min() >= 0 and v.max() <= 1
            assert v.max() == 1.0 or not v.any()
            np.testing.assert_array_equal(normalize_max(v), v)


def test_invariant_to_logit_shift(mini_model, mini_test):
    shifted = mini_model.copy()
    shifted.params["head.bias"] += 5.0
    for x in mini_test[0][:5]:
        a = gradcam(mini_model, x, 2).values
        b = gradcam(shifted, x, 2).values
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_bad_layer_lists_conv_layers(mini_model, mini_test):
    with pytest.raises(ValueError, match="conv1"):
        gradcam(mini_model, mini_test[0][0], layer_id="head")
    with pytest.raises(ValueError):
        gradcam(mini_model, mini_test[0][0], target_class=99)


def test_colormap_stops_and_rounding():
    got = colormap(np.array([0.0, 0.25, 0.5, 0.75, 1.0, 0.125]))
    assert got.tolist() == [[0, 0, 128], [0, 128, 255], [0, 255, 0], [255, 255, 0],
                            [255, 0, 0], [0, 64, 192]]


def test_overlay_blend_extremes(rng):
    img = rng.uniform(size=(5, 5, 3))
    assert np.array_equal(overlay(img, np.zeros((5, 5)), 0.0), img)
    flat = overlay(img, np.zeros((5, 5)), 1.0)
    np.testing.assert_array_equal(flat, np.broadcast_to(np.array([0, 0, 128]) / 255, (5, 5, 3)))
    peak = np.zeros((5, 5))
    peak[2, 3] = 1.0
    np.testing.assert_array_equal(overlay(img, peak, 1.0)[2, 3], np.array([255, 0, 0]) / 255)


def test_overlay_shape_mismatch(rng):
    with pytest.raises(ValueError, match="size"):
        overlay(rng.uniform(size=(5, 5, 3)), np.zeros((4, 5)))


def bump(n=16, width=2.5):
    yy, xx = np.mgrid[0:n, 0:n]
    return np.exp(-((yy - 7) ** 2 + (xx - 9) ** 2) / (2 * width**2))


def test_triptych_layout(rng):
    img = rng.uniform(size=(16, 16, 3))
    sal = SaliencyMap(bump(), "conv1", 0)
    out = explanation_triptych(img, sal)
    assert out.shape == (16, 3 * 16 + 2 * GUTTER, 3)
    np.testing.assert_array_equal(out[:, :16], img)
    assert np.all(out[:, 16:18] == 1.0) and np.all(out[:, 34:36] == 1.0)


def test_low_threshold_keeps_whole_image(rng):
    img = rng.uniform(size=(16, 16, 3))
    out = explanation_triptych(img, bump(width=50.0), region_threshold=1e-9)
    np.testing.assert_array_equal(out[:, 36:], img)


def test_high_threshold_keeps_only_the_peak(rng):
    img = rng.uniform(0.1, 1.0, size=(16, 16, 3))
    out = explanation_triptych(img, bump(), region_threshold=0.99)
    kept = np.argwhere(np.any(out[:, 36:] != 0, axis=-1))
    assert len(kept) >= 1
    assert np.all(np.abs(kept - [7, 9]).max(axis=1) <= 1)


@pytest.mark.parametrize("t", [0.0, 1.0])
def test_threshold_bounds(rng, t):
    with pytest.raises(ValueError):
        explanation_triptych(rng.uniform(size=(4, 4, 3)), np.zeros((4, 4)), t)
