import numpy as np
import pytest

from capsforge.explain import (
    Heatmap,
    annulus_mask,
    annulus_mass,
    average_heatmap,
    colormap,
    gradcam,
    gradcam_batch,
    heatmap_csv,
    normalize,
    overlay,
    total_variation,
    upsample,
)
from capsforge.io import load_color_image, save_color_image
from capsforge.models import FCapsNetConfig, SmallVGGConfig, build_capsnet, build_fcapsnet, build_smallvgg

SMALL = FCapsNetConfig(filters=4, capsule_dim=4, dense_width=8)


@pytest.fixture(scope="module")
def fcaps():
    return build_fcapsnet(SMALL, seed=0)


@pytest.fixture(scope="module")
def alcohol_images(small_dataset):
    return small_dataset.filter(lambda r: r.target == 1).load_images()


def test_zero_model_zero_image_vanishes():
    model = build_fcapsnet(SMALL, seed=0)
    for p in model.parameters():
        p.data = np.zeros(p.shape)
    hm = gradcam(model, np.zeros((120, 160)), 1)
    assert hm.vanished
    assert not hm.values.any()


@pytest.mark.parametrize("variant", ["cam", "plusplus"])
def test_values_normalized(fcaps, alcohol_images, variant):
    for hm in gradcam_batch(fcaps, alcohol_images[:4], 1, variant=variant):
        assert hm.shape == (120, 160)
        assert hm.values.min() == 0.0 and hm.values.max() == 1.0


def test_deterministic(fcaps, alcohol_images):
    a = gradcam(fcaps, alcohol_images[0], 1)
    b = gradcam(fcaps, alcohol_images[0], 1)
    np.testing.assert_array_equal(a.values, b.values)


def test_batch_matches_single(fcaps, alcohol_images):
    batch = gradcam_batch(fcaps, alcohol_images[:3], 0)
    for img, hm in zip(alcohol_images[:3], batch):
        np.testing.assert_allclose(gradcam(fcaps, img, 0).values, hm.values, atol=1e-12)


def test_single_image_average_equals_gradcam(fcaps, alcohol_images):
    avg = average_heatmap(fcaps, alcohol_images[:1], 1)
    np.testing.assert_allclose(avg.values, gradcam(fcaps, alcohol_images[0], 1).values, atol=1e-12)


def test_identical_images_average_equals_single(fcaps, alcohol_images):
    stack = np.repeat(alcohol_images[:1], 5, axis=0)
    avg = average_heatmap(fcaps, stack, 1, batch_size=2)
    np.testing.assert_allclose(avg.values, gradcam(fcaps, alcohol_images[0], 1).values, atol=1e-12)


def test_average_is_smoother(tmp_path):
    from capsforge.data import preset_spec, synth_dataset

    m = synth_dataset(preset_spec("separable", subjects=5, frames=5, seed=11), tmp_path)
    imgs = m.filter(lambda r: r.target == 1).load_images()
    assert len(imgs) == 100
    model = build_fcapsnet(SMALL, seed=4)
    singles = gradcam_batch(model, imgs, 1)
    avg = average_heatmap(model, imgs, 1)
    assert total_variation(avg.values) < min(total_variation(h.values) for h in singles)


def test_average_rejects_empty(fcaps):
    with pytest.raises(ValueError):
        average_heatmap(fcaps, np.zeros((0, 120, 160)), 1)


def test_architecture_generic(alcohol_images):
    vgg = build_smallvgg(SmallVGGConfig(filters=(2, 2, 2), dense_width=8), seed=1)
    caps = build_capsnet(FCapsNetConfig(filters=4, num_capsules=2, capsule_dim=4, dense_width=8), seed=1)
    for model in (vgg, caps):
        for layer in model.conv_layers:
            hm = gradcam(model, alcohol_images[0], 1, layer=layer)
            assert hm.shape == (120, 160) and hm.layer == layer
            assert 0.0 <= hm.values.min() and hm.values.max() <= 1.0


def test_non_conv_layer_rejected(fcaps, alcohol_images):
    with pytest.raises(ValueError):
        gradcam(fcaps, alcohol_images[0], 1, layer="dense")
    with pytest.raises(ValueError):
        gradcam(fcaps, alcohol_images[0], 1, variant="guided")
    with pytest.raises(ValueError):
        gradcam(fcaps, alcohol_images[0], 2)


def test_gradcam_after_training_step(alcohol_images):
    # stale parameter gradients from a training step must not block saliency
    model = build_fcapsnet(SMALL, seed=2)
    model.loss(alcohol_images[:2], np.array([1, 1])).backward()
    hm = gradcam(model, alcohol_images[0], 1)
    assert hm.shape == (120, 160)


# ---------------------------------------------------------------- rendering


def test_upsample_constant_and_corners():
    np.testing.assert_allclose(upsample(np.full((3, 4), 0.7), (12, 16)), 0.7)
    up = upsample(np.array([[0.0, 1.0]]), (1, 4))
    np.testing.assert_allclose(up, [[0.0, 0.25, 0.75, 1.0]])


def test_normalize_flat_input_flags():
    values, flat = normalize(np.full((2, 2), 3.0))
    assert flat and not values.any()


def test_overlay_tints():
    img = np.full((4, 5), 0.5)
    blue = overlay(np.zeros((4, 5)), img)
    np.testing.assert_allclose(blue[..., 0], 0.3)
    np.testing.assert_allclose(blue[..., 1], 0.3)
    np.testing.assert_allclose(blue[..., 2], 0.7)
    red = overlay(Heatmap(np.ones((4, 5)), "fused", 1), img)
    np.testing.assert_allclose(red[..., 0], 0.7)
    np.testing.assert_allclose(red[..., 2], 0.3)
    with pytest.raises(ValueError):
        overlay(np.zeros((4, 4)), img)


def test_colormap_endpoints():
    np.testing.assert_array_equal(colormap(np.array([0.0, 1.0])), [[0, 0, 1], [1, 0, 0]])


def test_overlay_ppm_round_trip(tmp_path, rng):
    rgb = overlay(rng.uniform(size=(6, 7)), rng.uniform(size=(6, 7)))
    save_color_image(tmp_path / "o.ppm", rgb)
    back = load_color_image(tmp_path / "o.ppm")
    q = np.round(rgb * 255) / 255
    np.testing.assert_allclose(back, q, atol=1e-12)
    save_color_image(tmp_path / "o2.ppm", back)
    assert (tmp_path / "o.ppm").read_bytes() == (tmp_path / "o2.ppm").read_bytes()


def test_annulus_helpers():
    mask = annulus_mask((20, 20), 10, 10, 3, 6)
    assert mask[10, 15] and not mask[10, 10] and not mask[0, 0]
    values = mask.astype(float)
    assert annulus_mass(values, mask) == (1.0, 0.0)


def test_heatmap_csv_grid():
    text = heatmap_csv(Heatmap(np.array([[0.0, 0.5], [1.0, 0.25]]), "fused", 1))
    assert text.splitlines() == ["0.000000,0.500000", "1.000000,0.250000"]
