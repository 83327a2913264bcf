import numpy as np
import pytest

from capsforge import tensor as T
from capsforge.capsule import LossWeights
from capsforge.cli import TINY_MODELS, gradcheck_model
from capsforge.models import (
    FCapsNetConfig,
    GeometryError,
    SmallVGGConfig,
    build_capsnet,
    build_fcapsnet,
    build_model,
    build_smallvgg,
    classify,
    load_checkpoint,
    save_checkpoint,
)

TINY = FCapsNetConfig(filters=4, kernel_size=3, capsule_dim=4, dense_width=8, image_shape=(12, 16))


def test_default_parameter_ratio_is_about_half():
    ratio = build_fcapsnet().num_parameters() / build_capsnet().num_parameters()
    assert 0.45 <= ratio <= 0.55


def test_parameter_count_grows_with_capsules():
    counts = [build_capsnet(FCapsNetConfig(num_capsules=k)).num_parameters() for k in (8, 16, 32, 64)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_counting_does_not_materialize_weights():
    model = build_capsnet()
    model.num_parameters()
    assert not any(p.materialized for p in model.parameters())


def test_branches_have_identical_shapes():
    named = build_fcapsnet().named_parameters()
    for suffix in ("conv.weight", "conv.bias", "project.weight", "project.bias"):
        assert named[f"branch_no_alcohol.{suffix}"].shape == named[f"branch_alcohol.{suffix}"].shape


def test_fused_geometry_gives_9600_primary_capsules():
    assert build_fcapsnet().num_primary == 9600


def test_forward_output_contract(rng):
    model = build_fcapsnet(FCapsNetConfig(filters=8), seed=1)
    out = model.forward(rng.uniform(size=(2, 120, 160)))
    assert out.norms.shape == (2, 2)
    assert np.all((out.norms.data >= 0) & (out.norms.data < 1))
    assert out.reconstruction.shape == (2, 120, 160)
    assert np.all((out.reconstruction.data >= 0) & (out.reconstruction.data <= 1))


def test_same_seed_same_bits(rng):
    x = rng.uniform(size=(1, 12, 16))
    a = build_fcapsnet(TINY, seed=5).predict_scores(x)
    b = build_fcapsnet(TINY, seed=5).predict_scores(x)
    np.testing.assert_array_equal(a, b)
    c = build_fcapsnet(TINY, seed=6).predict_scores(x)
    assert not np.array_equal(a, c)


def test_init_independent_of_access_order():
    a = build_fcapsnet(TINY, seed=2)
    b = build_fcapsnet(TINY, seed=2)
    for p in reversed(b.parameters()):
        p.data
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_inference_uses_both_branches(rng):
    model = build_fcapsnet(TINY, seed=0)
    x = rng.uniform(size=(1, 12, 16))
    feats = model.feature_map(x)
    assert feats.shape == (1, 4, 6, 8)
    # zeroing one branch's projection changes the score: both branches feed inference
    before = model.predict_scores(x)
    model.named_parameters()["branch_alcohol.project.weight"].data = np.zeros((2, 4, 1, 1))
    assert not np.allclose(before, model.predict_scores(x))


def test_training_gate_routes_each_class_to_its_branch(rng):
    model = build_fcapsnet(TINY, seed=0)
    x = rng.uniform(size=(2, 12, 16))
    model.zero_grad()
    model.loss(x, np.array([1, 1]), gate=True).backward()
    named = model.named_parameters()
    assert not np.any(named["branch_no_alcohol.conv.weight"].grad)
    assert np.any(named["branch_alcohol.conv.weight"].grad)


@pytest.mark.parametrize("name", sorted(TINY_MODELS))
def test_tiny_model_gradcheck(name):
    err, n = gradcheck_model(name)
    assert n < 50_000
    assert err < 1e-3


def test_geometry_errors():
    with pytest.raises(GeometryError):
        build_fcapsnet(FCapsNetConfig(image_shape=(11, 16)))
    with pytest.raises(GeometryError):
        build_fcapsnet(FCapsNetConfig(kernel_size=11, image_shape=(8, 8)))
    with pytest.raises(GeometryError):
        SmallVGGConfig(image_shape=(12, 16))
    with pytest.raises(ValueError):
        FCapsNetConfig(kernel_size=4)
    with pytest.raises(ValueError):
        FCapsNetConfig(routing_iterations=0)


def test_smallvgg_scores_are_probabilities(rng):
    model = build_smallvgg(SmallVGGConfig(filters=(2, 2, 2), dense_width=8, image_shape=(16, 16)))
    s = model.predict_scores(rng.uniform(size=(3, 16, 16)))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_smallvgg_default_row_constructs():
    model = build_smallvgg(SmallVGGConfig(filters=(32, 32, 32), dense_width=7200))
    assert model.num_parameters() == (32 * 9 + 32) + 2 * (32 * 32 * 9 + 32) + (32 * 15 * 20 * 7200 + 7200) + (7200 * 2 + 2)


def test_smallvgg_dropout_off_at_inference(rng):
    model = build_smallvgg(SmallVGGConfig(filters=(2, 2, 2), dense_width=8, image_shape=(16, 16)), seed=3)
    x = rng.uniform(size=(2, 16, 16))
    np.testing.assert_array_equal(model.predict_scores(x), model.predict_scores(x))


def test_caps_scores_in_unit_interval(rng):
    s = build_capsnet(FCapsNetConfig(filters=4, num_capsules=2, capsule_dim=4, dense_width=8, image_shape=(12, 16))).predict_scores(
        rng.uniform(size=(2, 12, 16))
    )
    assert np.all((s >= 0) & (s < 1))


def test_classify_single_image(rng):
    label, scores = classify(build_fcapsnet(TINY), rng.uniform(size=(12, 16)))
    assert label in (0, 1) and scores.shape == (2,)
    with pytest.raises(ValueError):
        classify(build_fcapsnet(TINY), rng.uniform(size=(1, 12, 16)))


def test_wrong_image_shape_rejected(rng):
    with pytest.raises(ValueError):
        build_fcapsnet(TINY).predict_scores(rng.uniform(size=(1, 10, 16)))


def test_checkpoint_round_trip(tmp_path, rng):
    config = FCapsNetConfig(filters=4, capsule_dim=4, dense_width=8, image_shape=(12, 16), loss=LossWeights(0.05))
    for model in (build_fcapsnet(config, seed=9), build_smallvgg(SmallVGGConfig(filters=(2, 3, 4), dense_width=8, image_shape=(16, 16)), seed=9)):
        path = tmp_path / f"{model.architecture}.fcap"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.architecture == model.architecture and loaded.config == model.config
        for a, b in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        x = rng.uniform(size=(2,) + tuple(model.config.image_shape))
        np.testing.assert_array_equal(model.predict_scores(x), loaded.predict_scores(x))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.fcap"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_build_model_unknown():
    with pytest.raises(ValueError):
        build_model("resnet", FCapsNetConfig())


def test_gradcam_layer_feature_maps_are_4d(rng):
    x = rng.uniform(size=(1, 12, 16))
    model = build_capsnet(FCapsNetConfig(filters=4, num_capsules=2, capsule_dim=4, dense_width=8, image_shape=(12, 16)))
    for layer in model.conv_layers:
        assert model.feature_map(x, layer).ndim == 4
    with T.no_grad():
        assert model.scores_from("conv1", model.feature_map(x, "conv1")).shape == (1, 2)
    with pytest.raises(ValueError):
        model.feature_map(x, "dense")
