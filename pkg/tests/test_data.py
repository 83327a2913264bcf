import hashlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsforge.analysis import distribution_overlap, session_histograms
from capsforge.data import (
    HEADER,
    AugmentParams,
    AugmentSpec,
    Manifest,
    ManifestError,
    ManifestRecord,
    SessionParams,
    SubjectOverlapError,
    SynthError,
    SynthSpec,
    apply_params,
    augment,
    augment_dataset,
    label_for_session,
    preset_spec,
    sample_params,
    split_subject_disjoint,
    subject_params,
    synth_dataset,
    synth_image,
    verify_subject_disjoint,
)
from capsforge.data.synth import PUPIL_LEVEL
from capsforge.io import ImageFormatError, load_color_image, load_image, save_color_image, save_image


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def fake_manifest(n_subjects, per_subject=2):
    recs = []
    for s in range(n_subjects):
        for k in range(per_subject):
            session = ("S0", "S2")[k % 2]
            recs.append(ManifestRecord(f"P{s + 1:02d}", session, 0 if session == "S0" else 30, "R", label_for_session(session), f"x{s}_{k}.pgm"))
    return Manifest(recs)


# ---------------------------------------------------------------- generator


def test_default_spec_matches_database_table():
    spec = SynthSpec()
    assert spec.total_images == 3000
    assert spec.subjects * spec.frames == 600


def test_clean_image_pixels_follow_construction():
    spec = preset_spec("overlapping", noise=0.0, blur=0)
    subj = subject_params(spec, 0)
    sess = SessionParams.from_spec(spec, "S0")
    img, truth = synth_image(subj, sess, np.random.default_rng(0), ratio=0.45, center=(79.5, 59.5))
    cy, cx = 59, 79  # nearest pixel to the center (offset 0.5 px per axis)
    assert img[cy, cx] == pytest.approx(PUPIL_LEVEL, abs=1e-12)
    mid = 0.5 * (truth.pupil_r + truth.iris_r)
    x = int(round(truth.cx + mid))
    lo = subj.iris_level - subj.texture_amplitude
    hi = subj.iris_level + subj.texture_amplitude
    assert lo - 1e-12 <= img[int(round(truth.cy)), x] <= hi + 1e-12


def test_truth_ratio_is_render_ratio():
    spec = preset_spec()
    subj = subject_params(spec, 1)
    _, truth = synth_image(subj, SessionParams.from_spec(spec, "S3"), np.random.default_rng(1), ratio=0.37)
    assert truth.pupil_r == 0.37 * truth.iris_r
    assert truth.ratio == truth.pupil_r / truth.iris_r
    assert truth.ratio == pytest.approx(0.37, rel=1e-15)


def test_iris_outside_frame_rejected():
    spec = preset_spec()
    with pytest.raises(SynthError):
        synth_image(subject_params(spec, 0), SessionParams.from_spec(spec, "S0"), np.random.default_rng(0), center=(5.0, 60.0))


def test_spec_validation():
    with pytest.raises(SynthError):
        SynthSpec(subjects=0)
    with pytest.raises(SynthError):
        SynthSpec(ratio_mean=(0.4, 0.5))
    with pytest.raises(SynthError):
        preset_spec("nonexistent")


def test_dataset_layout_and_determinism(tmp_path):
    spec = preset_spec("overlapping", subjects=4, frames=5, seed=11)
    a = synth_dataset(spec, tmp_path / "a")
    b = synth_dataset(spec, tmp_path / "b", workers=1)
    assert len(a) == 100
    assert [r.session for r in a].count("S0") == 20
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    for rec in a:
        assert rec.label == label_for_session(rec.session)
        assert (tmp_path / "a" / rec.path).exists()
    loaded = Manifest.load(tmp_path / "a" / "manifest.csv")
    assert loaded.records == a.records
    c = synth_dataset(replace(spec, seed=12), tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SynthError):
        synth_dataset(preset_spec(subjects=1, frames=1), blocker / "sub")


def test_overlapping_preset_sessions_overlap(tmp_path):
    m = synth_dataset(preset_spec("overlapping", subjects=10, frames=20, seed=0), tmp_path)
    hists = session_histograms(m, bins=20)
    s0, s2 = hists[0], hists[2]
    assert distribution_overlap(s0, s2) > 0.5
    assert 0.3 < distribution_overlap(s0, s2) < 0.9


# ---------------------------------------------------------------- manifest


def test_label_is_function_of_session():
    assert label_for_session("S0") == "no_alcohol"
    assert all(label_for_session(s) == "alcohol" for s in ("S1", "S2", "S3", "S4"))
    with pytest.raises(ManifestError):
        label_for_session("S9")
    with pytest.raises(ManifestError):
        ManifestRecord("P01", "S0", 0, "R", "alcohol", "a.pgm")


def test_manifest_round_trip_preserves_floats(tmp_path):
    recs = [ManifestRecord("P01", "S1", 15, "L", "alcohol", "img/a.pgm", 33.123456789012345, 14.1, 80.25, 59.75)]
    m = Manifest(recs, tmp_path)
    m.save(tmp_path / "manifest.csv")
    assert Manifest.load(tmp_path / "manifest.csv").records == recs
    assert (tmp_path / "manifest.csv").read_text().splitlines()[0] == ",".join(HEADER)


def test_manifest_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(",".join(HEADER) + "\nP01,S0,0,R,no_alcohol,a.pgm,30,12,1,1\nP01,S0,0,X,no_alcohol,a.pgm,,,,\n")
    with pytest.raises(ManifestError, match=":3:"):
        Manifest.load(p)
    p.write_text("wrong,header\n")
    with pytest.raises(ManifestError):
        Manifest.load(p)


def test_manifest_save_elsewhere_relocates(tmp_path, small_dataset):
    out = tmp_path / "deeper" / "dir"
    small_dataset.save(out / "m.csv")
    moved = Manifest.load(out / "m.csv")
    np.testing.assert_array_equal(moved.load_image(0), small_dataset.load_image(0))


def test_saved_manifest_bytes_do_not_depend_on_destination(tmp_path, small_dataset):
    small_dataset.save(tmp_path / "a" / "m.csv")
    small_dataset.save(tmp_path / "b" / "c" / "m.csv")
    assert (tmp_path / "a" / "m.csv").read_bytes() == (tmp_path / "b" / "c" / "m.csv").read_bytes()


# ---------------------------------------------------------------- split


def test_split_30_subjects_21_9():
    tr, te = split_subject_disjoint(fake_manifest(30), 0.7, seed=0)
    assert (len(tr.subjects()), len(te.subjects())) == (21, 9)
    assert not set(tr.subjects()) & set(te.subjects())


def test_split_two_subjects():
    tr, te = split_subject_disjoint(fake_manifest(2), 0.7)
    assert (len(tr.subjects()), len(te.subjects())) == (1, 1)


def test_split_rejects_single_subject():
    with pytest.raises(ManifestError):
        split_subject_disjoint(fake_manifest(1))


def test_verify_detects_overlap():
    m = fake_manifest(3)
    with pytest.raises(SubjectOverlapError):
        verify_subject_disjoint(m, m.subset([0]))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_disjoint_partition(n, fraction, seed):
    m = fake_manifest(n)
    tr, te = split_subject_disjoint(m, fraction, seed)
    assert len(tr) + len(te) == len(m)
    assert not set(tr.subjects()) & set(te.subjects())
    assert tr.subjects() and te.subjects()
    again = split_subject_disjoint(m, fraction, seed)
    assert again[0].records == tr.records


# ---------------------------------------------------------------- augmentation


def test_identity_draw_is_identity(rng):
    img = rng.uniform(size=(120, 160))
    np.testing.assert_allclose(apply_params(img, AugmentParams()), img, atol=1e-9, rtol=0)


def test_mirroring_refused():
    with pytest.raises(ValueError):
        AugmentSpec(mirror=True)


def test_draws_stay_within_bounds():
    spec = AugmentSpec()
    r = np.random.default_rng(0)
    for _ in range(1000):
        p = sample_params(spec, r, (120, 160))
        assert abs(p.angle) <= 10.0
        assert abs(p.tx) <= 0.2 * 160 and abs(p.ty) <= 0.2 * 120
        assert 0.85 <= p.zoom <= 1.15


def test_bright_pixel_never_mirrors():
    img = np.zeros((120, 160))
    img[60, 0] = 1.0
    spec = AugmentSpec()
    r = np.random.default_rng(7)
    # rotation about the centre plus zoom moves the edge pixel by at most this much
    cx, cy = 79.5, 59.5
    reach = np.hypot(0 - cx, 60 - cy)
    bound = 0.2 * 160 + reach * (1.15 * 1.0 - np.cos(np.radians(10)) * 0.85) + reach * np.sin(np.radians(10))
    for _ in range(1000):
        p = sample_params(spec, r, img.shape)
        x, y = p.map_point(0.0, 60.0, img.shape)
        assert abs(x - 0.0) <= bound
        assert x < cx  # stays on the side it started
        out = apply_params(img, p)
        if out.max() > 0.25 and 0 <= x < 160:
            ys, xs = np.nonzero(out > 0.25)
            assert xs.mean() < cx


def test_augment_maps_truth_geometry(small_dataset, tmp_path):
    m = small_dataset.subset(range(2))
    out = augment_dataset(m, AugmentSpec(multiplier=3), tmp_path / "aug", seed=4)
    assert len(out) == 6
    rec = out[0]
    assert rec.subject_id == m[0].subject_id and rec.session == m[0].session
    assert 0.85 * m[0].iris_r <= rec.iris_r <= 1.15 * m[0].iris_r
    assert rec.pupil_r / rec.iris_r == pytest.approx(m[0].pupil_r / m[0].iris_r, rel=1e-12)


def test_augment_keep_originals_and_determinism(small_dataset, tmp_path):
    m = small_dataset.subset(range(3))
    a = augment_dataset(m, AugmentSpec(multiplier=2, keep_originals=True), tmp_path / "a", seed=1)
    b = augment_dataset(m, AugmentSpec(multiplier=2, keep_originals=True), tmp_path / "b", seed=1, workers=1)
    assert len(a) == 3 + 6
    np.testing.assert_array_equal(a.load_images(), b.load_images())


def test_augment_single_image(rng):
    img = rng.uniform(size=(120, 160))
    out, p = augment(img, AugmentSpec(), np.random.default_rng(0), return_params=True)
    assert out.shape == img.shape and isinstance(p, AugmentParams)
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


# ---------------------------------------------------------------- image io


def test_pgm_round_trip_quantization(tmp_path, rng):
    img = rng.uniform(size=(12, 16))
    save_image(tmp_path / "a.pgm", img)
    assert np.abs(load_image(tmp_path / "a.pgm") - img).max() <= 1 / 255


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_pgm_extremes_exact(tmp_path, value):
    img = np.full((5, 7), value)
    save_image(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(load_image(tmp_path / "a.pgm"), img)


def test_pgm_bad_dimensions(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P5\n0 4\n255\n")
    with pytest.raises(ImageFormatError):
        load_image(p)
    save_image(p, np.zeros((4, 5)))
    with pytest.raises(ImageFormatError):
        load_image(p, expected_shape=(5, 4))
    p.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ImageFormatError):
        load_image(p)


def test_ppm_round_trip(tmp_path, rng):
    img = np.round(rng.uniform(size=(4, 6, 3)) * 255) / 255
    save_color_image(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(load_color_image(tmp_path / "a.ppm"), img)
