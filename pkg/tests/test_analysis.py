import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from capsforge.analysis import (
    PupilNotFoundError,
    RatioRecord,
    RatioThresholds,
    SessionHistogram,
    best_single_threshold,
    distribution_overlap,
    estimate_radii,
    fit_circle,
    histogram_chart,
    histograms_csv,
    pupil_iris_ratio,
    session_histograms,
    threshold_classifier,
    write_histograms,
)
from capsforge.data import Manifest, ManifestRecord, SessionParams, label_for_session, preset_spec, subject_params, synth_image


def render(seed, noise=0.0, blur=0, session="S0", ratio=None, center=None, subject=0):
    spec = preset_spec("overlapping", noise=noise, blur=blur)
    sess = SessionParams.from_spec(spec, session)
    return synth_image(subject_params(spec, subject), sess, np.random.default_rng(seed), ratio=ratio, center=center)


# ---------------------------------------------------------------- ratio


def test_ratio_formula():
    assert pupil_iris_ratio(60, 30) == 0.5
    assert pupil_iris_ratio(60, 59.999) == pytest.approx(1.0, abs=1e-4)
    assert pupil_iris_ratio(60, 59.999) < 1.0


@pytest.mark.parametrize("iris,pupil", [(0, 1), (10, 0), (10, 10), (10, 12), (-5, -2)])
def test_ratio_rejects_invalid(iris, pupil):
    with pytest.raises(ValueError):
        pupil_iris_ratio(iris, pupil)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 100.0), st.floats(0.01, 0.99), st.floats(0.01, 100.0))
def test_ratio_scale_invariant(iris, frac, alpha):
    pupil = frac * iris
    assert pupil_iris_ratio(alpha * iris, alpha * pupil) == pytest.approx(pupil_iris_ratio(iris, pupil), rel=1e-12)


def test_ratio_record_inverse():
    r = RatioRecord(None, 40.0, 10.0)
    assert r.ratio == 0.25 and r.inverse == 4.0


def test_truth_ratio_round_trip(small_dataset):
    for rec, r in zip(small_dataset, small_dataset.truth_ratios()):
        assert pupil_iris_ratio(rec.iris_r, rec.pupil_r) == r


# ---------------------------------------------------------------- radius estimation


def test_fit_circle_exact():
    t = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    cx, cy, r = fit_circle(3 + 7 * np.cos(t), -2 + 7 * np.sin(t))
    assert (cx, cy, r) == pytest.approx((3, -2, 7), abs=1e-10)


def test_clean_images_within_two_percent():
    for seed in range(20):
        img, truth = render(seed, subject=seed % 5)
        est = estimate_radii(img)
        assert abs(est.pupil_r - truth.pupil_r) / truth.pupil_r < 0.02
        assert abs(est.iris_r - truth.iris_r) / truth.iris_r < 0.02


def test_noisy_images_within_five_percent_on_95_percent():
    ok = 0
    for seed in range(200):
        img, truth = render(1000 + seed, noise=0.05, subject=seed % 7)
        try:
            est = estimate_radii(img)
        except ValueError:
            continue
        ok += abs(est.pupil_r - truth.pupil_r) / truth.pupil_r <= 0.05 and abs(est.iris_r - truth.iris_r) / truth.iris_r <= 0.05
    assert ok >= 190


def test_mean_estimated_ratio_matches_spec_mean():
    spec = preset_spec("overlapping")
    sess = SessionParams.from_spec(spec, "S0")
    est = []
    for k in range(200):
        img, _ = synth_image(subject_params(spec, k % 30), sess, np.random.default_rng(k))
        est.append(estimate_radii(img).ratio)
    assert abs(np.mean(est) - spec.ratio_mean[0]) < 0.02


def test_translation_equivariance():
    base, t0 = render(3, center=(79.5, 59.5), ratio=0.45)
    moved, t1 = render(3, center=(83.0, 56.0), ratio=0.45)
    e0, e1 = estimate_radii(base), estimate_radii(moved)
    assert abs((e1.cx - e0.cx) - 3.5) < 1.0 and abs((e1.cy - e0.cy) + 3.5) < 1.0
    assert abs(e1.pupil_r - e0.pupil_r) < 1.0 and abs(e1.iris_r - e0.iris_r) < 1.0


def test_white_image_has_no_pupil():
    with pytest.raises(PupilNotFoundError):
        estimate_radii(np.ones((120, 160)))


# ---------------------------------------------------------------- histograms


def uniform_manifest(n_per_session, rng):
    recs, ratios = [], []
    for s in ("S0", "S1", "S2", "S3", "S4"):
        for k in range(n_per_session):
            r = rng.uniform(0.2, 0.8)
            recs.append(ManifestRecord("P01", s, 0 if s == "S0" else 15, "R", label_for_session(s), f"{s}_{k}.pgm", 40.0, 40.0 * r))
            ratios.append(r)
    return Manifest(recs), np.array(ratios)


def test_uniform_ratios_give_flat_histogram(rng):
    m, _ = uniform_manifest(2000, rng)
    for h in session_histograms(m, bins=20):
        occupied = h.counts[4:16]  # bins covering [0.2, 0.8)
        assert chisquare(occupied).pvalue > 0.01
        assert h.counts[:4].sum() == 0 and h.counts[16:].sum() == 0


def test_default_counts_and_s2_shift(default_dataset):
    hists = session_histograms(default_dataset)
    assert [h.total for h in hists] == [600] * 5
    shifts = [abs(h.mean - hists[0].mean) for h in hists[1:]]
    assert int(np.argmax(shifts)) == 1  # S2


def test_overlap_coefficient_extremes():
    e = np.linspace(0, 1, 5)
    a = SessionHistogram("S0", e, np.array([1, 2, 0, 0]), 0.2, 0.1)
    b = SessionHistogram("S1", e, np.array([0, 0, 3, 1]), 0.7, 0.1)
    assert distribution_overlap(a, a) == 1.0
    assert distribution_overlap(a, b) == 0.0
    with pytest.raises(ValueError):
        distribution_overlap(a, SessionHistogram("S2", np.linspace(0, 1, 4), np.array([1, 1, 1]), 0.5, 0.1))


def test_histogram_exports(tmp_path, rng):
    m, _ = uniform_manifest(50, rng)
    hists = session_histograms(m, bins=10)
    text = histograms_csv(hists)
    assert text.splitlines()[0] == "session,bin_lo,bin_hi,count"
    assert len(text.splitlines()) == 1 + 5 * 10
    chart = histogram_chart(hists[0])
    assert chart.shape == (100, 80) and chart.max() == 1.0
    paths = write_histograms(hists, tmp_path)
    assert all(p.exists() for p in paths) and len(paths) == 6


def test_histograms_reject_missing_session(rng):
    m, _ = uniform_manifest(3, rng)
    with pytest.raises(ValueError):
        session_histograms(m.filter(lambda r: r.session != "S3"))


# ---------------------------------------------------------------- threshold baseline


def test_separable_ratios_threshold_perfect():
    r = np.array([0.3, 0.32, 0.35, 0.5, 0.55, 0.6])
    y = np.array([0, 0, 0, 1, 1, 1])
    t, direction, rep = best_single_threshold(r, y)
    assert rep.accuracy == 1.0 and direction == "above" and 0.35 < t < 0.5


def test_degenerate_band_predicts_no_alcohol():
    r = np.array([0.3, 0.4, 0.5, 0.6])
    y = np.array([0, 1, 0, 1])
    res = threshold_classifier(r, y, RatioThresholds(dilation=1.0, contraction=0.0))
    assert res.report.tnr == 1.0 and res.report.tpr == 0.0


def test_reference_band():
    th = RatioThresholds.from_reference([0.4, 0.42, 0.44, 0.46])
    assert th.contraction < 0.43 < th.dilation
    np.testing.assert_array_equal(th.predict([0.43, 0.9, 0.1]), [0, 1, 1])
    with pytest.raises(ValueError):
        RatioThresholds(dilation=0.3, contraction=0.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 0.99), st.integers(0, 1)), min_size=1, max_size=60))
def test_swept_threshold_never_below_majority(pairs):
    r = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    _, _, rep = best_single_threshold(r, y)
    prior = max(y.mean(), 1 - y.mean())
    assert rep.accuracy >= prior - 1e-12
