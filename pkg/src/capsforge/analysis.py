"""Pupil/iris ratio measurement, per-session histograms and the ratio-threshold baseline."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data.manifest import SESSIONS, Manifest, ManifestRecord
from .io import atomic_write_text, save_image
from .metrics import MetricsReport, confusion_metrics


class PupilNotFoundError(ValueError):
    pass


def pupil_iris_ratio(iris_r: float, pupil_r: float) -> float:
    """Normalised ratio ``p = Pr / Ir`` in (0, 1)."""
    if not (iris_r > 0 and pupil_r > 0):
        raise ValueError(f"radii must be positive, got iris={iris_r}, pupil={pupil_r}")
    if pupil_r >= iris_r:
        raise ValueError(f"pupil radius {pupil_r} must be smaller than iris radius {iris_r}")
    return pupil_r / iris_r


@dataclass(frozen=True)
class RatioRecord:
    record: ManifestRecord | None
    iris_r: float
    pupil_r: float

    def __post_init__(self):
        pupil_iris_ratio(self.iris_r, self.pupil_r)

    @property
    def ratio(self) -> float:
        return pupil_iris_ratio(self.iris_r, self.pupil_r)

    @property
    def inverse(self) -> float:
        """Iris-over-pupil form (always > 1)."""
        return self.iris_r / self.pupil_r


@dataclass(frozen=True)
class RatioThresholds:
    """Alcohol iff ``p > dilation`` or ``p < contraction``."""

    dilation: float
    contraction: float

    def __post_init__(self):
        if not self.contraction < self.dilation:
            raise ValueError(f"contraction threshold {self.contraction} must be below dilation {self.dilation}")

    @classmethod
    def from_reference(cls, sober_ratios, k: float = 2.0) -> "RatioThresholds":
        """Mean plus/minus ``k`` standard deviations of the no-alcohol ratios."""
        r = np.asarray(sober_ratios, dtype=float)
        if r.size < 2:
            raise ValueError("need at least two reference ratios")
        m, s = float(r.mean()), float(r.std(ddof=1))
        return cls(dilation=m + k * s, contraction=m - k * s)

    def predict(self, ratios) -> np.ndarray:
        r = np.asarray(ratios, dtype=float)
        return ((r > self.dilation) | (r < self.contraction)).astype(int)


# ---------------------------------------------------------------- estimation


@dataclass(frozen=True)
class RadiusEstimate:
    iris_r: float
    pupil_r: float
    cx: float
    cy: float

    @property
    def ratio(self) -> float:
        return pupil_iris_ratio(self.iris_r, self.pupil_r)


def fit_circle(xs, ys) -> tuple[float, float, float]:
    """Algebraic least-squares circle through points: (cx, cy, r)."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.size < 3:
        raise ValueError("circle fit needs at least three points")
    A = np.column_stack([xs, ys, np.ones_like(xs)])
    b = xs**2 + ys**2
    (a0, a1, a2), *_ = np.linalg.lstsq(A, b, rcond=None)
    cx, cy = a0 / 2, a1 / 2
    return float(cx), float(cy), float(np.sqrt(a2 + cx**2 + cy**2))


def _profile(img, cx, cy, theta, radii):
    coords = np.stack([cy + radii * np.sin(theta), cx + radii * np.cos(theta)])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def _first_crossing(profile, radii, level, start: int = 0):
    """Sub-sample radius where ``profile`` first rises through ``level``."""
    above = np.nonzero(profile[start:] >= level)[0]
    if above.size == 0:
        return None
    i = start + int(above[0])
    if i == 0:
        return float(radii[0])
    p0, p1 = profile[i - 1], profile[i]
    frac = (level - p0) / (p1 - p0) if p1 != p0 else 0.0
    return float(radii[i - 1] + frac * (radii[i] - radii[i - 1]))


def estimate_radii(
    image: np.ndarray,
    dark_threshold: float = 0.25,
    sigma: float = 1.0,
    min_area: int = 12,
    rays: int = 90,
    iris_half_angle: float = 20.0,
) -> RadiusEstimate:
    """Classical pupil/iris localisation.

    The pupil is the largest connected region darker than ``dark_threshold``;
    its boundary is sampled along rays (skipping the sector under the upper
    lid) at the level halfway between pupil and iris, then circle-fitted.
    The iris boundary is found on near-horizontal rays, where lids never
    occlude it, at the halfway level between iris and sclera; the iris circle
    shares the pupil centre.
    """
    img = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma)
    mask = img < dark_threshold
    labels, n = ndimage.label(mask)
    if n == 0:
        raise PupilNotFoundError("pupil not found: no region darker than threshold")
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    k = int(np.argmax(sizes)) + 1
    if sizes[k - 1] < min_area:
        raise PupilNotFoundError(f"pupil not found: largest dark region has {int(sizes[k - 1])} px")
    region = labels == k
    cy0, cx0 = ndimage.center_of_mass(region)
    r0 = float(np.sqrt(sizes[k - 1] / np.pi))
    pupil_level = float(np.median(img[region]))

    radii = np.arange(0.0, 2.0 * r0 + 12.0, 0.25)
    pts_x, pts_y = [], []
    for theta in np.linspace(-np.pi, np.pi, rays, endpoint=False):
        if abs(theta + np.pi / 2) < np.pi / 4:  # upper lid sector
            continue
        prof = _profile(img, cx0, cy0, theta, radii)
        ring = prof[(radii >= r0 + 3) & (radii <= r0 + 6)]
        if ring.size == 0:
            continue
        r = _first_crossing(prof, radii, 0.5 * (pupil_level + float(np.median(ring))))
        if r is not None:
            pts_x.append(cx0 + r * np.cos(theta))
            pts_y.append(cy0 + r * np.sin(theta))
    if len(pts_x) < 3:
        raise PupilNotFoundError("pupil not found: boundary could not be traced")
    cx, cy, pupil_r = fit_circle(pts_x, pts_y)

    outer = np.arange(0.0, pupil_r + 80.0, 0.25)
    start = int(np.searchsorted(outer, pupil_r + 2.0))
    found = []
    half = np.radians(iris_half_angle)
    for side in (0.0, np.pi):
        for theta in side + np.linspace(-half, half, 11):
            prof = _profile(img, cx, cy, theta, outer)
            inner = prof[start : int(np.searchsorted(outer, pupil_r + 6.0))]
            lo, hi = float(np.median(inner)), float(prof[start:].max())
            r = _first_crossing(prof, outer, 0.5 * (lo + hi), start)
            if r is not None:
                found.append(r)
    if not found:
        raise ValueError("iris boundary not found")
    iris_r = float(np.mean(found))
    if not 0 < pupil_r < iris_r:
        raise ValueError(f"inconsistent estimate: pupil {pupil_r:.2f} px, iris {iris_r:.2f} px")
    return RadiusEstimate(iris_r=iris_r, pupil_r=pupil_r, cx=cx, cy=cy)


def estimate_ratios(manifest: Manifest) -> np.ndarray:
    return np.array([estimate_radii(manifest.load_image(i)).ratio for i in range(len(manifest))])


# ---------------------------------------------------------------- histograms


@dataclass(frozen=True)
class SessionHistogram:
    session: str
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def histogram_edges(bins: int) -> np.ndarray:
    if bins < 1:
        raise ValueError("bins must be positive")
    return np.linspace(0.0, 1.0, bins + 1)


def session_histograms(manifest: Manifest, ratios=None, bins: int = 20) -> list[SessionHistogram]:
    """One histogram per session on shared edges over (0, 1).

    ``ratios`` defaults to the manifest's ground truth.
    """
    r = manifest.truth_ratios() if ratios is None else np.asarray(ratios, dtype=float)
    if r.shape != (len(manifest),):
        raise ValueError(f"expected {len(manifest)} ratios, got shape {r.shape}")
    if np.any((r <= 0) | (r >= 1)):
        raise ValueError("ratios must lie in (0, 1)")
    edges = histogram_edges(bins)
    sessions = np.array([rec.session for rec in manifest])
    out = []
    for s in SESSIONS:
        vals = r[sessions == s]
        if vals.size == 0:
            raise ValueError(f"session {s} has no records")
        counts, _ = np.histogram(vals, bins=edges)
        out.append(SessionHistogram(s, edges, counts, float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0))
    return out


def distribution_overlap(a: SessionHistogram, b: SessionHistogram) -> float:
    """Overlap coefficient ``sum(min(pa, pb))`` of the normalised counts."""
    if a.edges.shape != b.edges.shape or not np.array_equal(a.edges, b.edges):
        raise ValueError("histograms must share identical bin edges")
    if a.total == 0 or b.total == 0:
        raise ValueError("histograms must be non-empty")
    return float(np.minimum(a.counts / a.total, b.counts / b.total).sum())


def histograms_csv(hists: list[SessionHistogram]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["session", "bin_lo", "bin_hi", "count"])
    for h in hists:
        for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
            w.writerow([h.session, f"{lo:.4f}", f"{hi:.4f}", int(c)])
    return buf.getvalue()


def histogram_chart(hist: SessionHistogram, height: int = 100, bar_width: int = 8) -> np.ndarray:
    """White bars on black, one column block per bin, tallest bar at full height."""
    bins = hist.counts.size
    img = np.zeros((height, bins * bar_width))
    peak = max(int(hist.counts.max()), 1)
    for i, c in enumerate(hist.counts):
        h = int(round(height * c / peak))
        if h:
            img[height - h :, i * bar_width : (i + 1) * bar_width - 1] = 1.0
    return img


def write_histograms(hists: list[SessionHistogram], out_dir) -> list[Path]:
    """``histograms.csv`` plus ``hist_<session>.pgm`` charts; returns written paths."""
    out_dir = Path(out_dir)
    paths = [out_dir / "histograms.csv"]
    atomic_write_text(paths[0], histograms_csv(hists))
    for h in hists:
        p = out_dir / f"hist_{h.session}.pgm"
        save_image(p, histogram_chart(h))
        paths.append(p)
    return paths


# ---------------------------------------------------------------- threshold baseline


@dataclass(frozen=True)
class ThresholdResult:
    report: MetricsReport
    best_threshold: float
    best_direction: str  # "above": alcohol iff p > t; "below": alcohol iff p < t
    best_report: MetricsReport


def best_single_threshold(ratios, targets) -> tuple[float, str, MetricsReport]:
    """Sweep every midpoint between sorted ratios (plus both extremes) in both directions."""
    r = np.asarray(ratios, dtype=float)
    y = np.asarray(targets, dtype=int)
    if r.size == 0:
        raise ValueError("no ratios to threshold")
    u = np.unique(r)
    cuts = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    order = np.argsort(r, kind="stable")
    rs, ys = r[order], y[order]
    # below[k] = number of samples with ratio < cuts[k]
    below = np.searchsorted(rs, cuts, side="left")
    pos_below = np.concatenate([[0], np.cumsum(ys)])[below]
    neg_below = below - pos_below
    P, N = int(ys.sum()), int(ys.size - ys.sum())
    correct_above = (P - pos_below) + neg_below  # alcohol iff p > t
    correct_below = pos_below + (N - neg_below)  # alcohol iff p < t
    ia, ib = int(np.argmax(correct_above)), int(np.argmax(correct_below))
    if correct_above[ia] >= correct_below[ib]:
        t, direction = float(cuts[ia]), "above"
        pred = (r > t).astype(int)
    else:
        t, direction = float(cuts[ib]), "below"
        pred = (r < t).astype(int)
    return t, direction, confusion_metrics(pred, y)


def threshold_classifier(ratios, targets, thresholds: RatioThresholds) -> ThresholdResult:
    y = np.asarray(targets, dtype=int)
    report = confusion_metrics(thresholds.predict(ratios), y)
    t, direction, best = best_single_threshold(ratios, y)
    return ThresholdResult(report, t, direction, best)
