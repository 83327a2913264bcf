"""Geometric augmentation: rotation, zoom and shift in one resample, never mirroring."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import affine_transform

from ..io import save_image
from ..runtime import parallel_map, substream
from .manifest import Manifest


@dataclass(frozen=True)
class AugmentSpec:
    rotation_degrees: float = 10.0
    shift_fraction: float = 0.2
    zoom_fraction: float = 0.15
    fill: str = "nearest"
    mirror: bool = False
    multiplier: int = 4
    keep_originals: bool = False

    def __post_init__(self):
        if self.mirror:
            raise ValueError("mirroring is forbidden: it would turn a left eye into a right eye")
        if self.fill != "nearest":
            raise ValueError(f"only 'nearest' fill is supported, got {self.fill!r}")
        if self.rotation_degrees < 0 or self.shift_fraction < 0 or not 0 <= self.zoom_fraction < 1:
            raise ValueError("rotation and shift must be non-negative and zoom_fraction in [0, 1)")
        if self.multiplier < 1:
            raise ValueError("multiplier must be at least 1")


@dataclass(frozen=True)
class AugmentParams:
    """One draw: ``angle`` in degrees, shifts in pixels, isotropic ``zoom``."""

    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    zoom: float = 1.0

    def forward(self, shape):
        """Matrix ``A`` and offset ``t`` with ``out_xy = A @ in_xy + t``."""
        h, w = shape
        c = np.array([(w - 1) / 2, (h - 1) / 2])
        a = math.radians(self.angle)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        A = self.zoom * rot
        t = c + np.array([self.tx, self.ty]) - A @ c
        return A, t

    def map_point(self, x: float, y: float, shape) -> tuple[float, float]:
        A, t = self.forward(shape)
        px, py = A @ np.array([x, y]) + t
        return float(px), float(py)


def sample_params(spec: AugmentSpec, rng: np.random.Generator, shape) -> AugmentParams:
    h, w = shape
    return AugmentParams(
        angle=float(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees)),
        tx=float(rng.uniform(-spec.shift_fraction, spec.shift_fraction) * w),
        ty=float(rng.uniform(-spec.shift_fraction, spec.shift_fraction) * h),
        zoom=float(rng.uniform(1 - spec.zoom_fraction, 1 + spec.zoom_fraction)),
    )


def apply_params(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Bilinear resample of the composed map with nearest-edge fill."""
    A, t = params.forward(image.shape)
    inv = np.linalg.inv(A)
    # scipy works in (row, col); swap axes of the inverse map.
    swap = np.array([[0, 1], [1, 0]])
    matrix = swap @ inv @ swap
    offset = swap @ (-inv @ t)
    return affine_transform(image, matrix, offset=offset, order=1, mode="nearest")


def augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator, return_params: bool = False):
    params = sample_params(spec, rng, image.shape)
    out = apply_params(image, params)
    return (out, params) if return_params else out


def augment_dataset(manifest: Manifest, spec: AugmentSpec, out_dir, seed: int = 0, workers: int | None = None) -> Manifest:
    """``multiplier`` augmented copies per record (plus originals if ``keep_originals``).

    Copy ``k`` of record ``i`` draws from the ``augment`` substream keyed by ``(i, k)``; truth
    geometry is carried through the same map.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, k) for i in range(len(manifest)) for k in range(spec.multiplier)]

    def run(job):
        i, k = job
        rec = manifest[i]
        img = manifest.load_image(i)
        out, p = augment(img, spec, substream(seed, "augment", i, k), return_params=True)
        rel = f"images/aug/{rec.session}/{Path(rec.path).stem}_a{k}.pgm"
        save_image(out_dir / rel, out)
        truth = {}
        if rec.has_truth and rec.cx is not None and rec.cy is not None:
            cx, cy = p.map_point(rec.cx, rec.cy, img.shape)
            truth = dict(iris_r=rec.iris_r * p.zoom, pupil_r=rec.pupil_r * p.zoom, cx=cx, cy=cy)
        return replace(rec, path=rel, **truth)

    records = parallel_map(run, jobs, workers)
    if spec.keep_originals:
        records = list(manifest.relocated(out_dir).records) + records
    result = Manifest(records, out_dir)
    result.save(out_dir / "manifest.csv")
    return result
