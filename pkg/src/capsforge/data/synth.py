"""Procedural periocular NIR images with exact pupil/iris ground truth.

Each image is a stack of anti-aliased layers (skin, sclera opening bounded by
two eyelid arcs, textured iris disc, dark pupil disc) followed by an optional
horizontal box blur (involuntary eye motion) and Gaussian sensor noise.
Alcohol sessions shift the pupil/iris ratio, droop the upper lid and blur.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from ..io import save_image
from ..runtime import parallel_map, substream
from .manifest import SESSION_MINUTES, SESSIONS, Manifest, ManifestRecord, label_for_session

IMAGE_SHAPE = (120, 160)
PUPIL_LEVEL = 0.08
TEXTURE_COMPONENTS = 12
RATIO_BOUNDS = (0.2, 0.65)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Dataset-level generator settings; one ``ratio_mean``/``ratio_sd`` entry per session."""

    subjects: int = 30
    frames: int = 20
    image_shape: tuple = IMAGE_SHAPE
    ratio_mean: tuple = (0.42, 0.44, 0.46, 0.45, 0.44)
    ratio_sd: tuple = (0.04, 0.04, 0.04, 0.04, 0.04)
    subject_sd: float = 0.015
    blur: int = 5
    droop: float = 0.15
    noise: float = 0.02
    seed: int = 0
    preset: str = "overlapping"

    def __post_init__(self):
        if self.subjects < 1 or self.frames < 1:
            raise SynthError("subjects and frames must be positive")
        if len(self.ratio_mean) != len(SESSIONS) or len(self.ratio_sd) != len(SESSIONS):
            raise SynthError(f"ratio_mean and ratio_sd need {len(SESSIONS)} entries")
        if not all(0.0 < m < 1.0 for m in self.ratio_mean):
            raise SynthError("session ratio means must lie in (0, 1)")
        if min(self.ratio_sd) < 0 or self.subject_sd < 0 or self.noise < 0:
            raise SynthError("spreads and noise must be non-negative")
        if self.blur < 0 or not 0.0 <= self.droop < 0.5:
            raise SynthError("blur must be >= 0 and droop in [0, 0.5)")
        if self.seed < 0:
            raise SynthError("seed must be non-negative")

    @property
    def total_images(self) -> int:
        return self.subjects * len(SESSIONS) * self.frames


PRESETS = {
    # Ratio alone is weak evidence; blur and droop carry the rest.
    "overlapping": {},
    # Classes differ grossly in every cue.
    "separable": dict(
        ratio_mean=(0.30, 0.50, 0.58, 0.54, 0.52),
        ratio_sd=(0.02, 0.02, 0.02, 0.02, 0.02),
        subject_sd=0.01,
        blur=9,
        droop=0.3,
    ),
}


def preset_spec(name: str = "overlapping", **overrides) -> SynthSpec:
    if name not in PRESETS:
        raise SynthError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthSpec(**{**PRESETS[name], "preset": name, **overrides})


@dataclass(frozen=True)
class SubjectParams:
    subject_id: str
    iris_radius: float
    ratio_offset: float
    iris_level: float
    sclera_level: float
    skin_level: float
    texture_amplitude: float
    angular: np.ndarray = field(repr=False)
    radial: np.ndarray = field(repr=False)
    phase: np.ndarray = field(repr=False)
    weight: np.ndarray = field(repr=False)

    @classmethod
    def draw(cls, subject_id: str, rng: np.random.Generator, subject_sd: float = 0.0) -> "SubjectParams":
        w = rng.uniform(0.5, 1.0, TEXTURE_COMPONENTS)
        return cls(
            subject_id=subject_id,
            iris_radius=float(rng.uniform(30.0, 36.0)),
            ratio_offset=float(rng.normal(0.0, subject_sd)) if subject_sd > 0 else 0.0,
            iris_level=float(rng.uniform(0.40, 0.48)),
            sclera_level=float(rng.uniform(0.78, 0.86)),
            skin_level=float(rng.uniform(0.52, 0.62)),
            texture_amplitude=float(rng.uniform(0.05, 0.08)),
            angular=rng.integers(6, 40, TEXTURE_COMPONENTS).astype(float),
            radial=rng.uniform(0.5, 4.0, TEXTURE_COMPONENTS),
            phase=rng.uniform(0.0, 2 * np.pi, (2, TEXTURE_COMPONENTS)),
            weight=w / w.sum(),
        )

    def texture(self, theta: np.ndarray, rho: np.ndarray) -> np.ndarray:
        """Band-limited iris texture bounded by ``texture_amplitude``."""
        t = np.zeros_like(theta)
        for k in range(TEXTURE_COMPONENTS):
            t += self.weight[k] * np.sin(self.angular[k] * theta + self.phase[0, k]) * np.cos(
                np.pi * self.radial[k] * rho + self.phase[1, k]
            )
        return self.texture_amplitude * t


@dataclass(frozen=True)
class SessionParams:
    session: str
    ratio_mean: float
    ratio_sd: float
    blur: int = 0
    droop: float = 0.0
    noise: float = 0.0

    @property
    def minutes(self) -> int:
        return SESSION_MINUTES[self.session]

    @property
    def alcohol(self) -> bool:
        return label_for_session(self.session) == "alcohol"

    @classmethod
    def from_spec(cls, spec: SynthSpec, session: str) -> "SessionParams":
        i = SESSIONS.index(session)
        drunk = session != "S0"
        return cls(
            session=session,
            ratio_mean=spec.ratio_mean[i],
            ratio_sd=spec.ratio_sd[i],
            blur=spec.blur if drunk else 0,
            droop=spec.droop if drunk else 0.0,
            noise=spec.noise,
        )


@dataclass(frozen=True)
class Truth:
    iris_r: float
    pupil_r: float
    cx: float
    cy: float

    @property
    def ratio(self) -> float:
        return self.pupil_r / self.iris_r


def _coverage(radius, dist):
    """Anti-aliased disc membership: 1 inside, 0 outside, linear over one pixel."""
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def synth_image(
    subject: SubjectParams,
    session: SessionParams,
    rng: np.random.Generator,
    eye: str = "R",
    ratio: float | None = None,
    center: tuple | None = None,
    shape: tuple = IMAGE_SHAPE,
) -> tuple[np.ndarray, Truth]:
    """Render one eye; returns the image in [0,1] and its exact geometry.

    ``ratio`` and ``center`` (x, y) override the random draws.
    """
    h, w = shape
    if ratio is None:
        ratio = float(np.clip(rng.normal(session.ratio_mean + subject.ratio_offset, session.ratio_sd), *RATIO_BOUNDS))
    if not 0.0 < ratio < 1.0:
        raise SynthError(f"ratio must lie in (0, 1), got {ratio}")
    if center is None:
        center = ((w - 1) / 2 + rng.uniform(-4, 4), (h - 1) / 2 + rng.uniform(-4, 4))
    cx, cy = float(center[0]), float(center[1])
    ir = subject.iris_radius
    pr = ratio * ir
    if cx - ir < 0 or cx + ir > w - 1 or cy - ir < 0 or cy + ir > h - 1:
        raise SynthError(f"iris of radius {ir:.1f} at ({cx:.1f}, {cy:.1f}) exceeds the {h}x{w} frame")

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    dist = np.hypot(dx, dy)

    # Eyelids: parabolic arcs, apex shifted toward the outer corner (mirrored per eye).
    half_width = 2.2 * ir
    skew = (0.12 if eye == "R" else -0.12) * half_width
    u = np.clip((dx - skew) / half_width, -1.0, 1.0)
    upper_open = ir * (1.0 - session.droop + rng.uniform(-0.03, 0.03))
    lower_open = ir * rng.uniform(1.0, 1.1)
    bow = 1.0 - u**2
    upper = cy - upper_open * bow
    lower = cy + lower_open * bow
    opening = np.clip(yy - upper + 0.5, 0.0, 1.0) * np.clip(lower - yy + 0.5, 0.0, 1.0)

    skin = subject.skin_level + 0.06 * (yy / h - 0.5) + 0.02 * np.cos(dx / w * np.pi)
    lid_margin = np.clip(2.5 - np.abs(yy - upper + 1.5), 0.0, 1.0) * (bow > 0)
    skin = skin * (1 - 0.3 * lid_margin)

    iris = subject.iris_level + subject.texture(np.arctan2(dy, dx), dist / ir)
    globe = np.full(shape, subject.sclera_level)
    globe = globe + _coverage(ir, dist) * (iris - globe)
    globe = globe + _coverage(pr, dist) * (PUPIL_LEVEL - globe)
    # involuntary horizontal eye movement smears the globe behind still eyelids
    if session.blur > 1:
        globe = uniform_filter1d(globe, size=int(session.blur), axis=1, mode="nearest")
    img = skin + opening * (globe - skin)
    if session.noise > 0:
        img = img + rng.normal(0.0, session.noise, img.shape)
    return np.clip(img, 0.0, 1.0), Truth(iris_r=ir, pupil_r=pr, cx=cx, cy=cy)


def subject_params(spec: SynthSpec, index: int) -> SubjectParams:
    return SubjectParams.draw(f"P{index + 1:02d}", substream(spec.seed, "subject", index), spec.subject_sd)


def _plan(spec: SynthSpec):
    """Record layout: subject-major, then session, then frame; frames alternate R/L."""
    out = []
    for s in range(spec.subjects):
        for session in SESSIONS:
            for f in range(spec.frames):
                out.append((s, session, "R" if f % 2 == 0 else "L", f))
    return out


def synth_dataset(spec: SynthSpec, out_dir, workers: int | None = None) -> Manifest:
    """Render every image under ``out_dir/images`` and write ``out_dir/manifest.csv``.

    Image ``k`` draws from the ``image`` substream keyed by ``k`` so the result does not
    depend on the worker count.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SynthError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise SynthError(f"output directory {out_dir} is not writable")

    subjects = [subject_params(spec, s) for s in range(spec.subjects)]
    sessions = {name: SessionParams.from_spec(spec, name) for name in SESSIONS}
    plan = _plan(spec)

    def render(k: int) -> ManifestRecord:
        s, session, eye, frame = plan[k]
        subj = subjects[s]
        img, truth = synth_image(subj, sessions[session], substream(spec.seed, "image", k), eye=eye, shape=spec.image_shape)
        rel = f"images/{session}/{subj.subject_id}_{eye}_{frame:02d}.pgm"
        save_image(out_dir / rel, img)
        return ManifestRecord(
            subject_id=subj.subject_id,
            session=session,
            minutes=SESSION_MINUTES[session],
            eye=eye,
            label=label_for_session(session),
            path=rel,
            iris_r=truth.iris_r,
            pupil_r=truth.pupil_r,
            cx=truth.cx,
            cy=truth.cy,
        )

    manifest = Manifest(parallel_map(render, range(len(plan)), workers), out_dir)
    manifest.save(out_dir / "manifest.csv")
    return manifest

