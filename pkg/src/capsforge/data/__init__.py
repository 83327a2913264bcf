"""Synthetic data generation, manifests, splitting and augmentation."""

from .augment import AugmentParams, AugmentSpec, augment, augment_dataset, apply_params, sample_params
from .manifest import (
    HEADER,
    LABELS,
    SESSION_MINUTES,
    SESSIONS,
    Manifest,
    ManifestError,
    ManifestRecord,
    SubjectOverlapError,
    label_for_session,
    split_subject_disjoint,
    verify_subject_disjoint,
)
from .synth import (
    PRESETS,
    PUPIL_LEVEL,
    SessionParams,
    SubjectParams,
    SynthError,
    SynthSpec,
    Truth,
    preset_spec,
    subject_params,
    synth_dataset,
    synth_image,
)
