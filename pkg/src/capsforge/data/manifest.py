"""Dataset manifests (CSV) and subject-disjoint splitting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..io import atomic_write_text, load_image
from ..runtime import substream

SESSIONS = ("S0", "S1", "S2", "S3", "S4")
SESSION_MINUTES = {"S0": 0, "S1": 15, "S2": 30, "S3": 45, "S4": 60}
LABELS = ("no_alcohol", "alcohol")
HEADER = ("subject_id", "session", "minutes", "eye", "label", "path", "iris_r", "pupil_r", "cx", "cy")


class ManifestError(ValueError):
    pass


class SubjectOverlapError(ManifestError):
    """A subject contributes images to both halves of a split."""


def label_for_session(session: str) -> str:
    if session not in SESSION_MINUTES:
        raise ManifestError(f"unknown session {session!r}")
    return "no_alcohol" if session == "S0" else "alcohol"


@dataclass(frozen=True)
class ManifestRecord:
    subject_id: str
    session: str
    minutes: int
    eye: str
    label: str
    path: str
    iris_r: float | None = None
    pupil_r: float | None = None
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.eye not in ("L", "R"):
            raise ManifestError(f"eye must be L or R, got {self.eye!r}")
        if self.label != label_for_session(self.session):
            raise ManifestError(f"label {self.label!r} inconsistent with session {self.session}")
        if self.iris_r is not None and self.pupil_r is not None and not 0 < self.pupil_r < self.iris_r:
            raise ManifestError(f"radii must satisfy 0 < pupil < iris, got {self.pupil_r}, {self.iris_r}")

    @property
    def target(self) -> int:
        """Class index: 1 for alcohol (positive), 0 otherwise."""
        return LABELS.index(self.label)

    @property
    def has_truth(self) -> bool:
        return self.iris_r is not None and self.pupil_r is not None


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def _opt_float(text: str) -> float | None:
    return float(text) if text.strip() else None


class Manifest:
    """Ordered records plus the directory their relative paths resolve against."""

    def __init__(self, records, root="."):
        self.records: list[ManifestRecord] = list(records)
        self.root = Path(root)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Manifest(self.records[idx], self.root)
        return self.records[idx]

    def subset(self, indices) -> "Manifest":
        return Manifest([self.records[i] for i in indices], self.root)

    def filter(self, predicate) -> "Manifest":
        return Manifest([r for r in self.records if predicate(r)], self.root)

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def targets(self) -> np.ndarray:
        return np.array([r.target for r in self.records], dtype=int)

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def load_image(self, i: int) -> np.ndarray:
        return load_image(self.resolve(self.records[i]))

    def load_images(self, indices=None) -> np.ndarray:
        idx = range(len(self.records)) if indices is None else indices
        return np.stack([self.load_image(i) for i in idx]) if len(idx) else np.zeros((0, 120, 160))

    def truth_ratios(self) -> np.ndarray:
        if not all(r.has_truth for r in self.records):
            raise ManifestError("some records lack ground-truth radii")
        return np.array([r.pupil_r / r.iris_r for r in self.records])

    def relocated(self, new_root) -> "Manifest":
        """Same files; paths under ``new_root`` become relative, the rest absolute.

        Absolute paths for outside files keep derived manifests independent of
        where they are written, so reruns into another directory match byte for
        byte.
        """
        new_root = Path(new_root).resolve()
        out = []
        for r in self.records:
            absolute = self.resolve(r).resolve()
            try:
                path = absolute.relative_to(new_root).as_posix()
            except ValueError:
                path = absolute.as_posix()
            out.append(replace(r, path=path))
        return Manifest(out, new_root)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HEADER)
        for r in self.records:
            writer.writerow(
                [r.subject_id, r.session, r.minutes, r.eye, r.label, r.path, _fmt(r.iris_r), _fmt(r.pupil_r), _fmt(r.cx), _fmt(r.cy)]
            )
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        manifest = self if path.parent.resolve() == self.root.resolve() else self.relocated(path.parent)
        atomic_write_text(path, manifest.to_csv())

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest {path} does not exist")
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != HEADER:
                raise ManifestError(f"{path}: header must be {','.join(HEADER)}")
            records = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(HEADER):
                    raise ManifestError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
                try:
                    records.append(
                        ManifestRecord(
                            subject_id=row[0],
                            session=row[1],
                            minutes=int(row[2]),
                            eye=row[3],
                            label=row[4],
                            path=row[5],
                            iris_r=_opt_float(row[6]),
                            pupil_r=_opt_float(row[7]),
                            cx=_opt_float(row[8]),
                            cy=_opt_float(row[9]),
                        )
                    )
                except ValueError as exc:
                    raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        return cls(records, path.parent)



def split_subject_disjoint(manifest: Manifest, train_fraction: float = 0.7, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Partition subjects (not images) into train/test.

    The train side receives ``round(train_fraction * n)`` subjects, clamped so
    both sides keep at least one subject (2 subjects -> 1 / 1).
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    subjects = manifest.subjects()
    if len(subjects) < 2:
        raise ManifestError("a subject-disjoint split needs at least two subjects")
    n_train = int(math.floor(train_fraction * len(subjects) + 0.5))
    n_train = min(max(n_train, 1), len(subjects) - 1)
    order = substream(seed, "split").permutation(len(subjects))
    train_subjects = {subjects[i] for i in order[:n_train]}
    train = manifest.filter(lambda r: r.subject_id in train_subjects)
    test = manifest.filter(lambda r: r.subject_id not in train_subjects)
    verify_subject_disjoint(train, test)
    return train, test


def verify_subject_disjoint(a: Manifest, b: Manifest) -> None:
    shared = set(a.subjects()) & set(b.subjects())
    if shared:
        raise SubjectOverlapError(f"subjects present in both sets: {sorted(shared)}")
