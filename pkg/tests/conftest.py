import hashlib
from pathlib import Path

import numpy as np
import pytest

from capsforge.data import preset_spec, synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 subjects x 5 sessions x 4 frames of the separable preset (80 images)."""
    out = tmp_path_factory.mktemp("synth_small")
    return synth_dataset(preset_spec("separable", subjects=4, frames=4, seed=3), out)


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default-sized overlapping dataset: 30 subjects x 5 sessions x 20 frames."""
    out = tmp_path_factory.mktemp("synth_default")
    return synth_dataset(preset_spec("overlapping", subjects=30, frames=20, seed=0), out)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="session")
def digest():
    return tree_digest


PIPELINE = [
    ("synth", ["synth-gen", "--preset", "separable", "--subjects", "4", "--frames", "2", "--seed", "5"]),
    ("split", ["split", "--manifest", "{synth}/manifest.csv", "--train-fraction", "0.5"]),
    ("augment", ["augment", "--manifest", "{split}/train.csv", "--multiplier", "2"]),
    ("train", ["train", "--train", "{split}/train.csv", "--filters", "2", "--dense-width", "4", "--epochs", "1", "--batch-size", "8", "--lr", "0.001"]),
    ("eval", ["eval", "--checkpoint", "{train}/model.fcap", "--manifest", "{split}/test.csv", "--name", "F-CapsNet"]),
    (
        "grid",
        ["grid", "--train", "{split}/train.csv", "--val", "{split}/test.csv", "--filters", "2", "--dense-width", "4", "--kernel-options", "3,5", "--epochs", "1", "--batch-size", "8"],
    ),
    ("hist", ["ratio-hist", "--manifest", "{synth}/manifest.csv", "--bins", "10"]),
    ("saliency", ["saliency", "--checkpoint", "{train}/model.fcap", "--manifest", "{split}/test.csv", "--limit", "4"]),
    ("gradcheck", ["gradcheck", "--model", "fcapsnet-tiny"]),
    ("svm", ["svm", "--manifest", "{synth}/manifest.csv", "--C", "1", "--gamma", "0.0001", "--folds", "2"]),
    ("report", ["report", "--runs", "{eval},{svm},{hist},{train}"]),
]


@pytest.fixture(scope="session")
def cli_pipeline(tmp_path_factory):
    """Every CLI command run once on a 40-image dataset; maps step name to its output directory."""
    from capsforge.cli import main

    root = tmp_path_factory.mktemp("pipeline") / "runs"
    dirs, codes = {}, {}
    for name, argv in PIPELINE:
        dirs[name] = root / name
        argv = [a.format(**{k: str(v) for k, v in dirs.items()}) for a in argv]
        codes[name] = main(argv + ["--out", str(dirs[name])])
    return dirs, codes


# Acceptance verdicts, one line per criterion, echoed after the run.
VERDICTS = {}


@pytest.fixture(scope="session")
def verdicts():
    return VERDICTS


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
