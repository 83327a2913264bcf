"""``capsforge`` command line: reproducible experiments and reports.

Every command resolves its settings from flags, then an optional config file
(``[command]`` section, then ``[global]``), then defaults, and writes the
resolved settings to ``<out>/run.lock``. ``capsforge rerun <lock> --out DIR``
repeats the run byte for byte.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 validation failure (subject overlap, malformed input, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .analysis import (
    RatioThresholds,
    distribution_overlap,
    estimate_ratios,
    session_histograms,
    threshold_classifier,
    write_histograms,
)
from .baselines import load_embeddings, pixel_features, save_svm, svm_cross_validate
from .capsule import LossWeights
from .config import ConfigError, Option, lock_command, read_config, resolve, write_lock
from .data import (
    AugmentSpec,
    Manifest,
    ManifestError,
    SubjectOverlapError,
    SynthError,
    augment_dataset,
    preset_spec,
    split_subject_disjoint,
    synth_dataset,
    verify_subject_disjoint,
)
from .data.synth import PRESETS
from .explain import annulus_mask, annulus_mass, average_heatmap, gradcam_batch, overlay, save_heatmap_csv
from .io import ImageFormatError, atomic_write_text, save_color_image
from .metrics import MetricsReport, pct
from .models import (
    FCapsNetConfig,
    SmallVGGConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .plotting import plot_comparison, plot_grid, plot_history, plot_session_histograms
from .training import EpochRecord, TrainRun, evaluate, grid_search, train

log = logging.getLogger("capsforge")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2, 3
TABLE_COLUMNS = ("model", "accuracy", "parameters", "tnr", "tpr")
TABLE_HEADERS = ("Model", "Accuracy", "Parameters", "Specificity(TNR)", "Sensitivity(TPR)")
GRADCHECK_THRESHOLD = 1e-3


class ValidationError(Exception):
    """Inputs parsed but failed a correctness check (exit code 3)."""


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_table(rows: list[dict]) -> str:
    """Plain-text table with the results-table columns."""
    cells = [TABLE_HEADERS] + [tuple(str(r[c]) for c in TABLE_COLUMNS) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_HEADERS))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def metrics_row(name: str, report: MetricsReport, parameters) -> dict:
    row = {"model": name, "parameters": parameters}
    row.update(report.as_row())
    return row


def _metrics_csv(rows: list[dict]) -> str:
    cols = TABLE_COLUMNS + ("tp", "tn", "fp", "fn")
    return _csv_text(cols, [[r[c] for c in cols] for r in rows])


# ---------------------------------------------------------------- model settings

MODEL_OPTIONS = [
    Option("architecture", str, "fcapsnet", choices=("fcapsnet", "capsnet", "smallvgg")),
    Option("filters", int, None, "conv filters (capsule nets); default per architecture"),
    Option("kernel_size", int, 3),
    Option("capsules", int, 8, "capsule types (plain capsule net)"),
    Option("routing_iterations", int, 3),
    Option("reconstruction_weight", float, 0.0005),
    Option("dense_width", int, None),
    Option("image_height", int, 120),
    Option("image_width", int, 160),
]


def model_config(v: dict):
    shape = (v["image_height"], v["image_width"])
    if v["architecture"] == "smallvgg":
        kw = {"image_shape": shape}
        if v["dense_width"] is not None:
            kw["dense_width"] = v["dense_width"]
        return SmallVGGConfig(**kw)
    kw = dict(
        kernel_size=v["kernel_size"],
        num_capsules=v["capsules"],
        routing_iterations=v["routing_iterations"],
        image_shape=shape,
        loss=LossWeights(reconstruction_weight=v["reconstruction_weight"]),
    )
    if v["filters"] is not None:
        kw["filters"] = v["filters"]
    if v["dense_width"] is not None:
        kw["dense_width"] = v["dense_width"]
    return FCapsNetConfig(**kw)


# ---------------------------------------------------------------- commands


def cmd_synth_gen(v, out: Path) -> int:
    overrides = {k: v[k] for k in ("subjects", "frames", "noise", "blur") if v[k] is not None}
    spec = preset_spec(v["preset"], seed=v["seed"], **overrides)
    manifest = synth_dataset(spec, out)
    print(f"wrote {len(manifest)} images ({spec.subjects} subjects x 5 sessions x {spec.frames} frames) to {out}")
    return EXIT_OK


def cmd_split(v, out: Path) -> int:
    manifest = Manifest.load(v["manifest"])
    train_m, test_m = split_subject_disjoint(manifest, v["train_fraction"], v["seed"])
    train_m.save(out / "train.csv")
    test_m.save(out / "test.csv")
    print(f"train: {len(train_m)} images, {len(train_m.subjects())} subjects")
    print(f"test:  {len(test_m)} images, {len(test_m.subjects())} subjects")
    return EXIT_OK


def verify_split(out: Path) -> int:
    a, b = Manifest.load(out / "train.csv"), Manifest.load(out / "test.csv")
    verify_subject_disjoint(a, b)
    print(f"ok: {len(a.subjects())} train and {len(b.subjects())} test subjects, no overlap")
    return EXIT_OK


def cmd_augment(v, out: Path) -> int:
    spec = AugmentSpec(
        rotation_degrees=v["rotation"],
        shift_fraction=v["shift"],
        zoom_fraction=v["zoom"],
        multiplier=v["multiplier"],
        keep_originals=v["keep_originals"],
    )
    manifest = Manifest.load(v["manifest"])
    result = augment_dataset(manifest, spec, out, seed=v["seed"])
    print(f"{len(manifest)} -> {len(result)} images")
    return EXIT_OK


def _history_csv(history) -> str:
    return _csv_text(("epoch", "loss", "accuracy"), [[h.epoch, repr(h.loss), repr(h.accuracy)] for h in history])


def cmd_train(v, out: Path) -> int:
    config = model_config(v)
    model = build_model(v["architecture"], config, seed=v["seed"])
    run = TrainRun(seed=v["seed"], lr=v["lr"], epochs=v["epochs"], batch_size=v["batch_size"])
    data = Manifest.load(v["train"])
    train(model, data, run, on_epoch=lambda r: print(f"epoch {r.epoch:3d}  loss {r.loss:.6f}  acc {pct(r.accuracy)}%", flush=True))
    save_checkpoint(model, out / "model.fcap")
    atomic_write_text(out / "history.csv", _history_csv(run.history))
    if run.history:
        plot_history({v["architecture"]: run.history}, out / "history.png")
    return EXIT_OK


def cmd_eval(v, out: Path) -> int:
    model = load_checkpoint(v["checkpoint"])
    report = evaluate(model, Manifest.load(v["manifest"]))
    row = metrics_row(v["name"] or model.architecture, report, model.num_parameters())
    atomic_write_text(out / "metrics.csv", _metrics_csv([row]))
    table = format_table([row])
    atomic_write_text(out / "metrics.txt", table)
    print(table, end="")
    return EXIT_OK


def cmd_grid(v, out: Path) -> int:
    space = {}
    for axis, key in (("capsules", "capsule_options"), ("routing", "routing_options"), ("kernel", "kernel_options"), ("filters", "filter_options"), ("reconstruction_weight", "reconstruction_weights"), ("lr", "learning_rates")):
        if v[key]:
            space[axis] = v[key]
    base = model_config(v)
    run = TrainRun(seed=v["seed"], epochs=v["epochs"], batch_size=v["batch_size"])
    best, rows = grid_search(
        space,
        Manifest.load(v["train"]),
        Manifest.load(v["val"]),
        v["architecture"],
        base,
        run,
        on_row=lambda r: print(f"[{r.index}] {r.settings} -> {pct(r.accuracy)}%", flush=True),
    )
    axes = list(rows[0].settings)
    table = [[r.index] + [r.settings[a] for a in axes] + [r.parameters, pct(r.accuracy), pct(r.report.tnr), pct(r.report.tpr)] for r in rows]
    atomic_write_text(out / "grid.csv", _csv_text(["index"] + axes + ["parameters", "accuracy", "tnr", "tpr"], table))
    plot_grid([{"index": r.index, "accuracy": pct(r.accuracy)} for r in rows], out / "grid.png")
    print(f"best: {best.settings} accuracy {pct(best.accuracy)}%")
    return EXIT_OK


def cmd_ratio_hist(v, out: Path) -> int:
    manifest = Manifest.load(v["manifest"])
    ratios = manifest.truth_ratios() if v["source"] == "truth" else estimate_ratios(manifest)
    hists = session_histograms(manifest, ratios, v["bins"])
    write_histograms(hists, out)
    plot_session_histograms(hists, out / "histograms.png")
    sessions = np.array([r.session for r in manifest])
    thresholds = RatioThresholds.from_reference(ratios[sessions == "S0"], v["k"])
    result = threshold_classifier(ratios, manifest.targets(), thresholds)
    rows = [
        ["reference", "band", f"{thresholds.contraction:.4f}", f"{thresholds.dilation:.4f}", pct(result.report.accuracy), pct(result.report.tnr), pct(result.report.tpr)],
        ["best_single", result.best_direction, f"{result.best_threshold:.4f}", "", pct(result.best_report.accuracy), pct(result.best_report.tnr), pct(result.best_report.tpr)],
    ]
    atomic_write_text(out / "thresholds.csv", _csv_text(("classifier", "rule", "low", "high", "accuracy", "tnr", "tpr"), rows))
    overlap = [[h.session, f"{h.mean:.4f}", f"{h.std:.4f}", f"{distribution_overlap(hists[0], h):.4f}"] for h in hists]
    atomic_write_text(out / "sessions.csv", _csv_text(("session", "mean", "std", "overlap_with_S0"), overlap))
    for s, m, sd, ov in overlap:
        print(f"{s}: mean {m} sd {sd} overlap with S0 {ov}")
    print(f"best single threshold ({result.best_direction} {result.best_threshold:.4f}): {pct(result.best_report.accuracy)}%")
    return EXIT_OK


SALIENCY_VARIANTS = {"cam": "cam", "cam++": "plusplus"}


def cmd_saliency(v, out: Path) -> int:
    model = load_checkpoint(v["checkpoint"])
    manifest = Manifest.load(v["manifest"])
    chosen = [i for i, r in enumerate(manifest) if r.target == v["target_class"]][: v["limit"]]
    if not chosen:
        raise ValidationError(f"no images of class {v['target_class']} in {v['manifest']}")
    images = manifest.load_images(chosen)
    variant = SALIENCY_VARIANTS[v["variant"]]
    rows = []
    for start in range(0, len(chosen), 16):
        batch = chosen[start : start + 16]
        maps = gradcam_batch(model, images[start : start + 16], v["target_class"], v["layer"], variant)
        for i, hm in zip(batch, maps):
            rec = manifest[i]
            save_color_image(out / "overlays" / f"{Path(rec.path).stem}_{rec.session}.ppm", overlay(hm, images[chosen.index(i)]))
            inside = outside = float("nan")
            if rec.has_truth and rec.cx is not None:
                inside, outside = annulus_mass(hm.values, annulus_mask(hm.shape, rec.cx, rec.cy, rec.pupil_r, rec.iris_r))
            rows.append([rec.path, rec.session, int(hm.vanished), f"{inside:.6f}", f"{outside:.6f}"])
    atomic_write_text(out / "annulus.csv", _csv_text(("path", "session", "vanished", "inside", "outside"), rows))
    mean = average_heatmap(model, images, v["target_class"], v["layer"], variant)
    save_heatmap_csv(mean, out / "mean_heatmap.csv")
    save_color_image(out / "mean_overlay.ppm", overlay(mean, images.mean(axis=0)))
    inside = np.nanmean([float(r[3]) for r in rows])
    outside = np.nanmean([float(r[4]) for r in rows])
    print(f"{len(rows)} heatmaps; mean heat inside iris annulus {inside:.4f}, outside {outside:.4f}")
    return EXIT_OK


# Reconstruction weight 0.5 (the top of the grid) keeps decoder gradients well above
# finite-difference rounding noise.
_TINY_LOSS = LossWeights(reconstruction_weight=0.5)
TINY_MODELS = {
    "fcapsnet-tiny": ("fcapsnet", FCapsNetConfig(filters=4, kernel_size=3, capsule_dim=4, dense_width=8, image_shape=(12, 16), loss=_TINY_LOSS)),
    "capsnet-tiny": ("capsnet", FCapsNetConfig(filters=4, kernel_size=3, num_capsules=2, capsule_dim=4, dense_width=8, image_shape=(12, 16), loss=_TINY_LOSS)),
    "smallvgg-tiny": ("smallvgg", SmallVGGConfig(filters=(2, 2, 2), dense_width=8, image_shape=(16, 16))),
}


def gradcheck_model(name: str, seed: int = 0) -> tuple[float, int]:
    """Max relative error between autodiff and central differences over every parameter."""
    arch, config = TINY_MODELS[name]
    model = build_model(arch, config, seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(2,) + tuple(config.image_shape))
    labels = np.array([0, 1])
    params = model.parameters()
    # A generic point: biases off the relu kinks and routing weights large enough that
    # capsule outputs (and so decoder gradients) are not lost in rounding noise.
    for p in params:
        if p.name.endswith(".bias"):
            p.data = rng.uniform(0.01, 0.05, size=p.shape)
        elif p.name == "routing.weight":
            p.data = rng.uniform(-1.0, 1.0, size=p.shape)
    # ungated: the gate deliberately departs from the true gradient of the forward pass
    err = T.grad_check(lambda *_: model.loss(images, labels, gate=False), params)
    return err, model.num_parameters()


def cmd_gradcheck(v, out: Path) -> int:
    err, n = gradcheck_model(v["model"], v["seed"])
    ok = err < v["threshold"]
    atomic_write_text(out / "gradcheck.csv", _csv_text(("model", "parameters", "max_relative_error", "threshold", "passed"), [[v["model"], n, f"{err:.3e}", repr(v["threshold"]), int(ok)]]))
    print(f"{v['model']} ({n} parameters): max relative error {err:.3e} ({'ok' if ok else 'FAILED'})")
    if not ok:
        raise ValidationError(f"gradient check failed: {err:.3e} >= {v['threshold']}")
    return EXIT_OK


def cmd_svm(v, out: Path) -> int:
    manifest = Manifest.load(v["manifest"])
    if v["embeddings"]:
        feats = load_embeddings(v["embeddings"], v["embedding_dim"])
        if len(feats.values) != len(manifest):
            raise ValidationError(f"{len(feats.values)} embeddings for {len(manifest)} manifest rows")
    else:
        feats = pixel_features(manifest.load_images(), full=v["full"])
    grid = [(C, g) for C in v["C"] for g in v["gamma"]]
    result = svm_cross_validate(feats, manifest.targets(), grid, folds=v["folds"], seed=v["seed"])
    rows = [[repr(r.C), repr(r.gamma), pct(r.mean), f"{100 * r.std:.2f}", r.formatted()] for r in result.table]
    atomic_write_text(out / "cv.csv", _csv_text(("C", "gamma", "mean", "std", "formatted"), rows))
    save_svm(result.model, out / "model.svm")
    row = metrics_row(v["name"], result.test_report, len(result.model.dual_coef))
    atomic_write_text(out / "metrics.csv", _metrics_csv([row]))
    print(f"best C={result.best.C:g} gamma={result.best.gamma:g}: CV {result.best.formatted()}")
    print(format_table([row]), end="")
    return EXIT_OK


def cmd_report(v, out: Path) -> int:
    rows, histories = [], {}
    for run_dir in v["runs"]:
        run_dir = Path(run_dir)
        found = False
        if (run_dir / "metrics.csv").exists():
            rows.extend(_read_csv(run_dir / "metrics.csv"))
            found = True
        if (run_dir / "thresholds.csv").exists():
            best = [r for r in _read_csv(run_dir / "thresholds.csv") if r["classifier"] == "best_single"][0]
            rows.append({"model": "ratio-threshold", "parameters": 1, "accuracy": best["accuracy"], "tnr": best["tnr"], "tpr": best["tpr"]})
            found = True
        if (run_dir / "history.csv").exists():
            hist = [EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["accuracy"])) for r in _read_csv(run_dir / "history.csv")]
            if hist:
                histories[run_dir.name] = hist
            found = True
        if not found:
            raise ValidationError(f"{run_dir} holds no metrics.csv, thresholds.csv or history.csv")
    if rows:
        for r in rows:
            for c in TABLE_COLUMNS:
                if c not in r:
                    raise ValidationError(f"metrics row {r} lacks column {c!r}")
        rows.sort(key=lambda r: -float(r["accuracy"]))
        atomic_write_text(out / "comparison.csv", _csv_text(TABLE_COLUMNS, [[r[c] for c in TABLE_COLUMNS] for r in rows]))
        table = format_table(rows)
        atomic_write_text(out / "comparison.txt", table)
        plot_comparison(rows, out / "comparison.png")
        print(table, end="")
    if histories:
        plot_history(histories, out / "training.png")
    return EXIT_OK


# ---------------------------------------------------------------- command table

PATH = "path"
COMMANDS = {
    "synth-gen": (
        cmd_synth_gen,
        "render a synthetic periocular dataset",
        [
            Option("preset", str, "overlapping", choices=tuple(PRESETS)),
            Option("subjects", int, None, "override the preset's subject count"),
            Option("frames", int, None, "frames per subject and session"),
            Option("noise", float, None),
            Option("blur", int, None),
            Option("seed", int, 0),
        ],
    ),
    "split": (
        cmd_split,
        "subject-disjoint train/test split (--verify checks an existing split)",
        [Option("manifest", str, kind=PATH, required=True), Option("train_fraction", float, 0.7), Option("seed", int, 0)],
    ),
    "augment": (
        cmd_augment,
        "write augmented copies of a manifest's images",
        [
            Option("manifest", str, kind=PATH, required=True),
            Option("multiplier", int, 4),
            Option("rotation", float, 10.0, "max rotation in degrees"),
            Option("shift", float, 0.2, "max shift as a fraction of width/height"),
            Option("zoom", float, 0.15, "max zoom deviation"),
            Option("keep_originals", kind="flag", default=False),
            Option("seed", int, 0),
        ],
    ),
    "train": (
        cmd_train,
        "train a model; writes model.fcap, history.csv, history.png",
        [Option("train", str, kind=PATH, required=True)]
        + MODEL_OPTIONS
        + [Option("lr", float, 1e-3), Option("epochs", int, 10), Option("batch_size", int, 16), Option("seed", int, 0)],
    ),
    "eval": (
        cmd_eval,
        "evaluate a checkpoint on a manifest",
        [Option("checkpoint", str, kind=PATH, required=True), Option("manifest", str, kind=PATH, required=True), Option("name", str, "")],
    ),
    "grid": (
        cmd_grid,
        "exhaustive hyperparameter search",
        [Option("train", str, kind=PATH, required=True), Option("val", str, kind=PATH, required=True)]
        + MODEL_OPTIONS
        + [
            Option("capsule_options", int, kind="list", default=()),
            Option("routing_options", int, kind="list", default=()),
            Option("kernel_options", int, kind="list", default=()),
            Option("filter_options", int, kind="list", default=()),
            Option("reconstruction_weights", float, kind="list", default=()),
            Option("learning_rates", float, kind="list", default=(1e-3,)),
            Option("epochs", int, 5),
            Option("batch_size", int, 16),
            Option("seed", int, 0),
        ],
    ),
    "ratio-hist": (
        cmd_ratio_hist,
        "per-session pupil/iris ratio histograms and threshold baselines",
        [
            Option("manifest", str, kind=PATH, required=True),
            Option("source", str, "estimate", choices=("estimate", "truth")),
            Option("bins", int, 20),
            Option("k", float, 2.0, "reference band half-width in S0 standard deviations"),
        ],
    ),
    "saliency": (
        cmd_saliency,
        "Grad-CAM overlays and iris-annulus heat statistics",
        [
            Option("checkpoint", str, kind=PATH, required=True),
            Option("manifest", str, kind=PATH, required=True),
            Option("target_class", int, 1, choices=(0, 1)),
            Option("layer", str, None),
            Option("variant", str, "cam", choices=tuple(SALIENCY_VARIANTS)),
            Option("limit", int, 32),
        ],
    ),
    "gradcheck": (
        cmd_gradcheck,
        "finite-difference check of a tiny model",
        [Option("model", str, "fcapsnet-tiny", choices=tuple(TINY_MODELS)), Option("threshold", float, GRADCHECK_THRESHOLD), Option("seed", int, 0)],
    ),
    "svm": (
        cmd_svm,
        "RBF SVM baseline on pixels or precomputed embeddings",
        [
            Option("manifest", str, kind=PATH, required=True),
            Option("embeddings", str, None, kind=PATH),
            Option("embedding_dim", int, 512, choices=(49, 512, 2048)),
            Option("full", kind="flag", default=False, help="use every pixel instead of subsampling"),
            Option("C", float, kind="list", default=(0.1, 1.0, 10.0)),
            Option("gamma", float, kind="list", default=(1e-4, 1e-3, 1e-2)),
            Option("folds", int, 5),
            Option("name", str, "svm-rbf"),
            Option("seed", int, 0),
        ],
    ),
    "report": (
        cmd_report,
        "consolidated comparison table and figures across run directories",
        [Option("runs", str, kind="paths", required=True)],
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsforge", description="Fused capsule network experiments on periocular images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, options) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", "--spec", dest="config", help="config file with [global] and [command] sections")
        p.add_argument("--out", required=name != "split", help="output directory")
        if name == "split":
            p.add_argument("--verify", action="store_true", help="check <out>/train.csv and <out>/test.csv for shared subjects")
        for opt in options:
            if opt.kind == "flag":
                p.add_argument(opt.flag, dest=opt.name, action="store_const", const=True, default=None, help=opt.help)
            else:
                p.add_argument(opt.flag, dest=opt.name, default=None, help=opt.help or None)
    rerun = sub.add_parser("rerun", help="repeat a run from its run.lock")
    rerun.add_argument("lock")
    rerun.add_argument("--out", required=True)
    return parser


def run_command(command: str, values: dict, out: Path) -> int:
    fn, _, options = COMMANDS[command]
    out.mkdir(parents=True, exist_ok=True)
    write_lock(out, command, options, values)
    return fn(values, out)


def _dispatch(args) -> int:
    if args.command == "rerun":
        command = lock_command(args.lock)
        if command not in COMMANDS:
            raise ConfigError(f"{args.lock}: unknown command {command!r}")
        options = COMMANDS[command][2]
        values = resolve(command, options, {}, read_config(args.lock))
        return run_command(command, values, Path(args.out))
    _, _, options = COMMANDS[args.command]
    if args.command == "split" and args.verify:
        if not args.out:
            raise ConfigError("split --verify needs --out pointing at an existing split")
        return verify_split(Path(args.out))
    if not args.out:
        raise ConfigError("--out is required")
    parser = read_config(args.config) if args.config else None
    flags = {o.name: getattr(args, o.name) for o in options}
    values = resolve(args.command, options, flags, parser)
    return run_command(args.command, values, Path(args.out))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"capsforge: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SynthError as exc:
        print(f"capsforge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SubjectOverlapError, ManifestError, ImageFormatError, ValidationError) as exc:
        print(f"capsforge: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"capsforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
