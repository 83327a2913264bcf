"""RBF-kernel SVM trained by SMO, cross-validation, and feature ingestion."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import atomic_write_text
from .metrics import MetricsReport, confusion_metrics, pct
from .runtime import substream

EMBEDDING_DIMS = {512: "embedding_512", 2048: "embedding_2048", 49: "embedding_49"}
RAW_PIXELS = 120 * 160
SUBSAMPLE_ABOVE = 10_000
TAU = 1e-12


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FeatureMatrix:
    ids: tuple
    values: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.ids) != self.values.shape[0]:
            raise ValueError("feature matrix must be 2-D with one id per row")
        if self.provenance == "raw_pixels_19200" and self.values.shape[1] != RAW_PIXELS:
            raise ValueError(f"raw-pixel rows need {RAW_PIXELS} columns, got {self.values.shape[1]}")


def pixel_features(images, full: bool = False, ids=None) -> FeatureMatrix:
    """Flattened pixels; beyond ``SUBSAMPLE_ABOVE`` samples keep every 4th pixel unless ``full``."""
    images = np.asarray(images, dtype=np.float64)
    flat = images.reshape(len(images), -1)
    ids = tuple(range(len(flat))) if ids is None else tuple(ids)
    if not full and len(flat) > SUBSAMPLE_ABOVE:
        return FeatureMatrix(ids, flat[:, ::4].copy(), "raw_pixels_subsampled")
    provenance = "raw_pixels_19200" if flat.shape[1] == RAW_PIXELS else "raw_pixels"
    return FeatureMatrix(ids, flat, provenance)


def load_embeddings(path, expected_dim: int) -> FeatureMatrix:
    """Read ``sample_id,f1..fD`` rows (an optional header starting with ``sample_id`` is skipped)."""
    if expected_dim not in EMBEDDING_DIMS:
        raise ValueError(f"expected_dim must be one of {sorted(EMBEDDING_DIMS)}, got {expected_dim}")
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0][0].strip() == "sample_id":
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no embedding rows")
    ids, values = [], []
    for lineno, row in enumerate(rows, start=1):
        found = len(row) - 1
        if found != expected_dim:
            raise ValueError(f"{path}: row {lineno} has {found} features, expected {expected_dim}")
        ids.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}: row {lineno}: {exc}") from exc
    return FeatureMatrix(tuple(ids), np.array(values), EMBEDDING_DIMS[expected_dim])


# ---------------------------------------------------------------- SVM


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class SVMModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for each support vector
    bias: float
    gamma: float
    C: float
    alpha: np.ndarray | None = None  # full dual solution (training order), absent after load
    y: np.ndarray | None = None
    iterations: int = 0
    converged: bool = True

    def decision_function(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if len(self.support_vectors) == 0:
            return np.full(len(x), self.bias)
        return rbf_kernel(x, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def predict(self, x) -> np.ndarray:
        """0/1 labels (1 = positive / alcohol)."""
        return (self.decision_function(x) > 0).astype(int)


def svm_train(features, labels, C: float = 1.0, gamma: float = 0.1, tol: float = 1e-3, max_iter: int = 1_000_000) -> SVMModel:
    """Soft-margin dual solved by SMO with second-order working-set selection.

    ``labels`` are 0/1 (mapped to -1/+1). Stops once the maximal KKT
    violation drops below ``tol``; hitting ``max_iter`` emits a
    :class:`ConvergenceWarning` and returns the current iterate.
    """
    X = np.asarray(features.values if isinstance(features, FeatureMatrix) else features, dtype=np.float64)
    t = np.asarray(labels, dtype=int)
    if X.ndim != 2 or len(X) != len(t):
        raise ValueError(f"features {X.shape} and labels {t.shape} do not align")
    if C <= 0 or gamma <= 0:
        raise ValueError("C and gamma must be positive")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    counts = np.bincount(t, minlength=2)
    if counts.min() == 0:
        raise ValueError("SVM training needs both classes")
    if counts.min() < 2:
        raise ValueError(f"need at least two samples per class, got {counts.tolist()}")
    y = np.where(t == 1, 1.0, -1.0)
    K = rbf_kernel(X, X, gamma)
    Q = (y[:, None] * y[None, :]) * K
    diagQ = np.diag(Q).copy()
    n = len(y)
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    converged = False
    while it < max_iter:
        yG = -y * G
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            converged = True
            break
        cand = np.where(up, yG, -np.inf)
        i = int(np.argmax(cand))
        m_up = cand[i]
        M_low = np.min(np.where(low, yG, np.inf))
        if m_up - M_low < tol:
            converged = True
            break
        # second-order choice of j among violating low indices
        b = m_up - yG
        mask = low & (b > 0)
        a = diagQ[i] + diagQ - 2.0 * y[i] * y * Q[i]
        a = np.where(a > 0, a, TAU)
        gain = np.where(mask, -(b * b) / a, np.inf)
        j = int(np.argmin(gain))

        Qi, Qj = Q[i], Q[j]
        ai_old, aj_old = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(diagQ[i] + diagQ[j] + 2 * Qi[j], TAU)
            delta = (-G[i] - G[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0 and aj < 0:
                aj, ai = 0.0, diff
            elif diff <= 0 and ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0 and ai > C:
                ai, aj = C, C - diff
            elif diff <= 0 and aj > C:
                aj, ai = C, C + diff
        else:
            quad = max(diagQ[i] + diagQ[j] - 2 * Qi[j], TAU)
            delta = (G[i] - G[j]) / quad
            s = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if s > C and ai > C:
                ai, aj = C, s - C
            elif s <= C and aj < 0:
                aj, ai = 0.0, s
            if s > C and aj > C:
                aj, ai = C, s - C
            elif s <= C and ai < 0:
                ai, aj = 0.0, s
        alpha[i], alpha[j] = ai, aj
        G += Qi * (ai - ai_old) + Qj * (aj - aj_old)
        it += 1
    if not converged:
        warnings.warn(f"SMO stopped after {max_iter} iterations without reaching tolerance {tol}", ConvergenceWarning, stacklevel=2)

    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        r = yG[free].mean()
    else:
        ub = np.where(((y > 0) & (alpha >= C)) | ((y < 0) & (alpha <= 0)), yG, np.inf).min()
        lb = np.where(((y > 0) & (alpha <= 0)) | ((y < 0) & (alpha >= C)), yG, -np.inf).max()
        r = (ub + lb) / 2 if np.isfinite(ub) and np.isfinite(lb) else (ub if np.isfinite(ub) else lb)
    sv = alpha > 0
    return SVMModel(
        support_vectors=X[sv].copy(),
        dual_coef=(alpha * y)[sv],
        bias=float(-r),
        gamma=float(gamma),
        C=float(C),
        alpha=alpha,
        y=y,
        iterations=it,
        converged=converged,
    )


# ---------------------------------------------------------------- protocol


def stratified_split(labels, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffle; the first ``round(fraction * n_class)`` of each class go to the first part."""
    y = np.asarray(labels, dtype=int)
    first, second = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.nonzero(y == c)[0])
        k = int(round(fraction * len(idx)))
        first.append(idx[:k])
        second.append(idx[k:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def stratified_folds(labels, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Partition indices into ``folds`` parts with class proportions preserved (round-robin per class)."""
    y = np.asarray(labels, dtype=int)
    if folds < 2:
        raise ValueError("need at least two folds")
    counts = np.bincount(y)
    smallest = counts[counts > 0].min()
    if folds > smallest:
        raise ValueError(f"{folds} folds exceed the smallest class count ({smallest})")
    assign = np.empty(len(y), dtype=int)
    offset = 0
    for c in np.unique(y):
        idx = rng.permutation(np.nonzero(y == c)[0])
        assign[idx] = (np.arange(len(idx)) + offset) % folds
        offset += len(idx)
    return [np.nonzero(assign == f)[0] for f in range(folds)]


@dataclass(frozen=True)
class CVRow:
    C: float
    gamma: float
    mean: float
    std: float

    def formatted(self) -> str:
        return f"{pct(self.mean)}% +/- {100 * self.std:.2f}"


@dataclass
class CVResult:
    best: CVRow
    table: list[CVRow]
    model: SVMModel
    test_report: MetricsReport
    train_index: np.ndarray
    test_index: np.ndarray


def svm_cross_validate(
    features,
    labels,
    param_grid,
    folds: int = 5,
    seed: int = 0,
    train_fraction: float = 0.6,
    tol: float = 1e-3,
) -> CVResult:
    """Grid-select (C, gamma) by stratified k-fold CV on a stratified ``train_fraction`` portion,
    refit on that portion, and report metrics on the held-out rest."""
    X = np.asarray(features.values if isinstance(features, FeatureMatrix) else features, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    grid = [(float(C), float(g)) for C, g in param_grid]
    if not grid:
        raise ValueError("parameter grid is empty")
    rng = substream(seed, "svm")
    tr, te = stratified_split(y, train_fraction, rng)
    fold_idx = stratified_folds(y[tr], folds, rng)
    table = []
    for C, g in grid:
        accs = []
        for f in range(folds):
            val = tr[fold_idx[f]]
            fit = tr[np.concatenate([fold_idx[k] for k in range(folds) if k != f])]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                model = svm_train(X[fit], y[fit], C, g, tol)
            accs.append(np.mean(model.predict(X[val]) == y[val]))
        table.append(CVRow(C, g, float(np.mean(accs)), float(np.std(accs))))
    best = max(table, key=lambda r: r.mean)  # first wins ties
    model = svm_train(X[tr], y[tr], best.C, best.gamma, tol)
    report = confusion_metrics(model.predict(X[te]), y[te])
    return CVResult(best, table, model, report, tr, te)


# ---------------------------------------------------------------- serialisation


def svm_to_csv(model: SVMModel) -> str:
    """Hyperparameter block, blank line, then ``coef,f1..fD`` support-vector rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in (("kernel", "rbf"), ("C", repr(model.C)), ("gamma", repr(model.gamma)), ("bias", repr(model.bias)), ("n_support", len(model.dual_coef))):
        w.writerow([k, v])
    w.writerow([])
    dim = model.support_vectors.shape[1] if model.support_vectors.size else 0
    w.writerow(["coef"] + [f"f{i + 1}" for i in range(dim)])
    for c, sv in zip(model.dual_coef, model.support_vectors):
        w.writerow([repr(float(c))] + [repr(float(v)) for v in sv])
    return buf.getvalue()


def save_svm(model: SVMModel, path) -> None:
    atomic_write_text(path, svm_to_csv(model))


def load_svm(path) -> SVMModel:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    try:
        blank = rows.index([])
    except ValueError:
        raise ValueError(f"{path}: missing blank line between blocks") from None
    params = {r[0]: r[1] for r in rows[1:blank]}
    body = rows[blank + 2 :]
    coef = np.array([float(r[0]) for r in body])
    sv = np.array([[float(v) for v in r[1:]] for r in body]) if body else np.zeros((0, 0))
    if len(coef) != int(params["n_support"]):
        raise ValueError(f"{path}: n_support={params['n_support']} but {len(coef)} rows")
    return SVMModel(sv, coef, float(params["bias"]), float(params["gamma"]), float(params["C"]))
