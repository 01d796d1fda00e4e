"""Linear SVM classification of subject features, with Platt calibration,
probability late fusion, stratified k-fold cross-validation and unweighted
average recall (UAR)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .errors import DataError
from .seeds import stream
from .volume_io import LABELS, CohortDataset

log = logging.getLogger(__name__)

N_CLASSES = len(LABELS)


# --------------------------------------------------------------------------
# linear SVM (hinge loss, L2 penalty, bias folded in as a constant feature)


@njit(cache=True)
def _dual_cd(K, y, C, tol, max_epochs):
    """Coordinate descent on the SVM dual with Gram matrix K.

    Returns (alpha, duality gap, epochs run).
    """
    n = K.shape[0]
    alpha = np.zeros(n)
    f = np.zeros(n)  # f = K @ (alpha * y)
    gap = np.inf
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        for i in range(n):
            g = y[i] * f[i] - 1.0
            a_old = alpha[i]
            if K[i, i] <= 0.0:
                continue
            a_new = min(max(a_old - g / K[i, i], 0.0), C)
            d = a_new - a_old
            if d != 0.0:
                alpha[i] = a_new
                s = d * y[i]
                for j in range(n):
                    f[j] += s * K[j, i]
        w2 = 0.0
        hinge = 0.0
        asum = 0.0
        for i in range(n):
            w2 += alpha[i] * y[i] * f[i]
            hinge += max(0.0, 1.0 - y[i] * f[i])
            asum += alpha[i]
        primal = 0.5 * w2 + C * hinge
        dual = asum - 0.5 * w2
        gap = primal - dual
        if gap < tol:
            break
    return alpha, gap, epoch


def _augment(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((len(x), 1))])


@dataclass
class Platt:
    """P(class | decision value f) = 1 / (1 + exp(a*f + b))."""

    a: float
    b: float

    def __call__(self, f: np.ndarray) -> np.ndarray:
        z = self.a * np.asarray(f, dtype=np.float64) + self.b
        return np.where(z >= 0, np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))), 1 / (1 + np.exp(-np.abs(z))))


def platt_fit(f: np.ndarray, y: np.ndarray, max_iter: int = 100) -> Platt:
    """Newton fit of a sigmoid to decision values ``f`` with binary targets
    ``y`` in {0,1}, using the smoothed targets of Lin, Lin and Weng."""
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y)
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    t = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    a, b = 0.0, np.log((n_neg + 1.0) / (n_pos + 1.0))
    sigma = 1e-12

    def objective(a, b):
        z = a * f + b
        return float(np.sum(np.where(z >= 0, t * z + np.log1p(np.exp(-z)), (t - 1) * z + np.log1p(np.exp(z)))))

    fval = objective(a, b)
    for _ in range(max_iter):
        z = a * f + b
        p = np.where(z >= 0, np.exp(-z) / (1 + np.exp(-z)), 1 / (1 + np.exp(z)))  # = 1/(1+exp(z))
        q = 1 - p
        d2 = p * q
        h11 = sigma + np.dot(f * f, d2)
        h22 = sigma + d2.sum()
        h21 = np.dot(f, d2)
        d1 = t - p
        g1 = np.dot(f, d1)
        g2 = d1.sum()
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= 1e-10:
            na, nb = a + step * da, b + step * db
            nf = objective(na, nb)
            if nf < fval + 1e-4 * step * gd:
                a, b, fval = na, nb, nf
                break
            step /= 2
        else:
            break
    return Platt(float(a), float(b))


@dataclass
class SvmModel:
    weights: np.ndarray  # (classes, dims)
    biases: np.ndarray  # (classes,)
    C: float
    classes: np.ndarray
    calibration: Optional[List[Platt]] = None
    gaps: Optional[np.ndarray] = None

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.weights.shape[1]:
            raise DataError(f"feature dim {x.shape[1]} != model dim {self.weights.shape[1]}")
        return x @ self.weights.T + self.biases

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[self.decision_function(x).argmax(axis=1)]

    def calibration_slopes_negative(self) -> bool:
        return self.calibration is not None and all(p.a < 0 for p in self.calibration)


def svm_train(x: np.ndarray, labels: np.ndarray, C: float = 1.0, tol: float = 1e-9,
              max_epochs: int = 10000, calibrate: bool = True) -> SvmModel:
    """One-vs-rest linear SVMs solved in the dual by coordinate descent."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DataError("svm_train needs at least two classes")
    xa = _augment(x)
    K = xa @ xa.T
    W, gaps = [], []
    for c in classes:
        y = np.where(labels == c, 1.0, -1.0)
        alpha, gap, epochs = _dual_cd(K, y, float(C), tol, max_epochs)
        if gap >= tol:
            log.warning("SVM class %s: duality gap %.2e after %d epochs", c, gap, epochs)
        W.append((alpha * y) @ xa)
        gaps.append(gap)
    W = np.array(W)
    model = SvmModel(W[:, :-1].copy(), W[:, -1].copy(), C, classes, gaps=np.array(gaps))
    if calibrate:
        f = model.decision_function(x)
        model.calibration = [platt_fit(f[:, k], (labels == c).astype(int)) for k, c in enumerate(classes)]
    return model


def svm_predict_proba(model: SvmModel, x: np.ndarray) -> np.ndarray:
    """Calibrated class probabilities (rows sum to 1), columns in ``model.classes`` order."""
    if model.calibration is None:
        raise ValueError("model is not calibrated")
    f = model.decision_function(x)
    p = np.column_stack([cal(f[:, k]) for k, cal in enumerate(model.calibration)])
    p = np.clip(p, 1e-300, None)
    return p / p.sum(axis=1, keepdims=True)


def late_fuse(probas: Sequence[np.ndarray], weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Normalized weighted sum of probability vectors (or row-stacked matrices)."""
    if len(probas) == 0:
        raise ValueError("late_fuse needs at least one probability vector")
    weights = np.ones(len(probas)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(weights) != len(probas) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("fusion weights must be non-negative, not all zero, one per input")
    shapes = {np.shape(p) for p in probas}
    if len(shapes) != 1:
        raise ValueError(f"probability inputs disagree in shape: {shapes}")
    fused = sum(w * np.asarray(p, dtype=np.float64) for w, p in zip(weights, probas))
    return fused / np.sum(fused, axis=-1, keepdims=True)


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        sd = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


# --------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    @classmethod
    def from_predictions(cls, y_true: Iterable[int], y_pred: Iterable[int]) -> "ConfusionMatrix":
        cm = cls()
        for t, p in zip(y_true, y_pred):
            cm.counts[int(t), int(p)] += 1
        return cm

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def recalls(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        if np.any(rows == 0):
            missing = [LABELS[i].value for i in np.flatnonzero(rows == 0)]
            raise DataError(f"no test subjects of class {', '.join(missing)}")
        return np.diag(self.counts) / rows

    def to_dict(self) -> dict:
        return {"classes": [lab.value for lab in LABELS], "counts": self.counts.tolist()}


def uar_from_recalls(recalls_percent: Sequence[float]) -> float:
    return round(float(np.mean(recalls_percent)), 2)


def uar(cm: ConfusionMatrix) -> float:
    """Unweighted average recall in percent, 2 decimals."""
    return round(100.0 * float(cm.recalls().mean()), 2)


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldPlan:
    folds: List[List[str]]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, i: int) -> Tuple[List[str], List[str]]:
        test = list(self.folds[i])
        train = [s for j, f in enumerate(self.folds) if j != i for s in f]
        return train, test

    def to_dict(self) -> dict:
        return {"seed": self.seed, "folds": self.folds}


def stratified_folds(dataset: CohortDataset, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle each class, then deal subjects round-robin over the folds,
    continuing the deal across classes so fold sizes differ by at most one."""
    labels = dataset.labels()
    counts = np.bincount(labels, minlength=N_CLASSES)
    if np.any(counts < k):
        raise DataError(f"cannot stratify into {k} folds: class counts {tuple(int(c) for c in counts)}")
    rng = stream(seed, "cv-split")
    ids = np.array(dataset.ids)
    order = []
    for c in range(N_CLASSES):
        members = ids[labels == c]
        order.extend(members[rng.permutation(len(members))])
    folds: List[List[str]] = [[] for _ in range(k)]
    for pos, sid in enumerate(order):
        folds[pos % k].append(str(sid))
    return FoldPlan(folds, seed)


class LeakageError(AssertionError):
    pass


class LeakageGuard:
    """Records which subject ids feed each fit call and fails if a held-out
    subject of the current fold shows up."""

    def __init__(self):
        self.test_ids: set = set()
        self.log: List[Tuple[int, str, Tuple[str, ...]]] = []
        self.fold = -1

    def begin_fold(self, fold: int, test_ids: Iterable[str]) -> None:
        self.fold = fold
        self.test_ids = set(test_ids)

    def record(self, what: str, ids: Iterable[str]) -> None:
        ids = tuple(ids)
        leaked = self.test_ids.intersection(ids)
        if leaked:
            raise LeakageError(f"fold {self.fold}: {what} fit on held-out subject(s) {sorted(leaked)}")
        self.log.append((self.fold, what, ids))


@dataclass
class CvResult:
    pooled: Dict[str, ConfusionMatrix]
    per_fold: Dict[str, List[ConfusionMatrix]]
    plan: FoldPlan
    probabilities: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def uar(self, name: str) -> float:
        return uar(self.pooled[name])

    def table(self) -> Dict[str, Dict[str, float]]:
        """Per-class recall (%) and UAR per extractor."""
        out = {}
        for name, cm in self.pooled.items():
            r = cm.recalls() * 100
            out[name] = {**{lab.value: round(float(v), 2) for lab, v in zip(LABELS, r)}, "UAR": uar(cm)}
        return out

    def recall_rows(self, names: Sequence[str]) -> List[Tuple[str, str, str, str]]:
        """Long-form (extractor, fold, class, recall %) rows: every fold, then
        the pooled matrix, each followed by its UAR row. A fold lacking a
        class gets "nan" for that class and its UAR."""
        rows = []
        for name in names:
            blocks = [(str(i), cm) for i, cm in enumerate(self.per_fold[name])] + [("pooled", self.pooled[name])]
            for fold, cm in blocks:
                totals = cm.counts.sum(axis=1)
                for lab, hit, n in zip(LABELS, np.diag(cm.counts), totals):
                    rows.append((name, fold, lab.value, f"{100 * hit / n:.2f}" if n else "nan"))
                rows.append((name, fold, "UAR", f"{uar(cm):.2f}" if totals.all() else "nan"))
        return rows


# (train_features, test_features) keyed by extractor name, for one fold
FoldFeatures = Callable[[int, List[str], List[str], LeakageGuard], Mapping[str, Tuple[np.ndarray, np.ndarray]]]


def cross_validate(dataset: CohortDataset, plan: FoldPlan, fold_features: FoldFeatures,
                   fusion: Optional[Sequence[str]] = ("BSEN_CDR", "BSEN_MMSE"),
                   fusion_weights: Sequence[float] = (0.5, 0.5), C: float = 1.0,
                   guard: Optional[LeakageGuard] = None, fusion_name: str = "BSEN_Fusion") -> CvResult:
    """Run ``plan``: per fold, ``fold_features`` trains whatever extractors it
    provides on the training ids only; then per extractor a standardizer and
    a calibrated SVM are fit on the training features and evaluated on the
    held-out fold. Test predictions are pooled into one confusion matrix per
    extractor. ``fusion`` names the extractors whose probabilities are fused."""
    dataset.require_all_classes()
    guard = LeakageGuard() if guard is None else guard
    labels = {s.subject_id: s.label.index for s in dataset.subjects}
    pooled: Dict[str, ConfusionMatrix] = {}
    per_fold: Dict[str, List[ConfusionMatrix]] = {}
    probs: Dict[str, Dict[str, np.ndarray]] = {}
    for i in range(plan.k):
        train_ids, test_ids = plan.split(i)
        guard.begin_fold(i, test_ids)
        y_train = np.array([labels[s] for s in train_ids])
        y_test = np.array([labels[s] for s in test_ids])
        if len(np.unique(y_train)) < N_CLASSES:
            raise DataError(f"fold {i}: training split lacks a class; re-stratify")
        feats = fold_features(i, train_ids, test_ids, guard)
        fold_probs = {}
        for name, (x_train, x_test) in feats.items():
            guard.record(f"{name}/scaler+svm", train_ids)
            scaler = Standardizer.fit(x_train)
            model = svm_train(scaler(x_train), y_train, C=C)
            p = _full_proba(model, scaler(x_test))
            fold_probs[name] = p
        if fusion and all(f in fold_probs for f in fusion):
            fold_probs[fusion_name] = late_fuse([fold_probs[f] for f in fusion], fusion_weights)
        for name, p in fold_probs.items():
            cm = ConfusionMatrix.from_predictions(y_test, p.argmax(axis=1))
            per_fold.setdefault(name, []).append(cm)
            pooled[name] = pooled.get(name, ConfusionMatrix()) + cm
            probs.setdefault(name, {}).update({sid: p[j] for j, sid in enumerate(test_ids)})
    return CvResult(pooled, per_fold, plan, probs)


def _full_proba(model: SvmModel, x: np.ndarray) -> np.ndarray:
    """Probabilities over all three diagnostic classes (zeros for classes
    absent from training)."""
    p = svm_predict_proba(model, x)
    out = np.zeros((len(p), N_CLASSES))
    out[:, model.classes.astype(int)] = p
    return out
