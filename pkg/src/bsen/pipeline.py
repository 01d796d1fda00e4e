"""Cross-validated experiment: per fold, train the autoencoders on the
training subjects' frames, extract features for all extractors, classify,
and collect held-out reconstructions for ROI statistics."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import canonical_json, save_checkpoint
from .classify import CvResult, FoldPlan, LeakageGuard, cross_validate, stratified_folds
from .errors import ConfigError, DataError
from .features import ica_fit, ica_transform, extract_features, pca_fit, pca_transform
from .model import (BehaviorTest, BsenConfig, BsenNet, binarize_behavior, train_stage1_autoencoder,
                    train_stage2_contrastive)
from .seeds import stream
from .volume_io import CohortDataset, Volume3D, prepare_average, prepare_frames

log = logging.getLogger(__name__)

EXTRACTORS = ("PCA", "ICA", "CAE", "BSEN_CDR", "BSEN_MMSE")
NEURAL = ("CAE", "BSEN_CDR", "BSEN_MMSE")


@dataclass
class ExperimentConfig:
    model: BsenConfig = field(default_factory=BsenConfig)
    window: Optional[Tuple[int, int]] = None
    folds: int = 5
    extractors: Tuple[str, ...] = EXTRACTORS
    fusion_weights: Tuple[float, float] = (0.5, 0.5)
    svm_c: float = 1.0
    pca_components: int = 64
    alpha_level: float = 0.05
    correction: str = "none"

    @property
    def seed(self) -> int:
        return self.model.seed

    def validate(self) -> None:
        self.model.validate()
        unknown = set(self.extractors) - set(EXTRACTORS)
        if unknown:
            raise ConfigError(f"unknown extractor(s) {sorted(unknown)}; choose from {', '.join(EXTRACTORS)}")
        if self.folds < 2:
            raise ConfigError("need at least 2 folds")
        if len(self.fusion_weights) != 2 or min(self.fusion_weights) < 0 or sum(self.fusion_weights) <= 0:
            raise ConfigError("fusion weights must be two non-negative numbers with a positive sum")
        if self.correction not in ("none", "holm", "bonferroni"):
            raise ConfigError(f"unknown stats correction {self.correction!r}")
        if not 0 < self.alpha_level < 1:
            raise ConfigError("alpha level must lie in (0, 1)")
        if self.window is not None and not (1 <= self.window[0] <= self.window[1]):
            raise ConfigError(f"invalid time window {self.window}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["window"] = list(self.window) if self.window else None
        d["extractors"] = list(self.extractors)
        d["fusion_weights"] = list(self.fusion_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        m = dict(d.pop("model", {}))
        for key in ("input_dims", "channels"):
            if key in m:
                m[key] = tuple(m[key])
        out = cls(model=BsenConfig(**m), **d)
        out.window = tuple(out.window) if out.window else None
        out.extractors = tuple(out.extractors)
        out.fusion_weights = tuple(out.fusion_weights)
        return out

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]


@dataclass
class Prepared:
    frames: Dict[str, np.ndarray]  # id -> (F, x, y, z)
    averages: Dict[str, np.ndarray]  # id -> (x, y, z)


def prepare_cohort(dataset: CohortDataset, config: ExperimentConfig) -> Prepared:
    target = config.model.input_dims
    dt = config.model.np_dtype
    frames, averages = {}, {}
    for sid in dataset.ids:
        vol = dataset.volume(sid)
        frames[sid] = prepare_frames(vol, target, config.window).astype(dt)
        averages[sid] = prepare_average(vol, target, config.window).data.astype(dt)
    return Prepared(frames, averages)


@dataclass
class FoldModel:
    model: BsenNet
    centers: Optional[object] = None  # CenterBank for BSEN models
    behavior_test: Optional[BehaviorTest] = None
    epochs_done: int = 0
    history: list = field(default_factory=list)


def cluster_assignments(dataset: CohortDataset, ids: Sequence[str], test: BehaviorTest) -> np.ndarray:
    test = BehaviorTest(test)
    return np.array([binarize_behavior(test, dataset[s].cdr if test is BehaviorTest.CDR else dataset[s].mmse)
                     for s in ids])


def train_fold_models(dataset: CohortDataset, prepared: Prepared, train_ids: Sequence[str],
                      config: ExperimentConfig, names: Sequence[str],
                      guard: Optional[LeakageGuard] = None) -> Dict[str, FoldModel]:
    """Stage 1 on the training subjects' frames, then one stage-2 model per
    requested behavior test. ``names`` selects among CAE, BSEN_CDR, BSEN_MMSE."""
    names = [n for n in NEURAL if n in names]
    if not names:
        return {}
    frames = np.concatenate([prepared.frames[s] for s in train_ids])
    owners = [s for s in train_ids for _ in range(len(prepared.frames[s]))]
    if guard is not None:
        guard.record("stage1", train_ids)
    stage1 = train_stage1_autoencoder(frames, config.model)
    out = {}
    if "CAE" in names:
        out["CAE"] = FoldModel(stage1.model, None, None, stage1.epochs_done, stage1.history)
    for test in (BehaviorTest.CDR, BehaviorTest.MMSE):
        name = f"BSEN_{test.value}"
        if name not in names:
            continue
        if guard is not None:
            guard.record(name, train_ids)
        res = train_stage2_contrastive(stage1.model, frames, cluster_assignments(dataset, owners, test),
                                       test, config.model)
        out[name] = FoldModel(res.model, res.centers, test, res.epochs_done, res.history)
    return out


def baseline_features(prepared: Prepared, train_ids: Sequence[str], test_ids: Sequence[str],
                      config: ExperimentConfig, fold: int, names: Sequence[str],
                      guard: Optional[LeakageGuard] = None) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """PCA / ICA on flattened averaged volumes, fit on the training ids."""
    out = {}
    flat_tr = _stack(prepared.averages, train_ids).reshape(len(train_ids), -1)
    flat_te = _stack(prepared.averages, test_ids).reshape(len(test_ids), -1)
    k = min(config.pca_components, len(train_ids) - 1, flat_tr.shape[1])
    if "PCA" in names:
        if guard is not None:
            guard.record("PCA", train_ids)
        proj = pca_fit(flat_tr, k)
        out["PCA"] = (pca_transform(proj, flat_tr), pca_transform(proj, flat_te))
    if "ICA" in names:
        if guard is not None:
            guard.record("ICA", train_ids)
        ica = ica_fit(flat_tr, k, rng=stream(config.seed, f"ica/fold{fold}"))
        out["ICA"] = (ica_transform(ica, flat_tr), ica_transform(ica, flat_te))
    return out


def checkpoint_name(fold: int, name: str) -> str:
    return f"fold{fold}_{name.lower()}.ckpt"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cv: CvResult
    recons: Dict[str, Dict[str, Volume3D]]
    histories: Dict[str, List[list]]
    checkpoints: Dict[str, str]
    guard: LeakageGuard
    seconds: float = 0.0


def _stack(d: Dict[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    return np.stack([d[s] for s in ids])


def run_experiment(dataset: CohortDataset, config: ExperimentConfig, plan: Optional[FoldPlan] = None,
                   checkpoint_dir: Optional[Union[str, Path]] = None,
                   prepared: Optional[Prepared] = None) -> ExperimentResult:
    """Full k-fold experiment. Every fitted component sees training ids only
    (enforced by a :class:`LeakageGuard`); reconstructions are out-of-fold."""
    config.validate()
    dataset.require_all_classes()
    t0 = time.perf_counter()
    prepared = prepare_cohort(dataset, config) if prepared is None else prepared
    plan = stratified_folds(dataset, config.folds, config.seed) if plan is None else plan
    exts = [e for e in EXTRACTORS if e in config.extractors]
    recons: Dict[str, Dict[str, Volume3D]] = {e: {} for e in exts if e in NEURAL}
    histories: Dict[str, List[list]] = {e: [] for e in exts if e in NEURAL}
    checkpoints: Dict[str, str] = {}
    guard = LeakageGuard()

    def fold_features(i, train_ids, test_ids, guard):
        out = baseline_features(prepared, train_ids, test_ids, config, i, exts, guard)
        x_tr = _stack(prepared.averages, train_ids)
        x_te = _stack(prepared.averages, test_ids)
        for name, fm in train_fold_models(dataset, prepared, train_ids, config, exts, guard).items():
            histories[name].append(fm.history)
            out[name] = (extract_features(fm.model, x_tr), extract_features(fm.model, x_te))
            rec = fm.model.reconstruct(x_te[:, None])
            recons[name].update({s: Volume3D(rec[j, 0]) for j, s in enumerate(test_ids)})
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / checkpoint_name(i, name)
                checkpoints[str(path)] = save_checkpoint(fm.model, path, fm.centers, fm.behavior_test,
                                                         fm.epochs_done, extra={"fold": i, "experiment_hash": config.hash()})
        log.info("fold %d done (%.1fs)", i, time.perf_counter() - t0)
        return out

    fusion = ("BSEN_CDR", "BSEN_MMSE") if {"BSEN_CDR", "BSEN_MMSE"} <= set(exts) else None
    cv = cross_validate(dataset, plan, fold_features, fusion=fusion, fusion_weights=config.fusion_weights,
                        C=config.svm_c, guard=guard)
    return ExperimentResult(config, cv, recons, histories, checkpoints, guard, time.perf_counter() - t0)
