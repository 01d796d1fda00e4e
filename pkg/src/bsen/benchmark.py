"""Planted-cohort benchmarks: the end-to-end synthetic experiment, its
shuffled-label null, and ROI calibration under label permutation.

All runs keep the default loss and optimizer hyperparameters; only
the grid, the number of frames per subject and the epoch count are reduced
so that a seed finishes in minutes on one core.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .model import BsenConfig
from .pipeline import ExperimentConfig, ExperimentResult, run_experiment
from .roi import discriminative_report
from .seeds import stream
from .synth import SynthCohort, SynthSpec, generate_cohort
from .volume_io import Atlas, CohortDataset

DIMS = (16, 24, 16)


def planted_spec(seed: int) -> SynthSpec:
    """Benchmark cohort: one planted region (HC 0, MCI 0.5, AD 1.0) over a
    strong smooth per-subject field and weak per-frame noise."""
    return SynthSpec(dims=DIMS, nt=2, noise_sd=0.3, subject_sd=3.0, seed=seed)


def desk_config(seed: int, **model_overrides) -> ExperimentConfig:
    model = BsenConfig(**{"input_dims": DIMS, "epochs": 10, "seed": seed, **model_overrides})
    return ExperimentConfig(model=model)


def shuffle_records(dataset: CohortDataset, rng: np.random.Generator) -> CohortDataset:
    """Permute (label, CDR, MMSE) tuples across subjects; images stay put."""
    perm = rng.permutation(len(dataset))
    subs = dataset.subjects
    shuffled = [dataclasses.replace(s, label=subs[j].label, cdr=subs[j].cdr, mmse=subs[j].mmse)
                for s, j in zip(subs, perm)]
    return CohortDataset(shuffled, dataset.root, dataset.volumes)


@dataclass
class PlantedRun:
    seed: int
    uar: Dict[str, float]
    table: Dict[str, Dict[str, float]]
    top_region: Dict[str, int]  # extractor -> region id ranked first by |t|
    planted_region: int
    seconds: float
    result: Optional[ExperimentResult] = None
    cohort: Optional[SynthCohort] = None


def run_planted(seed: int, shuffled: bool = False, keep: bool = False, **model_overrides) -> PlantedRun:
    """One seed of the benchmark: 5-fold CV of every extractor, then the
    HC-vs-AD ROI ranking on the out-of-fold reconstructions."""
    cohort = generate_cohort(planted_spec(seed))
    dataset = cohort.dataset
    if shuffled:
        dataset = shuffle_records(dataset, stream(seed, "bench/shuffle"))
    config = desk_config(seed, **model_overrides)
    t0 = time.perf_counter()
    res = run_experiment(dataset, config)
    report = discriminative_report(res.recons, dataset, cohort.atlas)
    top = {ext: report.ranked(ext)[0].region_id for ext in res.recons}
    table = res.cv.table()
    return PlantedRun(seed, {k: v["UAR"] for k, v in table.items()}, table, top,
                      cohort.truth["effect_region_ids"][0], time.perf_counter() - t0,
                      res if keep else None, cohort if keep else None)


def roi_null_fpr(recons: Dict[str, np.ndarray], dataset: CohortDataset, atlas: Atlas, n_shuffles: int,
                 rng: np.random.Generator, alpha_level: float = 0.05) -> List[float]:
    """Raw-p false-positive rate of the HC-vs-AD ROI tests over all regions,
    once per random relabelling of the HC and AD subjects."""
    rates = []
    for _ in range(n_shuffles):
        ds = shuffle_records(dataset, rng)
        report = discriminative_report({"x": recons}, ds, atlas, alpha_level=alpha_level)
        rates.append(report.false_positive_rate("x"))
    return rates


__all__ = ["DIMS", "planted_spec", "desk_config", "shuffle_records", "PlantedRun", "run_planted",
           "roi_null_fpr"]
