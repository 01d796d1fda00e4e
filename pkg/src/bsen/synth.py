"""Synthetic rs-fMRI-like cohorts with planted, class-dependent regional effects.

Each subject's scan is

    template + effect bumps(class, severity) + noise_sd * (subject_sd * subject field + frame noise)

inside an ellipsoidal brain mask. The atlas partitions the mask into
``n_regions`` Voronoi cells; effect regions are atlas ids. Clinical scores are
drawn from class-conditional truncated normals.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage, spatial, stats

from .errors import ConfigError
from .seeds import stream
from .volume_io import (LABELS, Atlas, CohortDataset, Label, SubjectRecord, Volume3D, Volume4D,
                        save_atlas, save_volume, write_manifest)

# class -> (mean, sd, min, max); clinical score summaries of the reference cohort
CDR_STATS = {"HC": (0.03, 0.14, 0.0, 0.5), "MCI": (0.24, 0.33, 0.0, 2.0), "AD": (0.89, 0.45, 0.5, 2.0)}
MMSE_STATS = {"HC": (27.58, 2.21, 23, 30), "MCI": (24.70, 3.83, 5, 29), "AD": (14.48, 6.46, 6, 27)}
CDR_LEVELS = np.array([0.0, 0.5, 1.0, 2.0, 3.0])


@dataclass
class SynthSpec:
    dims: Tuple[int, int, int] = (16, 24, 16)
    nt: int = 40
    n_per_class: Tuple[int, int, int] = (26, 23, 21)
    n_regions: int = 24
    # (region id, {class: amplitude})
    effect_regions: Tuple = ((1, {"HC": 0.0, "MCI": 0.5, "AD": 1.0}),)
    noise_sd: float = 0.3
    subject_sd: float = 3.0
    # extra amplitude per unit of standardized behavioural severity
    behavior_gain: float = 0.0
    smoothing: float = 1.5
    cdr_stats: Dict = field(default_factory=lambda: dict(CDR_STATS))
    mmse_stats: Dict = field(default_factory=lambda: dict(MMSE_STATS))
    voxel_size_mm: Tuple[float, float, float] = (3.0, 3.0, 3.0)
    seed: int = 0

    def validate(self) -> None:
        if len(self.dims) != 3 or any(d <= 0 or d % 8 for d in self.dims):
            raise ConfigError(f"grid dims must be positive multiples of 8, got {self.dims}")
        if self.nt < 1:
            raise ConfigError("nt must be >= 1")
        if len(self.n_per_class) != 3 or min(self.n_per_class) < 5:
            raise ConfigError("need at least 5 subjects per class for 5-fold stratification")
        if self.n_regions < 1:
            raise ConfigError("n_regions must be >= 1")
        for rid, amps in self.effect_regions:
            if not 1 <= rid <= self.n_regions:
                raise ConfigError(f"effect region {rid} not in atlas 1..{self.n_regions}")
            unknown = set(amps) - {lab.value for lab in LABELS}
            if unknown:
                raise ConfigError(f"unknown class in amplitude map: {sorted(unknown)}")
            if not all(math.isfinite(a) for a in amps.values()):
                raise ConfigError(f"non-finite amplitude for region {rid}")
        if not (self.noise_sd >= 0 and self.subject_sd >= 0 and math.isfinite(self.behavior_gain)):
            raise ConfigError("noise_sd and subject_sd must be >= 0, behavior_gain finite")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effect_regions"] = [[rid, dict(a)] for rid, a in self.effect_regions]
        return d


@dataclass
class SynthCohort:
    dataset: CohortDataset
    atlas: Atlas
    truth: dict

    def write(self, out_dir: Union[str, Path]) -> Path:
        """Write volumes, manifest.csv, atlas and ground_truth.json; returns the manifest path."""
        out = Path(out_dir)
        (out / "volumes").mkdir(parents=True, exist_ok=True)
        for rec in self.dataset.subjects:
            save_volume(self.dataset.volume(rec.subject_id), out / rec.volume_path)
        manifest = out / "manifest.csv"
        write_manifest(self.dataset, manifest)
        save_atlas(self.atlas, out / "atlas.vol", out / "atlas_names.tsv")
        (out / "ground_truth.json").write_text(json.dumps(self.truth, indent=2, sort_keys=True) + "\n")
        return manifest


def _smooth_field(rng: np.random.Generator, dims, sigma: float, mask: np.ndarray) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    f = f[mask]
    f = (f - f.mean()) / f.std()
    out = np.zeros(dims)
    out[mask] = f
    return out


def brain_mask(dims) -> np.ndarray:
    axes = [(np.arange(n) + 0.5 - n / 2) / (n / 2 - 0.5) for n in dims]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return gx ** 2 + gy ** 2 + gz ** 2 <= 1.0


def make_atlas(dims, n_regions: int, rng: np.random.Generator) -> Atlas:
    """Voronoi partition of the brain mask into ``n_regions`` non-empty labelled cells."""
    mask = brain_mask(dims)
    coords = np.argwhere(mask).astype(np.float64)
    if len(coords) < n_regions:
        raise ConfigError(f"grid too small for {n_regions} regions")
    seeds = coords[rng.choice(len(coords), n_regions, replace=False)]
    labels = np.zeros(dims)
    # voxel -> nearest seed; every seed owns at least its own voxel
    _, nearest = spatial.cKDTree(seeds).query(coords)
    labels[mask] = nearest + 1
    names = {i: f"ROI_{i:03d}" for i in range(1, n_regions + 1)}
    return Atlas(Volume3D(labels), names)


def _truncnorm(rng, mean, sd, lo, hi, n):
    a, b = (lo - mean) / sd, (hi - mean) / sd
    return stats.truncnorm.rvs(a, b, loc=mean, scale=sd, size=n, random_state=rng)


def sample_scores(rng: np.random.Generator, label: str, n: int, spec: SynthSpec):
    cm, cs, clo, chi = spec.cdr_stats[label]
    mm, ms, mlo, mhi = spec.mmse_stats[label]
    cdr_raw = _truncnorm(rng, cm, cs, clo, chi, n)
    levels = CDR_LEVELS[(CDR_LEVELS >= clo) & (CDR_LEVELS <= chi)]
    cdr = levels[np.abs(cdr_raw[:, None] - levels[None]).argmin(1)]
    mmse = np.clip(np.rint(_truncnorm(rng, mm, ms, mlo, mhi, n)), mlo, mhi).astype(int)
    return cdr, mmse


def generate_cohort(spec: SynthSpec) -> SynthCohort:
    spec.validate()
    dims = tuple(spec.dims)
    rng_atlas = stream(spec.seed, "synth/atlas")
    rng_scores = stream(spec.seed, "synth/scores")
    rng_img = stream(spec.seed, "synth/images")
    atlas = make_atlas(dims, spec.n_regions, rng_atlas)
    mask = brain_mask(dims)
    template = _smooth_field(rng_img, dims, spec.smoothing, mask) + mask * 2.0
    labels = atlas.labels()

    records: List[SubjectRecord] = []
    classes: List[str] = []
    cdrs, mmses = [], []
    for lab, n in zip(LABELS, spec.n_per_class):
        cdr, mmse = sample_scores(rng_scores, lab.value, n, spec)
        cdrs.append(cdr)
        mmses.append(mmse)
        classes += [lab.value] * n
    cdr = np.concatenate(cdrs)
    mmse = np.concatenate(mmses)
    # severity: mean of standardized CDR and negated MMSE
    severity = 0.5 * ((cdr - cdr.mean()) / (cdr.std() or 1.0) - (mmse - mmse.mean()) / (mmse.std() or 1.0))

    volumes: Dict[str, Volume4D] = {}
    truth_subjects = []
    width = len(str(len(classes)))
    for i, (cls, c, m, sev) in enumerate(zip(classes, cdr, mmse, severity)):
        sid = f"sub-{i + 1:0{width}d}"
        static = template.copy()
        amps = {}
        for rid, amap in spec.effect_regions:
            amp = amap.get(cls, 0.0) + spec.behavior_gain * sev
            static[labels == rid] += amp
            amps[str(rid)] = amp
        if spec.noise_sd > 0 and spec.subject_sd > 0:
            static += spec.noise_sd * spec.subject_sd * _smooth_field(rng_img, dims, spec.smoothing, mask)
        frames = np.broadcast_to(static, (spec.nt,) + dims).copy()
        if spec.noise_sd > 0:
            frames += spec.noise_sd * rng_img.standard_normal(frames.shape)
        volumes[sid] = Volume4D(frames.astype(np.float32), tuple(spec.voxel_size_mm))
        records.append(SubjectRecord(sid, Label(cls), float(c), int(m), f"volumes/{sid}"))
        truth_subjects.append({"subject_id": sid, "label": cls, "severity": float(sev), "amplitudes": amps})

    dataset = CohortDataset(records, Path("."), volumes)
    truth = {"spec": spec.to_dict(), "effect_region_ids": [rid for rid, _ in spec.effect_regions],
             "subjects": truth_subjects}
    return SynthCohort(dataset, atlas, truth)
