"""ROI statistics on decoder reconstructions: per-region mean activation,
pooled-variance two-sample t-tests (HC vs AD), family-wise error correction,
and a report grouped by which extractors find a region significant."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import DataError
from .model import BsenNet
from .volume_io import Atlas, CohortDataset, Label, Volume3D

# --------------------------------------------------------------------------
# special functions


def _betacf(a: float, b: float, x: float, eps: float = 1e-16, max_iter: int = 10000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if t == 0:
        return 1.0
    return float(min(1.0, betainc(df / 2.0, 0.5, df / (df + t * t))))


class TTest(NamedTuple):
    t: float
    p: float


def two_sided_t_test(group_a: Sequence[float], group_b: Sequence[float]) -> TTest:
    """Student's two-sample t-test with pooled variance."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise DataError(f"t-test needs at least 2 samples per group, got {na} and {nb}")
    df = na + nb - 2
    diff = a.mean() - b.mean()
    pooled = (((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / df
    scale = max(abs(a).max(), abs(b).max(), 1e-300)
    if pooled <= (1e-14 * scale) ** 2:
        if abs(diff) <= 1e-14 * scale:
            warnings.warn("t-test: zero variance and equal means; returning t=0, p=1", RuntimeWarning)
            return TTest(0.0, 1.0)
        raise DataError("t-test: zero pooled variance with different group means")
    t = diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    return TTest(float(t), t_two_sided_p(t, df))


def fwe_correct(p_values: Sequence[float], method: str = "holm") -> np.ndarray:
    """Bonferroni or Holm step-down adjusted p-values, aligned to the input."""
    p = np.asarray(p_values, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    n = len(p)
    if method == "bonferroni":
        return np.minimum(1.0, n * p)
    if method == "holm":
        order = np.argsort(p, kind="stable")
        adj = np.minimum(1.0, (n - np.arange(n)) * p[order])
        adj = np.maximum.accumulate(adj)
        out = np.empty(n)
        out[order] = adj
        return out
    raise ValueError(f"unknown correction method {method!r}")


# --------------------------------------------------------------------------
# reconstructions and ROI means


def reconstruct_cohort(model: BsenNet, volumes: Mapping[str, np.ndarray]) -> Dict[str, Volume3D]:
    """Encoder->decoder pass (inference mode) for each prepared subject volume."""
    ids = list(volumes)
    if not ids:
        return {}
    stack = np.stack([np.asarray(volumes[s]) for s in ids])
    if tuple(stack.shape[1:]) != model.config.input_dims:
        raise DataError(f"volume dims {stack.shape[1:]} do not match model dims {model.config.input_dims}")
    recon = model.reconstruct(stack[:, None])
    return {s: Volume3D(recon[i, 0]) for i, s in enumerate(ids)}


def roi_mean_activation(vol: Union[Volume3D, np.ndarray], atlas: Atlas) -> Dict[int, float]:
    data = vol.data if isinstance(vol, Volume3D) else np.asarray(vol)
    if tuple(data.shape) != atlas.dims:
        raise DataError(f"volume dims {data.shape} do not match atlas dims {atlas.dims}")
    labels = atlas.labels().ravel()
    flat = data.astype(np.float64).ravel()
    sums = np.bincount(labels, weights=flat, minlength=max(atlas.region_ids, default=0) + 1)
    counts = np.bincount(labels, minlength=len(sums))
    out = {}
    empty = []
    for rid in atlas.region_ids:
        if rid < len(counts) and counts[rid] > 0:
            out[rid] = float(sums[rid] / counts[rid])
        else:
            empty.append(rid)
    if empty:
        warnings.warn(f"atlas regions without voxels skipped: {empty}", RuntimeWarning)
    return out


# --------------------------------------------------------------------------
# report


@dataclass
class RoiStats:
    region_id: int
    name: str
    n: Dict[str, int]
    mean: Dict[str, float]
    sd: Dict[str, float]
    t_value: float
    p_value: float
    p_holm: float = 1.0
    p_bonferroni: float = 1.0

    def p(self, correction: str) -> float:
        return {"none": self.p_value, "holm": self.p_holm, "bonferroni": self.p_bonferroni}[correction]

    def cell(self) -> str:
        return f"{self.t_value:.3f} / {self.p_value:.3f}"


def roi_group_stats(recons: Mapping[str, Union[Volume3D, np.ndarray]], dataset: CohortDataset,
                    atlas: Atlas, groups=(Label.HC, Label.AD)) -> List[RoiStats]:
    """Per-region t-tests of ROI means between ``groups`` (first minus second)."""
    ga, gb = groups
    ids_a = [s.subject_id for s in dataset.subjects if s.label == ga and s.subject_id in recons]
    ids_b = [s.subject_id for s in dataset.subjects if s.label == gb and s.subject_id in recons]
    if len(ids_a) < 2 or len(ids_b) < 2:
        raise DataError(f"need >= 2 subjects per group, got {ga.value}={len(ids_a)}, {gb.value}={len(ids_b)}")
    means = {s: roi_mean_activation(recons[s], atlas) for s in ids_a + ids_b}
    regions = sorted(set.intersection(*(set(m) for m in means.values())))
    stats = []
    for rid in regions:
        va = np.array([means[s][rid] for s in ids_a])
        vb = np.array([means[s][rid] for s in ids_b])
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                t, p = two_sided_t_test(va, vb)
        except DataError:
            # constant but different groups: infinitely significant
            t, p = math.copysign(math.inf, va.mean() - vb.mean()), 0.0
        stats.append(RoiStats(rid, atlas.names[rid],
                              {ga.value: len(va), gb.value: len(vb)},
                              {ga.value: float(va.mean()), gb.value: float(vb.mean())},
                              {ga.value: float(va.std(ddof=1)), gb.value: float(vb.std(ddof=1))},
                              float(t), float(p)))
    if stats:
        raw = [s.p_value for s in stats]
        for s, ph, pb in zip(stats, fwe_correct(raw, "holm"), fwe_correct(raw, "bonferroni")):
            s.p_holm, s.p_bonferroni = float(ph), float(pb)
    return stats


SECTIONS = (
    ("ROIs found in CAE and BSEN", lambda s: "CAE" in s and ("BSEN_CDR" in s or "BSEN_MMSE" in s)),
    ("ROIs found in BSEN only", lambda s: "CAE" not in s and "BSEN_CDR" in s and "BSEN_MMSE" in s),
    ("ROIs found in BSEN_CDR only", lambda s: s == {"BSEN_CDR"}),
    ("ROIs found in BSEN_MMSE only", lambda s: s == {"BSEN_MMSE"}),
)


@dataclass
class RoiReport:
    stats: Dict[str, List[RoiStats]]  # extractor -> per-region stats
    alpha_level: float = 0.05
    correction: str = "none"
    groups: tuple = ("HC", "AD")
    header: Dict[str, object] = field(default_factory=dict)

    def significant(self, extractor: str) -> List[RoiStats]:
        return [s for s in self.stats[extractor] if s.p(self.correction) < self.alpha_level]

    def ranked(self, extractor: str) -> List[RoiStats]:
        return sorted(self.stats[extractor], key=lambda s: (-abs(s.t_value), s.region_id))

    def sections(self) -> Dict[str, List[int]]:
        found: Dict[int, set] = {}
        for ext in self.stats:
            for s in self.significant(ext):
                found.setdefault(s.region_id, set()).add(ext)
        return {title: sorted(r for r, exts in found.items() if rule(exts)) for title, rule in SECTIONS}

    def false_positive_rate(self, extractor: str) -> float:
        stats = self.stats[extractor]
        return sum(s.p_value < self.alpha_level for s in stats) / max(len(stats), 1)

    def to_markdown(self) -> str:
        by_id = {ext: {s.region_id: s for s in st} for ext, st in self.stats.items()}
        names = {s.region_id: s.name for st in self.stats.values() for s in st}
        lines = ["# Discriminative ROIs", ""]
        for k, v in self.header.items():
            lines.append(f"- {k}: {v}")
        lines += [f"- contrast: {self.groups[0]} vs {self.groups[1]} (two-sided Student t, pooled variance)",
                  f"- significance: p < {self.alpha_level} ({'uncorrected' if self.correction == 'none' else self.correction + '-corrected'})",
                  ""]
        exts = list(self.stats)
        for title, regions in self.sections().items():
            lines += [f"## {title}", ""]
            if not regions:
                lines += ["(none)", ""]
                continue
            lines.append("| ROI | " + " | ".join(f"{e} t / p" for e in exts) + " | " +
                         " | ".join(f"{e} p_holm" for e in exts) + " |")
            lines.append("|" + "---|" * (1 + 2 * len(exts)))
            for rid in regions:
                cells = [by_id[e][rid].cell() if rid in by_id[e] else "X" for e in exts]
                holm = [f"{by_id[e][rid].p_holm:.3f}" if rid in by_id[e] else "X" for e in exts]
                lines.append(f"| {names[rid]} | " + " | ".join(cells) + " | " + " | ".join(holm) + " |")
            lines.append("")
        lines += ["## Ranking by |t|", ""]
        for e in exts:
            top = ", ".join(f"{s.name} ({s.t_value:.3f})" for s in self.ranked(e)[:5])
            lines.append(f"- {e}: {top}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Union[str, Path], header_comment: Optional[str] = None) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        md = out_dir / "roi_report.md"
        md.write_text(self.to_markdown(), encoding="utf-8")
        written.append(md)
        for ext, stats in self.stats.items():
            rows = []
            if header_comment:
                rows.append(f"# {header_comment}")
            rows.append("\t".join(["region_id", "name", "group", "n", "mean", "sd", "t", "p_raw", "p_holm", "p_bonferroni"]))
            for s in stats:
                for g in self.groups:
                    rows.append("\t".join([str(s.region_id), s.name, g, str(s.n[g]), f"{s.mean[g]:.6g}",
                                           f"{s.sd[g]:.6g}", f"{s.t_value:.6g}", f"{s.p_value:.6g}",
                                           f"{s.p_holm:.6g}", f"{s.p_bonferroni:.6g}"]))
            path = out_dir / f"roi_{ext.lower()}.tsv"
            path.write_text("\n".join(rows) + "\n", encoding="utf-8")
            written.append(path)
        return written


def discriminative_report(recons: Mapping[str, Mapping[str, Union[Volume3D, np.ndarray]]],
                          dataset: CohortDataset, atlas: Atlas, alpha_level: float = 0.05,
                          correction: str = "none", header: Optional[dict] = None) -> RoiReport:
    """HC-vs-AD ROI statistics for each extractor's reconstructions."""
    if correction not in ("none", "holm", "bonferroni"):
        raise ValueError(f"unknown correction {correction!r}")
    stats = {ext: roi_group_stats(r, dataset, atlas) for ext, r in recons.items()}
    return RoiReport(stats, alpha_level, correction, header=dict(header or {}))
