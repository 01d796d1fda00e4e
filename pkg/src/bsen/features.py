"""Per-subject feature vectors.

BSEN/CAE features are the encoder bottleneck of the subject's averaged
volume, mean-pooled across channels. PCA and ICA baselines operate on the
same flattened averaged volumes.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .errors import DataError
from .model import BsenNet

log = logging.getLogger(__name__)


class Extractor(str, Enum):
    ICA = "ICA"
    PCA = "PCA"
    CAE = "CAE"
    BSEN_CDR = "BSEN_CDR"
    BSEN_MMSE = "BSEN_MMSE"


@dataclass(frozen=True)
class FeatureVector:
    subject_id: str
    values: np.ndarray
    extractor: Extractor

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.subject_id}: non-finite feature values")


def pool_channels(latent: np.ndarray, channels: int) -> np.ndarray:
    """Mean over the bottleneck channels of flattened latents ``(N, C*S)``."""
    latent = np.atleast_2d(latent)
    return latent.reshape(len(latent), channels, -1).mean(axis=1)


def extract_features(model: BsenNet, volumes: np.ndarray) -> np.ndarray:
    """Channel-pooled bottleneck for a stack of prepared volumes ``(N, x, y, z)``."""
    volumes = np.asarray(volumes)
    if tuple(volumes.shape[-3:]) != model.config.input_dims:
        raise DataError(f"volume dims {volumes.shape[-3:]} do not match checkpoint dims {model.config.input_dims}")
    latent = model.encode(volumes.reshape((-1, 1) + model.config.input_dims))
    return pool_channels(latent, model.config.channels[-1]).astype(np.float64)


def extract_feature(model: BsenNet, subject_id: str, volume: np.ndarray,
                    extractor: Extractor = Extractor.BSEN_CDR) -> FeatureVector:
    return FeatureVector(subject_id, extract_features(model, volume[None])[0], Extractor(extractor))


# --------------------------------------------------------------------------
# PCA


@dataclass
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # (k, dims), rows orthonormal
    explained_variance: np.ndarray  # (k,), non-increasing


def pca_fit(x: np.ndarray, k: int) -> PcaProjection:
    """Top-``k`` principal axes of the mean-centered rows of ``x``.

    Null components (zero variance) are dropped with a warning, so the
    returned projection can have fewer than ``k`` rows.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} must lie in [1, min(samples, dims)={min(n, d)}]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s ** 2 / max(n - 1, 1)
    keep = var[:k] > 1e-12 * max(var[0], 1e-300)
    if not keep.all():
        warnings.warn(f"PCA: dropping {int((~keep).sum())} zero-variance component(s)", RuntimeWarning)
    comps = vt[:k][keep]
    # sign convention: largest-magnitude loading positive
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    return PcaProjection(mean, comps * flip[:, None], var[:k][keep])


def pca_transform(proj: PcaProjection, x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - proj.mean) @ proj.components.T


# --------------------------------------------------------------------------
# FastICA (symmetric decorrelation, tanh contrast)


@dataclass
class IcaUnmixing:
    pca: PcaProjection
    whitening: np.ndarray  # (k,) scale applied to PCA scores
    unmixing: np.ndarray  # (k, k), applied to whitened scores
    converged: bool
    n_iter: int


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    s, u = np.linalg.eigh(w @ w.T)
    s = np.clip(s, 1e-300, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ w


# sd of y*tanh(y) - sech(y)^2 for y ~ N(0, 1) (numerical quadrature); the mean is 0
_GAUSS_SD = 0.9266592646955571


def ica_fit(x: np.ndarray, k: int, rng: Optional[np.random.Generator] = None,
            tol: float = 1e-4, max_iter: int = 200) -> IcaUnmixing:
    """FastICA on PCA-whitened data. On non-convergence the last iterate is
    returned with ``converged=False``.

    Converged means the fixed-point iteration settled *and* every component
    is distinguishable from a Gaussian: the fixed-point statistic
    mean(y g(y) - g'(y)) vanishes for Gaussian y, so each component must
    exceed two standard errors of it. Without that test sample noise gives
    Gaussian data spurious, "stable" fixed points.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    pca = pca_fit(x, k)
    k = len(pca.components)
    scale = 1.0 / np.sqrt(pca.explained_variance)
    z = pca_transform(pca, x) * scale  # (n, k), identity covariance
    n = len(z)
    w = _sym_decorrelate(rng.normal(size=(k, k)))
    stable = False
    it = 0
    for it in range(1, max_iter + 1):
        wx = z @ w.T  # (n, k)
        g = np.tanh(wx)
        g_prime = 1.0 - g * g
        w_new = _sym_decorrelate(g.T @ z / n - g_prime.mean(axis=0)[:, None] * w)
        lim = np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0))
        w = w_new
        if lim < tol:
            stable = True
            break
    y = z @ w.T
    g = np.tanh(y)
    stat = np.abs(np.mean(y * g - (1.0 - g * g), axis=0)) * np.sqrt(n) / _GAUSS_SD
    identifiable = bool(stat.min() > 2.0)
    if not stable:
        log.warning("FastICA did not converge in %d iterations", max_iter)
    elif not identifiable:
        log.warning("FastICA did not converge: a component is indistinguishable from Gaussian")
    return IcaUnmixing(pca, scale, w, stable and identifiable, it)


def ica_transform(model: IcaUnmixing, x: np.ndarray) -> np.ndarray:
    return (pca_transform(model.pca, x) * model.whitening) @ model.unmixing.T


# --------------------------------------------------------------------------
# feature tables


def write_feature_table(path: Union[str, Path], features: Sequence[FeatureVector],
                        header_comment: Optional[str] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    width = len(features[0].values) if features else 0
    lines.append("\t".join(["subject_id", "extractor"] + [f"f{i}" for i in range(width)]))
    for fv in features:
        lines.append("\t".join([fv.subject_id, fv.extractor.value] + [repr(float(v)) for v in fv.values]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_feature_table(path: Union[str, Path]) -> List[FeatureVector]:
    out = []
    rows = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l and not l.startswith("#")]
    for line in rows[1:]:
        parts = line.split("\t")
        out.append(FeatureVector(parts[0], np.array([float(v) for v in parts[2:]]), Extractor(parts[1])))
    return out
