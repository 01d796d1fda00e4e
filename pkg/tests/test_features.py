import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsen.errors import DataError
from bsen.features import (Extractor, FeatureVector, extract_feature, extract_features, ica_fit,
                           ica_transform, pca_fit, pca_transform, pool_channels, read_feature_table,
                           write_feature_table)
from bsen.model import BsenConfig, build_model


# -- pooling --------------------------------------------------------------------

def test_pool_identical_channels_equals_one_channel(rng):
    chan = rng.standard_normal((3, 12))
    lat = np.tile(chan[:, None, :], (1, 8, 1)).reshape(3, -1)
    assert np.allclose(pool_channels(lat, 8), chan, rtol=0, atol=1e-15)


def test_pool_is_channel_mean_oracle(rng):
    lat = rng.standard_normal((2, 8 * 12))
    oracle = np.array([[np.mean([lat[b, c * 12 + s] for c in range(8)]) for s in range(12)] for b in range(2)])
    assert np.allclose(pool_channels(lat, 8), oracle, atol=1e-14)


@pytest.mark.parametrize("dims, width", [((64, 80, 64), 640), ((64, 72, 64), 576), ((16, 24, 16), 12)])
def test_feature_width(dims, width):
    cfg = BsenConfig(input_dims=dims)
    assert cfg.latent_dim // cfg.channels[-1] == width


def test_extract_feature_deterministic_and_checked(rng):
    net = build_model(BsenConfig(input_dims=(16, 24, 16), seed=4))
    vol = rng.standard_normal((16, 24, 16)).astype(np.float32)
    a = extract_feature(net, "s1", vol)
    b = extract_feature(net, "s1", vol)
    assert a.values.shape == (12,) and np.array_equal(a.values, b.values)
    assert np.array_equal(extract_features(net, vol[None])[0], a.values)
    with pytest.raises(DataError):
        extract_feature(net, "s1", np.zeros((16, 24, 8), np.float32))


def test_feature_vector_rejects_non_finite():
    with pytest.raises(DataError):
        FeatureVector("s", np.array([1.0, np.nan]), Extractor.PCA)


def test_feature_table_roundtrip(tmp_path, rng):
    rows = [FeatureVector(f"s{i}", rng.standard_normal(5), Extractor.BSEN_MMSE) for i in range(4)]
    write_feature_table(tmp_path / "f.tsv", rows, "config_hash=abc seed=1")
    back = read_feature_table(tmp_path / "f.tsv")
    assert [r.subject_id for r in back] == [r.subject_id for r in rows]
    assert all(np.array_equal(a.values, b.values) and a.extractor == b.extractor for a, b in zip(rows, back))


# -- PCA ------------------------------------------------------------------------

def test_pca_recovers_line(rng):
    direction = np.array([1.0, -2.0, 0.5]) / np.linalg.norm([1.0, -2.0, 0.5])
    x = rng.standard_normal((30, 1)) * direction + np.array([3.0, 1.0, -1.0])
    proj = pca_fit(x, 1)
    assert abs(abs(proj.components[0] @ direction) - 1) < 1e-12
    recon = pca_transform(proj, x) @ proj.components + proj.mean
    assert np.abs(recon - x).max() < 1e-8


def test_pca_matches_eigh_oracle(rng):
    x = rng.standard_normal((20, 50))
    proj = pca_fit(x, 5)
    xc = x - x.mean(0)
    vals, vecs = np.linalg.eigh(xc.T @ xc / 19)
    order = np.argsort(vals)[::-1][:5]
    oracle = vecs[:, order].T
    signs = np.sign(np.sum(proj.components * oracle, axis=1))
    assert np.abs(proj.components - oracle * signs[:, None]).max() < 1e-6
    assert np.abs(proj.explained_variance - vals[order]).max() < 1e-6
    assert np.abs(pca_transform(proj, x) - xc @ (oracle * signs[:, None]).T).max() < 1e-6


@given(st.integers(0, 2 ** 31), st.integers(2, 9))
def test_pca_variances_non_increasing(seed, k):
    x = np.random.default_rng(seed).standard_normal((12, 10))
    v = pca_fit(x, k).explained_variance
    assert np.all(np.diff(v) <= 1e-12)


def test_pca_rejects_bad_k(rng):
    with pytest.raises(ValueError):
        pca_fit(rng.standard_normal((5, 3)), 4)
    with pytest.raises(ValueError):
        pca_fit(rng.standard_normal((5, 3)), 0)


def test_pca_drops_null_components(rng):
    x = np.zeros((6, 4))
    x[:, 0] = rng.standard_normal(6)
    with pytest.warns(RuntimeWarning):
        proj = pca_fit(x, 3)
    assert len(proj.components) == 1


# -- ICA ------------------------------------------------------------------------

def test_ica_separates_uniform_sources(rng):
    s = rng.uniform(-1, 1, size=(2000, 2))
    x = s @ rng.standard_normal((2, 2)).T
    model = ica_fit(x, 2, rng=np.random.default_rng(1))
    assert model.converged
    rec = ica_transform(model, x)
    corr = np.abs(np.corrcoef(rec.T, s.T)[:2, 2:])
    assert corr.max(axis=1).min() > 0.95 and corr.max(axis=0).min() > 0.95


def test_ica_components_uncorrelated(rng):
    x = rng.laplace(size=(500, 4)) @ rng.standard_normal((4, 6))
    rec = ica_transform(ica_fit(x, 4, rng=np.random.default_rng(2)), x)
    c = np.corrcoef(rec.T)
    assert np.abs(c - np.eye(4)).max() < 1e-6


@pytest.mark.parametrize("n, seed", [(400, 0), (400, 1), (400, 2), (5000, 3), (5000, 4)])
def test_ica_gaussian_does_not_converge(n, seed, caplog):
    x = np.random.default_rng(seed).standard_normal((n, 3))
    with caplog.at_level(logging.WARNING):
        model = ica_fit(x, 3, rng=np.random.default_rng(0))
    assert not model.converged and "did not converge" in caplog.text


def test_ica_deterministic_for_seed(rng):
    x = rng.laplace(size=(100, 5))
    a = ica_fit(x, 3, rng=np.random.default_rng(9))
    b = ica_fit(x, 3, rng=np.random.default_rng(9))
    assert np.array_equal(a.unmixing, b.unmixing)
