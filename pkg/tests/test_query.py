import numpy as np
import pytest

from semsplat.compressor import PCAModel, fit_pca
from semsplat.query import (QueryError, TextQuery, UNLABELED, compress_query,
                            heatmap_to_u8, segment_multiclass, similarity_map)

rng = np.random.default_rng(6)


def test_text_query_validation():
    TextQuery("mug", np.ones(8))
    with pytest.raises(QueryError):
        TextQuery("bad", np.zeros(8))
    with pytest.raises(QueryError):
        TextQuery("bad", np.array([np.inf, 1.0]))


def test_compress_query_matches_compress():
    model = fit_pca(rng.normal(size=(50, 16)), 4)
    q = TextQuery("x", rng.normal(size=16))
    from semsplat.compressor import compress
    assert np.allclose(compress_query(model, q), compress(model, q.embedding))


def test_similarity_map_dot_product():
    feat = rng.normal(size=(4, 5, 3))
    q = rng.normal(size=3)
    sim = similarity_map(feat, q)
    assert sim.shape == (4, 5)
    assert sim[2, 3] == pytest.approx(feat[2, 3] @ q)


def test_similarity_map_normalized_is_cosine():
    feat = rng.normal(size=(4, 4, 3))
    q = rng.normal(size=3)
    sim = similarity_map(feat, q, normalize=True)
    assert np.all(sim <= 1.0 + 1e-12) and np.all(sim >= -1.0 - 1e-12)


def test_similarity_map_dim_mismatch():
    with pytest.raises(QueryError):
        similarity_map(rng.normal(size=(4, 4, 3)), rng.normal(size=5))


def test_segment_multiclass_recovers_regions():
    # two orthogonal class vectors painted into halves of the feature map
    v0 = np.array([1.0, 0.0])
    v1 = np.array([0.0, 1.0])
    feat = np.zeros((6, 8, 2))
    feat[:, :4] = v0
    feat[:, 4:] = v1
    labels = segment_multiclass(feat, [v0, v1])
    assert np.all(labels[:, :4] == 0) and np.all(labels[:, 4:] == 1)


def test_segment_ties_break_to_lowest_index():
    feat = np.ones((2, 2, 1))
    labels = segment_multiclass(feat, [np.ones(1), np.ones(1)])
    assert np.all(labels == 0)


def test_segment_reject_threshold():
    feat = np.zeros((3, 3, 2))
    labels = segment_multiclass(feat, [np.array([1.0, 0]), np.array([0, 1.0])],
                                reject_threshold=0.5)
    assert np.all(labels == UNLABELED)


def test_segment_needs_queries():
    with pytest.raises(QueryError):
        segment_multiclass(np.zeros((2, 2, 2)), [])


def test_heatmap_to_u8_range():
    sim = rng.normal(size=(5, 5))
    u8 = heatmap_to_u8(sim)
    assert u8.dtype == np.uint8
    assert u8.min() == 0 and u8.max() == 255
    assert np.all(heatmap_to_u8(np.full((3, 3), 2.0)) == 0)  # constant map
