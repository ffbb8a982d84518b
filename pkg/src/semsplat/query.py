"""Open-vocabulary segmentation over rendered feature maps: compress a text
embedding, score it per pixel by dot product, and derive heat maps and
multi-class label maps."""

from dataclasses import dataclass

import numpy as np

from .compressor import PCAModel, compress

UNLABELED = np.uint16(0xFFFF)


class QueryError(ValueError):
    pass


@dataclass
class TextQuery:
    label: str
    embedding: np.ndarray  # already projected into the visual embedding space

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if not np.all(np.isfinite(self.embedding)):
            raise QueryError(f"non-finite embedding for query {self.label!r}")
        if np.linalg.norm(self.embedding) == 0:
            raise QueryError(f"zero embedding for query {self.label!r}")


def compress_query(pca: PCAModel, q: TextQuery):
    return compress(pca, q.embedding)


def similarity_map(feature, query_k, normalize=False):
    """Per-pixel dot product of the feature map with a compressed query.
    normalize=True switches to cosine similarity (useful near alpha<1
    boundaries where feature magnitude shrinks)."""
    feature = np.asarray(feature, dtype=np.float64)
    query_k = np.asarray(query_k, dtype=np.float64)
    if feature.shape[-1] != query_k.shape[0]:
        raise QueryError(f"feature K={feature.shape[-1]} != query K={query_k.shape[0]}")
    sim = feature @ query_k
    if normalize:
        fn = np.maximum(np.linalg.norm(feature, axis=-1), 1e-12)
        sim = sim / (fn * max(np.linalg.norm(query_k), 1e-12))
    return sim


def segment_multiclass(feature, queries, reject_threshold=None, normalize=False):
    """Per-pixel argmax over query similarity maps; ties break toward the
    lowest query index. Pixels below reject_threshold become UNLABELED."""
    if len(queries) == 0:
        raise QueryError("need at least one query")
    sims = np.stack([similarity_map(feature, q, normalize) for q in queries], axis=0)
    labels = sims.argmax(axis=0).astype(np.uint16)
    if reject_threshold is not None:
        labels = np.where(sims.max(axis=0) < reject_threshold, UNLABELED, labels)
    return labels


def heatmap_to_u8(sim):
    """Min/max normalization to [0,255] for visualization only."""
    sim = np.asarray(sim, dtype=np.float64)
    lo, hi = sim.min(), sim.max()
    if hi - lo < 1e-12:
        return np.zeros(sim.shape, dtype=np.uint8)
    return np.clip((sim - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
