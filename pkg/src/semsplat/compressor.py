"""PCA embedding compressor.

Fits a linear 768->K projection on a (noise-augmented) bank of embeddings,
compresses/decompresses vectors and feature grids, and resizes grids with
bilinear interpolation (align-corners-false).
"""

import struct

import numpy as np

EMBED_DIM = 768

LEGP_MAGIC = b"LEGP"
LEGP_VERSION = 1


class CompressorError(ValueError):
    pass


class PCAModel:
    """mean + orthonormal component rows, sorted by descending explained variance."""

    def __init__(self, mean, components):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.components = np.asarray(components, dtype=np.float64)
        self.k = self.components.shape[0]
        if self.mean.ndim != 1 or self.components.ndim != 2:
            raise CompressorError("bad PCA model shapes")
        if self.components.shape[1] != self.mean.shape[0]:
            raise CompressorError("component width != mean length")
        if not (1 <= self.k <= self.mean.shape[0]):
            raise CompressorError(f"K={self.k} outside [1, {self.mean.shape[0]}]")

    @property
    def dim(self):
        return self.mean.shape[0]

    def orthonormality_error(self):
        g = self.components @ self.components.T
        return float(np.abs(g - np.eye(self.k)).max())

    @staticmethod
    def identity(k):
        """K-dim identity model (mean 0, axis-aligned components).
        Used when features are already stored compressed."""
        return PCAModel(np.zeros(k), np.eye(k))


def synthesize_training_set(base, augment_per_base, min_cos, rng):
    """Every base row plus `augment_per_base` noisy copies per row, each kept
    within cosine similarity >= min_cos of its original.

    Noise is isotropic Gaussian with sigma = 0.05*||v||; when a draw violates
    the cosine floor its amplitude is shrunk by bisection, so the constraint
    holds deterministically.
    """
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 2:
        raise CompressorError("base must be a 2-D matrix")
    if not np.all(np.isfinite(base)):
        raise CompressorError("base rows must be finite")
    norms = np.linalg.norm(base, axis=1)
    if np.any(norms == 0):
        raise CompressorError("zero-norm base row")
    if not (0.0 < min_cos < 1.0):
        raise CompressorError("min_cos must lie in (0,1)")

    rows = [base]
    for _ in range(int(augment_per_base)):
        noise = rng.standard_normal(base.shape) * (0.05 * norms[:, None])
        lo = np.zeros(base.shape[0])
        hi = np.ones(base.shape[0])

        def cos_at(t):
            v = base + t[:, None] * noise
            nv = np.linalg.norm(v, axis=1)
            return np.sum(v * base, axis=1) / np.maximum(nv * norms, 1e-300)

        ok = cos_at(hi) >= min_cos
        # bisect the noise amplitude for the violating rows (t=0 always passes)
        t = np.where(ok, hi, 0.0)
        work = ~ok
        if np.any(work):
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                good = cos_at(mid) >= min_cos
                lo = np.where(work & good, mid, lo)
                hi = np.where(work & ~good, mid, hi)
            t = np.where(work, lo, t)
        rows.append(base + t[:, None] * noise)
    return np.vstack(rows)


def fit_pca(data, k):
    """Top-K principal directions of the centered data via SVD.

    Rank-deficient data is accepted: trailing components come from the SVD's
    orthonormal completion and carry zero variance. Sign convention: the
    largest-magnitude entry of each component is made positive.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise CompressorError("data must be a 2-D matrix")
    m, d = data.shape
    if m < k:
        raise CompressorError(f"insufficient data: {m} rows < K={k}")
    if not np.all(np.isfinite(data)):
        raise CompressorError("data must be finite")
    mean = data.mean(axis=0)
    centered = data - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=True)
    comps = vt[:k].copy()
    flip = np.take_along_axis(comps, np.abs(comps).argmax(axis=1)[:, None], axis=1) < 0
    comps[flip[:, 0]] *= -1.0
    return PCAModel(mean, comps)


def compress(model: PCAModel, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.dim,):
        raise CompressorError(f"vector length {v.shape} != {model.dim}")
    return model.components @ (v - model.mean)


def compress_grid(model: PCAModel, grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[2] != model.dim:
        raise CompressorError(f"grid channels {grid.shape} != {model.dim}")
    return (grid - model.mean) @ model.components.T


def decompress(model: PCAModel, c):
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != model.k:
        raise CompressorError(f"code length {c.shape} != K={model.k}")
    return c @ model.components + model.mean


def eval_compression(model: PCAModel, data):
    """Mean cosine similarity between rows and their round-trip reconstructions.
    Zero-norm rows are skipped; returns (mean_cos, skipped_count)."""
    data = np.asarray(data, dtype=np.float64)
    norms = np.linalg.norm(data, axis=1)
    valid = norms > 0
    skipped = int(np.count_nonzero(~valid))
    rows = data[valid]
    recon = decompress(model, compress_grid(model, rows[None])[0])
    rn = np.linalg.norm(recon, axis=1)
    cos = np.sum(rows * recon, axis=1) / np.maximum(norms[valid] * rn, 1e-300)
    return float(cos.mean()), skipped


def resize_bilinear(grid, out_h, out_w):
    """Bilinear resize with the align-corners-false convention (cell centers
    at (i+0.5)/n). Works per channel; used both to upsample 37x37 feature
    grids to image resolution and to downsample rendered maps."""
    grid = np.asarray(grid, dtype=np.float64)
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid[:, :, None]
    h, w, _ = grid.shape
    if out_h < 1 or out_w < 1:
        raise CompressorError("target size below 1x1")
    if h < 2 or w < 2:
        raise CompressorError("source grid must be at least 2x2")
    if (out_h, out_w) == (h, w):
        out = grid.copy()
        return out[:, :, 0] if squeeze else out

    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]

    top = grid[y0][:, x0] * (1 - wx) + grid[y0][:, x1] * wx
    bot = grid[y1][:, x0] * (1 - wx) + grid[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


def upsample_bilinear(grid, out_h, out_w):
    return resize_bilinear(grid, out_h, out_w)


def save_pca(model: PCAModel, path):
    """Binary format: magic "LEGP", version u32, K u32, mean (D f32 LE),
    components row-major (K x D f32 LE)."""
    with open(path, "wb") as f:
        f.write(LEGP_MAGIC)
        f.write(struct.pack("<II", LEGP_VERSION, model.k))
        f.write(model.mean.astype("<f4").tobytes())
        f.write(model.components.astype("<f4").tobytes())


def load_pca(path, dim=EMBED_DIM) -> PCAModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != LEGP_MAGIC:
            raise CompressorError(f"bad magic {magic!r}")
        version, k = struct.unpack("<II", f.read(8))
        if version != LEGP_VERSION:
            raise CompressorError(f"unsupported LEGP version {version}")
        payload = f.read()
    expected = 4 * (dim + k * dim)
    if len(payload) != expected:
        raise CompressorError(f"LEGP payload {len(payload)} bytes, expected {expected}")
    mean = np.frombuffer(payload[:4 * dim], dtype="<f4").astype(np.float64)
    comps = np.frombuffer(payload[4 * dim:], dtype="<f4").astype(np.float64).reshape(k, dim)
    return PCAModel(mean, comps)
