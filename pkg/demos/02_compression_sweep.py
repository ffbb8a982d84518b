"""Walkthrough: PCA compression of a 768-dim embedding bank and the
dimensionality sweep that motivates the default K.

The bank stands in for text-class embeddings: unit cluster centers plus small
intra-class noise, so its intrinsic dimension is roughly the class count.
Training data is the bank plus noisy augmentations, each kept within cosine
similarity >= 0.95 of its original. The sweep reports mean round-trip cosine
similarity per K -- quality should saturate once K reaches the intrinsic
dimension.

Run:  python demos/02_compression_sweep.py
"""
import numpy as np

from semsplat import compress, decompress, eval_compression, fit_pca
from semsplat.compressor import synthesize_training_set
from semsplat.dataio import generate_synthetic_bank

n_classes = 16
bank = generate_synthetic_bank(n_classes=n_classes, per_class=20, dim=768, seed=1)
print(f"bank: {bank.shape[0]} rows, {bank.shape[1]} dims, "
      f"{n_classes} classes -> intrinsic dimension ~{n_classes}")

rng = np.random.default_rng(0)
data = synthesize_training_set(bank[::20], augment_per_base=10,
                               min_cos=0.95, rng=rng)
print(f"training set: {data.shape[0]} rows "
      f"(16 originals + 10 augmentations each)")

print(f"\n{'Dim':>4} | {'CosSim':>7}")
print("-" * 15)
for k in (3, 6, 9, 12, 16, 24, 32, 48, 64, 80, 96, 128):
    model = fit_pca(data, k)
    mean_cos, _ = eval_compression(model, bank)
    print(f"{k:>4} | {mean_cos:7.4f}")

# a single vector through the round trip
model = fit_pca(data, 16)
v = bank[40]
c = compress(model, v)
r = decompress(model, c)
cos = float(v @ r / (np.linalg.norm(v) * np.linalg.norm(r)))
print(f"\none vector, K=16: code shape {c.shape}, round-trip cosine {cos:.4f}")
