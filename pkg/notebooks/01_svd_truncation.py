# %% [markdown]
# # Low-rank truncation of static weights
#
# A dense weight `W` (d1 x d2) costs d1*d2 MACs per input vector. After an SVD
# truncated to rank k the two thin factors cost k*(d1+d2), so keeping
# k <= d1*d2 // (d1+d2) never adds work. We look at what that cut does to the
# reconstruction error for a few spectra.

# %%
import numpy as np

from hfpim.svdcore import hard_threshold_rank, merge_sigma_vt, svd_decompose, truncate_to_threshold, truncation_error

for d1, d2 in [(768, 768), (768, 3072), (2048, 8192)]:
    k = hard_threshold_rank(d1, d2)
    print(f"{d1:5d} x {d2:5d}: k = {k:5d}, MACs {d1 * d2:>9d} -> {k * (d1 + d2):>9d}")

# %% [markdown]
# A random Gaussian matrix has a flat spectrum, so the threshold throws away a
# lot. Trained weights decay faster; a power law stands in for that here.

# %%
rng = np.random.default_rng(0)
n = 256
q1, _ = np.linalg.qr(rng.standard_normal((n, n)))
q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
for decay in (0.0, 0.5, 1.0, 2.0):
    s = np.arange(1, n + 1, dtype=float) ** -decay
    f = svd_decompose((q1 * s) @ q2.T)
    k = hard_threshold_rank(n, n)
    print(f"decay {decay:.1f}: relative error at k={k}: {truncation_error(f, k) / np.linalg.norm(s):.4f}")

# %% [markdown]
# The singular values are folded into the right factor before mapping, so the
# accelerator stores two plain matrices `B = diag(sigma) V^T` and `U`.

# %%
w = rng.standard_normal((96, 64))
f = truncate_to_threshold(svd_decompose(w))
b, u = merge_sigma_vt(f)
x = rng.standard_normal(64)
print("rank", f.rank, "| max |U(Bx) - W_k x| =", np.abs(u @ (b @ x) - f.dense() @ x).max())
