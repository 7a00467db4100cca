# %% [markdown]
# # Conductance noise and bit error rate
#
# Cell reads are modeled as `g (1 + eta)` with Gaussian `eta`. With four
# equispaced MLC levels a read error means crossing a midpoint. We calibrate
# the noise std to a 4.04% bit error rate and sweep around it.

# %%
import numpy as np

from hfpim.quant import QuantMatrix, offset_encode
from hfpim.xbarsim import NoiseSpec, bit_error_rate, bitserial_gemv, calibrate_sigma, program_matrix

s = calibrate_sigma(0.0404, "MLC2")
print(f"sigma for 4.04% BER on MLC2: {s:.5f}  (SLC BER at that sigma: {bit_error_rate(s, 'SLC'):.5f})")
for sig in (0.01, 0.025, 0.05, 0.1, s, 0.2):
    print(f"sigma {sig:.4f}: MLC2 BER {bit_error_rate(sig, 'MLC2'):.5f}, SLC BER {bit_error_rate(sig, 'SLC'):.5f}")

# %% [markdown]
# Effect on a GEMV: relative output error as noise grows, with and without
# protection (protected tiles are programmed noise free).

# %%
rng = np.random.default_rng(2)
w = rng.integers(-100, 100, (128, 32)).astype(np.int8)
x = rng.integers(-128, 128, 128)
ref = x @ w.astype(np.int64)
enc = offset_encode(QuantMatrix(w, 1.0))
for sig in (0.0, 0.01, 0.025, 0.05):
    y, _ = bitserial_gemv(program_matrix(enc, "MLC2", NoiseSpec(sig, seed=3)), x)
    yp, _ = bitserial_gemv(program_matrix(enc, "MLC2", NoiseSpec(sig, seed=3), protected=True), x)
    print(f"sigma {sig:.3f}: noisy rel err {np.linalg.norm(y - ref) / np.linalg.norm(ref):.4f}, "
          f"protected {np.linalg.norm(yp - ref) / np.linalg.norm(ref):.4f}")
