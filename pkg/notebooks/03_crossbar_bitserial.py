# %% [markdown]
# # Bit-serial GEMV on SLC and MLC crossbars
#
# Weights are INT8, stored offset by +128 so every cell holds a non-negative
# level. SLC spreads a word over 8 one-bit cells, MLC2 over 4 two-bit cells.
# Inputs stream in one bit per cycle; the MSB cycle carries weight -128, and a
# digital correction removes the offset.

# %%
import numpy as np

from hfpim.quant import QuantMatrix, offset_encode
from hfpim.xbarsim import AdcModel, CellMode, adc_bits, bitserial_gemv, program_matrix

rng = np.random.default_rng(1)
w = rng.integers(-128, 128, (64, 16)).astype(np.int8)
x = rng.integers(-128, 128, 64)
enc = offset_encode(QuantMatrix(w, 1.0))

for mode in (CellMode.SLC, CellMode.MLC2):
    tiles = program_matrix(enc, mode)
    y, rep = bitserial_gemv(tiles, x)
    print(f"{mode.name:4s}: ADC {adc_bits(64, mode.bits_per_cell)} bits, {rep.conversions} conversions, "
          f"exact: {np.array_equal(y, x @ w.astype(np.int64))}")

# %% [markdown]
# A converter narrower than the full column range clips. The report counts
# every clipped conversion instead of hiding it.

# %%
tiles = program_matrix(enc, "MLC2")
y, rep = bitserial_gemv(tiles, x, adc=AdcModel(5))
print("5-bit ADC on MLC2:", rep.saturated, "of", rep.conversions, "conversions saturated;",
      "max error", np.abs(y - x @ w.astype(np.int64)).max())
