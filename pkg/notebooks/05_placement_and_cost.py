# %% [markdown]
# # Placing transformer layers and costing them
#
# Static matrices (QKV, projection, FFN) go on analog arrays; attention score
# and value products run on the NOR-based digital modules. The cost table is
# the 65 nm component table shipped with the package.

# %%
from hfpim.costmodel import PRESETS, ComponentCostTable, count_ops, estimate, scale_throughput, static_fraction
from hfpim.mapper import HardwareShape, ParallelismPlan, model_copies, place_model

table = ComponentCostTable.from_json()
print(f"analog module {table.analog.area_mm2:.2f} mm2 / {table.analog.power_mw:.1f} mW, "
      f"digital module {table.digital.area_mm2:.2f} mm2 / {table.digital.power_mw:.1f} mW")
for name, w in PRESETS.items():
    print(f"{name:10s} static MAC fraction {static_fraction(w):.3f}, ops {sum(count_ops(w).values()):.3e}")

# %% [markdown]
# BERT-Base fits twice on one chip. SLC protection of 10% of the ranks costs
# little extra energy; MLC halves the conversions of the rest.

# %%
w = PRESETS["bert-base"]
print("bert-base copies per chip:", model_copies(place_model(w)))
for frac in (0.0, 0.1, 1.0):
    rep = estimate(place_model(w, slc_fraction=frac), w, table)
    print(f"slc {frac:4.0%}: energy {rep.energy_pj / 1e6:8.2f} uJ, conversions {rep.conversions:.3e}, "
          f"latency {rep.latency_ns / 1e3:.1f} us")

# %% [markdown]
# Scaling: splitting each layer across two PUs, and spreading a larger model
# over more chips.

# %%
hw = HardwareShape(analog_modules_per_pu=1000)
gpt2 = estimate(place_model(PRESETS["gpt2"], hw), PRESETS["gpt2"], table)
llama = estimate(place_model(PRESETS["llama3-1b"], hw), PRESETS["llama3-1b"], table)
print("gpt2 tensor(2):", round(scale_throughput(gpt2, ParallelismPlan("tensor", 2), table), 3))
for n in (4, 8):
    print(f"llama3-1b pipeline({n}) vs two chips:",
          round(scale_throughput(llama, ParallelismPlan("pipeline", n), table), 3))
