# %% [markdown]
# # End-to-end runs through the command-line driver
#
# `simulate` fine-tunes, picks protected ranks, programs the factors onto
# noisy crossbar tiles and evaluates the task through the bit-serial model.
# `report` then summarizes the CSV over seeds.

# %%
import tempfile
from pathlib import Path

from hfpim.cli import main

out = Path(tempfile.mkdtemp())
cfg = out / "cfg.json"
cfg.write_text('{"seeds": [0, 1], "k_percent": [0, 10, 50, 100], '
               '"selection_modes": ["gradient", "random"], "eval_samples": 128}')
assert main(["simulate", "--config", str(cfg), "--out", str(out / "run"), "--jobs", "2"]) == 0
assert main(["report", str(out / "run"), "--out", str(out / "report")]) == 0
print((out / "report" / "report.md").read_text())
