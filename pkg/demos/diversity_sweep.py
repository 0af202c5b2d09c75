"""
Router regularisation sweep
===========================

Vary the router loss weight and switch the batch diversity term on and off,
then compare how evenly the data-dependent router spreads its traffic.
"""

import math
import sys
from pathlib import Path

import numpy as np

from weetherapy import harness
from weetherapy.config import load_config

root = Path(__file__).resolve().parents[1]
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/sweep")
cfg = load_config(root / "configs" / "acceptance.json").replace(decoder_checkpoint=str(out / "decoder.ckpt"))

rows = harness.sweep_routing(cfg, lambdas=(0.0, 0.1, 0.5), diversity=(True, False), out_dir=out)

# usage entropy is the entropy of the mean soft dep distribution over the test clips
print(f"max entropy ln 3 = {math.log(3):.3f}")
for lam in (0.0, 0.1, 0.5):
    for div in (1, 0):
        sel = [r for r in rows if r["lambda"] == lam and r["diversity"] == div]
        h = np.mean([r["usage_entropy"] for r in sel])
        agg = np.mean([np.mean([r["er_f1"], r["ctc_acc"], r["cmd_p5"], r["ds_rougeL"]]) for r in sel])
        print(f"lambda {lam:.1f} diversity {div}: usage entropy {h:.3f}, aggregate {agg:.3f}")
print("per-run rows in", out / "sweep.csv")
