"""
Ablation grid
=============

Train every variant on every seed in the low-resource regime and render the
result as a table.  Takes a few minutes on one core.
"""

import sys
from pathlib import Path

from weetherapy import harness
from weetherapy.config import load_config

root = Path(__file__).resolve().parents[1]
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/ablation")
cfg = load_config(root / "configs" / "acceptance.json").replace(decoder_checkpoint=str(out / "decoder.ckpt"))

report = harness.ablate(cfg, out, log=None)
print(report.to_markdown())

# does the grid keep the expected ordering?
check = harness.check_ordering(report)
for (a, b), wins in check.wins.items():
    print(f"{a:>10s} > {b:<10s} mean {check.means[a]:.3f} vs {check.means[b]:.3f}, seeds won {wins}/{check.num_seeds}")
print("ordering holds:", check.ok)

# where did the data-dependent router send each task?
for seed in cfg.seeds:
    print(seed, report.usage[("full_wee", seed)])
