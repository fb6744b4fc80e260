"""Train the three ablation variants on synthetic data and compare held-out mAP.

Pass a seed count as the first argument (default 2; the acceptance run uses 5).
"""

import sys

import numpy as np

from ccnet import experiments
from ccnet.data import SynthConfig, generate_synthetic
from ccnet.training import TrainConfig, fit

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2

# the data: 20 ids, half for training, the rest split into query / gallery
m = generate_synthetic(SynthConfig(seed=0))
print({s: len(m.split(s)) for s in ("train", "query", "gallery")})

# one run, watching the logged distances
_, log = fit(m, TrainConfig(seed=0, loss_variant="cdc", norm_variant="ALNU"))
for row in log[::30] + [log[-1]]:
    print("epoch {epoch:3d}  lr {lr:.1e}  L_ce {L_ce:.3f}  L_cdc_s {L_cdc_s:.4f}  L_cdc_m {L_cdc_m:.4f}  "
          "intra-modality {intra_modality_dist:.4f}".format(**row))

results = experiments.run_ablation(seeds=range(seeds))
for name, rows in results.items():
    maps = [r["mAP"] for r in rows]
    print(f"{name:10s} mAP per seed {np.round(maps, 4)}  median {np.median(maps):.4f}")
