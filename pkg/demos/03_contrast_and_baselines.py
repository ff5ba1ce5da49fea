# # Contrast stage against the baselines
#
# A shortened desk run (about ten minutes on one core). Scores are the mean
# per-kind primary metrics on the test split.

import numpy as np

from atcsim import Experiment, preset, run_experiment

cfg = preset("desk").replace(seed=0, assign_rounds=12, contrast_rounds=10)

exp = Experiment(cfg)
exp.run_assign_stage()
with_contrast = exp.branch(contrast_weight=1.0).run()
without = exp.branch(contrast_weight=0.0).run()

# ## Who picked whom as a positive

np.set_printoptions(precision=0, suppress=True)
print([c.kind[:4] for c in exp.clients])
print(with_contrast.neighbor_freq)
for name, res in [("weight 1", with_contrast), ("weight 0", without)]:
    print(name, "same-kind share of positives:", round(res.analysis["same_kind_fraction"], 3))

# ## Scores

rows = {"atc": with_contrast, "atc, weight 0": without}
for mode in ("isolated", "fedavg"):
    rows[mode] = run_experiment(cfg.replace(mode=mode), write=False)
for name, res in rows.items():
    print(f"{name:14s}", {k: round(v, 3) for k, v in res.aggregate.items()}, res.bytes_sent, "bytes")
