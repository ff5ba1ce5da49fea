# # The Assign stage
#
# Clients take turns on masked-LM and denoising; the server clusters their
# updates every round and averages within clusters.

import numpy as np

from atcsim import Experiment, preset
from atcsim.experiment import coclustering_frequency

cfg = preset("desk").replace(seed=1, assign_rounds=12)
exp = Experiment(cfg)
exp.run_assign_stage()

for entry in exp.server.logs[-4:]:
    print(entry["round"], entry["task"], entry["clusters"], round(float(np.mean(list(entry["loss"].values()))), 3))

# ## How often each pair shared a cluster

np.set_printoptions(precision=2, suppress=True)
print(coclustering_frequency(exp.server.cluster_history, cfg.n_clients))

# ## Consensus clusters line up with the token domains

domains = [c.dataset.domain_id for c in exp.clients]
print("domains:", domains)
print(exp.analysis())
