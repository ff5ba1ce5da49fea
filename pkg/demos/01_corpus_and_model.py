# # Corpus, tasks and the tiny encoder-decoder
#
# Eight clients, two token domains, three downstream task kinds.

import numpy as np

from atcsim import preset
from atcsim import model as M
from atcsim import tasks as T
from atcsim.corpus import build_corpus, unigram_distribution
from atcsim.gradcheck import run_suite
from atcsim.tensor import RngStream

cfg = preset("desk")
corpus = build_corpus(plan=cfg.plan, sizes=(cfg.n_train, cfg.n_val, cfg.n_test), seed=0)

for ds in corpus:
    print(ds.client_id, ds.task_kind, ds.domain_id, ds.size)

# ## One instance of each kind

for ds in corpus[:1] + corpus[2:3] + corpus[5:6]:
    print(ds.task_kind, ds.train[0])

# ## Domains differ in their token statistics

p_a = unigram_distribution([x.source for ds in corpus if ds.domain_id == "A" for x in ds.train])
p_b = unigram_distribution([x.source for ds in corpus if ds.domain_id == "B" for x in ds.train])
print("total variation A/B:", 0.5 * np.abs(p_a - p_b).sum())

# ## The model

mcfg = cfg.model
params = M.init_model(mcfg, RngStream(0), "span_extraction")
print(sum(v.size for v in params.values()), "parameters")
print(sorted({M.region_of(k) for k in params}))

batch = T.prepare_batch(T.SPAN, corpus[2].train[:16], mcfg)
out = T.objective_loss(T.SPAN, params, mcfg, batch)
print("span loss at init:", out.loss)

# ## Backprop against finite differences

for name, rep in run_suite().items():
    print(f"{name:16s} worst relative error {rep.worst[1]:.1e}")
