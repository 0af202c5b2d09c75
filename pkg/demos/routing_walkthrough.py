"""
One batch through the model
===========================

Encode a handful of synthetic clips, route them to the weak experts and
look at what the hard top-1 forward pass and the soft backward pass do.
"""

import numpy as np

from weetherapy import harness, vocab
from weetherapy.config import RunConfig
from weetherapy.numerics import entropy

cfg = RunConfig(n_test=4, seeds=[0])

# the frozen decoder has to be copy-pretrained first (about a minute)
decoder_arrays = harness.pretrained_decoder_arrays(cfg, log=print)

# four clips per task, already encoded by the base encoder and the three experts
data = harness.prepare_split(cfg, 0, "test", 4)
batch = harness.batch_from(data, [(t, i) for t in data for i in range(4)])
print("base features", batch.base.shape, "expert features", batch.experts.shape)

model = harness.build_model(cfg, decoder_arrays, seed=0)
terms, out = model.loss(batch, lam=cfg.lam)

# data-independent router: one choice for the whole batch, biased toward the envelope expert
print("indep soft", np.round(out.indep.soft.values, 3), "-> expert", int(out.indep.chosen_index))

# data-dependent router: one choice per clip
for task, row, k in zip(batch.tasks, out.dep.soft.values, out.dep.chosen_index):
    print(f"{task:4s} dep soft {np.round(row, 3)} -> expert {int(k)}")

# fused features are stacked 3 frames at a time, so 39 frames become 13 audio tokens
print("audio tokens", out.audio_tokens.shape)

# every router term is computed on the soft distributions
print(terms.breakdown().as_row())
print("entropy of the mean dep distribution", entropy(out.dep.soft.values.mean(axis=0)).item())

# the loss gradient reaches the routers through the soft twin of the hard choice
terms.total.backward()
print("dL/dw_indep", model.router.w_indep.grad)

seqs, probs, _, _ = model.predict(batch, max_new=cfg.max_new)
print("untrained generation:", vocab.render(seqs[0].ids), " P(RISK) at step one:", probs[0, vocab.RISK])
