# coding: utf-8

# # Measuring generated sets
#
# Four numbers describe a generated set:
#
# * error rate, the fraction the target model misclassifies
# * Frechet distance in embedding space to the target's real validation errors
# * conformity, the fraction whose Bayes-oracle label is the intended category
# * transfer, the error rate of the same samples under the other classifiers

# In[1]:

import numpy as np

from riskgen.evaluation import frechet_embedding_distance, transfer_matrix
from riskgen.pipeline import Pipeline, RunConfig

cfg = RunConfig(out="runs/notebook")
pipe = Pipeline(cfg, cfg.out)
samples = pipe.samples(seed=0)
rep = pipe.evaluate(samples)
print(f"error {rep.error_rate:.3f}  frechet {rep.frechet_distance:.3f}  conformity {rep.conformity_rate:.3f}")


# Per category:

# In[2]:

for k, v in rep.per_category.items():
    print(k, {m: round(x, 3) for m, x in v.items()})


# ## Frechet distance sanity checks
#
# Zero against itself, and for two unit-variance 1-D Gaussians one unit
# apart the closed form gives exactly 1.

# In[3]:

rng = np.random.default_rng(0)
x = rng.normal(size=2000)
x = (x - x.mean()) / x.std(ddof=1)
print(frechet_embedding_distance(x[:, None], x[:, None]), frechet_embedding_distance(x[:, None], x[:, None] + 1))


# ## Transfer to other architectures

# In[4]:

tm = transfer_matrix(samples, pipe.models()["classifiers"], cfg.classifier.arch)
for name, e in tm.rows:
    print(f"{cfg.classifier.arch} -> {name:<10} {e:.3f}")


# ## Baseline comparison
#
# Unguided samples from the same models, for reference.

# In[5]:

from riskgen.pipeline import ablation_arms

base = ablation_arms(cfg)["Base"]
rb = pipe.evaluate(pipe.samples(0, base), base)
print(f"Base  error {rb.error_rate:.3f}  frechet {rb.frechet_distance:.3f}  conformity {rb.conformity_rate:.3f}")
