# coding: utf-8

# # Generating risky samples
#
# Generation asks for samples of a given category that the target model gets
# wrong. Two mechanisms do the work:
#
# * screening: image-embedding conditions are drawn from the category's
#   validation statistics and kept only once the error predictor flags them
# * gradient guidance: at every DDIM step the noise prediction is nudged along
#   the normalized gradient of the target's cross-entropy, plus a small bonus
#   for staying aligned with the category's text vector
#
# The pipeline object trains (or loads) everything for us. The first run of
# this notebook takes about half a minute.

# In[1]:

import numpy as np

from riskgen.pipeline import Pipeline, RunConfig
from riskgen.sampler import GuidanceConfig, generate

cfg = RunConfig(out="runs/notebook")
pipe = Pipeline(cfg, cfg.out)
bundle, stats, sched = pipe.bundle(), pipe.category_stats(), pipe.schedule()
errp = pipe.models()["error_predictor"]


# ## Guidance strength
#
# With `s = 0` nothing is steered and the target is almost always right. As
# `s` grows the samples cross its decision boundaries.

# In[2]:

def rate(g, count=50):
    out = []
    for y in range(6):
        out += generate(y, count, bundle, stats[y], errp, sched, g, seed=0)
    return np.mean([s.is_risky for s in out]), out

for s in (0.0, 1.0, 5.0, 10.0, 20.0):
    r, _ = rate(GuidanceConfig(s=s, cfg_weight=2.0))
    print(f"s={s:<5} error rate {r:.3f}")


# ## Screening
#
# Each sample records how many condition draws the screen needed and whether
# it ever found one the error predictor liked (the budget is 100 draws).

# In[3]:

_, out = rate(GuidanceConfig(s=10.0, cfg_weight=2.0))
attempts = np.array([s.screen_attempts for s in out])
print("median attempts", np.median(attempts), " max", attempts.max(),
      " accepted", np.mean([s.screen_accepted for s in out]))


# ## Watching one trajectory
#
# `record_trace` keeps the guidance score and gradient norm at each step.

# In[4]:

g = GuidanceConfig(s=10.0, cfg_weight=2.0, record_trace=True)
one = generate(3, 1, bundle, stats[3], errp, sched, g, seed=1)[0]
print("intended", one.intended_category, "predicted", one.prediction)
print("score by step (T..1):", np.round(one.trace["score"][::10], 3))


# ## The reduction check
#
# Switching everything off gives back plain conditional DDIM, bit for bit.

# In[5]:

from riskgen.sampler import draw_conditions_and_noise, sample_ddim

off = GuidanceConfig(s=0.0, lam=0.0, screening=False, cfg_weight=2.0)
a = generate(0, 5, bundle, stats[0], None, sched, off, seed=0)
c, _, _, zT = draw_conditions_and_noise(0, 5, 16, stats[0], None, off, 0)
b = sample_ddim(bundle.denoiser, zT, c, bundle.embedder.embed_text(0), sched, 2.0)
print(np.array_equal(np.array([s.x for s in a]), b.astype(np.float32).astype(np.float64)))
