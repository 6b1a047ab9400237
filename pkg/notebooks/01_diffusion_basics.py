# coding: utf-8

# # Noise schedules and the DDIM step
#
# The diffusion core is a handful of pure numpy functions. A schedule holds
# the per-step alphas and their running product, `alpha_bars[0]` is exactly 1
# so step 0 is the clean point.

# In[1]:

import numpy as np

from riskgen.diffusion import build_schedule, ddim_step, forward_diffuse, predict_z0

sched = build_schedule("linear", T=50, beta_min=1e-4, beta_max=0.2)
print(sched.T, sched.alpha_bars[[0, 1, 10, 25, 50]])


# A cosine schedule is available too. It keeps more signal around mid-chain.

# In[2]:

cos = build_schedule("cosine", T=50)
for t in (10, 25, 40):
    print(t, round(sched.alpha_bars[t], 4), round(cos.alpha_bars[t], 4))


# ## Forward noising and the clean-point estimate
#
# If we know the noise that went in, `predict_z0` undoes `forward_diffuse`
# exactly (up to rounding).

# In[3]:

rng = np.random.default_rng(0)
z0 = rng.normal(size=(5, 2))
eps = rng.normal(size=z0.shape)
zt = forward_diffuse(z0, 30, eps, sched)
print(np.abs(predict_z0(zt, eps, 30, sched) - z0).max())


# ## A full reverse chain with a perfect noise predictor
#
# Feed the true noise back at every step and the deterministic sampler walks
# straight back to the starting point.

# In[4]:

z = forward_diffuse(z0, sched.T, eps, sched)
for t in range(sched.T, 0, -1):
    z = ddim_step(z, eps, t, sched)
print("max error after", sched.T, "steps:", np.abs(z - z0).max())


# A hand-made two-step schedule makes the arithmetic easy to follow.

# In[5]:

tiny = build_schedule(T=2, betas=[0.1, 0.2])
print(tiny.alpha_bars)   # 1, 0.9, 0.72
z1 = forward_diffuse(np.array([[1.0]]), 1, np.array([[1.0]]), tiny)
print(z1)                # sqrt(.9) + sqrt(.1)
