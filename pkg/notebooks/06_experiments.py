# coding: utf-8

# # Whole experiments: runs, sweeps, ablation and retraining
#
# `run_experiment` executes data, training, generation, evaluation and
# retraining, caching every stage under the run directory. Re-running with
# the same config reuses the cache, and two fresh runs write byte-identical
# reports. The same operations are on the command line:
#
#     python3 -m riskgen retrain --out runs/notebook --resume
#     python3 -m riskgen sweep --axis s --values 0,1,5,10 --out runs/notebook --resume
#     python3 -m riskgen ablate --out runs/notebook --resume
#     python3 -m riskgen report --out runs/notebook

# In[1]:

import json

from riskgen.pipeline import RunConfig, ablate, run_experiment, sweep

cfg = RunConfig(out="runs/notebook")
rec = run_experiment(cfg, cfg.out)
print(json.dumps({k: rec.metrics[k] for k in ("arm", "error_rate", "conformity_rate")}, indent=1))


# ## Guidance strength and the conformity coefficient
#
# Stronger gradient guidance raises the error rate. A larger conformity
# coefficient gives some of it back in exchange for samples that stay in
# their category.

# In[2]:

for r in sweep(cfg, "s", [0, 1, 5, 10]):
    print(f"s={r['s']:<5g} error {r['error_rate']:.3f}±{r['error_rate_sd']:.3f}")
for r in sweep(cfg, "lambda", [0, 1e-4, 1e-2]):
    print(f"lambda={r['lambda']:<7g} error {r['error_rate']:.3f}  conformity {r['conformity_rate']:.3f}")


# ## Which part does the work?

# In[3]:

for arm, r in ablate(cfg).items():
    print(f"{arm:<10} error {r['error_rate']:.3f}±{r['error_rate_sd']:.3f}")


# ## Less validation data
#
# Screening statistics and the error predictor come from the validation
# split. A tenth of it is enough.

# In[4]:

for r in sweep(cfg, "val_fraction", [0.1, 1.0]):
    print(f"val_fraction={r['val_fraction']}  error {r['error_rate']:.3f}")


# ## Retraining on the generated samples
#
# Adding the samples (labelled with their intended category) to the training
# set and retraining from scratch helps on the held-out domains. Giving them
# wrong labels does not.

# In[5]:

with open(f"{cfg.out}/reports/retrain.json") as fh:
    rt = json.load(fh)
for arm in ("generated", "mislabeled"):
    d = rt[arm]["delta"]
    print(f"{arm:<10} ID {100 * d['id']['mean']:+.2f}pp   OOD {100 * d['ood']['mean']:+.2f}pp")
