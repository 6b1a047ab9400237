# coding: utf-8

# # The supporting models
#
# Four small numpy models: a two-tower embedder (image points and category
# "text" vectors in one space), a conditional noise predictor, target
# classifiers and an error predictor over embeddings. Sizes are trimmed here
# so the notebook runs in well under a minute.

# In[1]:

import numpy as np

from riskgen.dataset import default_spec, make_dataset
from riskgen.diffusion import build_schedule
from riskgen.models import (ClassifierConfig, DenoiserConfig, EmbedderConfig, NoisePredictor, accuracy,
                            compute_model_errors, fit_error_predictor, train_classifier, train_denoiser,
                            train_embedder)

ds = make_dataset(default_spec(0, samples_per_class_per_domain=100))
train, val, test = ds.get_split("train"), ds.get_split("val"), ds.get_split("test_id")


# ## Embedder
#
# Trained with a symmetric contrastive loss. A point should be closest to its
# own category's text vector.

# In[2]:

emb = train_embedder(train, EmbedderConfig(epochs=30))
S = emb.embed_image(test.x) @ emb.text_table().T
print("top-1 match %.3f" % np.mean(S.argmax(1) == test.y))
print("matched %.3f vs others %.3f" % (S[np.arange(len(test.y)), test.y].mean(), S.mean()))


# ## Noise predictor
#
# Conditioned on an image embedding and a text vector, both randomly dropped
# during training so the unconditional prediction is available for
# classifier-free guidance.

# In[3]:

sched = build_schedule(T=50)
den = train_denoiser(train, emb, sched, DenoiserConfig(hidden=(64, 64), epochs=80))
c, yt = emb.embed_image(test.x), emb.embed_text(test.y)
fresh = NoisePredictor(16, emb.embed_dim, sched, den.cfg, data_var=den.data_var)
rng = np.random.default_rng
print("held-out loss: trained %.3f, untrained %.3f" % (den.loss(test.x, c, yt, rng(0)),
                                                      fresh.loss(test.x, c, yt, rng(0))))


# ## Target classifiers and their mistakes
#
# Four architectures share one training routine.

# In[4]:

clfs = {a: train_classifier(train, ClassifierConfig(arch=a, epochs=40))
        for a in ("linear", "mlp-small", "mlp-wide", "mlp-deep")}
for a, m in clfs.items():
    print(f"{a:<10} test acc {accuracy(m, test.x, test.y):.3f}")


# ## Error predictor
#
# It learns where in embedding space the target model errs, using validation
# mistakes. Errors are rare, so the two classes are reweighted.

# In[5]:

target = clfs["mlp-small"]
errs = compute_model_errors(target, val)
ep = fit_error_predictor(emb.embed_image(val.x), errs)
p = ep.prob_error(emb.embed_image(val.x))
print("val errors:", int(errs.sum()), "of", len(errs))
print("mean p(error): on errors %.2f, elsewhere %.2f" % (p[errs].mean(), p[~errs].mean()))
