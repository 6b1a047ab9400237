import numpy as np
import pytest

from riskgen.dataset import default_spec, make_dataset
from riskgen.diffusion import build_schedule
from riskgen.models import (ClassifierConfig, DenoiserConfig, EmbedderConfig, ErrorPredictorConfig,
                            IdentityDecoder, compute_model_errors, fit_error_predictor, train_classifier,
                            train_denoiser, train_embedder)
from riskgen.sampler import ModelBundle, estimate_category_stats


class Small:
    """Quickly trained stand-ins on a reduced default dataset."""

    def __init__(self):
        self.spec = default_spec(0, samples_per_class_per_domain=100)
        self.ds = make_dataset(self.spec)
        self.train = self.ds.get_split("train")
        self.val = self.ds.get_split("val")
        self.schedule = build_schedule(T=20)
        self.embedder = train_embedder(self.train, EmbedderConfig(epochs=30, n_prototypes=32))
        self.denoiser = train_denoiser(self.train, self.embedder, self.schedule,
                                       DenoiserConfig(hidden=(64, 64), epochs=60))
        self.classifier = train_classifier(self.train, ClassifierConfig(epochs=40))
        c = self.embedder.embed_image(self.val.x)
        self.val_emb = c
        self.err_predictor = fit_error_predictor(c, compute_model_errors(self.classifier, self.val),
                                                 ErrorPredictorConfig(epochs=50))
        self.stats = [estimate_category_stats(c, self.val.y, k) for k in range(6)]
        self.bundle = ModelBundle(self.denoiser, self.classifier, self.embedder, IdentityDecoder())


@pytest.fixture(scope="session")
def small():
    return Small()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
