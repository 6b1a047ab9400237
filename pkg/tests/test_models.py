import numpy as np
import pytest

from riskgen.dataset import Domain, LabeledDataset, SyntheticSpec, make_dataset
from riskgen.diffusion import build_schedule
from riskgen.models import (CLASSIFIER_ARCHS, ClassifierConfig, DenoiserConfig, EmbedderConfig, ErrorPredictor,
                            ErrorPredictorConfig, JointEmbedder, NoisePredictor, TargetClassifier, accuracy,
                            compute_model_errors, fit_error_predictor, train_classifier, train_denoiser,
                            train_embedder)


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8)


def fd_rows(f, x, h=1e-6):
    """Central differences of a per-row scalar function wrt each row of x."""
    g = np.zeros_like(x)
    for j in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, j] = h
        g[:, j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def labeled(x, y, k):
    n = len(x)
    return LabeledDataset(np.asarray(x, float), np.asarray(y), np.zeros(n, int), np.zeros(n, int), k)


# -- gradients against finite differences -------------------------------------

def test_classifier_ce_gradient(small, rng):
    for arch in CLASSIFIER_ARCHS:
        clf = TargetClassifier(16, 6, ClassifierConfig(arch=arch), np.random.default_rng(3))
        x = rng.normal(size=(5, 16))
        y = rng.integers(0, 6, size=5)
        _, g = clf.ce_and_grad(x, y)
        assert rel_err(g, fd_rows(lambda v: clf.ce_and_grad(v, y)[0], x)) < 1e-3, arch
    x = small.val.x[:5]
    _, g = small.classifier.ce_and_grad(x, 2)
    assert rel_err(g, fd_rows(lambda v: small.classifier.ce_and_grad(v, 2)[0], x)) < 1e-3


@pytest.mark.parametrize("tower", ["prototype", "mlp"])
def test_embedder_inner_gradient(tower, rng):
    emb = JointEmbedder(16, 6, EmbedderConfig(tower=tower, n_prototypes=10), np.random.default_rng(0),
                        init_points=rng.normal(size=(50, 16)))
    x = rng.normal(size=(4, 16))
    yt = emb.embed_text(3)
    _, g = emb.inner_and_grad(x, yt)
    assert rel_err(g, fd_rows(lambda v: emb.inner_and_grad(v, yt)[0], x)) < 1e-3
    w = rng.normal(size=(4, emb.embed_dim))
    gx = emb.image_vjp(x, w)
    assert rel_err(gx, fd_rows(lambda v: (emb.embed_image(v) * w).sum(1), x)) < 1e-3


def test_contrastive_parameter_gradients(rng):
    emb = JointEmbedder(5, 3, EmbedderConfig(n_prototypes=6, embed_dim=4), np.random.default_rng(1),
                        init_points=rng.normal(size=(20, 5)))
    x = rng.normal(size=(8, 5))
    y = np.array([0, 1, 2, 0, 1, 1, 0, 2])
    _, grads = emb._loss_and_grads(x, y)
    for k, p in emb.params.items():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + 1e-6
            lp = emb._loss_and_grads(x, y)[0]
            p[i] = old - 1e-6
            lm = emb._loss_and_grads(x, y)[0]
            p[i] = old
            num[i] = (lp - lm) / 2e-6
        assert rel_err(grads[k], num) < 1e-4, k


@pytest.mark.parametrize("param", ["v", "eps"])
@pytest.mark.parametrize("w", [1.0, 2.0])
def test_denoiser_vjp(param, w, rng):
    sched = build_schedule(T=10)
    den = NoisePredictor(6, 3, sched, DenoiserConfig(hidden=(16, 16), parametrization=param),
                         np.random.default_rng(2), data_var=2.0)
    den.params["null_c"][:] = rng.normal(size=3)
    z = rng.normal(size=(4, 6))
    c, yt = rng.normal(size=(4, 3)), rng.normal(size=3)
    g = rng.normal(size=(4, 6))
    out, vjp = den.eps_and_vjp(z, 7, c, yt, w)
    np.testing.assert_array_equal(out, den.guided_eps(z, 7, c, yt, w))
    num = fd_rows(lambda v: (den.guided_eps(v, 7, c, yt, w) * g).sum(1), z)
    assert rel_err(vjp(g), num) < 1e-3


# -- training contracts ---------------------------------------------------------

def test_classifier_separable_and_random_labels():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(600, 4))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    x[:, 0] += np.where(y == 1, 0.5, -0.5)  # margin
    clf = train_classifier(labeled(x[:400], y[:400], 2), ClassifierConfig(arch="linear", epochs=60))
    assert accuracy(clf, x[400:], y[400:]) >= 0.99
    xr = rng.normal(size=(900, 4))
    yr = rng.integers(0, 3, size=900)
    clf = train_classifier(labeled(xr[:600], yr[:600], 3), ClassifierConfig(epochs=20))
    assert abs(accuracy(clf, xr[600:], yr[600:]) - 1 / 3) <= 0.1


def test_classifier_errors_and_above_chance(small):
    te = small.ds.get_split("test_id")
    assert accuracy(small.classifier, te.x, te.y) > 1 / 6
    with pytest.raises(ValueError):
        train_classifier(labeled(np.zeros((0, 2)), np.zeros(0, int), 2))
    with pytest.raises(ValueError):
        train_classifier(labeled(np.zeros((5, 2)), np.zeros(5, int), 2))


def test_argmax_tie_breaks_to_smallest():
    clf = TargetClassifier(2, 3, ClassifierConfig(arch="linear"), np.random.default_rng(0))
    clf.params["W0"][:] = 0.0
    clf.params["b0"][:] = [1.0, 2.0, 2.0]
    assert clf.predict(np.zeros((2, 2))).tolist() == [1, 1]


def test_compute_model_errors():
    class Fixed:
        def predict(self, x):
            return np.array([0, 1, 2])
    flags = compute_model_errors(Fixed(), np.zeros((3, 1)), [0, 1, 1])
    assert flags.tolist() == [False, False, True]
    assert not compute_model_errors(Fixed(), np.zeros((3, 1)), [0, 1, 2]).any()


def test_error_flags_match_accuracy(small):
    flags = compute_model_errors(small.classifier, small.val)
    assert flags.mean() == pytest.approx(1 - accuracy(small.classifier, small.val.x, small.val.y))


def test_embedder_quality(small):
    te = small.ds.get_split("test_id")
    h = small.embedder.embed_image(te.x)
    np.testing.assert_allclose(np.linalg.norm(h, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(small.embedder.text_table(), axis=1), 1.0, atol=1e-6)
    S = h @ small.embedder.text_table().T
    match = S[np.arange(len(te.y)), te.y]
    cross = (S.sum(1) - match) / 5
    assert match.mean() - cross.mean() >= 0.2
    others = S.copy()
    others[np.arange(len(te.y)), te.y] = -np.inf
    assert np.mean(match > others.max(1)) >= 0.9
    assert np.array_equal(small.embedder.embed_text(4), small.embedder.embed_text(4))


def test_embedder_rejects_empty():
    with pytest.raises(ValueError):
        train_embedder(labeled(np.zeros((0, 3)), np.zeros(0, int), 2))


def test_denoiser_beats_untrained(small):
    te = small.ds.get_split("test_id")
    c, y = small.embedder.embed_image(te.x), small.embedder.embed_text(te.y)
    fresh = NoisePredictor(16, small.embedder.embed_dim, small.schedule, small.denoiser.cfg,
                           np.random.default_rng(0), data_var=small.denoiser.data_var)
    trained = small.denoiser.loss(te.x, c, y, np.random.default_rng(5))
    untrained = fresh.loss(te.x, c, y, np.random.default_rng(5))
    assert trained < 0.9 * untrained
    # the constant-zero predictor has loss E[eps^2] = 1
    assert trained < 1.0


def test_denoiser_rejects_empty(small):
    with pytest.raises(ValueError):
        train_denoiser(labeled(np.zeros((0, 16)), np.zeros(0, int), 6), small.embedder, small.schedule)


def test_denoiser_without_signal_learns_the_mean():
    # with beta = 0 everywhere z_t = z_0 carries no information about the
    # noise, so the best eps-prediction is 0 and the loss tends to Var(eps) = 1
    sched = build_schedule(T=3, betas=[0.0, 0.0, 0.0])
    spec = SyntheticSpec(2, 2, (Domain("a", (0.0, 0.0)), Domain("b", (1.0, 0.0), ood=True)),
                         ((0.0, 1.0), (0.0, -1.0)), (0.0, 0.0), samples_per_class_per_domain=20)
    ds = make_dataset(spec).get_split("train")
    emb = train_embedder(ds, EmbedderConfig(epochs=2, n_prototypes=4))
    den = train_denoiser(ds, emb, sched, DenoiserConfig(hidden=(8,), epochs=30, parametrization="eps"))
    loss = den.loss(ds.x, emb.embed_image(ds.x), emb.embed_text(ds.y), np.random.default_rng(0))
    assert 0.5 < loss < 1.5


def test_error_predictor_contracts():
    rng = np.random.default_rng(0)
    c = rng.normal(size=(40, 4))
    p = fit_error_predictor(c, np.zeros(40))
    assert p.degenerate and np.all(p.prob_error(c) < 0.5)
    p = fit_error_predictor(c, np.ones(40))
    assert p.degenerate and np.all(p.predict(c))
    a = rng.normal(size=(100, 4)) * 0.3 + 2
    b = rng.normal(size=(100, 4)) * 0.3 - 2
    x = np.concatenate([a, b])
    e = np.r_[np.zeros(100), np.ones(100)]
    p = fit_error_predictor(x, e, ErrorPredictorConfig(epochs=100))
    assert not p.degenerate
    assert np.mean(p.predict(x) == e) >= 0.95
    probs = p.prob_error(rng.normal(size=(50, 4)) * 5)
    assert np.all((probs >= 0) & (probs <= 1))
    with pytest.raises(ValueError):
        fit_error_predictor(x, e[:-1])
    with pytest.raises(ValueError):
        fit_error_predictor(np.zeros((0, 4)), np.zeros(0))


def test_training_is_deterministic(small):
    a = train_classifier(small.train, ClassifierConfig(epochs=3, seed=9))
    b = train_classifier(small.train, ClassifierConfig(epochs=3, seed=9))
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    e1 = train_embedder(small.train, EmbedderConfig(epochs=2, seed=4))
    e2 = train_embedder(small.train, EmbedderConfig(epochs=2, seed=4))
    assert np.array_equal(e1.embed_image(small.val.x), e2.embed_image(small.val.x))


def test_serialization_bitwise(small, tmp_path):
    x = small.val.x[:20]
    c = small.embedder.embed_image(x)
    yt = small.embedder.embed_text(small.val.y[:20])

    small.classifier.save(tmp_path / "clf")
    assert np.array_equal(TargetClassifier.load(tmp_path / "clf").logits(x), small.classifier.logits(x))

    small.embedder.save(tmp_path / "emb")
    emb = JointEmbedder.load(tmp_path / "emb")
    assert np.array_equal(emb.embed_image(x), c)
    assert np.array_equal(emb.text_table(), small.embedder.text_table())

    small.denoiser.save(tmp_path / "den")
    den = NoisePredictor.load(tmp_path / "den")
    assert np.array_equal(den.schedule.alpha_bars, small.schedule.alpha_bars)
    assert np.array_equal(den.guided_eps(x, 5, c, yt, 2.0), small.denoiser.guided_eps(x, 5, c, yt, 2.0))

    small.err_predictor.save(tmp_path / "ep")
    ep = ErrorPredictor.load(tmp_path / "ep")
    assert np.array_equal(ep.prob_error(c), small.err_predictor.prob_error(c))
