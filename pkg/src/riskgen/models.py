"""Reference networks: joint embedder, conditional noise predictor, target
classifiers, error predictor and the identity decoder, with their training
routines.

All models evaluate in float64 and expose the input-gradient (VJP) hooks the
guided sampler needs.  Training is single-threaded numpy and deterministic for
a fixed config seed.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import LabeledDataset
from .diffusion import NoiseSchedule, forward_diffuse_batch
from .nn import (MLP, Adam, PrototypeTower, load_params, log_softmax, minibatches, round_to_f32,
                 save_params, sigmoid, softmax, timestep_features)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _check_finite(loss, what, step):
    if not np.isfinite(loss):
        raise TrainingError(f"{what}: non-finite loss {loss} at step {step}")


def _normalize(u):
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    return u / norm, norm


def _normalize_vjp(h, norm, g):
    """Backprop ``g`` (grad wrt h = u/|u|) to u."""
    return (g - h * (g * h).sum(-1, keepdims=True)) / norm


# -- joint embedder ----------------------------------------------------------

@dataclass
class EmbedderConfig:
    embed_dim: int = 8
    tower: str = "prototype"
    hidden: tuple = (64, 64)
    n_prototypes: int = 128
    temperature: float = 0.07
    epochs: int = 60
    batch_size: int = 128
    lr: float = 2e-3
    seed: int = 0


class JointEmbedder:
    """Image tower plus L2 normalization, and a per-category text table.

    ``tower="prototype"`` uses :class:`~riskgen.nn.PrototypeTower`, whose
    alignment with a text vector peaks at that category's prototypes instead
    of growing without bound away from the data; ``"mlp"`` is a plain MLP.
    """

    arch = "joint-embedder"

    def __init__(self, dims: int, num_classes: int, cfg: EmbedderConfig, rng=None, init_points=None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.dims = dims
        self.num_classes = num_classes
        if cfg.tower == "mlp":
            self.tower = MLP([dims, *cfg.hidden, cfg.embed_dim], "silu", rng)
        elif cfg.tower == "prototype":
            self.tower = PrototypeTower(dims, cfg.n_prototypes, cfg.embed_dim, rng, init_points)
        else:
            raise ValueError(f"unknown embedder tower {cfg.tower!r}")
        self.tower.params["text"] = rng.normal(size=(num_classes, cfg.embed_dim))

    @property
    def params(self):
        return self.tower.params

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def embed_image(self, x):
        h, _ = _normalize(self.tower(np.atleast_2d(x)))
        return h

    def embed_text(self, y):
        h, _ = _normalize(self.params["text"][np.asarray(y)])
        return h

    def text_table(self):
        return self.embed_text(np.arange(self.num_classes))

    def image_vjp(self, x, g):
        """Gradient wrt ``x`` of ``sum(g * embed_image(x))`` per row."""
        u, cache = self.tower.forward(np.atleast_2d(x))
        h, norm = _normalize(u)
        _, gx = self.tower.backward(cache, _normalize_vjp(h, norm, g), need_params=False)
        return gx

    def inner_and_grad(self, x, y_text):
        """``h(x) . y_text`` per row and its gradient wrt ``x``."""
        u, cache = self.tower.forward(np.atleast_2d(x))
        h, norm = _normalize(u)
        yt = np.broadcast_to(y_text, h.shape)
        inner = (h * yt).sum(-1)
        _, gx = self.tower.backward(cache, _normalize_vjp(h, norm, yt), need_params=False)
        return inner, gx

    def _loss_and_grads(self, x, y):
        """Symmetric contrastive loss over (sample, category) pairs in a batch."""
        tau = self.cfg.temperature
        u, cache = self.tower.forward(x)
        h, hn = _normalize(u)
        t_raw = self.params["text"]
        t, tn = _normalize(t_raw)
        S = h @ t.T / tau  # (n, K)
        n = len(x)
        onehot = np.eye(self.num_classes)[y]
        # sample -> category
        lp_row = log_softmax(S)
        loss_i2t = -(lp_row * onehot).sum() / n
        dS = (softmax(S) - onehot) / n
        # category -> sample, every same-category sample in the batch is a positive
        present = np.unique(y)
        lp_col = log_softmax(S[:, present].T).T  # softmax over samples
        pos = onehot[:, present]
        npos = pos.sum(0)
        loss_t2i = -((lp_col * pos).sum(0) / npos).mean()
        dcol = (softmax(S[:, present].T).T - pos / npos) / len(present)
        dS = 0.5 * dS
        dS[:, present] += 0.5 * dcol
        loss = 0.5 * (loss_i2t + loss_t2i)
        dh = dS @ t / tau
        dt = dS.T @ h / tau
        grads, _ = self.tower.backward(cache, _normalize_vjp(h, hn, dh), need_params=True)
        grads["text"] = _normalize_vjp(t, tn, dt)
        return loss, grads

    def save(self, path):
        save_params(path, self.params, self.arch, asdict(self.cfg), self.cfg.seed,
                    {"dims": self.dims, "num_classes": self.num_classes})

    @classmethod
    def load(cls, path):
        params, man = load_params(path)
        cfg = EmbedderConfig(**_tuplify(man["config"]))
        model = cls(man["extra"]["dims"], man["extra"]["num_classes"], cfg)
        model.tower.params.update(params)
        return model


def train_embedder(dataset: LabeledDataset, cfg: EmbedderConfig | None = None) -> JointEmbedder:
    cfg = cfg or EmbedderConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train the embedder on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = JointEmbedder(dataset.dims, dataset.num_classes, cfg, rng, init_points=dataset.x)
    opt = Adam(model.params, lr=cfg.lr)
    step = 0
    for _ in range(cfg.epochs):
        for idx in minibatches(rng, len(dataset), cfg.batch_size):
            loss, grads = model._loss_and_grads(dataset.x[idx], dataset.y[idx])
            _check_finite(loss, "embedder", step)
            opt.step(grads)
            step += 1
    round_to_f32(model.params)
    return model


# -- conditional noise predictor ---------------------------------------------

@dataclass
class DenoiserConfig:
    hidden: tuple = (128, 128, 128)
    time_dim: int = 16
    p_drop: float = 0.1
    parametrization: str = "v"
    epochs: int = 400
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 2e-4
    seed: int = 0


class NoisePredictor:
    """eps_theta(z_t, t, c, y_text) with learned null vectors for dropped conditions.

    The network's raw output ``F`` is either the noise itself
    (``parametrization="eps"``) or the velocity ``v = a_t eps - s_t z_0``
    (``"v"``), in which case ``eps = s_t z_t + a_t F`` with ``a_t = sqrt(abar_t)``
    and ``s_t = sqrt(1 - abar_t)``.  Network inputs are scaled by
    ``1 / sqrt(abar_t var_data + 1 - abar_t)``.
    """

    arch = "cond-mlp-denoiser"

    def __init__(self, dims: int, embed_dim: int, schedule: NoiseSchedule, cfg: DenoiserConfig,
                 rng=None, data_var: float = 1.0):
        if cfg.parametrization not in ("eps", "v"):
            raise ValueError(f"unknown parametrization {cfg.parametrization!r}")
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.dims = dims
        self.embed_dim = embed_dim
        self.schedule = schedule
        self.data_var = float(data_var)
        self.net = MLP([dims + cfg.time_dim + 2 * embed_dim, *cfg.hidden, dims], "silu", rng)
        self.net.params["null_c"] = np.zeros(embed_dim)
        self.net.params["null_y"] = np.zeros(embed_dim)

    @property
    def params(self):
        return self.net.params

    def _coeffs(self, ts):
        ab = self.schedule.alpha_bars[ts]
        c_in = 1.0 / np.sqrt(ab * self.data_var + 1.0 - ab)
        return np.sqrt(ab)[:, None], np.sqrt(1.0 - ab)[:, None], c_in[:, None]

    def _forward(self, z, ts, c, y_text):
        n = len(z)
        a, sig, c_in = self._coeffs(ts)
        c = np.broadcast_to(self.params["null_c"] if c is None else c, (n, self.embed_dim))
        y_text = np.broadcast_to(self.params["null_y"] if y_text is None else y_text, (n, self.embed_dim))
        temb = timestep_features(ts, self.cfg.time_dim, max_period=4.0 * self.schedule.T)
        F, cache = self.net.forward(np.concatenate([z * c_in, temb, c, y_text], axis=1))
        if self.cfg.parametrization == "v":
            eps = sig * z + a * F
        else:
            eps = F
        return eps, (cache, a, sig, c_in, F)

    def _vjp(self, state, g):
        cache, a, sig, c_in, _ = state
        if self.cfg.parametrization == "v":
            gz = self.net.backward(cache, a * g, need_params=False)[1][:, :self.dims] * c_in
            return gz + sig * g
        return self.net.backward(cache, g, need_params=False)[1][:, :self.dims] * c_in

    def _steps(self, t, n):
        return np.broadcast_to(np.asarray(t), (n,)).astype(np.int64)

    def eps(self, z, t, c=None, y_text=None):
        """Conditional noise prediction; ``None`` conditions use the null vectors."""
        z = np.atleast_2d(z)
        return self._forward(z, self._steps(t, len(z)), c, y_text)[0]

    def guided_eps(self, z, t, c, y_text, cfg_weight=1.0):
        """Classifier-free mixture ``eps_u + w (eps_c - eps_u)``; ``w = 1`` is purely conditional."""
        if cfg_weight == 1.0:
            return self.eps(z, t, c, y_text)
        cond = self.eps(z, t, c, y_text)
        uncond = self.eps(z, t, None, None)
        return uncond + cfg_weight * (cond - uncond)

    def eps_and_vjp(self, z, t, c, y_text, cfg_weight=1.0):
        """:meth:`guided_eps` plus a closure mapping ``g`` to ``g^T d eps / dz`` per row."""
        z = np.atleast_2d(z)
        ts = self._steps(t, len(z))
        out, st = self._forward(z, ts, c, y_text)
        if cfg_weight == 1.0:
            return out, lambda g: self._vjp(st, g)
        out_u, st_u = self._forward(z, ts, None, None)
        w = cfg_weight
        mixed = out_u + w * (out - out_u)
        return mixed, lambda g: self._vjp(st, w * g) + self._vjp(st_u, (1 - w) * g)

    def loss(self, z0, c, y_text, rng) -> float:
        """Monte-Carlo denoising loss, mean squared noise error per coordinate."""
        ts = rng.integers(1, self.schedule.T + 1, size=len(z0))
        eps = rng.normal(size=z0.shape)
        zt = forward_diffuse_batch(z0, ts, eps, self.schedule)
        return float(np.mean((self._forward(zt, ts, c, y_text)[0] - eps) ** 2))

    def save(self, path):
        save_params(path, self.params, self.arch, asdict(self.cfg), self.cfg.seed,
                    {"dims": self.dims, "embed_dim": self.embed_dim, "data_var": self.data_var,
                     "alphas": self.schedule.alphas.tolist()})

    @classmethod
    def load(cls, path):
        params, man = load_params(path)
        e = man["extra"]
        alphas = np.asarray(e["alphas"], dtype=np.float64)
        sched = NoiseSchedule(len(alphas), alphas, np.concatenate([[1.0], np.cumprod(alphas)]))
        model = cls(e["dims"], e["embed_dim"], sched, DenoiserConfig(**_tuplify(man["config"])),
                    data_var=e["data_var"])
        model.net.params.update(params)
        return model


def train_denoiser(dataset: LabeledDataset, embedder: JointEmbedder, schedule: NoiseSchedule,
                   cfg: DenoiserConfig | None = None) -> NoisePredictor:
    """Fit the conditional noise predictor with condition dropout.

    With the velocity parametrization the regression target is ``v``, which
    weights the noise-space objective by ``1 / abar_t`` per step.
    """
    cfg = cfg or DenoiserConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train the denoiser on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = NoisePredictor(dataset.dims, embedder.embed_dim, schedule, cfg, rng,
                           data_var=float(dataset.x.var(0).mean()))
    conds_c = embedder.embed_image(dataset.x)
    conds_y = embedder.embed_text(dataset.y)
    opt = Adam(model.params, lr=cfg.lr)
    D, E = model.dims, model.embed_dim
    off = D + cfg.time_dim
    n_steps = cfg.epochs * int(np.ceil(len(dataset) / cfg.batch_size))
    step = 0
    for _ in range(cfg.epochs):
        for idx in minibatches(rng, len(dataset), cfg.batch_size):
            n = len(idx)
            z0 = dataset.x[idx]
            c = conds_c[idx].copy()
            y = conds_y[idx].copy()
            drop_c = rng.random(n) < cfg.p_drop
            drop_y = rng.random(n) < cfg.p_drop
            c[drop_c] = model.params["null_c"]
            y[drop_y] = model.params["null_y"]
            ts = rng.integers(1, schedule.T + 1, size=n)
            eps = rng.normal(size=z0.shape)
            zt = forward_diffuse_batch(z0, ts, eps, schedule)
            _, (cache, a, sig, _, raw) = model._forward(zt, ts, c, y)
            target = a * eps - sig * z0 if cfg.parametrization == "v" else eps
            diff = raw - target
            loss = float(np.mean(diff ** 2))
            _check_finite(loss, "denoiser", step)
            grads, gin = model.net.backward(cache, 2.0 * diff / diff.size)
            grads["null_c"] = gin[drop_c, off:off + E].sum(0)
            grads["null_y"] = gin[drop_y, off + E:off + 2 * E].sum(0)
            # cosine decay from lr to lr_final
            frac = step / max(1, n_steps - 1)
            lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * frac))
            opt.step(grads, lr=lr)
            step += 1
    round_to_f32(model.params)
    return model


# -- target classifiers ------------------------------------------------------

CLASSIFIER_ARCHS = {
    "linear": (),
    "mlp-small": (32,),
    "mlp-wide": (128,),
    "mlp-deep": (64, 64, 64),
}


@dataclass
class ClassifierConfig:
    arch: str = "mlp-small"
    epochs: int = 60
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0


class TargetClassifier:
    def __init__(self, dims: int, num_classes: int, cfg: ClassifierConfig, rng=None):
        if cfg.arch not in CLASSIFIER_ARCHS:
            raise ValueError(f"unknown classifier arch {cfg.arch!r}")
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.dims = dims
        self.num_classes = num_classes
        self.net = MLP([dims, *CLASSIFIER_ARCHS[cfg.arch], num_classes], "silu", rng)

    @property
    def arch(self) -> str:
        return self.cfg.arch

    @property
    def params(self):
        return self.net.params

    def logits(self, x):
        out = self.net(np.atleast_2d(x))
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("classifier produced non-finite logits")
        return out

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)

    def ce_and_grad(self, x, y):
        """Per-sample cross-entropy at labels ``y`` and its gradient wrt ``x``."""
        x = np.atleast_2d(x)
        out, cache = self.net.forward(x)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("classifier produced non-finite logits")
        y = np.broadcast_to(np.asarray(y), (len(x),))
        onehot = np.eye(self.num_classes)[y]
        ce = -(log_softmax(out) * onehot).sum(1)
        _, gx = self.net.backward(cache, softmax(out) - onehot, need_params=False)
        return ce, gx

    def save(self, path):
        save_params(path, self.params, self.arch, asdict(self.cfg), self.cfg.seed,
                    {"dims": self.dims, "num_classes": self.num_classes})

    @classmethod
    def load(cls, path):
        params, man = load_params(path)
        model = cls(man["extra"]["dims"], man["extra"]["num_classes"],
                    ClassifierConfig(**man["config"]))
        model.net.params.update(params)
        return model


def train_classifier(dataset: LabeledDataset, cfg: ClassifierConfig | None = None) -> TargetClassifier:
    cfg = cfg or ClassifierConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train a classifier on an empty dataset")
    if len(np.unique(dataset.y)) < 2 or dataset.num_classes < 2:
        raise ValueError("classifier training needs at least two categories")
    rng = np.random.default_rng(cfg.seed)
    model = TargetClassifier(dataset.dims, dataset.num_classes, cfg, rng)
    opt = Adam(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    onehot = np.eye(dataset.num_classes)
    step = 0
    for _ in range(cfg.epochs):
        for idx in minibatches(rng, len(dataset), cfg.batch_size):
            out, cache = model.net.forward(dataset.x[idx])
            t = onehot[dataset.y[idx]]
            loss = -(log_softmax(out) * t).sum() / len(idx)
            _check_finite(loss, f"classifier[{cfg.arch}]", step)
            grads, _ = model.net.backward(cache, (softmax(out) - t) / len(idx))
            opt.step(grads)
            step += 1
    round_to_f32(model.params)
    return model


def accuracy(classifier, x, y) -> float:
    return float(np.mean(classifier.predict(x) == np.asarray(y)))


def compute_model_errors(classifier, dataset_or_x, y=None) -> np.ndarray:
    """Boolean flag per sample: prediction differs from the label."""
    if y is None:
        x, y = dataset_or_x.x, dataset_or_x.y
    else:
        x = dataset_or_x
    return classifier.predict(x) != np.asarray(y)


# -- error predictor ---------------------------------------------------------

@dataclass
class ErrorPredictorConfig:
    hidden: tuple = (32,)
    epochs: int = 300
    batch_size: int = 128
    lr: float = 3e-3
    weight_decay: float = 1e-4
    threshold: float = 0.5
    balanced: bool = True
    seed: int = 0


class ErrorPredictor:
    arch = "error-mlp"

    def __init__(self, embed_dim: int, cfg: ErrorPredictorConfig, rng=None, constant=None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.threshold = cfg.threshold
        self.constant = constant
        self.net = MLP([embed_dim, *cfg.hidden, 1], "silu", rng)

    @property
    def degenerate(self) -> bool:
        return self.constant is not None

    def prob_error(self, c):
        c = np.atleast_2d(c)
        if self.constant is not None:
            return np.full(len(c), float(self.constant))
        return sigmoid(self.net(c)[:, 0])

    def predict(self, c):
        return self.prob_error(c) >= self.threshold

    def save(self, path):
        save_params(path, self.net.params, self.arch, asdict(self.cfg), self.cfg.seed,
                    {"embed_dim": self.embed_dim, "constant": self.constant})

    @classmethod
    def load(cls, path):
        params, man = load_params(path)
        model = cls(man["extra"]["embed_dim"], ErrorPredictorConfig(**_tuplify(man["config"])),
                    constant=man["extra"]["constant"])
        model.net.params.update(params)
        return model


def fit_error_predictor(embeddings, errors, cfg: ErrorPredictorConfig | None = None) -> ErrorPredictor:
    """Fit an MLP mapping embeddings to the probability that the target errs.

    With ``balanced`` the two classes are reweighted to equal total mass so a
    0.5 threshold is meaningful even when errors are rare.  All-0 or all-1
    flags give a constant predictor (``degenerate`` is True).
    """
    cfg = cfg or ErrorPredictorConfig()
    c = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(c) == 0:
        raise ValueError("error predictor needs at least one embedding")
    if len(c) != len(e):
        raise ValueError(f"length mismatch: {len(c)} embeddings vs {len(e)} error flags")
    rng = np.random.default_rng(cfg.seed)
    if e.min() == e.max():
        log.warning("error flags are constant (%d); using a constant error predictor", int(e[0]))
        return ErrorPredictor(c.shape[1], cfg, rng, constant=float(e[0]))
    model = ErrorPredictor(c.shape[1], cfg, rng)
    if cfg.balanced:
        pos = e.mean()
        w = np.where(e == 1, 0.5 / pos, 0.5 / (1 - pos))
    else:
        w = np.ones_like(e)
    opt = Adam(model.net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    step = 0
    for _ in range(cfg.epochs):
        for idx in minibatches(rng, len(c), cfg.batch_size):
            out, cache = model.net.forward(c[idx])
            p = sigmoid(out[:, 0])
            pe = np.clip(p, 1e-12, 1 - 1e-12)
            loss = -np.sum(w[idx] * (e[idx] * np.log(pe) + (1 - e[idx]) * np.log(1 - pe))) / len(idx)
            _check_finite(loss, "error predictor", step)
            grads, _ = model.net.backward(cache, (w[idx] * (p - e[idx]))[:, None] / len(idx))
            opt.step(grads)
            step += 1
    round_to_f32(model.net.params)
    return model


# -- decoder -----------------------------------------------------------------

class IdentityDecoder:
    """Diffusion runs in data space, so decoding is the identity."""

    def decode(self, z):
        return z

    def vjp(self, z, g):
        return g


def _tuplify(cfg: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
