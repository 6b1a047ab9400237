"""Risky-sample generation: category statistics, embedding screening, the
guidance score and gradient-guided DDIM sampling.

Seeding: sample ``i`` of category ``y`` under run seed ``seed`` draws its
condition from ``SeedSequence(seed, spawn_key=(y, i, 0))`` and its initial
state from ``spawn_key=(y, i, 1)``, so each sample is reproducible on its own
and independent of how many screening draws its neighbours consumed.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, _check_step, ddim_step, predict_z0

log = logging.getLogger(__name__)

DUMP_MAGIC = b"RGSMPL01"


class NonFiniteError(FloatingPointError):
    def __init__(self, step, rows, what="gradient"):
        self.step = step
        self.rows = list(rows)
        super().__init__(f"non-finite {what} at step {step} for sample rows {self.rows}")


@dataclass
class CategoryStats:
    category: int
    mu: np.ndarray
    sigma2: np.ndarray
    count: int
    degenerate: bool = False


@dataclass
class GuidanceConfig:
    s: float = 10.0
    lam: float = 1e-4
    max_screen_attempts: int = 100
    grad_norm_floor: float = 1e-12
    cfg_weight: float = 1.0
    stop_grad_through_denoiser: bool = False
    screening: bool = True
    record_trace: bool = False

    def __post_init__(self):
        if self.s < 0 or self.lam < 0:
            raise ValueError("s and lam must be non-negative")
        if self.max_screen_attempts < 1:
            raise ValueError("max_screen_attempts must be >= 1")
        if not self.grad_norm_floor > 0:
            raise ValueError("grad_norm_floor must be positive")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be non-negative")

    @classmethod
    def preset(cls, name: str, **overrides) -> "GuidanceConfig":
        """``"default"`` (s=10) or ``"few-classes"`` (s=20)."""
        base = {"default": {}, "few-classes": {"s": 20.0}}[name]
        return cls(**{**base, **overrides})


@dataclass
class GeneratedSample:
    x: np.ndarray
    intended_category: int
    prediction: int
    embedding_condition: np.ndarray
    screen_attempts: int
    screen_accepted: bool = True
    trace: dict | None = field(default=None, repr=False)

    @property
    def is_risky(self) -> bool:
        return self.prediction != self.intended_category


@dataclass
class ModelBundle:
    denoiser: object
    classifier: object
    embedder: object
    decoder: object


def estimate_category_stats(embeddings, labels, y: int) -> CategoryStats:
    """Mean and population (divide-by-n) per-dimension variance of category ``y``."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    sel = emb[np.asarray(labels) == y]
    if len(sel) == 0:
        raise ValueError(f"no samples with label {y}")
    degenerate = len(sel) == 1
    if degenerate:
        log.warning("category %d has a single validation sample; variance is zero", y)
    return CategoryStats(int(y), sel.mean(0), sel.var(0), len(sel), degenerate)


def sample_condition(stats: CategoryStats, rng: np.random.Generator) -> np.ndarray:
    return stats.mu + np.sqrt(stats.sigma2) * rng.normal(size=stats.mu.shape)


def screen_embedding(stats: CategoryStats, predictor, cfg: GuidanceConfig, rng: np.random.Generator):
    """Draw conditions until the error predictor flags one.

    Returns ``(c, accepted, attempts)``.  When ``max_screen_attempts`` draws are
    all rejected, the draw with the highest predicted error probability is
    returned with ``accepted=False``.
    """
    best, best_p = None, -np.inf
    for attempt in range(1, cfg.max_screen_attempts + 1):
        c = sample_condition(stats, rng)
        p = float(predictor.prob_error(c)[0])
        if p >= predictor.threshold:
            return c, True, attempt
        if p > best_p:
            best, best_p = c, p
    return best, False, cfg.max_screen_attempts


def guidance_score(x_hat, y, classifier, embedder, y_text, lam: float, return_grad: bool = False):
    """Cross-entropy of the classifier at ``y`` plus ``lam * h(x_hat) . y_text`` per sample."""
    ce, g_ce = classifier.ce_and_grad(x_hat, y)
    if lam == 0:
        return (ce, g_ce) if return_grad else ce
    inner, g_inner = embedder.inner_and_grad(x_hat, y_text)
    score = ce + lam * inner
    if return_grad:
        return score, g_ce + lam * g_inner
    return score


def make_score_fn(classifier, embedder, y, y_text, lam):
    def score_fn(x_hat):
        return guidance_score(x_hat, y, classifier, embedder, y_text, lam, return_grad=True)
    return score_fn


def guided_noise(z_t, t: int, c, y_text, denoiser, decoder, score_fn, cfg: GuidanceConfig,
                 schedule: NoiseSchedule, info: dict | None = None):
    """Noise prediction shifted along the normalized gradient of the score.

    ``score_fn(x_hat) -> (score, grad_wrt_x_hat)`` per row.  The gradient is
    taken wrt ``z_t`` through the clean-point estimate, the decoder and (unless
    ``stop_grad_through_denoiser``) the noise predictor.  Rows whose gradient
    norm falls below ``grad_norm_floor`` are left unguided.
    """
    _check_step(t, schedule)
    if cfg.s == 0:
        return denoiser.guided_eps(z_t, t, c, y_text, cfg.cfg_weight)
    eps, vjp = denoiser.eps_and_vjp(z_t, t, c, y_text, cfg.cfg_weight)
    a_t = schedule.sqrt_ab(t)
    sig_t = schedule.sqrt_one_minus_ab(t)
    z0 = predict_z0(z_t, eps, t, schedule)
    score, gx = score_fn(decoder.decode(z0))
    g0 = decoder.vjp(z0, gx)
    grad = g0 / a_t
    if not cfg.stop_grad_through_denoiser:
        grad = grad - (sig_t / a_t) * vjp(g0)
    bad = ~np.all(np.isfinite(grad), axis=1)
    if bad.any():
        raise NonFiniteError(t, np.flatnonzero(bad))
    norm = np.linalg.norm(grad, axis=1)
    fire = norm >= cfg.grad_norm_floor
    safe = np.where(fire, norm, 1.0)
    shift = np.where(fire[:, None], grad / safe[:, None], 0.0)
    if info is not None:
        info["score"] = score
        info["grad_norm"] = norm
        info["fired"] = fire
    return eps - cfg.s * sig_t * shift


def _sample_seeds(seed: int, y: int, i: int):
    screen = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(y, i, 0)))
    noise = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(y, i, 1)))
    return screen, noise


def draw_conditions_and_noise(y, count, dims, stats, err_predictor, cfg, seed):
    conds, attempts, accepted, z_T = [], [], [], []
    for i in range(count):
        r_screen, r_noise = _sample_seeds(seed, y, i)
        if cfg.screening:
            c, ok, n = screen_embedding(stats, err_predictor, cfg, r_screen)
        else:
            c, ok, n = sample_condition(stats, r_screen), True, 1
        conds.append(c)
        attempts.append(n)
        accepted.append(ok)
        z_T.append(r_noise.normal(size=dims))
    return np.array(conds), np.array(attempts), np.array(accepted), np.array(z_T)


def sample_ddim(denoiser, z_T, c, y_text, schedule: NoiseSchedule, cfg_weight: float = 1.0):
    """Unguided conditional DDIM from ``z_T`` down to step 0."""
    z = z_T
    for t in range(schedule.T, 0, -1):
        z = ddim_step(z, denoiser.guided_eps(z, t, c, y_text, cfg_weight), t, schedule)
    return z


def generate(y: int, count: int, models: ModelBundle, stats: CategoryStats, err_predictor,
             schedule: NoiseSchedule, cfg: GuidanceConfig, seed: int) -> list[GeneratedSample]:
    """Generate ``count`` samples intended as category ``y``.

    All samples of the call are propagated as one batch.  Outputs are rounded
    to float32 precision before the target model labels them, so the recorded
    predictions survive a round-trip through the sample dump.
    """
    if count < 1:
        return []
    dims = models.denoiser.dims
    c, attempts, accepted, z = draw_conditions_and_noise(y, count, dims, stats, err_predictor, cfg, seed)
    y_text = models.embedder.embed_text(y)
    score_fn = make_score_fn(models.classifier, models.embedder, y, y_text, cfg.lam)
    trace = {"score": [], "grad_norm": [], "fired": []} if cfg.record_trace else None
    for t in range(schedule.T, 0, -1):
        info = {} if trace is not None else None
        try:
            eps_hat = guided_noise(z, t, c, y_text, models.denoiser, models.decoder, score_fn,
                                   cfg, schedule, info)
            z = ddim_step(z, eps_hat, t, schedule)
        except NonFiniteError:
            raise
        except FloatingPointError as exc:
            raise NonFiniteError(t, range(count), "state") from exc
        if trace is not None and info:
            for k in trace:
                trace[k].append(info[k])
    x = models.decoder.decode(z).astype(np.float32).astype(np.float64)
    preds = models.classifier.predict(x)
    out = []
    for i in range(count):
        tr = None
        if trace is not None and trace["score"]:
            tr = {k: np.array([step[i] for step in v]) for k, v in trace.items()}
        out.append(GeneratedSample(x[i], int(y), int(preds[i]), c[i], int(attempts[i]),
                                   bool(accepted[i]), tr))
    return out


# -- dump format -------------------------------------------------------------

def save_samples(samples: list[GeneratedSample], path, header: dict | None = None):
    """Write ``<path>.bin`` (magic, u64 header length, JSON header, float32 LE
    sample block, float32 LE condition block) and ``<path>.csv`` index."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.array([s.x for s in samples], dtype="<f4").reshape(len(samples), -1)
    c = np.array([s.embedding_condition for s in samples], dtype="<f4").reshape(len(samples), -1)
    counts: dict[str, int] = {}
    for s in samples:
        counts[str(s.intended_category)] = counts.get(str(s.intended_category), 0) + 1
    meta = dict(header or {})
    meta.update({"n": len(samples), "dims": int(x.shape[1]), "embed_dim": int(c.shape[1]),
                 "category_counts": counts})
    blob = json.dumps(meta, sort_keys=True, default=_json_default).encode()
    bin_path = path.with_suffix(".bin")
    tmp = bin_path.with_suffix(".bin.tmp")
    with open(tmp, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(np.uint64(len(blob)).astype("<u8").tobytes())
        fh.write(blob)
        fh.write(x.tobytes())
        fh.write(c.tobytes())
    os.replace(tmp, bin_path)
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "intended_category", "prediction", "is_risky", "screen_attempts",
                    "screen_accepted"])
        for i, s in enumerate(samples):
            w.writerow([i, s.intended_category, s.prediction, int(s.is_risky), s.screen_attempts,
                        int(s.screen_accepted)])
    return bin_path, csv_path


def load_samples(path):
    """Inverse of :func:`save_samples`; returns ``(samples, header)``."""
    path = Path(path)
    raw = path.with_suffix(".bin").read_bytes()
    if raw[:8] != DUMP_MAGIC:
        raise ValueError(f"{path}: not a sample dump")
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    meta = json.loads(raw[16:16 + hlen])
    n, d, e = meta["n"], meta["dims"], meta["embed_dim"]
    body = raw[16 + hlen:]
    if len(body) != 4 * n * (d + e):
        raise ValueError(f"{path}: sample blocks truncated")
    x = np.frombuffer(body[:4 * n * d], dtype="<f4").reshape(n, d).astype(np.float64)
    c = np.frombuffer(body[4 * n * d:], dtype="<f4").reshape(n, e).astype(np.float64)
    with open(path.with_suffix(".csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    samples = [GeneratedSample(x[i], int(r["intended_category"]), int(r["prediction"]), c[i],
                               int(r["screen_attempts"]), bool(int(r["screen_accepted"])))
               for i, r in enumerate(rows)]
    return samples, meta


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)
