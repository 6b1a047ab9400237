"""Metrics for generated sample sets: error rate, embedding-space Frechet
distance, oracle conformity and cross-model transfer."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def _check_nonempty(samples, what="samples"):
    if samples is None or len(samples) == 0:
        raise ValueError(f"{what} must be non-empty")


def _intended(samples) -> np.ndarray:
    return np.array([s.intended_category for s in samples], dtype=np.int64)


def _xs(samples) -> np.ndarray:
    return np.array([s.x for s in samples], dtype=np.float64)


def error_rate(samples, classifier=None) -> float:
    """Fraction of samples the classifier gets wrong.

    Without a classifier the recorded predictions are used, which equals the
    mean of ``is_risky``.
    """
    _check_nonempty(samples)
    preds = (np.array([s.prediction for s in samples]) if classifier is None
             else classifier.predict(_xs(samples)))
    return float(np.mean(preds != _intended(samples)))


def conformity_rate(samples, oracle) -> float:
    """Fraction of samples whose Bayes-oracle label is the intended category."""
    _check_nonempty(samples)
    return float(np.mean(oracle.predict(_xs(samples)) == _intended(samples)))


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _fit(e: np.ndarray, diagonal: bool):
    mu = e.mean(0)
    if diagonal:
        return mu, np.diag(e.var(0, ddof=1))
    return mu, np.atleast_2d(np.cov(e, rowvar=False))


def frechet_embedding_distance(gen, ref, return_diagonal: bool = False):
    """Frechet distance between Gaussian fits of two embedding sets.

    A full covariance is fitted when both sets have more than ``d + 1``
    points, otherwise a diagonal one.  The trace term uses
    ``Tr((S1^1/2 S2 S1^1/2)^1/2)``, which equals ``Tr((S1 S2)^1/2)`` and only
    needs symmetric square roots.
    """
    a = np.asarray(gen, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("Frechet distance needs at least 2 embeddings per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("embedding dimensions differ")
    d = a.shape[1]
    diagonal = min(len(a), len(b)) <= d + 1
    mu1, s1 = _fit(a, diagonal)
    mu2, s2 = _fit(b, diagonal)
    r1 = _sqrtm_psd(s1)
    cross = _sqrtm_psd(r1 @ s2 @ r1)
    val = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    val = max(val, 0.0)
    return (val, diagonal) if return_diagonal else val


@dataclass
class TransferMatrix:
    source_model: str
    rows: list = field(default_factory=list)  # (target_model, error_rate)

    def __post_init__(self):
        for name, er in self.rows:
            if not 0.0 <= er <= 1.0:
                raise ValueError(f"error rate for {name} outside [0, 1]")

    def to_csv(self, path):
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source_model", "target_model", "error_rate"])
            for name, er in self.rows:
                w.writerow([self.source_model, name, f"{er:.6f}"])
        os.replace(tmp, path)
        return path


def transfer_matrix(samples, classifiers, source_model: str = "source", names=None) -> TransferMatrix:
    """Error rate of one fixed sample set under each classifier."""
    _check_nonempty(samples)
    _check_nonempty(classifiers, "classifiers")
    if isinstance(classifiers, dict):
        names, classifiers = list(classifiers), list(classifiers.values())
    names = names or [getattr(c, "arch", f"model{i}") for i, c in enumerate(classifiers)]
    return TransferMatrix(source_model, [(n, error_rate(samples, c)) for n, c in zip(names, classifiers)])


@dataclass
class EvalReport:
    error_rate: float
    frechet_distance: float
    conformity_rate: float
    per_category: dict
    sample_count: int
    frechet_diagonal: bool = False
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.error_rate, self.conformity_rate):
            if not 0.0 <= v <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if self.frechet_distance < -1e-9:
            raise ValueError("negative Frechet distance")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path):
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_plain))
        os.replace(tmp, path)
        return path

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate(samples, embedder, oracle, ref_embeddings, classifier=None, config=None) -> EvalReport:
    """Overall and per-category error rate, Frechet distance and conformity.

    ``ref_embeddings`` is the reference set for the Frechet distance (the
    target's error samples by default in the pipeline).  Per-category Frechet
    values are left ``None`` when a category has fewer than 2 samples.
    """
    _check_nonempty(samples)
    emb = embedder.embed_image(_xs(samples))
    fd, diag = frechet_embedding_distance(emb, ref_embeddings, return_diagonal=True)
    yi = _intended(samples)
    per = {}
    for y in np.unique(yi):
        sub = [s for s, k in zip(samples, yi) if k == y]
        fd_y = None
        if len(sub) >= 2:
            fd_y = frechet_embedding_distance(emb[yi == y], ref_embeddings)
        per[str(int(y))] = {
            "error_rate": error_rate(sub, classifier),
            "conformity_rate": conformity_rate(sub, oracle),
            "frechet_distance": fd_y,
            "count": len(sub),
        }
    return EvalReport(error_rate(samples, classifier), fd, conformity_rate(samples, oracle), per,
                      len(samples), diag, dict(config or {}))


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)
