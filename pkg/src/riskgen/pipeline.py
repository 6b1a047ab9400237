"""Experiment orchestration: run configs, cached stages, retraining, sweeps
and ablations.

Seed hierarchy: every random stream derives from the master seed through
``derive_seed(master, stage, *sub)``, i.e. ``SeedSequence(master,
spawn_key=(STAGES[stage], *sub))``.  Generation seeds are used directly as the
per-sample seed of :func:`riskgen.sampler.generate`.

Stage outputs live under ``checkpoints/`` and ``samples/`` in a directory named
by a hash of everything the stage depends on, so changing ``guidance.lam``
reuses the data and trained models while regenerating samples.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset, bayes_oracle, default_spec, load_dataset, make_dataset, save_dataset
from .diffusion import build_schedule
from .evaluation import EvalReport, evaluate, transfer_matrix
from .models import (CLASSIFIER_ARCHS, ClassifierConfig, DenoiserConfig, EmbedderConfig, ErrorPredictor,
                     ErrorPredictorConfig, IdentityDecoder, JointEmbedder, NoisePredictor, TargetClassifier,
                     accuracy, compute_model_errors, fit_error_predictor, train_classifier, train_denoiser,
                     train_embedder)
from .nn import config_hash
from .sampler import (GuidanceConfig, ModelBundle, estimate_category_stats, generate,
                      load_samples, save_samples)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = {"data": 0, "embedder": 1, "denoiser": 2, "classifier": 3, "error_predictor": 4,
          "generate": 5, "retrain": 6, "subsample": 7}
SWEEP_AXES = ("s", "lambda", "val_fraction")
ARMS = ("Base", "Screening", "Gradient", "Both")


def derive_seed(master: int, stage: str, *sub: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(STAGES[stage], *sub))
    return int(ss.generate_state(1)[0])


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


# -- configuration -----------------------------------------------------------

@dataclass
class DataConfig:
    num_classes: int = 6
    dims: int = 16
    signal_dims: int = 4
    nuisance_dims: int = 2
    samples_per_class_per_domain: int = 200
    mean_scale: float = 2.0
    noise_scale: float = 0.8
    nuisance_radius: float = 2.0
    nuisance_scale: float = 0.5
    off_manifold_scale: float = 0.05
    id_shift: float = 0.4
    id_angle: float = 0.2
    ood_angle: float = 1.0
    ood_shift: float = 0.0


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.2


@dataclass
class EvalConfig:
    oracle_scope: str = "id"
    frechet_reference: str = "val"   # error samples of this split
    val_fraction: float = 1.0


@dataclass
class GenerationConfig:
    count_per_category: int = 100
    seeds: tuple = (0, 1, 2)


@dataclass
class RetrainConfig:
    enabled: bool = True
    seeds: tuple = (0, 1, 2)
    epochs: int | None = None        # None: same as the baseline classifier
    mislabeled_control: bool = True


def _no_seed(cls):
    return [f.name for f in fields(cls) if f.name != "seed"]


_SECTIONS = {
    "data": DataConfig,
    "schedule": ScheduleConfig,
    "embedder": EmbedderConfig,
    "denoiser": DenoiserConfig,
    "classifier": ClassifierConfig,
    "error_predictor": ErrorPredictorConfig,
    "guidance": GuidanceConfig,
    "evaluation": EvalConfig,
    "generation": GenerationConfig,
    "retrain": RetrainConfig,
}


@dataclass
class RunConfig:
    """Everything a run depends on.  Component ``seed`` fields are not part of
    the config; they are derived from ``seed``."""

    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    archs: tuple = ("linear", "mlp-small", "mlp-wide", "mlp-deep")
    error_predictor: ErrorPredictorConfig = field(default_factory=ErrorPredictorConfig)
    guidance: GuidanceConfig = field(default_factory=lambda: GuidanceConfig(cfg_weight=2.0))
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        for a in self.archs:
            if a not in CLASSIFIER_ARCHS:
                raise ValueError(f"unknown classifier arch {a!r}")
        if self.classifier.arch not in self.archs:
            raise ValueError("the target arch must be one of archs")
        if not 0 < self.evaluation.val_fraction <= 1:
            raise ValueError("val_fraction must lie in (0, 1]")
        if self.evaluation.frechet_reference not in ("val", "train"):
            raise ValueError("frechet_reference must be 'val' or 'train'")
        if not self.generation.seeds or not self.retrain.seeds:
            raise ValueError("at least one generation and one retraining seed is required")

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        for name in _SECTIONS:
            sec = asdict(getattr(self, name))
            sec.pop("seed", None)
            d[name] = sec
        d["archs"] = list(self.archs)
        d["seed"] = self.seed
        d["out"] = self.out
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version}")
        known = set(_SECTIONS) | {"archs", "seed", "out"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, sec_cls in _SECTIONS.items():
            if name not in data:
                continue
            sec = data[name]
            if not isinstance(sec, dict):
                raise ValueError(f"config section {name!r} must be an object")
            bad = set(sec) - set(_no_seed(sec_cls))
            if bad:
                raise ValueError(f"unknown keys in {name!r}: {sorted(bad)}")
            if name == "guidance":
                sec = {"cfg_weight": 2.0, **sec}
            kw[name] = sec_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in sec.items()})
        if "archs" in data:
            kw["archs"] = tuple(data["archs"])
        for k in ("seed", "out"):
            if k in data:
                kw[k] = data[k]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        _atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)

    def snapshot(self) -> dict:
        """Config as embedded in reports; the run location is left out so
        identical runs in different directories write identical reports."""
        d = self.to_dict()
        d.pop("out")
        return d

    def with_guidance(self, **kw) -> "RunConfig":
        return replace(self, guidance=replace(self.guidance, **kw))


# -- run record --------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    out: str
    stages: dict = field(default_factory=dict)   # name -> {"done", "key", "paths"}
    metrics: dict = field(default_factory=dict)
    error: str | None = None

    def mark(self, stage, key, paths):
        paths = [str(p) for p in paths]
        missing = [p for p in paths if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"stage {stage} finished without writing {missing}")
        self.stages[stage] = {"done": True, "key": key, "paths": paths}

    def save(self):
        _atomic_write_text(Path(self.out) / "manifest.json",
                           json.dumps(asdict(self), indent=2, sort_keys=True))


# -- io helpers --------------------------------------------------------------

def _atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    os.replace(tmp, path)
    return path


def _dump_json(path, obj):
    return _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_plain))


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


@contextmanager
def single_threaded():
    """Pin BLAS/OpenMP pools to one thread so results are bit-reproducible."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


# -- the staged pipeline -----------------------------------------------------

class Pipeline:
    """Lazily builds and caches every stage of one run directory."""

    def __init__(self, config: RunConfig, out=None, resume: bool = True):
        self.cfg = config
        self.out = Path(out or config.out)
        self.resume = resume
        for sub in ("checkpoints", "samples", "reports", "plots"):
            (self.out / sub).mkdir(parents=True, exist_ok=True)
        self.record = RunRecord(f"{config.hash()}-{time.strftime('%Y%m%dT%H%M%S')}", config.hash(),
                                str(self.out))
        self._cache = {}

    # stage keys: hash of the config slices a stage depends on plus upstream keys
    def key(self, stage: str) -> str:
        c = self.cfg.to_dict()
        base = {"seed": self.cfg.seed}
        if stage == "data":
            parts = [base, c["data"]]
        elif stage == "models":
            parts = [self.key("data"), c["schedule"], c["embedder"], c["denoiser"], c["classifier"],
                     c["archs"]]
        elif stage == "screen":
            parts = [self.key("models"), c["error_predictor"], c["evaluation"]["val_fraction"]]
        else:
            raise KeyError(stage)
        return config_hash(parts)

    def _stage_dir(self, stage, key):
        return self.out / "checkpoints" / f"{stage}-{key}"

    def _cached(self, path: Path) -> bool:
        if (path / "DONE").exists() and self.resume:
            return True
        if path.exists():
            shutil.rmtree(path)
        return False

    # data
    def dataset(self) -> LabeledDataset:
        if "data" in self._cache:
            return self._cache["data"]
        key = self.key("data")
        d = self._stage_dir("data", key)
        f = d / "dataset.rgd"
        spec = default_spec(derive_seed(self.cfg.seed, "data"), **asdict(self.cfg.data))
        if self._cached(d):
            ds = load_dataset(f, expected_spec_hash=spec.hash(), strict=True)
        else:
            ds = make_dataset(spec)
            d.mkdir(parents=True, exist_ok=True)
            save_dataset(ds, f)
            (d / "DONE").write_text(key)
        self.record.mark("data", key, [f])
        self._cache["data"] = ds
        return ds

    def schedule(self):
        s = self.cfg.schedule
        return build_schedule(s.kind, s.T, s.beta_min, s.beta_max)

    def validation(self) -> LabeledDataset:
        """Validation split, subsampled (stratified) when val_fraction < 1."""
        va = self.dataset().get_split("val")
        frac = self.cfg.evaluation.val_fraction
        if frac >= 1:
            return va
        rng = np.random.default_rng(derive_seed(self.cfg.seed, "subsample"))
        keep = []
        for k in range(va.num_classes):
            idx = np.flatnonzero(va.y == k)
            n = max(1, int(round(frac * len(idx))))
            keep.extend(rng.choice(idx, size=n, replace=False))
        return va.subset(np.sort(np.array(keep)))

    # models
    def models(self) -> dict:
        if "models" in self._cache:
            return self._cache["models"]
        ds = self.dataset()
        key = self.key("models")
        d = self._stage_dir("models", key)
        cfg, m = self.cfg, self.cfg.seed
        archs = list(cfg.archs)
        if self._cached(d):
            emb = JointEmbedder.load(d / "embedder")
            den = NoisePredictor.load(d / "denoiser")
            clfs = {a: TargetClassifier.load(d / f"classifier-{a}") for a in archs}
        else:
            train = ds.get_split("train")
            emb = train_embedder(train, replace(cfg.embedder, seed=derive_seed(m, "embedder")))
            den = train_denoiser(train, emb, self.schedule(),
                                 replace(cfg.denoiser, seed=derive_seed(m, "denoiser")))
            clfs = {}
            for i, a in enumerate(archs):
                clfs[a] = train_classifier(train, replace(cfg.classifier, arch=a,
                                                          seed=derive_seed(m, "classifier", i)))
            d.mkdir(parents=True, exist_ok=True)
            emb.save(d / "embedder")
            den.save(d / "denoiser")
            for a, c in clfs.items():
                c.save(d / f"classifier-{a}")
            (d / "DONE").write_text(key)
        out = {"embedder": emb, "denoiser": den, "classifiers": clfs, "target": clfs[cfg.classifier.arch]}
        out["error_predictor"], ep_dir = self._error_predictor(out)
        self.record.mark("train", key, [d / "embedder", d / "denoiser", ep_dir]
                         + [d / f"classifier-{a}" for a in archs])
        self._cache["models"] = out
        return out

    def _error_predictor(self, models):
        """Fit on the (possibly subsampled) validation split's target errors."""
        key = self.key("screen")
        d = self._stage_dir("error_predictor", key)
        if self._cached(d):
            return ErrorPredictor.load(d / "model"), d
        va = self.validation()
        errs = compute_model_errors(models["target"], va)
        errp = fit_error_predictor(models["embedder"].embed_image(va.x), errs,
                                   replace(self.cfg.error_predictor,
                                           seed=derive_seed(self.cfg.seed, "error_predictor")))
        errp.save(d / "model")
        (d / "DONE").write_text(key)
        return errp, d

    def bundle(self) -> ModelBundle:
        m = self.models()
        return ModelBundle(m["denoiser"], m["target"], m["embedder"], IdentityDecoder())

    def category_stats(self):
        va = self.validation()
        emb = self.models()["embedder"].embed_image(va.x)
        return [estimate_category_stats(emb, va.y, k) for k in range(va.num_classes)]

    # generation
    def samples(self, seed: int | None = None, guidance: GuidanceConfig | None = None):
        """Generated samples for one generation seed, cached on disk."""
        g = guidance or self.cfg.guidance
        seed = self.cfg.generation.seeds[0] if seed is None else seed
        n = self.cfg.generation.count_per_category
        key = self.sample_key(g, seed)
        base = self.out / "samples" / f"gen-{key}"
        ck = ("samples", key)
        if ck in self._cache:
            return self._cache[ck]
        if self.resume and base.with_suffix(".bin").exists() and base.with_suffix(".csv").exists():
            samples, _ = load_samples(base)
        else:
            bundle, stats = self.bundle(), self.category_stats()
            errp = self.models()["error_predictor"]
            sched = self.schedule()
            samples = []
            for y in range(self.dataset().num_classes):
                samples += generate(y, n, bundle, stats[y], errp, sched, g, seed)
            header = {"guidance": asdict(g), "generation_seed": seed, "master_seed": self.cfg.seed,
                      "config_hash": self.cfg.hash(), "models_key": self.key("screen")}
            save_samples(samples, base, header)
        self._cache[ck] = samples
        return samples

    def sample_key(self, g: GuidanceConfig, seed: int) -> str:
        return config_hash([self.key("screen"), asdict(g), self.cfg.generation.count_per_category, seed])

    def frechet_reference(self):
        m = self.models()
        split = self.validation() if self.cfg.evaluation.frechet_reference == "val" \
            else self.dataset().get_split("train")
        err = compute_model_errors(m["target"], split)
        x = split.x[err] if err.sum() >= 2 else split.x
        if err.sum() < 2:
            log.warning("fewer than 2 reference error samples; using the whole %s split",
                        self.cfg.evaluation.frechet_reference)
        return m["embedder"].embed_image(x)

    def oracle(self):
        return bayes_oracle(self.dataset().spec, self.cfg.evaluation.oracle_scope)

    def evaluate(self, samples, guidance=None) -> EvalReport:
        m = self.models()
        snap = self.cfg.snapshot()
        if guidance is not None:
            snap["guidance"] = asdict(guidance)
        return evaluate(samples, m["embedder"], self.oracle(), self.frechet_reference(),
                        config=snap)


def arm_label(g: GuidanceConfig) -> str:
    """Ablation arm a guidance config corresponds to."""
    grad = g.s > 0
    if grad and g.screening:
        return "Both"
    if grad:
        return "Gradient"
    return "Screening" if g.screening else "Base"


# -- retraining --------------------------------------------------------------

def _split_xy(generated, labels=None):
    if isinstance(generated, tuple):
        x, y = generated
    else:
        x = np.array([s.x for s in generated], dtype=np.float64).reshape(len(generated), -1)
        y = np.array([s.intended_category for s in generated], dtype=np.int64)
    if labels is not None:
        y = np.asarray(labels, dtype=np.int64)
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def augment_and_retrain(generated, dataset: LabeledDataset, arch: str, cfg: ClassifierConfig | None = None,
                        seeds=(0, 1, 2), labels=None, master_seed: int = 0) -> dict:
    """Retrain from scratch on train (+ generated) per seed; ID/OOD accuracy table.

    ``generated`` is a list of samples (labelled by intended category) or an
    ``(x, y)`` pair; ``labels`` overrides the labels (negative control).
    Deltas are paired per seed against a baseline trained identically.
    """
    if not seeds:
        raise ValueError("at least one seed is required")
    cfg = replace(cfg or ClassifierConfig(), arch=arch)
    train = dataset.get_split("train")
    tid, tood = dataset.get_split("test_id"), dataset.get_split("test_ood")
    x, y = _split_xy(generated, labels) if len(generated) else (None, None)
    empty = x is None or len(x) == 0
    base, aug = [], []
    for s in seeds:
        c = replace(cfg, seed=derive_seed(master_seed, "retrain", int(s)))
        b = train_classifier(train, c)
        base.append((accuracy(b, tid.x, tid.y), accuracy(b, tood.x, tood.y)))
        if empty:
            aug.append(base[-1])
        else:
            a = train_classifier(train.concat(x, y), c)
            aug.append((accuracy(a, tid.x, tid.y), accuracy(a, tood.x, tood.y)))
    base, aug = np.array(base), np.array(aug)
    delta = aug - base

    def ms(v):
        return {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0}

    return {
        "arch": arch, "seeds": [int(s) for s in seeds], "n_generated": 0 if empty else int(len(x)),
        "baseline_only": bool(empty),
        "baseline": {"id": ms(base[:, 0]), "ood": ms(base[:, 1])},
        "augmented": {"id": ms(aug[:, 0]), "ood": ms(aug[:, 1])},
        "delta": {"id": ms(delta[:, 0]), "ood": ms(delta[:, 1])},
        "per_seed": {"baseline": base.tolist(), "augmented": aug.tolist()},
    }


def mislabel(labels, num_classes: int, seed: int = 0) -> np.ndarray:
    """Shift every label to a different, random class."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([seed, 0xBAD])
    return (labels + 1 + rng.integers(0, num_classes - 1, size=len(labels))) % num_classes


# -- top-level operations ----------------------------------------------------

def _run_stage(record, name, fn):
    try:
        return fn()
    except Exception as exc:
        record.error = f"{name}: {exc}"
        record.save()
        raise PipelineError(name, exc) from exc


def _metric_row(rep: EvalReport):
    return {"error_rate": rep.error_rate, "frechet_distance": rep.frechet_distance,
            "conformity_rate": rep.conformity_rate}


def _seed_summary(pipe: Pipeline, guidance: GuidanceConfig, seeds):
    reps = [pipe.evaluate(pipe.samples(s, guidance), guidance) for s in seeds]
    out = {}
    for k in ("error_rate", "frechet_distance", "conformity_rate"):
        v = np.array([_metric_row(r)[k] for r in reps])
        out[k] = float(v.mean())
        out[k + "_sd"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return out, reps


def run_experiment(config: RunConfig, out=None, resume: bool = True, stages=None) -> RunRecord:
    """data -> train -> generate -> eval -> retrain, skipping cached stages."""
    stages = stages or ("data", "train", "generate", "eval", "retrain")
    with single_threaded():
        pipe = Pipeline(config, out, resume)
        rec = pipe.record
        rep_dir, plot_dir = pipe.out / "reports", pipe.out / "plots"
        config.save(pipe.out / "config.json")
        _run_stage(rec, "data", pipe.dataset)
        if "train" in stages:
            _run_stage(rec, "train", pipe.models)
        if "generate" in stages:
            def gen():
                paths = []
                for s in config.generation.seeds:
                    pipe.samples(s)
                    key = pipe.sample_key(config.guidance, s)
                    paths += [pipe.out / "samples" / f"gen-{key}.bin", pipe.out / "samples" / f"gen-{key}.csv"]
                rec.mark("generate", config_hash([str(p) for p in paths]), paths)
            _run_stage(rec, "generate", gen)
        if "eval" in stages:
            def ev():
                summary, reps = _seed_summary(pipe, config.guidance, config.generation.seeds)
                report = reps[0].to_dict()
                report["arm"] = arm_label(config.guidance)
                report["seeds"] = {"values": list(config.generation.seeds), **summary}
                p_eval = _dump_json(rep_dir / "eval.json", report)
                samples = pipe.samples(config.generation.seeds[0])
                tm = transfer_matrix(samples, pipe.models()["classifiers"], config.classifier.arch)
                p_tm = tm.to_csv(rep_dir / "transfer.csv")
                p_plot = _plot_per_category(report, plot_dir / "per_category.png")
                rec.metrics.update({"arm": report["arm"], **summary,
                                    "transfer": {n: e for n, e in tm.rows}})
                rec.mark("eval", rec.config_hash, [p_eval, p_tm, p_plot])
            _run_stage(rec, "eval", ev)
        if "retrain" in stages and config.retrain.enabled:
            def rt():
                ds = pipe.dataset()
                samples = pipe.samples(config.generation.seeds[0])
                ccfg = config.classifier if config.retrain.epochs is None else \
                    replace(config.classifier, epochs=config.retrain.epochs)
                res = {"config": config.snapshot(),
                       "generated": augment_and_retrain(samples, ds, config.classifier.arch, ccfg,
                                                        config.retrain.seeds, master_seed=config.seed)}
                if config.retrain.mislabeled_control and samples:
                    bad = mislabel([s.intended_category for s in samples], ds.num_classes, config.seed)
                    res["mislabeled"] = augment_and_retrain(samples, ds, config.classifier.arch, ccfg,
                                                            config.retrain.seeds, labels=bad,
                                                            master_seed=config.seed)
                p_json = _dump_json(rep_dir / "retrain.json", res)
                rows = []
                for arm in ("generated", "mislabeled"):
                    if arm in res:
                        r = res[arm]
                        rows.append([arm, r["n_generated"], r["augmented"]["id"]["mean"], r["augmented"]["ood"]["mean"],
                                     r["delta"]["id"]["mean"], r["delta"]["id"]["sd"],
                                     r["delta"]["ood"]["mean"], r["delta"]["ood"]["sd"]])
                p_csv = _write_csv(rep_dir / "retrain.csv",
                                   ["arm", "n_generated", "id_acc", "ood_acc", "delta_id", "delta_id_sd",
                                    "delta_ood", "delta_ood_sd"], rows)
                rec.metrics["retrain"] = {k: res[k]["delta"] for k in ("generated", "mislabeled") if k in res}
                rec.mark("retrain", rec.config_hash, [p_json, p_csv])
            _run_stage(rec, "retrain", rt)
        rec.save()
        return rec


def sweep(config: RunConfig, axis: str, values, out=None, resume: bool = True, seeds=None) -> list[dict]:
    """One generation + evaluation per value of ``axis``, all else fixed."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    values = list(values)
    if values != sorted(values):
        raise ValueError("sweep values must be sorted")
    seeds = tuple(seeds or config.generation.seeds)
    rows = []
    with single_threaded():
        for v in values:
            if axis == "s":
                cfg = config.with_guidance(s=float(v))
            elif axis == "lambda":
                cfg = config.with_guidance(lam=float(v))
            else:
                cfg = replace(config, evaluation=replace(config.evaluation, val_fraction=float(v)))
            pipe = Pipeline(cfg, out or config.out, resume)
            summary, _ = _seed_summary(pipe, cfg.guidance, seeds)
            rows.append({axis: float(v), **summary})
        pipe_out = Path(out or config.out)
        header = [axis, "error_rate", "error_rate_sd", "frechet_distance", "frechet_distance_sd",
                  "conformity_rate", "conformity_rate_sd"]
        _write_csv(pipe_out / "reports" / f"sweep-{axis}.csv", header, [[r[h] for h in header] for r in rows])
        _dump_json(pipe_out / "reports" / f"sweep-{axis}.json",
                   {"axis": axis, "values": values, "seeds": list(seeds), "rows": rows,
                    "config": config.snapshot()})
        _plot_sweep(rows, axis, pipe_out / "plots" / f"sweep-{axis}.png")
    return rows


def ablation_arms(config: RunConfig) -> dict:
    g = config.guidance
    return {
        "Base": replace(g, s=0.0, lam=0.0, screening=False),
        "Screening": replace(g, s=0.0, lam=0.0, screening=True),
        "Gradient": replace(g, screening=False),
        "Both": replace(g, screening=True),
    }


def ablate(config: RunConfig, out=None, resume: bool = True, seeds=None) -> dict:
    """Base / +Screening / +Gradient / +Both with shared seeds."""
    seeds = tuple(seeds or config.generation.seeds)
    out_dir = Path(out or config.out)
    res = {}
    with single_threaded():
        pipe = Pipeline(config, out_dir, resume)
        for arm, g in ablation_arms(config).items():
            summary, _ = _seed_summary(pipe, g, seeds)
            res[arm] = {**summary, "guidance": asdict(g)}
        header = ["arm", "error_rate", "error_rate_sd", "frechet_distance", "frechet_distance_sd",
                  "conformity_rate", "conformity_rate_sd"]
        _write_csv(out_dir / "reports" / "ablation.csv", header,
                   [[a] + [res[a][h] for h in header[1:]] for a in ARMS])
        _dump_json(out_dir / "reports" / "ablation.json",
                   {"seeds": list(seeds), "arms": res, "config": config.snapshot()})
        _plot_ablation(res, out_dir / "plots" / "ablation.png")
    return res


# -- plots -------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save_fig(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    fig.savefig(tmp, dpi=100, metadata={"Software": None})
    os.replace(tmp, path)
    return path


def _plot_sweep(rows, axis, path):
    plt = _pyplot()
    xs = np.arange(len(rows))
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    for k, lab in (("error_rate", "error rate"), ("conformity_rate", "conformity")):
        ax[0].errorbar(xs, [r[k] for r in rows], yerr=[r[k + "_sd"] for r in rows], marker="o", label=lab)
    ax[0].set_ylim(0, 1)
    ax[0].legend()
    ax[1].errorbar(xs, [r["frechet_distance"] for r in rows], yerr=[r["frechet_distance_sd"] for r in rows],
                   marker="o", color="C2")
    ax[1].set_title("Frechet distance")
    for a in ax:
        a.set_xticks(xs, [f"{r[axis]:g}" for r in rows])
        a.set_xlabel(axis)
    fig.tight_layout()
    p = _save_fig(fig, path)
    plt.close(fig)
    return p


def _plot_ablation(res, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = np.arange(len(ARMS))
    for j, (k, lab) in enumerate((("error_rate", "error rate"), ("conformity_rate", "conformity"))):
        ax.bar(xs + (j - 0.5) * 0.38, [res[a][k] for a in ARMS], 0.38,
               yerr=[res[a][k + "_sd"] for a in ARMS], label=lab)
    ax.set_xticks(xs, list(ARMS))
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    p = _save_fig(fig, path)
    plt.close(fig)
    return p


def _plot_per_category(report, path):
    plt = _pyplot()
    cats = sorted(report["per_category"], key=int)
    xs = np.arange(len(cats))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(xs - 0.2, [report["per_category"][c]["error_rate"] for c in cats], 0.4, label="error rate")
    ax.bar(xs + 0.2, [report["per_category"][c]["conformity_rate"] for c in cats], 0.4, label="conformity")
    ax.set_xticks(xs, cats)
    ax.set_xlabel("category")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    p = _save_fig(fig, path)
    plt.close(fig)
    return p
