"""Synthetic multi-domain classification data with a closed-form Bayes oracle.

The ambient space is split, along a seeded orthonormal basis, into three
blocks: ``signal_dims`` directions carrying the class (std
``class_cov_scale[k]``), ``nuisance_dims`` "context" directions (std
``nuisance_scale``) and the remaining off-manifold directions (std
``off_manifold_scale``).  Class means may have a context component, which
makes context predictive of the label in some domains.  A domain rotates the
whole mixture in one plane of the basis and then shifts it, so every
component stays Gaussian and the class posterior is exact on any domain.

In the default spec the OOD domains rotate the context plane far enough that
context no longer lines up with the class, which is how a classifier leaning
on context fails out of distribution.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .nn import config_hash

SPLITS = ("train", "val", "test_id", "test_ood")
DATASET_MAGIC = b"RGDATA01"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised for corrupt, truncated or mismatched dataset files."""


@dataclass(frozen=True)
class Domain:
    """Rotation by ``angle`` in the plane of basis vectors ``plane``, then ``offset``."""

    name: str
    offset: tuple
    angle: float = 0.0
    plane: tuple = (0, 1)
    ood: bool = False


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    dims: int
    domains: tuple
    class_means: tuple
    class_cov_scale: tuple
    signal_dims: int | None = None
    nuisance_dims: int = 0
    nuisance_scale: float = 0.0
    off_manifold_scale: float = 0.0
    basis_seed: int = 0
    samples_per_class_per_domain: int = 200
    split_fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.dims < 2:
            raise ValueError("need at least 2 classes and 2 dimensions")
        means = self.means
        if means.shape != (self.num_classes, self.dims):
            raise ValueError(f"class_means must have shape ({self.num_classes}, {self.dims})")
        if len(self.class_cov_scale) != self.num_classes:
            raise ValueError("one noise scale per class is required")
        if any(s < 0 for s in self.class_cov_scale) or self.off_manifold_scale < 0 or self.nuisance_scale < 0:
            raise ValueError("noise scales must be non-negative")
        if not 1 <= self.m <= self.dims or self.nuisance_dims < 0 or self.m + self.nuisance_dims > self.dims:
            raise ValueError("signal_dims + nuisance_dims must fit in dims")
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                if np.array_equal(means[a], means[b]):
                    raise ValueError(f"class means {a} and {b} coincide")
        if not any(not d.ood for d in self.domains) or not any(d.ood for d in self.domains):
            raise ValueError("at least one ID and one OOD domain are required")
        for d in self.domains:
            if len(d.offset) != self.dims:
                raise ValueError(f"domain {d.name} offset has wrong length")
            if not all(0 <= i < self.dims for i in d.plane) or d.plane[0] == d.plane[1]:
                raise ValueError(f"domain {d.name} has an invalid rotation plane")
        if self.samples_per_class_per_domain < 1:
            raise ValueError("samples_per_class_per_domain must be positive")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be three fractions summing to 1")

    @property
    def m(self) -> int:
        return self.dims if self.signal_dims is None else self.signal_dims

    @property
    def means(self) -> np.ndarray:
        return np.asarray(self.class_means, dtype=np.float64)

    @property
    def basis(self) -> np.ndarray:
        """Orthonormal columns; the first ``signal_dims`` span the signal subspace."""
        if self.m == self.dims:
            return np.eye(self.dims)
        return _random_basis(self.dims, self.basis_seed)

    def rotation(self, domain: int) -> np.ndarray:
        d = self.domains[domain]
        B = self.basis
        u, v = B[:, d.plane[0]], B[:, d.plane[1]]
        c, s = np.cos(d.angle), np.sin(d.angle)
        return (np.eye(self.dims) + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
                + s * (np.outer(v, u) - np.outer(u, v)))

    def axis_std(self, k: int) -> np.ndarray:
        """Per-basis-direction standard deviation of class ``k``."""
        std = np.full(self.dims, float(self.off_manifold_scale))
        std[:self.m] = self.class_cov_scale[k]
        std[self.m:self.m + self.nuisance_dims] = self.nuisance_scale
        return std

    def class_cov(self, k: int) -> np.ndarray:
        B = self.basis
        return (B * self.axis_std(k) ** 2) @ B.T

    def component(self, domain: int, k: int):
        """Mean and covariance of class ``k`` in ``domain``."""
        R = self.rotation(domain)
        mean = R @ self.means[k] + np.asarray(self.domains[domain].offset)
        return mean, R @ self.class_cov(k) @ R.T

    def domain_index(self, scope) -> list[int]:
        """Indices of domains selected by ``"id"``, ``"ood"``, ``"all"`` or a list of names."""
        if scope == "all":
            return list(range(len(self.domains)))
        if scope == "id":
            return [i for i, d in enumerate(self.domains) if not d.ood]
        if scope == "ood":
            return [i for i, d in enumerate(self.domains) if d.ood]
        names = [d.name for d in self.domains]
        return [names.index(n) for n in scope]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        data["domains"] = tuple(
            Domain(name=d["name"], offset=tuple(d["offset"]), angle=d["angle"],
                   plane=tuple(d["plane"]), ood=d["ood"]) for d in data["domains"])
        data["class_means"] = tuple(tuple(m) for m in data["class_means"])
        data["class_cov_scale"] = tuple(data["class_cov_scale"])
        data["split_fractions"] = tuple(data["split_fractions"])
        return cls(**data)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _random_basis(dims: int, seed: int) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng([seed, 0xBA5E]).normal(size=(dims, dims)))
    return q * np.sign(np.diag(r))


def default_spec(seed: int = 0, num_classes: int = 6, dims: int = 16, signal_dims: int = 4,
                 nuisance_dims: int = 2, samples_per_class_per_domain: int = 200,
                 mean_scale: float = 2.0, noise_scale: float = 0.8, nuisance_radius: float = 2.0,
                 nuisance_scale: float = 0.5, off_manifold_scale: float = 0.05, id_shift: float = 0.4,
                 id_angle: float = 0.2, ood_angle: float = 1.0, ood_shift: float = 0.0) -> SyntheticSpec:
    """Six classes in 16 dims: 4 signal, 2 context and 10 near-empty directions.

    Class ``k``'s context mean sits at angle ``2 pi k / K`` on a circle of
    radius ``nuisance_radius``.  Three ID domains (small context rotations
    ``+-id_angle`` and signal offsets of norm ``id_shift``) and two OOD domains
    (context rotated by ``+-ood_angle``, optional signal offset ``ood_shift``).
    """
    rng = np.random.default_rng([seed, 0xDA7A])
    B = _random_basis(dims, seed)
    m, nd = signal_dims, nuisance_dims
    means = rng.normal(0.0, mean_scale, size=(num_classes, m)) @ B[:, :m].T
    if nd >= 2:
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + 2 * np.pi * np.arange(num_classes) / num_classes
        means = means + nuisance_radius * (np.outer(np.cos(ang), B[:, m]) + np.outer(np.sin(ang), B[:, m + 1]))
    ctx = (m, m + 1) if nd >= 2 else (0, 1)

    def offset(norm):
        v = rng.normal(size=m)
        return tuple(float(x) for x in norm * (v / np.linalg.norm(v)) @ B[:, :m].T)

    zero = tuple([0.0] * dims)
    domains = (
        Domain("photo", zero, 0.0, ctx, False),
        Domain("sketch", offset(id_shift), id_angle, ctx, False),
        Domain("cartoon", offset(id_shift), -id_angle, ctx, False),
        Domain("outdoor", offset(ood_shift), ood_angle, ctx, True),
        Domain("water", offset(ood_shift), -ood_angle, ctx, True),
    )
    return SyntheticSpec(
        num_classes=num_classes,
        dims=dims,
        domains=domains,
        class_means=tuple(tuple(float(v) for v in mu) for mu in means),
        class_cov_scale=tuple([float(noise_scale)] * num_classes),
        signal_dims=signal_dims,
        nuisance_dims=nuisance_dims,
        nuisance_scale=float(nuisance_scale),
        off_manifold_scale=float(off_manifold_scale),
        basis_seed=seed,
        samples_per_class_per_domain=samples_per_class_per_domain,
        seed=seed,
    )


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    split: np.ndarray
    num_classes: int
    spec: SyntheticSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.x)
        if not (len(self.y) == len(self.domain) == len(self.split) == n):
            raise ValueError("x, y, domain and split must have equal length")

    def __len__(self):
        return len(self.x)

    @property
    def dims(self) -> int:
        return self.x.shape[1]

    def subset(self, mask_or_idx) -> "LabeledDataset":
        return LabeledDataset(self.x[mask_or_idx], self.y[mask_or_idx], self.domain[mask_or_idx],
                              self.split[mask_or_idx], self.num_classes, self.spec)

    def get_split(self, name: str) -> "LabeledDataset":
        return self.subset(self.split == SPLITS.index(name))

    def concat(self, x, y, domain=-1, split="train") -> "LabeledDataset":
        """Append extra labeled points (e.g. generated samples)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dims)
        n = len(x)
        return LabeledDataset(
            np.concatenate([self.x, x]),
            np.concatenate([self.y, np.asarray(y, dtype=np.int64)]),
            np.concatenate([self.domain, np.full(n, domain, dtype=np.int64)]),
            np.concatenate([self.split, np.full(n, SPLITS.index(split), dtype=np.int64)]),
            self.num_classes, self.spec)


def make_dataset(spec: SyntheticSpec) -> LabeledDataset:
    """Draw the full dataset; ID domains feed train/val/test_id, OOD domains test_ood."""
    rng = np.random.default_rng([spec.seed, 0x5A3])
    n = spec.samples_per_class_per_domain
    xs, ys, ds, ss = [], [], [], []
    f_train, f_val, _ = spec.split_fractions
    n_train = int(round(f_train * n))
    n_val = int(round(f_val * n))
    B = spec.basis
    for di, dom in enumerate(spec.domains):
        R = spec.rotation(di)
        for k in range(spec.num_classes):
            std = spec.axis_std(k)
            raw = spec.means[k] + (rng.normal(size=(n, spec.dims)) * std) @ B.T
            xs.append(raw @ R.T + np.asarray(dom.offset))
            ys.append(np.full(n, k))
            ds.append(np.full(n, di))
            if dom.ood:
                split = np.full(n, SPLITS.index("test_ood"))
            else:
                split = np.full(n, SPLITS.index("test_id"))
                split[:n_train] = SPLITS.index("train")
                split[n_train:n_train + n_val] = SPLITS.index("val")
            ss.append(split)
    x = np.concatenate(xs).astype(np.float32).astype(np.float64)
    return LabeledDataset(x, np.concatenate(ys).astype(np.int64), np.concatenate(ds).astype(np.int64),
                          np.concatenate(ss).astype(np.int64), spec.num_classes, spec)


class BayesOracle:
    """Argmax-posterior labeler under the known mixture, equal class priors.

    Within a class, the selected domains are weighted equally.
    """

    def __init__(self, spec: SyntheticSpec, scope="all"):
        self.spec = spec
        self.scope = scope
        self.domains = spec.domain_index(scope)
        if not self.domains:
            raise ValueError(f"scope {scope!r} selects no domains")
        self._comps = []
        for d in self.domains:
            row = []
            for k in range(spec.num_classes):
                mean, cov = spec.component(d, k)
                w, V = np.linalg.eigh(cov)
                row.append((mean, w, V))
            self._comps.append(row)

    def log_likelihoods(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        D = self.spec.dims
        out = np.empty((len(x), len(self.domains), self.spec.num_classes))
        for i, row in enumerate(self._comps):
            for k, (mean, w, V) in enumerate(row):
                proj = (x - mean) @ V
                # a tiny variance floor turns zero-noise components into the
                # nearest-mean limit instead of dividing by zero
                w = np.maximum(w, 1e-24)
                out[:, i, k] = -0.5 * ((proj ** 2) / w).sum(1) - 0.5 * (D * np.log(2 * np.pi) + np.log(w).sum())
        return logsumexp(out, axis=1) - np.log(len(self.domains))

    def predict(self, x) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. smallest-index tie-breaking
        return np.argmax(self.log_likelihoods(x), axis=1)


def bayes_oracle(spec: SyntheticSpec, scope="all") -> BayesOracle:
    return BayesOracle(spec, scope)


# -- persistence -------------------------------------------------------------

def save_dataset(ds: LabeledDataset, path) -> Path:
    """Single file: magic, u64 header length, JSON manifest, then LE data blocks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, dims = ds.x.shape
    blocks = [
        ds.x.astype("<f4").tobytes(),
        ds.y.astype("<i4").tobytes(),
        ds.domain.astype("<i4").tobytes(),
        ds.split.astype("<i4").tobytes(),
    ]
    manifest = {
        "version": DATASET_VERSION,
        "n": int(n),
        "dims": int(dims),
        "num_classes": int(ds.num_classes),
        "spec": ds.spec.to_dict() if ds.spec is not None else None,
        "spec_hash": ds.spec.hash() if ds.spec is not None else None,
        "split_sizes": {s: int((ds.split == i).sum()) for i, s in enumerate(SPLITS)},
        "block_bytes": [len(b) for b in blocks],
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(np.uint64(len(header)).astype("<u8").tobytes())
        fh.write(header)
        for b in blocks:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load_dataset(path, expected_spec_hash: str | None = None, strict: bool = False) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file or header truncated")
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    if len(raw) < 16 + hlen:
        raise DatasetFormatError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: corrupt manifest") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {manifest.get('version')}")
    if strict and expected_spec_hash is not None and manifest["spec_hash"] != expected_spec_hash:
        raise DatasetFormatError(
            f"{path}: spec hash {manifest['spec_hash']} != expected {expected_spec_hash}")
    sizes = manifest["block_bytes"]
    if len(raw) != 16 + hlen + sum(sizes):
        raise DatasetFormatError(f"{path}: data blocks truncated or padded")
    n, dims = manifest["n"], manifest["dims"]
    off = 16 + hlen
    arrays = []
    for size, dtype in zip(sizes, ("<f4", "<i4", "<i4", "<i4")):
        arrays.append(np.frombuffer(raw[off:off + size], dtype=dtype))
        off += size
    x = arrays[0].reshape(n, dims).astype(np.float64)
    spec = SyntheticSpec.from_dict(manifest["spec"]) if manifest["spec"] else None
    return LabeledDataset(x, arrays[1].astype(np.int64), arrays[2].astype(np.int64),
                          arrays[3].astype(np.int64), manifest["num_classes"], spec)
