"""Synthetic data: Gaussian latents pushed through a fixed random leaky-ReLU MLP.

The data-generating function has ``n`` inputs, two hidden layers of width ``k``
and a linear read-out to ``d`` dimensions. Its weights are a pure function of
``GeneratorSpec.seed``; latent draws additionally depend on a stream seed, so a
dataset is fully reproducible from ``(spec, count, stream_seed)``.
"""

from __future__ import annotations

import dataclasses
import datetime
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from maskaae.errors import InvalidArgumentError, IntegrityError, ShapeError

MAGIC = b"MAAE-DS1"
_WEIGHT_STREAM = 0
_LATENT_STREAM = 1


@dataclass(frozen=True)
class GeneratorSpec:
    n: int
    k: int = 128
    d: int = 128
    num_hidden_layers: int = 2
    leaky_slope: float = 0.2
    weight_scale: float | None = None  # None -> 1/sqrt(fan_in) per layer
    cov_diag: tuple[float, ...] | None = None  # None -> identity
    seed: int = 0

    def __post_init__(self):
        if self.cov_diag is not None:
            object.__setattr__(self, "cov_diag", tuple(float(c) for c in self.cov_diag))
        self.validate()

    def validate(self):
        if self.n < 1 or self.k < 1 or self.d < 1:
            raise InvalidArgumentError(f"n, k, d must be >= 1, got {self.n}, {self.k}, {self.d}")
        if self.d < self.n:
            raise InvalidArgumentError(f"require d >= n, got d={self.d} < n={self.n}")
        if self.num_hidden_layers != 2:
            raise InvalidArgumentError("num_hidden_layers is fixed at 2")
        if not 0.0 < self.leaky_slope < 1.0:
            raise InvalidArgumentError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if self.weight_scale is not None and self.weight_scale <= 0:
            raise InvalidArgumentError("weight_scale must be positive")
        if self.cov_diag is not None:
            if len(self.cov_diag) != self.n:
                raise InvalidArgumentError(f"cov_diag needs {self.n} entries, got {len(self.cov_diag)}")
            if any(not c > 0 for c in self.cov_diag):
                raise InvalidArgumentError("cov_diag entries must be > 0")

    @property
    def variances(self) -> np.ndarray:
        if self.cov_diag is None:
            return np.ones(self.n)
        return np.asarray(self.cov_diag, dtype=np.float64)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["cov_diag"] is not None:
            d["cov_diag"] = list(d["cov_diag"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Dataset:
    samples: np.ndarray
    spec_fingerprint: str
    count: int = field(default=-1)
    spec: GeneratorSpec | None = None

    def __post_init__(self):
        if self.count < 0:
            self.count = int(self.samples.shape[0])
        if self.samples.ndim != 2 or self.samples.shape[0] != self.count:
            raise ShapeError(f"samples shape {self.samples.shape} does not match count {self.count}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgumentError("dataset contains NaN/Inf")

    @property
    def d(self) -> int:
        return int(self.samples.shape[1])


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *stream]))


def _layer_dims(spec: GeneratorSpec) -> list[tuple[int, int]]:
    return [(spec.n, spec.k), (spec.k, spec.k), (spec.k, spec.d)]


@lru_cache(maxsize=32)
def _weights_cached(spec: GeneratorSpec):
    rng = _rng(spec.seed, _WEIGHT_STREAM)
    weights = []
    for fan_in, fan_out in _layer_dims(spec):
        scale = spec.weight_scale if spec.weight_scale is not None else 1.0 / np.sqrt(fan_in)
        W = rng.standard_normal((fan_out, fan_in)) * scale
        W.setflags(write=False)
        weights.append(W)
    return tuple(weights)


def generator_weights(spec: GeneratorSpec) -> list[np.ndarray]:
    """Weight matrices (out x in) of the data-generating MLP; biases are zero."""
    return list(_weights_cached(spec))


def sample_true_latent(spec: GeneratorSpec, count: int, stream_seed: int = 0) -> np.ndarray:
    if count < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    rng = _rng(spec.seed, _LATENT_STREAM, stream_seed)
    return rng.standard_normal((count, spec.n)) * np.sqrt(spec.variances)


def _leaky_relu(h, slope):
    return np.where(h > 0, h, slope * h)


def generating_function(spec: GeneratorSpec, latents: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != spec.n:
        raise ShapeError(f"latents must have shape (count, {spec.n}), got {latents.shape}")
    W1, W2, W3 = generator_weights(spec)
    h = _leaky_relu(latents @ W1.T, spec.leaky_slope)
    h = _leaky_relu(h @ W2.T, spec.leaky_slope)
    return h @ W3.T


def operator_norm_bound(weights, leaky_slope: float = 0.2) -> float:
    """Product of spectral norms; leaky-ReLU is max(1, slope)-Lipschitz."""
    act = max(1.0, leaky_slope)
    bound = 1.0
    for i, W in enumerate(weights):
        bound *= float(np.linalg.norm(np.asarray(W, dtype=np.float64), ord=2))
        if i < len(weights) - 1:
            bound *= act
    return bound


def lipschitz_upper_bound(spec: GeneratorSpec) -> float:
    return operator_norm_bound(generator_weights(spec), spec.leaky_slope)


def write_dataset(path, samples: np.ndarray, spec: GeneratorSpec | None, source: str | None = None) -> None:
    samples = np.ascontiguousarray(samples, dtype="<f4")
    header = {
        "spec": spec.to_dict() if spec is not None else None,
        "source": source,
        "count": int(samples.shape[0]),
        "d": int(samples.shape[1]),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(samples.tobytes(order="C"))
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise IntegrityError(f"{path}: bad magic bytes")
    if len(raw) < 12:
        raise IntegrityError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    count, d = header["count"], header["d"]
    payload = raw[12 + hlen:]
    if len(payload) != count * d * 4:
        raise IntegrityError(f"{path}: payload has {len(payload)} bytes, expected {count * d * 4}")
    samples = np.frombuffer(payload, dtype="<f4").reshape(count, d).astype(np.float32)
    if header.get("spec") is not None:
        spec = GeneratorSpec.from_dict(header["spec"])
        fp = spec.fingerprint()
    else:
        spec = None
        fp = f"external:{header.get('source')}"
    return Dataset(samples=samples, spec_fingerprint=fp, count=count, spec=spec)


def make_dataset(spec: GeneratorSpec, count: int, path=None, stream_seed: int = 0) -> Dataset:
    if not isinstance(spec, GeneratorSpec):
        raise InvalidArgumentError("spec must be a GeneratorSpec")
    spec.validate()
    if count < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    x = generating_function(spec, sample_true_latent(spec, count, stream_seed)).astype(np.float32)
    if path is not None:
        write_dataset(path, x, spec)
    return Dataset(samples=x, spec_fingerprint=spec.fingerprint(), count=count, spec=spec)


def intrinsic_dimension_twonn(x, discard_fraction: float = 0.1) -> float:
    """TwoNN maximum-likelihood estimate from 2nd/1st nearest-neighbour distance ratios."""
    from scipy.spatial import cKDTree

    x = np.unique(np.asarray(x, dtype=np.float64), axis=0)
    dist, _ = cKDTree(x).query(x, k=3)
    ratio = np.sort(dist[:, 2] / dist[:, 1])
    keep = ratio[: int(len(ratio) * (1.0 - discard_fraction))]
    # maximum likelihood for a Pareto tail truncated at the discarded upper fraction
    n_keep = len(keep)
    log_r = np.log(keep)
    return float(n_keep / (log_r.sum() + (len(ratio) - n_keep) * np.log(ratio[n_keep])))
