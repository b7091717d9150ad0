"""Evaluation quantities: Frechet distance, NAC, active-dimension count and loss snapshots."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from maskaae import losses
from maskaae.errors import DegenerateError, InvalidArgumentError, StateError
from maskaae.networks import active_dimensions

EXTRACTORS = ("identity", "pca_w")


@dataclass
class MetricsRecord:
    step: int
    frechet: float
    nac: float | None
    m_A: int
    loss_ae: float
    loss_dm: float
    loss_gen: float
    loss_mask: float
    omega: float
    mu: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), allow_nan=False, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


def _sqrtm_trace(sigma1, sigma2):
    """Tr((sigma1 sigma2)^{1/2}) via the symmetric form sqrt(s1) s2 sqrt(s1)."""
    w1, v1 = np.linalg.eigh((sigma1 + sigma1.T) / 2)
    root1 = (v1 * np.sqrt(np.clip(w1, 0, None))) @ v1.T
    inner = root1 @ sigma2 @ root1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    sigma1, sigma2 = np.atleast_2d(np.asarray(sigma1, float)), np.atleast_2d(np.asarray(sigma2, float))
    for a in (mu1, mu2, sigma1, sigma2):
        if not np.all(np.isfinite(a)):
            raise InvalidArgumentError("Frechet moments must be finite")
    diff = mu1 - mu2
    # average both orderings so the result is symmetric to rounding
    tr = 0.5 * (_sqrtm_trace(sigma1, sigma2) + _sqrtm_trace(sigma2, sigma1))
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr)


def gaussian_moments(feats):
    feats = np.asarray(feats, dtype=np.float64)
    return feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False))


def frechet_distance(real_feats, gen_feats) -> float:
    real_feats = np.asarray(real_feats, dtype=np.float64)
    gen_feats = np.asarray(gen_feats, dtype=np.float64)
    if real_feats.ndim == 1:
        real_feats = real_feats[:, None]
    if gen_feats.ndim == 1:
        gen_feats = gen_feats[:, None]
    if not (np.all(np.isfinite(real_feats)) and np.all(np.isfinite(gen_feats))):
        raise InvalidArgumentError("Frechet features must be finite")
    p = real_feats.shape[1]
    if gen_feats.shape[1] != p:
        raise InvalidArgumentError("feature dimensions differ")
    if min(len(real_feats), len(gen_feats)) < p + 1:
        warnings.warn(f"fewer than p+1={p + 1} samples; covariance is singular", RuntimeWarning)
    return frechet_from_moments(*gaussian_moments(real_feats), *gaussian_moments(gen_feats))


class PCAWhitening:
    """Projection onto the top-p principal components of the fitting data, scaled to unit variance."""

    def __init__(self, p: int):
        if p < 1:
            raise InvalidArgumentError("p must be >= 1")
        self.p = p
        self.mean_ = None
        self.components_ = None

    def fit(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.p > x.shape[1]:
            raise InvalidArgumentError(f"p={self.p} exceeds data dimension {x.shape[1]}")
        self.mean_ = x.mean(axis=0)
        w, v = np.linalg.eigh(np.cov(x, rowvar=False))
        order = np.argsort(w)[::-1][: self.p]
        scale = np.sqrt(np.clip(w[order], 1e-12, None))
        self.components_ = v[:, order] / scale
        return self

    @property
    def fitted(self) -> bool:
        return self.components_ is not None

    def transform(self, x):
        if not self.fitted:
            raise StateError("PCA whitening transform has not been fitted")
        return (np.asarray(x, dtype=np.float64) - self.mean_) @ self.components_


def feature_extract(x, extractor: str = "identity", transform: PCAWhitening | None = None):
    if extractor == "identity":
        return x
    if extractor == "pca_w":
        if transform is None or not transform.fitted:
            raise StateError("pca_w extractor needs a fitted PCAWhitening transform")
        if transform.p > np.shape(x)[1]:
            raise InvalidArgumentError("p > d")
        return transform.transform(x)
    raise InvalidArgumentError(f"unknown extractor {extractor!r}")


def nac(encodings, active_index_set=None) -> float:
    """Average off-diagonal entry of the min-max normalised absolute scatter matrix."""
    z = np.asarray(encodings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise InvalidArgumentError("nac needs a (b >= 2, m) encoding matrix")
    m = z.shape[1]
    active = sorted(range(m) if active_index_set is None else set(int(j) for j in active_index_set))
    if not active:
        raise InvalidArgumentError("active index set must be nonempty")
    if active[0] < 0 or active[-1] >= m:
        raise InvalidArgumentError("active index out of range")
    zc = z - z.mean(axis=0)
    scatter = np.abs(zc.T @ zc)
    lo, hi = scatter.min(), scatter.max()
    if not hi > lo:
        raise DegenerateError("scatter matrix is constant; NAC undefined")
    if len(active) == 1:
        return 0.0
    sub = ((scatter - lo) / (hi - lo))[np.ix_(active, active)]
    k = len(active)
    return float((sub.sum() - np.trace(sub)) / (k * (k - 1)))


@dataclass
class EvalConfig:
    eval_count: int = 5000
    nac_batch: int = 5000
    loss_batch: int = 256
    tau: float = 0.5
    extractor: str = "identity"
    pca_dim: int = 64

    def to_dict(self):
        return asdict(self)


def eval_generator(seed: int, step: int) -> torch.Generator:
    ss = np.random.SeedSequence([seed & (2**63 - 1), 0xE7A1, step])
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


def _finite_or_none(v):
    return v if v is not None and math.isfinite(v) else None


def evaluate(bundle, dataset, config: EvalConfig, weights: losses.LossWeights, step: int, seed: int,
             lambda3: float | None = None, transform: PCAWhitening | None = None) -> MetricsRecord:
    """Snapshot metrics on fixed-size batches drawn from a step-keyed RNG stream."""
    g = eval_generator(seed, step)
    X = torch.as_tensor(dataset.samples)
    dtype = next(bundle.parameters()).dtype
    N = X.shape[0]

    def rows(count):
        if count <= N:
            idx = torch.randperm(N, generator=g)[:count]
        else:
            idx = torch.randint(N, (count,), generator=g)
        return X[idx].to(dtype)

    with torch.no_grad():
        real = rows(config.eval_count)
        z = torch.randn(config.eval_count, bundle.m, generator=g, dtype=dtype)
        fake = bundle.generate(z)
        fr = frechet_distance(feature_extract(real.double().numpy(), config.extractor, transform),
                              feature_extract(fake.double().numpy(), config.extractor, transform))
        mu = bundle.mu()
        m_a = active_dimensions(mu, config.tau) if bundle.variant == "maskaae" else bundle.m
        enc = bundle.encoder(rows(min(config.nac_batch, N))).double().numpy()
        active = [j for j in range(bundle.m) if mu[j] > config.tau] if bundle.variant == "maskaae" \
            else list(range(bundle.m))
        try:
            nac_val = nac(enc, active) if active else None
        except DegenerateError:
            nac_val = None

    xb = rows(config.loss_batch)
    zb = torch.randn(config.loss_batch, bundle.m, generator=g, dtype=dtype)
    beta1 = torch.rand(config.loss_batch, generator=g, dtype=dtype)
    l_dm = losses.loss_dm(xb, zb, bundle, weights, beta1=beta1).item()
    with torch.no_grad():
        l_ae = losses.loss_ae(xb, bundle, weights).item()
        l_gen = losses.loss_gen(xb, bundle).item()
        l_mask = losses.loss_mask(xb, zb, bundle, weights, lambda3=lambda3).item()
        omega = losses.wasserstein_gap(xb, zb, bundle).item()

    return MetricsRecord(
        step=int(step), frechet=float(fr), nac=_finite_or_none(nac_val), m_A=int(m_a),
        loss_ae=l_ae, loss_dm=l_dm, loss_gen=l_gen, loss_mask=l_mask, omega=omega,
        mu=[float(v) for v in mu.double().tolist()],
    )
