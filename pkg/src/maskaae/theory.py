"""Numerical checks of the latent-dimensionality theory.

Covers the grid covering of the unit cube by balls, the resulting volume bound
on the image of a Lipschitz map, a Monte-Carlo estimate of that image volume,
a kNN cross-entropy proxy that grows when the encoded support is thinner than
the prior, and the reconstruction residual.
"""

from __future__ import annotations

import itertools
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from maskaae.errors import InvalidArgumentError, NumericError, RangeError


@dataclass(frozen=True)
class CoveringSpec:
    alpha: int
    beta: int
    L: float
    epsilon: int

    def __post_init__(self):
        if self.alpha < 1 or self.beta < 1:
            raise InvalidArgumentError("alpha and beta must be >= 1")
        if self.L < 0:
            raise InvalidArgumentError("L must be >= 0")
        if self.epsilon < 1 or int(self.epsilon) != self.epsilon:
            raise InvalidArgumentError("epsilon must be a positive integer")


def lemma1_constant(spec: CoveringSpec) -> float:
    """c = L^beta (alpha pi)^(beta/2) / Gamma(beta/2 + 1)."""
    if spec.L == 0:
        return 0.0
    b = spec.beta
    log_c = b * math.log(spec.L) + 0.5 * b * math.log(spec.alpha * math.pi) - math.lgamma(b / 2 + 1)
    if log_c > 709.0:
        raise RangeError(f"covering constant overflows float64 (log c = {log_c:.1f})")
    return math.exp(log_c)


def lemma1_volume_bound(spec: CoveringSpec) -> float:
    """Upper bound c / epsilon^(beta - alpha) on the image volume."""
    return lemma1_constant(spec) / float(spec.epsilon) ** (spec.beta - spec.alpha)


def ball_volume(dim: int, radius: float) -> float:
    if radius == 0:
        return 0.0
    return math.exp(0.5 * dim * math.log(math.pi) - gammaln(dim / 2 + 1) + dim * math.log(radius))


def grid_centers(alpha: int, epsilon: int) -> np.ndarray:
    ticks = (np.arange(epsilon) + 0.5) / epsilon
    return np.array(list(itertools.product(ticks, repeat=alpha)), dtype=np.float64)


def nearest_center(points, epsilon: int) -> np.ndarray:
    """Nearest grid center by coordinate-wise rounding (exact, no search)."""
    idx = np.clip(np.floor(points * epsilon), 0, epsilon - 1)
    return (idx + 0.5) / epsilon


def covering_completeness(alpha: int, epsilon: int, probes: int = 100_000, seed: int = 0,
                          points=None) -> float:
    """Max distance from probe points in [0,1]^alpha to their nearest grid center."""
    if points is None:
        if probes < 1:
            raise InvalidArgumentError("probes must be >= 1")
        points = np.random.default_rng(seed).random((probes, alpha))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != alpha:
        raise InvalidArgumentError(f"points must have {alpha} columns")
    dist = np.linalg.norm(points - nearest_center(points, epsilon), axis=1).max()
    radius = math.sqrt(alpha) / (2 * epsilon)
    if dist > radius + 1e-12:
        raise AssertionError(f"covering violated: {dist} > {radius}")
    return float(dist)


def image_volume_estimate(fn, alpha: int, epsilon: int, samples_per_cell: int = 16, seed: int = 0,
                          return_lipschitz: bool = False):
    """Overlap-ignoring upper bound on the volume of the image of fn: [0,1]^alpha -> R^beta.

    Grid centers are pushed through ``fn``; each image center gets a ball of
    radius L_emp * sqrt(alpha) / (2 epsilon), where L_emp is the largest
    observed ratio |fn(p) - fn(c)| / |p - c| over points sampled in each cell.
    Coincident image centers count once.
    """
    if samples_per_cell < 1:
        raise InvalidArgumentError("samples_per_cell must be >= 1")
    centers = grid_centers(alpha, epsilon)
    img_c = np.asarray(fn(centers), dtype=np.float64)
    if img_c.ndim == 1:
        img_c = img_c[:, None]
    rng = np.random.default_rng(seed)
    offsets = (rng.random((len(centers), samples_per_cell, alpha)) - 0.5) / epsilon
    probes = (centers[:, None, :] + offsets).reshape(-1, alpha)
    img_p = np.asarray(fn(probes), dtype=np.float64).reshape(len(centers), samples_per_cell, -1)
    if not (np.all(np.isfinite(img_c)) and np.all(np.isfinite(img_p))):
        raise NumericError("map produced non-finite output")
    num = np.linalg.norm(img_p - img_c[:, None, :], axis=2)
    den = np.linalg.norm(offsets, axis=2)
    ok = den > 0
    l_emp = float((num[ok] / den[ok]).max()) if ok.any() else 0.0
    beta = img_c.shape[1]
    unique = np.unique(img_c, axis=0)
    est = len(unique) * ball_volume(beta, l_emp * math.sqrt(alpha) / (2 * epsilon))
    return (est, l_emp) if return_lipschitz else est


def estimate_cross_entropy_proxy(prior_samples, encoded_samples, k: int = 5) -> float:
    """kNN estimate of H(prior, encoded) = -E_prior[log psi], psi from encoded samples.

    H ~= log M + log V_m - digamma(k) + (m/N) sum_i log nu_k(i), with nu_k(i) the
    distance from prior point i to its k-th nearest encoded sample.
    """
    p = np.asarray(prior_samples, dtype=np.float64)
    q = np.asarray(encoded_samples, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != q.shape[1]:
        raise InvalidArgumentError("prior and encoded samples must be (N, m) matrices of equal m")
    M, m = q.shape
    if k < 1 or k >= M:
        raise InvalidArgumentError(f"need 1 <= k < number of encoded samples, got k={k}, N={M}")
    dist, _ = cKDTree(q).query(p, k=k)
    nu = dist if k == 1 else dist[:, -1]
    if np.any(nu <= 0):
        warnings.warn("zero kNN distance (duplicate points); adding 1e-12 jitter", RuntimeWarning)
        nu = nu + 1e-12
    log_vm = 0.5 * m * math.log(math.pi) - gammaln(m / 2 + 1)
    return float(math.log(M) + log_vm - digamma(k) + m * np.mean(np.log(nu)))


def gaussian_entropy(m: int, var: float = 1.0) -> float:
    return 0.5 * m * math.log(2 * math.pi * math.e * var)


def subspace_cross_entropy(n: int, m: int, count: int = 5000, k: int = 5, seed: int = 0) -> float:
    """CE proxy between N(0, I_m) and a standard Gaussian confined to the first n coordinates."""
    if n > m:
        raise InvalidArgumentError("support dimension n must not exceed ambient m")
    rng = np.random.default_rng([seed, n, m])
    prior = rng.standard_normal((count, m))
    enc = np.zeros((count, m))
    enc[:, :n] = rng.standard_normal((count, n))
    return estimate_cross_entropy_proxy(prior, enc, k)


def cross_entropy_growth(n: int = 4, m_values=(4, 8, 16), repeats: int = 10, count: int = 5000,
                         k: int = 5, seed: int = 0) -> dict[int, np.ndarray]:
    return {m: np.array([subspace_cross_entropy(n, m, count, k, seed + r) for r in range(repeats)])
            for m in m_values}


@torch.no_grad()
def r1_residual(bundle, x, batch_size: int = 4096) -> float:
    """Mean Euclidean reconstruction error ||x - D(mu * E(x))|| over ``x``."""
    x = torch.as_tensor(np.asarray(x))
    mu = bundle.mu()
    x = x.to(mu.dtype)
    total = 0.0
    for start in range(0, x.shape[0], batch_size):
        xb = x[start:start + batch_size]
        total += torch.linalg.vector_norm(xb - bundle.decoder(mu * bundle.encoder(xb)), dim=1).sum().item()
    return total / x.shape[0]


def theory_report(seed: int = 0, probes: int = 100_000) -> dict:
    """Run the covering-bound and cross-entropy checks; returns a JSON-ready report."""
    checks = []

    def add(name, passed, **values):
        checks.append({"name": name, "passed": bool(passed), **values})

    t0 = time.perf_counter()
    spec = CoveringSpec(alpha=1, beta=2, L=1.0, epsilon=10)
    c, bound = lemma1_constant(spec), lemma1_volume_bound(spec)
    add("lemma_constant_pi", abs(c - math.pi) <= 1e-12, value=c, expected=math.pi)
    add("volume_bound_pi_over_10", abs(bound - math.pi / 10) <= 1e-12, value=bound, expected=math.pi / 10)
    c11 = lemma1_constant(CoveringSpec(1, 1, 1.0, 1))
    add("lemma_constant_beta1", abs(c11 - 2.0) <= 1e-12, value=c11, expected=2.0)

    for alpha in (1, 2, 3):
        for eps in (2, 4, 8):
            r = math.sqrt(alpha) / (2 * eps)
            d = covering_completeness(alpha, eps, probes, seed + 31 * alpha + eps)
            add(f"covering_alpha{alpha}_eps{eps}", d <= r, max_distance=d, radius=r)

    line = lambda u: np.concatenate([u, np.zeros_like(u)], axis=1)
    vols = [image_volume_estimate(line, 1, e, seed=seed) for e in (4, 8, 16)]
    bounds = [lemma1_volume_bound(CoveringSpec(1, 2, 1.0, e)) for e in (4, 8, 16)]
    add("image_volume_line_in_plane",
        all(v <= b for v, b in zip(vols, bounds)) and vols[0] > vols[1] > vols[2],
        estimates=vols, bounds=bounds)

    growth = cross_entropy_growth(seed=seed)
    med = {m: float(np.median(v)) for m, v in growth.items()}
    ms = sorted(med)
    increasing = all(med[a] < med[b] for a, b in zip(ms, ms[1:]))
    add("cross_entropy_growth", increasing and med[ms[-1]] - med[ms[0]] >= 2.0,
        medians={str(k): v for k, v in med.items()}, gap=med[ms[-1]] - med[ms[0]])

    return {"checks": checks, "all_passed": all(c["passed"] for c in checks),
            "seconds": time.perf_counter() - t0}
