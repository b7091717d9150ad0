"""Training objectives: auto-encoder, generator, distribution matching and mask losses.

Every function returns a scalar tensor with the full autograd graph attached.
Which parameter group a loss is allowed to update is decided by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch

from maskaae.errors import InvalidArgumentError, ShapeError
from maskaae.networks import ModelBundle, decode, discriminate, encode


@dataclass
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 100.0
    gamma: float = 10.0
    beta2: float = 10.0
    lambda1: float = 1000.0
    lambda2: float = 1.0
    lambda3: float | None = None  # None -> 2/m at training start
    squared_recon: bool = False
    mask_gap_center: float = -1.0

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "gamma", "beta2", "lambda1", "lambda2"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lambda3 is not None and not self.lambda3 > 0:
            raise InvalidArgumentError(f"lambda3 must be > 0, got {self.lambda3}")
        if self.mask_gap_center not in (-1.0, 0.0):
            raise InvalidArgumentError("mask_gap_center must be -1 or 0")

    def to_dict(self):
        return asdict(self)


def _check_x(x, bundle):
    if x.ndim != 2 or x.shape[1] != bundle.d:
        raise ShapeError(f"x must have shape (s, {bundle.d}), got {tuple(x.shape)}")


def _check_z(z, bundle, s):
    if z.ndim != 2 or z.shape[1] != bundle.m or z.shape[0] != s:
        raise ShapeError(f"z_prior must have shape ({s}, {bundle.m}), got {tuple(z.shape)}")


def _safe_norm(sq):
    # sqrt with derivative 0 (not inf) at an exact zero
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def reconstruction_term(x, bundle: ModelBundle, mu=None, squared=False, z_hat=None):
    """Mean over the batch of ||x - D(mu * E(x))|| (Euclidean, unsquared by default)."""
    if mu is None:
        mu = bundle.mu()
    if z_hat is None:
        z_hat = encode(bundle, x)
    resid = x - decode(bundle, mu * z_hat)
    sq = (resid * resid).sum(dim=1)
    if squared:
        return sq.mean()
    return _safe_norm(sq).mean()


def masked_variance_penalty(z_hat, mu, gamma):
    """delta^T diag(A) with delta_j = exp(-gamma * mu_j), A the batch covariance."""
    var = z_hat.var(dim=0, unbiased=True)
    return (torch.exp(-gamma * mu) * var).sum()


def loss_ae(x, bundle: ModelBundle, weights: LossWeights):
    _check_x(x, bundle)
    if x.shape[0] < 2:
        raise InvalidArgumentError("loss_ae needs a batch of at least 2 samples")
    mu = bundle.mu()
    z_hat = encode(bundle, x)
    recon = reconstruction_term(x, bundle, mu, weights.squared_recon, z_hat=z_hat)
    return weights.alpha1 * recon + weights.alpha2 * masked_variance_penalty(z_hat, mu, weights.gamma)


def loss_gen(x, bundle: ModelBundle):
    _check_x(x, bundle)
    return -discriminate(bundle, bundle.mu() * encode(bundle, x)).mean()


def wasserstein_gap(x, z_prior, bundle: ModelBundle):
    """Critic mean on masked prior samples minus critic mean on masked encodings."""
    _check_x(x, bundle)
    _check_z(z_prior, bundle, x.shape[0])
    mu = bundle.mu()
    return (discriminate(bundle, mu * z_prior).mean()
            - discriminate(bundle, mu * encode(bundle, x)).mean())


def gradient_penalty(bundle: ModelBundle, z_prior, z_hat, beta1, mu=None):
    """Mean of (||grad_{z_avg} H(mu * z_avg)|| - 1)^2 on per-sample interpolates."""
    if mu is None:
        mu = bundle.mu()
    beta1 = beta1.reshape(-1, 1).to(z_prior.dtype)
    z_avg = beta1 * z_prior + (1.0 - beta1) * z_hat
    if not z_avg.requires_grad:
        z_avg = z_avg.detach().requires_grad_(True)
    out = discriminate(bundle, mu * z_avg)
    (grad,) = torch.autograd.grad(out.sum(), z_avg, create_graph=True)
    norms = _safe_norm((grad * grad).sum(dim=1))
    return ((norms - 1.0) ** 2).mean()


def loss_dm(x, z_prior, bundle: ModelBundle, weights: LossWeights, beta1=None, generator=None):
    _check_x(x, bundle)
    s = x.shape[0]
    _check_z(z_prior, bundle, s)
    if beta1 is None:
        beta1 = torch.rand(s, generator=generator, dtype=z_prior.dtype)
    mu = bundle.mu()
    z_hat = encode(bundle, x)
    critic_gap = (-discriminate(bundle, mu * z_prior).mean()
                  + discriminate(bundle, mu * z_hat).mean())
    return critic_gap + weights.beta2 * gradient_penalty(bundle, z_prior, z_hat, beta1, mu)


def mask_polarization(mu):
    """sum_j |mu_j (mu_j - 1)|; zero iff mu is binary."""
    return (mu * (mu - 1.0)).abs().sum()


def loss_mask(x, z_prior, bundle: ModelBundle, weights: LossWeights, lambda3=None):
    _check_x(x, bundle)
    _check_z(z_prior, bundle, x.shape[0])
    lam3 = lambda3 if lambda3 is not None else weights.lambda3
    if lam3 is None:
        lam3 = 2.0 / bundle.m
    mu = bundle.mu()
    z_hat = encode(bundle, x)
    recon = reconstruction_term(x, bundle, mu, weights.squared_recon, z_hat=z_hat)
    omega = (discriminate(bundle, mu * z_prior).mean()
             - discriminate(bundle, mu * z_hat).mean())
    gap = (omega - weights.mask_gap_center) ** 2
    return weights.lambda1 * recon + weights.lambda2 * gap + lam3 * mask_polarization(mu)
