"""MLP encoder / decoder / critic and the trainable latent mask."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from maskaae.errors import InvalidArgumentError, ShapeError

VARIANTS = ("maskaae", "wae_baseline")


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise InvalidArgumentError(f"all MLP dims must be >= 1: {self}")
        if self.hidden_activation not in ("relu", "leaky_relu"):
            raise InvalidArgumentError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("linear", "sigmoid"):
            raise InvalidArgumentError(f"unknown output activation {self.output_activation!r}")

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


class MLP(nn.Module):
    def __init__(self, config: MlpConfig):
        super().__init__()
        self.config = config
        dims = [config.input_dim, *config.hidden_widths, config.output_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(f"expected input (batch, {self.config.input_dim}), got {tuple(x.shape)}")
        act = nn.functional.relu if self.config.hidden_activation == "relu" else nn.functional.leaky_relu
        for layer in self.layers[:-1]:
            x = act(layer(x))
        x = self.layers[-1](x)
        if self.config.output_activation == "sigmoid":
            x = torch.sigmoid(x)
        return x


def mask_values(theta: torch.Tensor) -> torch.Tensor:
    """b(theta) = max(0, 1 - exp(-theta)).

    relu has derivative 0 at the origin, which gives the flat-side sub-gradient
    at theta == 0, and keeps exp() finite for very negative theta.
    """
    return 1.0 - torch.exp(-torch.relu(theta))


class MaskState(nn.Module):
    def __init__(self, theta: torch.Tensor, frozen: bool = False):
        super().__init__()
        self.theta = nn.Parameter(theta.clone(), requires_grad=not frozen)
        self.frozen = frozen

    @property
    def m(self) -> int:
        return int(self.theta.shape[0])

    def forward(self) -> torch.Tensor:
        return mask_values(self.theta)


def mask_init(m: int, a: float = 3.0, seed: int = 0, dtype=torch.float32) -> MaskState:
    if m < 1:
        raise InvalidArgumentError(f"mask size must be >= 1, got {m}")
    if not a > 0:
        raise InvalidArgumentError(f"mask init bound a must be > 0, got {a}")
    g = torch.Generator().manual_seed(seed)
    theta = torch.rand(m, generator=g, dtype=torch.float64) * a
    return MaskState(theta.to(dtype))


def frozen_mask(m: int, dtype=torch.float32) -> MaskState:
    """All-ones mask for the WAE baseline: theta = +inf so b(theta) == 1 exactly."""
    return MaskState(torch.full((m,), float("inf"), dtype=dtype), frozen=True)


def mask_forward(state: MaskState) -> torch.Tensor:
    return state()


@dataclass
class BundleConfig:
    data_dim: int
    latent_dim: int
    hidden_widths: tuple[int, ...] = (256, 256, 256)
    hidden_activation: str = "relu"
    decoder_output: str = "linear"
    variant: str = "maskaae"
    mask_init_a: float = 3.0
    round_mask_at_inference: bool = False

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.latent_dim < 1 or self.data_dim < 1:
            raise InvalidArgumentError("data_dim and latent_dim must be >= 1")

    def encoder_config(self):
        return MlpConfig(self.data_dim, self.hidden_widths, self.latent_dim, self.hidden_activation)

    def decoder_config(self):
        return MlpConfig(self.latent_dim, self.hidden_widths, self.data_dim, self.hidden_activation,
                         self.decoder_output)

    def discriminator_config(self):
        return MlpConfig(self.latent_dim, self.hidden_widths, 1, self.hidden_activation)

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


class ModelBundle(nn.Module):
    """Encoder, decoder, critic and mask sharing one latent width ``m``."""

    def __init__(self, encoder: MLP, decoder: MLP, discriminator: MLP, mask: MaskState,
                 variant: str = "maskaae", round_mask_at_inference: bool = False):
        super().__init__()
        m = mask.m
        if not (encoder.config.output_dim == decoder.config.input_dim
                == discriminator.config.input_dim == m):
            raise ShapeError("encoder output, decoder input, critic input and mask size must agree")
        if discriminator.config.output_dim != 1:
            raise ShapeError("critic must have a scalar output")
        if variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown variant {variant!r}")
        if variant == "wae_baseline" and not mask.frozen:
            raise InvalidArgumentError("wae_baseline requires a frozen all-ones mask")
        self.encoder = encoder
        self.decoder = decoder
        self.discriminator = discriminator
        self.mask = mask
        self.variant = variant
        self.round_mask_at_inference = round_mask_at_inference

    @property
    def m(self) -> int:
        return self.mask.m

    @property
    def d(self) -> int:
        return self.encoder.config.input_dim

    def mu(self) -> torch.Tensor:
        return self.mask()

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
            "discriminator": list(self.discriminator.parameters()),
        }
        if not self.mask.frozen:
            groups["mask"] = [self.mask.theta]
        return groups

    def generate(self, z_prior: torch.Tensor) -> torch.Tensor:
        mu = self.mu()
        if self.round_mask_at_inference:
            mu = (mu > 0.5).to(mu.dtype)
        return self.decoder(mu * z_prior)


def build_bundle(config: BundleConfig, seed: int = 0, dtype=torch.float32) -> ModelBundle:
    g_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        enc = MLP(config.encoder_config())
        dec = MLP(config.decoder_config())
        disc = MLP(config.discriminator_config())
    finally:
        torch.random.set_rng_state(g_state)
    if config.variant == "maskaae":
        mask = mask_init(config.latent_dim, config.mask_init_a, seed=seed + 7919, dtype=dtype)
    else:
        mask = frozen_mask(config.latent_dim, dtype=dtype)
    bundle = ModelBundle(enc, dec, disc, mask, config.variant, config.round_mask_at_inference)
    return bundle.to(dtype)


def encode(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    return bundle.encoder(x)


def decode(bundle: ModelBundle, z_masked: torch.Tensor) -> torch.Tensor:
    return bundle.decoder(z_masked)


def discriminate(bundle: ModelBundle, z_masked: torch.Tensor) -> torch.Tensor:
    return bundle.discriminator(z_masked).squeeze(-1)


def active_dimensions(mu, tau: float = 0.5) -> int:
    if not 0.0 < tau < 1.0:
        raise InvalidArgumentError(f"tau must lie in (0, 1), got {tau}")
    mu = torch.as_tensor(mu)
    return int((mu > tau).sum().item())
