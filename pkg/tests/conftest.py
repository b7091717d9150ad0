import numpy as np
import pytest
import torch

from maskaae.networks import MLP, MaskState, MlpConfig, ModelBundle, frozen_mask


def linear_mlp(weight, bias=None):
    """Single Linear layer MLP with hand-set weight (out x in) and bias, float64."""
    weight = torch.as_tensor(np.atleast_2d(weight), dtype=torch.float64)
    out_dim, in_dim = weight.shape
    net = MLP(MlpConfig(in_dim, (), out_dim)).double()
    with torch.no_grad():
        net.layers[0].weight.copy_(weight)
        net.layers[0].bias.copy_(torch.zeros(out_dim, dtype=torch.float64) if bias is None
                                 else torch.as_tensor(bias, dtype=torch.float64))
    return net


def hand_bundle(enc_w, dec_w, disc_w, enc_b=None, dec_b=None, disc_b=None, theta=None):
    enc, dec, disc = linear_mlp(enc_w, enc_b), linear_mlp(dec_w, dec_b), linear_mlp(disc_w, disc_b)
    m = enc.config.output_dim
    if theta is None:
        return ModelBundle(enc, dec, disc, frozen_mask(m, dtype=torch.float64), "wae_baseline")
    mask = MaskState(torch.as_tensor(theta, dtype=torch.float64))
    return ModelBundle(enc, dec, disc, mask, "maskaae")


def toy_bundle(d=5, m=3, seed=0, variant="maskaae", widths=(6, 5)):
    """Random 3-layer float64 nets for finite-difference checks."""
    from maskaae.networks import BundleConfig, build_bundle

    cfg = BundleConfig(data_dim=d, latent_dim=m, hidden_widths=widths, variant=variant, mask_init_a=3.0)
    bundle = build_bundle(cfg, seed=seed, dtype=torch.float64)
    if variant == "maskaae":
        with torch.no_grad():
            # keep theta away from the kink at 0
            bundle.mask.theta.copy_(torch.linspace(0.3, 2.0, m, dtype=torch.float64))
    return bundle


def fd_gradient(fn, params, h=1e-4):
    """Central finite differences of scalar fn() w.r.t. every entry of params."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                with torch.enable_grad():
                    up = fn().item()
                flat[i] = old - h
                with torch.enable_grad():
                    down = fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def rel_error(analytic, numeric):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return ((a - n).norm() / n.norm().clamp_min(1e-12)).item()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
