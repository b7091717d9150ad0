import hashlib

import numpy as np
import pytest
import torch

from maskaae import losses
from maskaae.errors import IntegrityError, InvalidArgumentError, NumericError, ShapeError
from maskaae.metrics import EvalConfig
from maskaae.networks import BundleConfig, build_bundle
from maskaae.optim import OptimizerState, rmsprop_step
from maskaae.synthetic_data import GeneratorSpec, make_dataset
from maskaae.trainer import (
    OPTIMIZERS,
    TrainConfig,
    _group_params,
    checkpoint_load,
    checkpoint_save,
    init_state,
    lambda3_at,
    read_metrics,
    train,
)

SMALL_EVAL = dict(eval_count=200, nac_batch=200, loss_batch=32)


@pytest.fixture(scope="module")
def dataset():
    return make_dataset(GeneratorSpec(n=2, k=16, d=10, seed=7), 1000)


def config(**kw):
    base = dict(training_steps=20, batch_size=16, eval_every=10, reg_schedule_interval=5,
                disc_training_ratio=2, lr_ae=1e-3, lr_disc=1e-3, lr_gen=1e-3, lr_mask=1e-2, eval=SMALL_EVAL)
    base.update(kw)
    return TrainConfig(**base)


def bundle_config(variant="maskaae", m=4):
    return BundleConfig(data_dim=10, latent_dim=m, hidden_widths=(8, 8), variant=variant)


def digest(tensors):
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().numpy().tobytes())
    return h.hexdigest()


def test_zero_steps_returns_initial_bundle(dataset):
    bc = bundle_config()
    fresh = build_bundle(bc, seed=3)
    res = train(config(training_steps=0, seed=3), dataset, bundle_config=bc)
    assert res.trace == []
    assert digest(res.bundle.state_dict().values()) == digest(fresh.state_dict().values())


def test_wae_mask_bitwise_unchanged(dataset):
    bc = bundle_config("wae_baseline")
    res = train(config(variant="wae_baseline"), dataset, bundle_config=bc)
    assert torch.equal(res.bundle.mask.theta, torch.full((4,), float("inf")))
    assert all(r.m_A == 4 for r in res.trace)


def test_group_isolation(dataset):
    bundle = build_bundle(bundle_config(), seed=1)
    groups = bundle.param_groups()
    state = init_state(config(), bundle, bundle_config())
    w = losses.LossWeights()
    X = torch.as_tensor(dataset.samples[:16])
    z = torch.randn(16, 4)
    loss_fns = {
        "ae": lambda: losses.loss_ae(X, bundle, w),
        "disc": lambda: losses.loss_dm(X, z, bundle, w),
        "gen": lambda: losses.loss_gen(X, bundle),
        "mask": lambda: losses.loss_mask(X, z, bundle, w),
    }
    for name, fn in loss_fns.items():
        before = {g: digest(ps) for g, ps in groups.items()}
        params = _group_params(bundle, name)
        grads = torch.autograd.grad(fn(), params, allow_unused=True)
        grads = [torch.zeros_like(p) if gr is None else gr for p, gr in zip(params, grads)]
        rmsprop_step(params, grads, state.optimizers[name], 1e-2, 0.9, 1e-8)
        after = {g: digest(ps) for g, ps in groups.items()}
        changed = {g for g in groups if before[g] != after[g]}
        assert changed == set(OPTIMIZERS[name]), name


def test_lambda3_schedule(dataset):
    assert lambda3_at(0, 4, 5) == 0.5
    assert lambda3_at(4, 4, 5) == 0.5
    assert lambda3_at(5, 4, 5) == 1.0
    assert lambda3_at(23, 4, 5) == 0.5 * 2 ** 4
    assert lambda3_at(10_000, 4, 5) == 1e6
    for steps in (3, 5, 12):
        res = train(config(training_steps=steps), dataset, bundle_config=bundle_config())
        assert res.state.lambda3 == (2 / 4) * 2 ** (steps // 5)


class TestCheckpoint:
    def test_round_trip(self, dataset, tmp_path):
        res = train(config(training_steps=7), dataset, bundle_config=bundle_config())
        path = tmp_path / "c.ckpt"
        checkpoint_save(res.state, path)
        back = checkpoint_load(path)
        assert back.step == 7 and back.lambda3 == res.state.lambda3
        sd1, sd2 = res.bundle.state_dict(), back.bundle.state_dict()
        assert sd1.keys() == sd2.keys()
        assert all(torch.equal(sd1[k], sd2[k]) for k in sd1)
        for name, opt in res.state.optimizers.items():
            assert all(torch.equal(a, b) for a, b in zip(opt.acc, back.optimizers[name].acc))
        assert torch.equal(res.state.generator.get_state(), back.generator.get_state())

    def test_truncated(self, dataset, tmp_path):
        res = train(config(training_steps=2), dataset, bundle_config=bundle_config())
        path = tmp_path / "c.ckpt"
        checkpoint_save(res.state, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(IntegrityError):
            checkpoint_load(path)

    def test_flipped_byte(self, dataset, tmp_path):
        res = train(config(training_steps=2), dataset, bundle_config=bundle_config())
        path = tmp_path / "c.ckpt"
        checkpoint_save(res.state, path)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            checkpoint_load(path)

    @pytest.mark.parametrize("batching", ["random", "epoch"])
    def test_resume_matches_uninterrupted(self, dataset, tmp_path, batching):
        cfg = config(training_steps=100, eval_every=25, batching=batching, seed=4)
        full = train(cfg, dataset, bundle_config=bundle_config(), run_dir=tmp_path / "full")
        half = train(cfg, dataset, bundle_config=bundle_config(), run_dir=tmp_path / "half", stop_at=50)
        assert half.state.step == 50
        state = checkpoint_load(tmp_path / "half" / "checkpoints" / "step_50.ckpt")
        resumed = train(cfg, dataset, state=state, run_dir=tmp_path / "half")
        sd1, sd2 = full.bundle.state_dict(), resumed.bundle.state_dict()
        assert all(torch.equal(sd1[k], sd2[k]) for k in sd1)
        assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "half" / "metrics.jsonl").read_bytes()


def test_metrics_file_deterministic(dataset, tmp_path):
    cfg = config(training_steps=30, seed=9)
    for name in ("a", "b"):
        train(cfg, dataset, bundle_config=bundle_config(), run_dir=tmp_path / name)
    a, b = (tmp_path / "a" / "metrics.jsonl").read_bytes(), (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a == b and len(a.splitlines()) == 3
    recs = read_metrics(tmp_path / "a" / "metrics.jsonl")
    assert [r.step for r in recs] == [10, 20, 30]
    header = (tmp_path / "a" / "mask_trace.csv").read_text().splitlines()[0]
    assert header == "step,mu_0,mu_1,mu_2,mu_3"


def test_final_step_always_evaluated(dataset):
    res = train(config(training_steps=13, eval_every=5), dataset, bundle_config=bundle_config())
    assert [r.step for r in res.trace] == [5, 10, 13]


def test_training_improves_frechet(dataset):
    cfg = config(training_steps=300, eval_every=300, seed=1, variant="wae_baseline")
    bc = bundle_config("wae_baseline", m=2)
    res = train(cfg, dataset, bundle_config=bc)
    from maskaae.metrics import evaluate
    untrained = evaluate(build_bundle(bc, seed=1), dataset, cfg.eval, cfg.weights, 300, cfg.seed)
    assert untrained.frechet > res.trace[-1].frechet


@pytest.mark.parametrize("kw", [
    dict(training_steps=-1), dict(ae_training_ratio=0), dict(disc_training_ratio=0), dict(batch_size=1),
    dict(lr_ae=0.0), dict(lr_mask=-1.0), dict(rmsprop_rho=1.0), dict(reg_schedule_interval=0),
    dict(variant="vae"), dict(batching="shuffle"), dict(eval=dict(tau=1.0)),
])
def test_invalid_config(kw):
    with pytest.raises(InvalidArgumentError):
        config(**kw)


def test_variant_mismatch(dataset):
    with pytest.raises(InvalidArgumentError):
        train(config(variant="wae_baseline"), dataset, bundle_config=bundle_config("maskaae"))


def test_data_dimension_mismatch():
    ds = make_dataset(GeneratorSpec(n=2, k=8, d=12, seed=1), 100)
    with pytest.raises(ShapeError):
        train(config(), ds, bundle_config=bundle_config())


def test_numeric_failure_keeps_last_good_checkpoint(dataset, tmp_path):
    cfg = config(training_steps=40, eval_every=10, lr_ae=1e30, lr_disc=1e30, lr_gen=1e30)
    with pytest.raises(NumericError) as info:
        train(cfg, dataset, bundle_config=bundle_config(), run_dir=tmp_path)
    assert info.value.step is not None
    ckpts = sorted((tmp_path / "checkpoints").glob("*.ckpt")) if (tmp_path / "checkpoints").exists() else []
    for c in ckpts:
        state = checkpoint_load(c)
        assert all(torch.isfinite(p).all() for p in state.bundle.encoder.parameters())
