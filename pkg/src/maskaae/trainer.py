"""Interleaved RMSProp training loop for MaskAAE and its WAE baseline.

One outer step runs, in order: ``ae_training_ratio`` auto-encoder updates of
(encoder, decoder), ``disc_training_ratio`` critic updates, one generator update
of the encoder, the lambda3 doubling check, and one mask update (MaskAAE only).
Each loss has its own RMSProp accumulator set and every inner update draws a
fresh minibatch.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from maskaae import losses
from maskaae.errors import IntegrityError, InvalidArgumentError, NumericError, ShapeError
from maskaae.metrics import EvalConfig, MetricsRecord, PCAWhitening, evaluate
from maskaae.networks import VARIANTS, BundleConfig, ModelBundle, build_bundle
from maskaae.optim import OptimizerState, rmsprop_step

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MAAE-CK1"
OPTIMIZERS = {
    "ae": ("encoder", "decoder"),
    "disc": ("discriminator",),
    "gen": ("encoder",),
    "mask": ("mask",),
}


@dataclass
class TrainConfig:
    training_steps: int = 20000
    ae_training_ratio: int = 1
    disc_training_ratio: int = 5
    batch_size: int = 64
    lr_ae: float = 1e-4
    lr_disc: float = 1e-4
    lr_gen: float = 1e-4
    lr_mask: float = 1e-3
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    reg_schedule_interval: int = 2000
    lambda3_cap: float = 1e6
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    variant: str = "maskaae"
    eval_every: int = 1000
    checkpoint_every: int = 0
    batching: str = "random"
    seed: int = 0
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = losses.LossWeights(**self.weights)
        if isinstance(self.eval, dict):
            self.eval = EvalConfig(**self.eval)
        self.validate()

    def validate(self):
        if self.training_steps < 0:
            raise InvalidArgumentError("training_steps must be >= 0")
        if self.ae_training_ratio < 1 or self.disc_training_ratio < 1:
            raise InvalidArgumentError("training ratios must be >= 1")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch_size must be >= 2")
        for name in ("lr_ae", "lr_disc", "lr_gen", "lr_mask", "rmsprop_eps"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be > 0")
        if not 0 < self.rmsprop_rho < 1:
            raise InvalidArgumentError("rmsprop_rho must lie in (0, 1)")
        if self.reg_schedule_interval < 1 or self.eval_every < 1 or self.checkpoint_every < 0:
            raise InvalidArgumentError("intervals must be positive")
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"variant must be one of {VARIANTS}")
        if self.batching not in ("random", "epoch"):
            raise InvalidArgumentError("batching must be 'random' or 'epoch'")
        if not 0 < self.eval.tau < 1:
            raise InvalidArgumentError("tau must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


def lambda3_at(step: int, m: int, interval: int, cap: float = 1e6, initial: float | None = None) -> float:
    """lambda3 after outer step ``step``: (2/m) * 2**floor(step/interval), capped."""
    lam = initial if initial is not None else 2.0 / m
    for _ in range(step // interval):
        lam = min(lam * 2.0, cap)
    return lam


class BatchSampler:
    def __init__(self, n_rows: int, batch_size: int, mode: str, generator: torch.Generator):
        self.n, self.s, self.mode, self.g = n_rows, batch_size, mode, generator
        self.order = None
        self.pos = 0

    def next(self) -> torch.Tensor:
        if self.mode == "random":
            return torch.randint(self.n, (self.s,), generator=self.g)
        if self.order is None or self.pos + self.s > self.n:
            self.order = torch.randperm(self.n, generator=self.g)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.s]
        self.pos += self.s
        return idx

    def state(self):
        return {"pos": self.pos, "order": None if self.order is None else self.order.tolist()}

    def load_state(self, st):
        self.pos = st["pos"]
        self.order = None if st["order"] is None else torch.tensor(st["order"], dtype=torch.long)


@dataclass
class TrainingState:
    bundle: ModelBundle
    bundle_config: BundleConfig
    config: TrainConfig
    optimizers: dict[str, OptimizerState]
    step: int
    lambda3: float
    generator: torch.Generator
    sampler_state: dict | None = None


def _group_params(bundle: ModelBundle, opt_name: str) -> list[torch.nn.Parameter]:
    groups = bundle.param_groups()
    return [p for g in OPTIMIZERS[opt_name] for p in groups.get(g, [])]


def init_state(config: TrainConfig, bundle: ModelBundle, bundle_config: BundleConfig) -> TrainingState:
    if bundle.variant != config.variant:
        raise InvalidArgumentError(f"bundle variant {bundle.variant!r} != config variant {config.variant!r}")
    opts = {name: OptimizerState.for_params(_group_params(bundle, name)) for name in OPTIMIZERS
            if name != "mask" or not bundle.mask.frozen}
    lam3 = config.weights.lambda3 if config.weights.lambda3 is not None else 2.0 / bundle.m
    gen = torch.Generator().manual_seed(int(config.seed) & (2**63 - 1))
    return TrainingState(bundle, bundle_config, config, opts, 0, lam3, gen)


# ---------------------------------------------------------------------------
# checkpoints

def _blob(name, t):
    arr = t.detach().cpu().numpy()
    return name, arr


def checkpoint_save(state: TrainingState, path) -> None:
    blobs = []
    for name, t in state.bundle.state_dict().items():
        blobs.append(_blob(f"param/{name}", t))
    for opt_name, opt in state.optimizers.items():
        for i, acc in enumerate(opt.acc):
            blobs.append(_blob(f"opt/{opt_name}/{i}", acc))
    blobs.append(("rng", state.generator.get_state().numpy()))
    entries, chunks, offset = [], [], 0
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "manifest": {
            "bundle_config": state.bundle_config.to_dict(),
            "train_config": state.config.to_dict(),
            "variant": state.bundle.variant,
            "step": state.step,
            "lambda3": state.lambda3,
            "optimizer_steps": {k: v.steps for k, v in state.optimizers.items()},
            "sampler": state.sampler_state,
        },
        "blobs": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)
    os.replace(tmp, path)


def checkpoint_load(path) -> TrainingState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC or len(raw) < 12:
        raise IntegrityError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    payload = raw[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in header["blobs"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()

    man = header["manifest"]
    bcfg = BundleConfig(**man["bundle_config"])
    tcfg = TrainConfig(**man["train_config"])
    dtype = torch.from_numpy(arrays["param/mask.theta"]).dtype
    bundle = build_bundle(bcfg, seed=0, dtype=dtype)
    sd = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    bundle.load_state_dict(sd)
    opts = {}
    for opt_name, steps in man["optimizer_steps"].items():
        n = len(_group_params(bundle, opt_name))
        accs = [torch.from_numpy(arrays[f"opt/{opt_name}/{i}"]) for i in range(n)]
        opts[opt_name] = OptimizerState(accs, steps)
    gen = torch.Generator()
    gen.set_state(torch.from_numpy(arrays["rng"]))
    return TrainingState(bundle, bcfg, tcfg, opts, man["step"], man["lambda3"], gen, man.get("sampler"))


# ---------------------------------------------------------------------------
# run directory helpers

def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_mask_trace(path, trace: list[MetricsRecord]):
    m = len(trace[0].mu) if trace else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"mu_{j}" for j in range(m)])
        for rec in trace:
            w.writerow([rec.step] + [repr(float(v)) for v in rec.mu])


@dataclass
class TrainResult:
    bundle: ModelBundle
    trace: list[MetricsRecord]
    state: TrainingState


def _step_grads(loss, params, step):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss", step)
    return grads


def train(config: TrainConfig, dataset, bundle: ModelBundle | None = None,
          bundle_config: BundleConfig | None = None, run_dir=None,
          state: TrainingState | None = None, stop_at: int | None = None) -> TrainResult:
    """Run the training loop; ``state`` resumes from a checkpoint, ``stop_at`` ends early."""
    config.validate()
    if state is None:
        if bundle is None:
            if bundle_config is None:
                raise InvalidArgumentError("need a bundle, a bundle_config or a resume state")
            bundle = build_bundle(bundle_config, seed=config.seed)
        if bundle_config is None:
            bundle_config = BundleConfig(
                data_dim=bundle.d, latent_dim=bundle.m,
                hidden_widths=bundle.encoder.config.hidden_widths,
                hidden_activation=bundle.encoder.config.hidden_activation,
                decoder_output=bundle.decoder.config.output_activation, variant=bundle.variant)
        state = init_state(config, bundle, bundle_config)
    bundle = state.bundle
    if dataset.d != bundle.d:
        raise ShapeError(f"dataset has d={dataset.d}, encoder expects {bundle.d}")

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(run_dir / "metrics.jsonl", "a" if state.step > 0 else "w")

    dtype = next(bundle.parameters()).dtype
    X = torch.as_tensor(dataset.samples).to(dtype)
    g = state.generator
    sampler = BatchSampler(X.shape[0], config.batch_size, config.batching, g)
    if state.sampler_state:
        sampler.load_state(state.sampler_state)
    s, m, w = config.batch_size, bundle.m, config.weights
    transform = None
    if config.eval.extractor == "pca_w":
        transform = PCAWhitening(config.eval.pca_dim).fit(dataset.samples)

    params = {name: _group_params(bundle, name) for name in state.optimizers}
    rho, eps = config.rmsprop_rho, config.rmsprop_eps
    trace: list[MetricsRecord] = []
    last_good = None
    end = config.training_steps if stop_at is None else min(stop_at, config.training_steps)

    def batch():
        return X[sampler.next()]

    try:
        for i in range(state.step + 1, end + 1):
            for _ in range(config.ae_training_ratio):
                loss = losses.loss_ae(batch(), bundle, w)
                rmsprop_step(params["ae"], _step_grads(loss, params["ae"], i),
                             state.optimizers["ae"], config.lr_ae, rho, eps, i)
            for _ in range(config.disc_training_ratio):
                xb = batch()
                z = torch.randn(s, m, generator=g, dtype=dtype)
                beta1 = torch.rand(s, generator=g, dtype=dtype)
                loss = losses.loss_dm(xb, z, bundle, w, beta1=beta1)
                rmsprop_step(params["disc"], _step_grads(loss, params["disc"], i),
                             state.optimizers["disc"], config.lr_disc, rho, eps, i)
            loss = losses.loss_gen(batch(), bundle)
            rmsprop_step(params["gen"], _step_grads(loss, params["gen"], i),
                         state.optimizers["gen"], config.lr_gen, rho, eps, i)
            if i % config.reg_schedule_interval == 0:
                state.lambda3 = min(state.lambda3 * 2.0, config.lambda3_cap)
            if "mask" in state.optimizers:
                xb = batch()
                z = torch.randn(s, m, generator=g, dtype=dtype)
                loss = losses.loss_mask(xb, z, bundle, w, lambda3=state.lambda3)
                rmsprop_step(params["mask"], _step_grads(loss, params["mask"], i),
                             state.optimizers["mask"], config.lr_mask, rho, eps, i)
            state.step = i
            state.sampler_state = sampler.state() if config.batching == "epoch" else None

            if i % config.eval_every == 0 or i == config.training_steps:
                rec = evaluate(bundle, dataset, config.eval, w, i, config.seed, state.lambda3, transform)
                trace.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(rec.to_json() + "\n")
                    metrics_fh.flush()
                log.info("step %d frechet %.4f m_A %d omega %.4f", i, rec.frechet, rec.m_A, rec.omega)
                if run_dir is not None:
                    last_good = _snapshot(state)
            if run_dir is not None and config.checkpoint_every and i % config.checkpoint_every == 0:
                checkpoint_save(state, run_dir / "checkpoints" / f"step_{i}.ckpt")
    except NumericError:
        if run_dir is not None and last_good is not None:
            checkpoint_save(last_good, run_dir / "checkpoints" / f"step_{last_good.step}.ckpt")
        raise
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if run_dir is not None:
        checkpoint_save(state, run_dir / "checkpoints" / f"step_{state.step}.ckpt")
        full = read_metrics(run_dir / "metrics.jsonl")
        write_mask_trace(run_dir / "mask_trace.csv", full)
    return TrainResult(bundle, trace, state)


def _snapshot(state: TrainingState) -> TrainingState:
    b = build_bundle(state.bundle_config, seed=0, dtype=next(state.bundle.parameters()).dtype)
    b.load_state_dict({k: v.clone() for k, v in state.bundle.state_dict().items()})
    opts = {k: OptimizerState([a.clone() for a in v.acc], v.steps) for k, v in state.optimizers.items()}
    gen = torch.Generator()
    gen.set_state(state.generator.get_state())
    return TrainingState(b, state.bundle_config, state.config, opts, state.step, state.lambda3, gen,
                         state.sampler_state)


def read_metrics(path) -> list[MetricsRecord]:
    with open(path) as fh:
        return [MetricsRecord.from_json(line) for line in fh if line.strip()]
