"""Unsupervised training: loss = -mean weighted EE, Adam, He init, fine-tuning.

The loss re-implements the rate/EE formulas over paired real tensors so the
whole pipeline is differentiable; `sysmodel.energy_efficiency` (complex
arithmetic) is the independent twin the loss is tested against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError
from .model import load_checkpoint, save_checkpoint
from .sysmodel import ChannelSample, energy_efficiency, read_dataset

LOG_HEADER = ("epoch", "train_loss", "val_ee", "wall_ms")
_LN2 = float(np.log(2.0))
_EYE: dict[int, Tensor] = {}


def _eye(k: int) -> Tensor:
    if k not in _EYE:
        _EYE[k] = Tensor(np.eye(k))
    return _EYE[k]


def energy_efficiency_tensors(sample: ChannelSample, wr: Tensor, wi: Tensor) -> Tensor:
    """Differentiable weighted EE of the beamformer (Re, Im) = (wr, wi).

    Complex moduli are expanded into sums of squared real and imaginary
    parts: |h_k^H w_i|^2 = (Hr Wr^T + Hi Wi^T)^2 + (Hr Wi^T - Hi Wr^T)^2.
    """
    cfg = sample.config
    hr = Tensor(sample.h.real)
    hi = Tensor(sample.h.imag)
    wr_t = ad.transpose(wr)
    wi_t = ad.transpose(wi)
    re = ad.add(ad.matmul(hr, wr_t), ad.matmul(hi, wi_t))
    im = ad.sub(ad.matmul(hr, wi_t), ad.matmul(hi, wr_t))
    p = ad.add(ad.mul(re, re), ad.mul(im, im))  # (k, i) -> |h_k^H w_i|^2
    signal = ad.reduce_sum(ad.mul(p, _eye(cfg.k)), axis=1)
    interference = ad.sub(ad.reduce_sum(p, axis=1), signal)
    sinr = ad.div(signal, ad.add(interference, Tensor(cfg.noise_power)))
    rates = ad.scale(ad.log(ad.add_const(sinr, 1.0)), 1.0 / _LN2)
    num = ad.reduce_sum(ad.mul(rates, Tensor(cfg.weights)))
    power = ad.add(ad.reduce_sum(ad.mul(wr, wr)), ad.reduce_sum(ad.mul(wi, wi)))
    return ad.div(num, ad.add_const(power, cfg.p_c))


def loss(model, batch: list[ChannelSample]) -> Tensor:
    """Negative mean EE over the batch; records on the active tape."""
    if not batch:
        raise ContractError("loss needs a non-empty batch")
    total = None
    for sample in batch:
        wr, wi = model.forward_tensors(sample)
        ee = energy_efficiency_tensors(sample, wr, wi)
        total = ee if total is None else ad.add(total, ee)
    return ad.scale(total, -1.0 / len(batch))


# ---- initialization -----------------------------------------------------------

def he_init(params, seed: int):
    """Fill parameters in registration order: weights N(0, 2/fan_in),
    spline coefficients N(0, 0.1^2), scale factors 1, biases 0."""
    rng = np.random.default_rng(seed)
    for name, t, kind in params.kinds():
        shape = t.data.shape
        if kind == "he":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            t.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif kind == "spline":
            t.data = rng.normal(0.0, 0.1, shape)
        elif kind == "ones":
            t.data = np.ones(shape)
        elif kind == "zeros":
            t.data = np.zeros(shape)
        else:
            raise ContractError(f"unknown init kind {kind!r} for parameter {name}")
    return params


# ---- optimizer ------------------------------------------------------------------

class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---- training loop ---------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dataset: str | None = None
    checkpoint_out: str | None = None
    fine_tune_from: str | None = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


def validation_ee(model, samples: list[ChannelSample]) -> float:
    """Mean EE on the complex (non-taped) path, summed in index order."""
    return float(np.mean([energy_efficiency(s, model.forward(s)) for s in samples]))


def train(model, cfg: TrainConfig, samples: list[ChannelSample] | None = None) -> list[tuple]:
    """Run the unsupervised loop; leaves the best-validation parameters in
    the model and returns per-epoch log rows (epoch, train_loss, val_ee, wall_ms).

    The last `val_fraction` of the dataset is the held-out validation split.
    The pre-training state competes in best-epoch selection, which makes
    fine-tuning non-degrading.
    """
    if samples is None:
        if cfg.dataset is None:
            raise ContractError("train needs samples or cfg.dataset")
        samples = read_dataset(cfg.dataset)
    if samples[0].config.n_t != model.n_t:
        raise ContractError(
            f"dataset n_t={samples[0].config.n_t} does not match model n_t={model.n_t}"
        )
    if cfg.fine_tune_from is not None:
        source, _ = load_checkpoint(cfg.fine_tune_from)
        model.params.load_state(source.params.state())
    else:
        he_init(model.params, cfg.seed)

    n_val = max(1, int(round(len(samples) * cfg.val_fraction)))
    if n_val >= len(samples):
        raise ContractError(f"dataset of {len(samples)} too small for validation split")
    train_set = samples[:-n_val]
    val_set = samples[-n_val:]

    state = AdamState(model.params, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 1])
    best_ee = validation_ee(model, val_set)
    best_state = model.params.state()
    log: list[tuple] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
            with Tape() as tape:
                batch_loss = loss(model, batch)
            tape.backward(batch_loss)
            grads = {name: t.grad for name, t in model.params.items()}
            adam_step(model.params, grads, state, cfg.learning_rate)
            model.params.zero_grad()
            epoch_loss += batch_loss.item() * len(batch)
        epoch_loss /= len(train_set)
        val_ee = validation_ee(model, val_set)
        if val_ee > best_ee:
            best_ee = val_ee
            best_state = model.params.state()
        wall_ms = (time.perf_counter() - t0) * 1e3
        log.append((epoch, epoch_loss, val_ee, wall_ms))
    model.params.load_state(best_state)
    if cfg.checkpoint_out is not None:
        k = samples[0].config.k
        save_checkpoint(model, cfg.checkpoint_out,
                        extra={"train_k": k, "seed": cfg.seed})
    return log


def fine_tune(checkpoint_path, samples_or_path, epochs: int, seed: int = 0,
              learning_rate: float = 1e-4, batch_size: int = 16,
              checkpoint_out: str | None = None):
    """Continue training from a checkpoint on a (possibly different-K) dataset.

    Legal for any K because the parameter set is K-independent. epochs=0
    returns the checkpointed model untouched (plain scaling).
    """
    model, _ = load_checkpoint(checkpoint_path)
    if epochs == 0:
        return model, []
    samples = samples_or_path
    if not isinstance(samples, list):
        samples = read_dataset(samples_or_path)
    cfg = TrainConfig(learning_rate=learning_rate, batch_size=batch_size, epochs=epochs,
                      seed=seed, fine_tune_from=str(checkpoint_path),
                      checkpoint_out=checkpoint_out)
    log = train(model, cfg, samples)
    return model, log


def write_log_csv(rows: list[tuple], path) -> None:
    with open(path, "w") as f:
        f.write(",".join(LOG_HEADER) + "\n")
        for epoch, train_loss, val_ee, wall_ms in rows:
            f.write(f"{epoch},{train_loss:.12g},{val_ee:.12g},{wall_ms:.3f}\n")
