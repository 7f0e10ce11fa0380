"""Downlink MISO system model: channels, rates, weighted energy efficiency.

Row k of a channel matrix stores the channel vector h_k of user k; inner
products with beamformers are conjugated on the channel side, so
signal powers are |h_k^H w_i|^2. Complex arithmetic lives here (metric
evaluation and oracles); the differentiable training path re-expresses the
same quantities over paired real tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError

DATASET_MAGIC = b"KFDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIQddd")  # magic, version, n_t, k, count, noise, p_max, p_c


def _per_user(value, k: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (k,)).copy()
    if not np.all(arr > 0):
        raise ContractError(f"{name} must be positive, got {arr}")
    return arr


@dataclass
class SystemConfig:
    """Static problem data: antenna/user counts, powers, noise, user weights."""

    n_t: int
    k: int
    p_max: float = 1.0
    p_c: float = 0.1
    noise_power: np.ndarray = 1.0  # scalar or per-user
    weights: np.ndarray = 1.0

    def __post_init__(self):
        if self.n_t < 1 or self.k < 1:
            raise ContractError(f"need n_t >= 1 and k >= 1, got n_t={self.n_t}, k={self.k}")
        if not self.p_max > 0:
            raise ContractError(f"p_max must be > 0, got {self.p_max}")
        if self.p_c < 0:
            raise ContractError(f"p_c must be >= 0, got {self.p_c}")
        self.noise_power = _per_user(self.noise_power, self.k, "noise_power")
        self.weights = _per_user(self.weights, self.k, "weights")


@dataclass
class ChannelSample:
    """One problem instance: K x N_T complex channel matrix plus its config."""

    h: np.ndarray
    config: SystemConfig

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.complex128)
        if self.h.shape != (self.config.k, self.config.n_t):
            raise ContractError(
                f"channel shape {self.h.shape} does not match config "
                f"({self.config.k}, {self.config.n_t})"
            )
        if not np.all(np.isfinite(self.h)):
            raise ContractError("channel entries must be finite")


@dataclass
class BeamformingMatrix:
    """K complex beamforming vectors, row k = w_k."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.complex128)
        if self.w.ndim != 2:
            raise ContractError(f"beamforming matrix must be 2-D, got shape {self.w.shape}")

    def total_power(self) -> float:
        return float(np.sum(np.abs(self.w) ** 2))

    def is_feasible(self, p_max: float, tol: float = 1e-12) -> bool:
        return self.total_power() <= p_max + tol


def generate_rayleigh(config: SystemConfig, count: int, seed: int) -> list[ChannelSample]:
    """I.i.d. CN(0, 1) channel entries (real and imaginary parts N(0, 1/2))."""
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    shape = (count, config.k, config.n_t)
    h = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)
    return [ChannelSample(h[i], config) for i in range(count)]


def _link_powers(sample: ChannelSample, w: np.ndarray) -> np.ndarray:
    # entry (k, i) = |h_k^H w_i|^2
    return np.abs(np.conj(sample.h) @ w.T) ** 2


def rate(sample: ChannelSample, w: BeamformingMatrix, k: int) -> float:
    """Achievable rate of user k in bits/s/Hz."""
    if w.w.shape != sample.h.shape:
        raise ContractError(f"beamformer shape {w.w.shape} vs channel {sample.h.shape}")
    p = _link_powers(sample, w.w)
    signal = p[k, k]
    interference = p[k].sum() - signal
    sinr = signal / (interference + sample.config.noise_power[k])
    return float(np.log2(1.0 + sinr))


def all_rates(sample: ChannelSample, w: BeamformingMatrix) -> np.ndarray:
    p = _link_powers(sample, w.w)
    signal = np.diag(p)
    interference = p.sum(axis=1) - signal
    return np.log2(1.0 + signal / (interference + sample.config.noise_power))


def energy_efficiency(sample: ChannelSample, w: BeamformingMatrix) -> float:
    """Weighted sum rate over total consumed power, bits/Hz/joule."""
    if w.w.shape != sample.h.shape:
        raise ContractError(f"beamformer shape {w.w.shape} vs channel {sample.h.shape}")
    num = float(sample.config.weights @ all_rates(sample, w))
    den = w.total_power() + sample.config.p_c
    return num / den


def scale_to_budget(w_tilde: BeamformingMatrix, p_max: float) -> BeamformingMatrix:
    """Shrink onto the power budget; already-feasible inputs pass unchanged."""
    total = w_tilde.total_power()
    factor = np.sqrt(p_max / max(p_max, total))
    return BeamformingMatrix(w_tilde.w * factor)


# ---- dataset file format -----------------------------------------------------

def write_dataset(samples: list[ChannelSample], path) -> None:
    """Serialize samples to the binary dataset format (see read_dataset)."""
    if not samples:
        raise ContractError("cannot write an empty dataset")
    cfg = samples[0].config
    noise = cfg.noise_power
    if not np.all(noise == noise[0]):
        raise ContractError("dataset format stores a single noise power; got per-user values")
    for s in samples:
        if s.h.shape != (cfg.k, cfg.n_t):
            raise ContractError("all samples in a dataset must share one shape")
    header = _HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, cfg.n_t, cfg.k, len(samples),
        float(noise[0]), cfg.p_max, cfg.p_c,
    )
    stacked = np.stack([s.h for s in samples])  # (count, K, N_T)
    interleaved = np.empty(stacked.shape + (2,), dtype="<f8")
    interleaved[..., 0] = stacked.real
    interleaved[..., 1] = stacked.imag
    with open(path, "wb") as f:
        f.write(header)
        f.write(interleaved.tobytes())


def read_dataset(path) -> list[ChannelSample]:
    """Parse a dataset file; raises FormatError naming the offending offset."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header at offset {len(blob)}: need {_HEADER.size} bytes")
    magic, version, n_t, k, count, noise, p_max, p_c = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    expected = _HEADER.size + count * k * n_t * 16
    if len(blob) < expected:
        raise FormatError(
            f"truncated record section at offset {len(blob)}: header declares {expected} bytes"
        )
    cfg = SystemConfig(n_t=n_t, k=k, p_max=p_max, p_c=p_c, noise_power=noise)
    flat = np.frombuffer(blob, dtype="<f8", count=count * k * n_t * 2, offset=_HEADER.size)
    pairs = flat.reshape(count, k, n_t, 2)
    h = pairs[..., 0] + 1j * pairs[..., 1]
    return [ChannelSample(h[i], cfg) for i in range(count)]
