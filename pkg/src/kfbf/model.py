"""Beamforming networks: transformer/GAT encoders, KAN/MLP decoders, plain MLP.

The encoder-decoder models share one parameter set whose shapes never depend
on the number of users K, so a trained model accepts inputs with any K. The
plain MLP benchmark deliberately bakes K into its shapes.

All forward passes run on the autodiff ops: inside an active Tape they are
differentiable end to end; without one they are plain numpy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, FormatError, ShapeError
from .splines import uniform_knots
from .sysmodel import BeamformingMatrix, ChannelSample

CHECKPOINT_MAGIC = b"KFCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Hyperparameters of the encoder-decoder models.

    heads may be a single int (same for every encoder layer) or one per
    layer. kan_hidden_dims lists the decoder widths F(2)..F(T); F(1) is d
    and F(T+1) is fixed to 2*N_T when the model is built.
    """

    d: int = 64
    d_ff: int = 128
    l_layers: int = 2
    t_layers: int = 2
    heads: tuple = 4
    kan_hidden_dims: tuple = (64,)
    spline_count: int = 8  # P + 1 coefficients per edge
    spline_degree: int = 3
    grid_range: tuple = (-2.0, 2.0)
    encoder_kind: str = "transformer"
    decoder_kind: str = "kan"
    conventional_residual: bool = False  # feed-forward residual adds the attention block instead

    def __post_init__(self):
        if isinstance(self.heads, int):
            self.heads = (self.heads,) * self.l_layers
        else:
            self.heads = tuple(self.heads)
        self.kan_hidden_dims = tuple(self.kan_hidden_dims)
        self.grid_range = (float(self.grid_range[0]), float(self.grid_range[1]))
        if len(self.heads) != self.l_layers:
            raise ContractError(f"need one head count per encoder layer, got {self.heads}")
        for m in self.heads:
            if m < 1 or self.d % m != 0:
                raise ContractError(f"embedding dim {self.d} not divisible by heads {m}")
        if len(self.kan_hidden_dims) != self.t_layers - 1:
            raise ContractError(
                f"kan_hidden_dims must list {self.t_layers - 1} widths, got {self.kan_hidden_dims}"
            )
        if self.spline_degree < 1:
            raise ContractError(f"spline_degree must be >= 1, got {self.spline_degree}")
        if self.spline_count <= self.spline_degree:
            raise ContractError(
                f"spline_count {self.spline_count} must exceed spline_degree {self.spline_degree}"
            )
        if not self.grid_range[0] < self.grid_range[1]:
            raise ContractError(f"grid_range must be increasing, got {self.grid_range}")
        if self.encoder_kind not in ("transformer", "gat"):
            raise ContractError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.decoder_kind not in ("kan", "mlp"):
            raise ContractError(f"unknown decoder_kind {self.decoder_kind!r}")


class ParameterSet:
    """Named, ordered learnable tensors with an init kind per entry.

    Kinds: 'he' (fan-in scaled normal), 'spline' (small normal), 'ones',
    'zeros'. Registration order is the serialization order.
    """

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, str]] = {}

    def add(self, name: str, shape: tuple, kind: str = "he") -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.zeros(shape), requires_grad=True)
        self._entries[name] = (t, kind)
        return t

    def items(self):
        return [(name, t) for name, (t, _) in self._entries.items()]

    def kinds(self):
        return [(name, t, kind) for name, (t, kind) in self._entries.items()]

    def tensors(self) -> list[Tensor]:
        return [t for t, _ in self._entries.values()]

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __len__(self):
        return len(self._entries)

    def total_count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def zero_grad(self):
        for t in self.tensors():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, (t, _) in self._entries.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._entries):
            missing = set(self._entries) ^ set(state)
            raise ContractError(f"parameter names do not match, difference: {sorted(missing)}")
        for name, (t, _) in self._entries.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


# ---- pre/post processing -----------------------------------------------------

def sample_features(sample: ChannelSample) -> np.ndarray:
    """Real input matrix [Re(h_k); Im(h_k)] per user row, K x 2N_T."""
    return np.hstack([sample.h.real, sample.h.imag])


def preprocess(sample: ChannelSample, w0: Tensor) -> Tensor:
    """Linear embedding of the split real/imaginary channel rows."""
    return ad.matmul(Tensor(sample_features(sample)), w0)


def postprocess(f_out: Tensor, n_t: int, p_max: float) -> tuple[Tensor, Tensor]:
    """Split columns into real/imag parts and rescale onto the power budget."""
    if f_out.shape[1] != 2 * n_t:
        raise ShapeError(f"postprocess expects {2 * n_t} columns, got {f_out.shape}")
    wr = ad.slice_columns(f_out, 0, n_t)
    wi = ad.slice_columns(f_out, n_t, 2 * n_t)
    power = ad.add(ad.reduce_sum(ad.mul(wr, wr)), ad.reduce_sum(ad.mul(wi, wi)))
    capped = ad.clip_min(power, p_max)  # max(P_max, sum ||w||^2)
    factor = ad.pow_const(ad.scale(capped, 1.0 / p_max), -0.5)
    return ad.mul_scalar(factor, wr), ad.mul_scalar(factor, wi)


# ---- encoder layers ----------------------------------------------------------

class TransformerEncoderLayer:
    """Multi-head self-attention plus position-wise feed-forward block."""

    def __init__(self, params: ParameterSet, tag: str, d: int, d_ff: int, m_heads: int,
                 conventional_residual: bool):
        self.d = d
        self.conventional_residual = conventional_residual
        dh = d // m_heads
        self.heads = [
            (
                params.add(f"{tag}.h{m}.wq", (d, dh)),
                params.add(f"{tag}.h{m}.wk", (d, dh)),
                params.add(f"{tag}.h{m}.wv", (d, dh)),
            )
            for m in range(m_heads)
        ]
        self.w_ma = params.add(f"{tag}.w_ma", (d, d))
        self.w1 = params.add(f"{tag}.w1", (d, d_ff))
        self.w2 = params.add(f"{tag}.w2", (d_ff, d))

    def forward(self, h: Tensor) -> Tensor:
        inv_sqrt_d = 1.0 / np.sqrt(self.d)
        outs = []
        for wq, wk, wv in self.heads:
            q = ad.matmul(h, wq)
            k = ad.matmul(h, wk)
            v = ad.matmul(h, wv)
            att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_d))
            outs.append(ad.matmul(att, v))
        h_ma = ad.matmul(ad.concat_columns(outs), self.w_ma)
        h_ma_res = ad.add(ad.layernorm_rows(h_ma), h)
        h_ff = ad.matmul(ad.relu(ad.matmul(h_ma_res, self.w1)), self.w2)
        skip = h_ma_res if self.conventional_residual else h_ff
        return ad.add(ad.layernorm_rows(h_ff), skip)


class GatEncoderLayer:
    """Graph-attention layer on the fully connected user graph."""

    LEAKY_SLOPE = 0.2

    def __init__(self, params: ParameterSet, tag: str, d: int, m_heads: int):
        dh = d // m_heads
        self.heads = [
            (
                params.add(f"{tag}.h{m}.w", (d, dh)),
                params.add(f"{tag}.h{m}.a_src", (dh, 1)),
                params.add(f"{tag}.h{m}.a_dst", (dh, 1)),
            )
            for m in range(m_heads)
        ]

    def forward(self, h: Tensor) -> Tensor:
        k_users = h.shape[0]
        ones_row = Tensor(np.ones((1, k_users)))
        ones_col = Tensor(np.ones((k_users, 1)))
        outs = []
        for w, a_src, a_dst in self.heads:
            xw = ad.matmul(h, w)
            s = ad.matmul(xw, a_src)
            t = ad.matmul(xw, a_dst)
            e = ad.add(ad.matmul(s, ones_row), ad.matmul(ones_col, ad.transpose(t)))
            att = ad.softmax_rows(ad.leaky_relu(e, self.LEAKY_SLOPE))
            outs.append(ad.matmul(att, xw))
        return ad.concat_columns(outs)


# ---- decoder layers ----------------------------------------------------------

class KanDecoderLayer:
    """Edge-wise learnable activations: silu base plus B-spline combination."""

    def __init__(self, params: ParameterSet, tag: str, f_in: int, f_out: int,
                 knots: np.ndarray, degree: int, n_coeff: int):
        self.knots = knots
        self.degree = degree
        self.beta = params.add(f"{tag}.beta", (f_out, f_in), kind="ones")
        self.gamma = params.add(f"{tag}.gamma", (f_out, f_in), kind="ones")
        self.coeff = params.add(f"{tag}.coeff", (f_out, f_in, n_coeff), kind="spline")

    def forward(self, f: Tensor) -> Tensor:
        return ad.kan_spline(f, self.beta, self.gamma, self.coeff, self.knots, self.degree)


class MlpDecoderLayer:
    """Position-wise linear layer, optionally ReLU-activated."""

    def __init__(self, params: ParameterSet, tag: str, f_in: int, f_out: int, activate: bool):
        self.w = params.add(f"{tag}.w", (f_in, f_out))
        self.b = params.add(f"{tag}.b", (f_out,), kind="zeros")
        self.activate = activate

    def forward(self, f: Tensor) -> Tensor:
        out = ad.add_bias(ad.matmul(f, self.w), self.b)
        return ad.relu(out) if self.activate else out


# ---- full models ---------------------------------------------------------------

class BeamformingModel:
    """Encoder-decoder network mapping CSI to a feasible beamforming matrix.

    Parameter shapes depend on (n_t, config) only, never on K.
    """

    kind = "encdec"

    def __init__(self, n_t: int, config: ModelConfig | None = None):
        self.n_t = n_t
        self.config = config or ModelConfig()
        cfg = self.config
        self.params = ParameterSet()
        self.w0 = self.params.add("w0", (2 * n_t, cfg.d))
        if cfg.encoder_kind == "transformer":
            self.encoder = [
                TransformerEncoderLayer(self.params, f"tel{l}", cfg.d, cfg.d_ff,
                                        cfg.heads[l], cfg.conventional_residual)
                for l in range(cfg.l_layers)
            ]
        else:
            self.encoder = [
                GatEncoderLayer(self.params, f"gat{l}", cfg.d, cfg.heads[l])
                for l in range(cfg.l_layers)
            ]
        dims = (cfg.d,) + cfg.kan_hidden_dims + (2 * n_t,)
        if cfg.decoder_kind == "kan":
            knots = uniform_knots(cfg.grid_range[0], cfg.grid_range[1],
                                  cfg.spline_count, cfg.spline_degree)
            self.decoder = [
                KanDecoderLayer(self.params, f"kdl{t}", dims[t], dims[t + 1],
                                knots, cfg.spline_degree, cfg.spline_count)
                for t in range(cfg.t_layers)
            ]
        else:
            self.decoder = [
                MlpDecoderLayer(self.params, f"mlpdec{t}", dims[t], dims[t + 1],
                                activate=t < cfg.t_layers - 1)
                for t in range(cfg.t_layers)
            ]

    def _check(self, sample: ChannelSample) -> None:
        if sample.config.n_t != self.n_t:
            raise ContractError(
                f"model built for n_t={self.n_t}, sample has n_t={sample.config.n_t}"
            )

    def forward_tensors(self, sample: ChannelSample) -> tuple[Tensor, Tensor]:
        """Differentiable forward pass; returns (Re W, Im W), each K x N_T."""
        self._check(sample)
        h = preprocess(sample, self.w0)
        for layer in self.encoder:
            h = layer.forward(h)
        for layer in self.decoder:
            h = layer.forward(h)
        return postprocess(h, self.n_t, sample.config.p_max)

    def forward(self, sample: ChannelSample) -> BeamformingMatrix:
        wr, wi = self.forward_tensors(sample)
        return BeamformingMatrix(wr.data + 1j * wi.data)


class PlainMlpModel:
    """Flattened feed-forward benchmark; K is baked into the weight shapes."""

    kind = "plain_mlp"

    def __init__(self, n_t: int, k: int, hidden_dims: tuple = (128, 128)):
        self.n_t = n_t
        self.k = k
        self.hidden_dims = tuple(hidden_dims)
        self.params = ParameterSet()
        dims = (2 * k * n_t,) + self.hidden_dims + (2 * k * n_t,)
        self.layers = []
        for i in range(len(dims) - 1):
            w = self.params.add(f"fc{i}.w", (dims[i], dims[i + 1]))
            b = self.params.add(f"fc{i}.b", (dims[i + 1],), kind="zeros")
            self.layers.append((w, b, i < len(dims) - 2))

    def forward_tensors(self, sample: ChannelSample) -> tuple[Tensor, Tensor]:
        if sample.config.n_t != self.n_t or sample.config.k != self.k:
            raise ShapeError(
                f"plain MLP trained for (n_t={self.n_t}, k={self.k}) cannot accept "
                f"(n_t={sample.config.n_t}, k={sample.config.k}); this baseline is not scalable"
            )
        x = ad.reshape(Tensor(sample_features(sample)), (1, 2 * self.k * self.n_t))
        for w, b, activate in self.layers:
            x = ad.add_bias(ad.matmul(x, w), b)
            if activate:
                x = ad.relu(x)
        f = ad.reshape(x, (self.k, 2 * self.n_t))
        return postprocess(f, self.n_t, sample.config.p_max)

    def forward(self, sample: ChannelSample) -> BeamformingMatrix:
        wr, wi = self.forward_tensors(sample)
        return BeamformingMatrix(wr.data + 1j * wi.data)


# ---- checkpoint file format ----------------------------------------------------

def _config_kv(model, extra: dict | None) -> str:
    lines = [f"model_kind = {model.kind}", f"n_t = {model.n_t}"]
    if model.kind == "encdec":
        cfg = model.config
        lines += [
            f"d = {cfg.d}",
            f"d_ff = {cfg.d_ff}",
            f"l_layers = {cfg.l_layers}",
            f"t_layers = {cfg.t_layers}",
            "heads = " + ",".join(str(m) for m in cfg.heads),
            "kan_hidden_dims = " + ",".join(str(v) for v in cfg.kan_hidden_dims),
            f"spline_count = {cfg.spline_count}",
            f"spline_degree = {cfg.spline_degree}",
            f"grid_lo = {cfg.grid_range[0]!r}",
            f"grid_hi = {cfg.grid_range[1]!r}",
            f"encoder_kind = {cfg.encoder_kind}",
            f"decoder_kind = {cfg.decoder_kind}",
            f"conventional_residual = {str(cfg.conventional_residual).lower()}",
        ]
    else:
        lines += [
            f"k = {model.k}",
            "hidden_dims = " + ",".join(str(v) for v in model.hidden_dims),
        ]
    for key in sorted(extra or {}):
        lines.append(f"meta.{key} = {extra[key]}")
    return "\n".join(lines) + "\n"


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Write parameters plus model config; round-trips bit-exactly."""
    entries = model.params.items()
    manifest = bytearray()
    blocks = []
    offset = 0
    for name, t in entries:
        name_b = name.encode()
        manifest += struct.pack("<H", len(name_b)) + name_b
        manifest += struct.pack("<B", t.data.ndim)
        manifest += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        manifest += struct.pack("<Q", offset)
        block = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        blocks.append(block)
        offset += len(block)
    config_b = _config_kv(model, extra).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        f.write(manifest)
        f.write(struct.pack("<Q", offset))
        for block in blocks:
            f.write(block)
        f.write(struct.pack("<I", len(config_b)))
        f.write(config_b)


def load_checkpoint(path):
    """Rebuild the model stored at path. Returns (model, meta dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError(f"truncated checkpoint header at offset {len(blob)}")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0")
    version, n_entries = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    pos = 12
    manifest = []
    try:
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode()
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (off,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            manifest.append((name, shape, off))
        (data_len,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        data_start = pos
        pos += data_len
        (config_len,) = struct.unpack_from("<I", blob, pos)
        config_b = blob[pos + 4:pos + 4 + config_len]
        if len(config_b) != config_len:
            raise FormatError(f"truncated config section at offset {pos + 4}")
    except struct.error as e:
        raise FormatError(f"truncated checkpoint at offset {pos}: {e}") from None
    kv = _parse_kv(config_b.decode())
    meta = {k[len("meta."):]: v for k, v in kv.items() if k.startswith("meta.")}
    n_t = int(kv["n_t"])
    if kv["model_kind"] == "encdec":
        cfg = ModelConfig(
            d=int(kv["d"]),
            d_ff=int(kv["d_ff"]),
            l_layers=int(kv["l_layers"]),
            t_layers=int(kv["t_layers"]),
            heads=tuple(int(v) for v in kv["heads"].split(",")),
            kan_hidden_dims=tuple(int(v) for v in kv["kan_hidden_dims"].split(",") if v),
            spline_count=int(kv["spline_count"]),
            spline_degree=int(kv["spline_degree"]),
            grid_range=(float(kv["grid_lo"]), float(kv["grid_hi"])),
            encoder_kind=kv["encoder_kind"],
            decoder_kind=kv["decoder_kind"],
            conventional_residual=kv["conventional_residual"] == "true",
        )
        model = BeamformingModel(n_t, cfg)
    elif kv["model_kind"] == "plain_mlp":
        model = PlainMlpModel(n_t, int(kv["k"]),
                              tuple(int(v) for v in kv["hidden_dims"].split(",")))
    else:
        raise FormatError(f"unknown model_kind {kv['model_kind']!r} in config section")
    state = {}
    for name, shape, off in manifest:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=data_start + off)
        state[name] = arr.reshape(shape)
    model.params.load_state(state)
    return model, meta
