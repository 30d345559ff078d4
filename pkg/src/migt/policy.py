"""Memory Instance Gated Transformer policy/value network.

Pipeline per state (window x assets x features):

    flatten each day -> FC embedding -> + sinusoidal position (relative to newest day)
    -> Gated Instance Attention block (instance norm -> causal multi-head attention over
       [memory; window] -> ReLU -> LGU fan-in; instance norm -> PW-MLP -> LGU fan-in)
    -> last position -> action logits head (n+1) and value head (1)

Memory caches raw day embeddings from earlier segments (stop-gradient); positions are
re-encoded on every call so carried memory reproduces a one-shot pass exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("full", "no_norm", "no_gating", "no_transformer")
NORM_EPS = 1e-5
GATE_BIAS_INIT = 2.0
CHECKPOINT_MAGIC = b"MIGTCKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class StageError(FloatingPointError):
    """Non-finite activations; ``stage`` names the network stage that produced them."""

    def __init__(self, stage: str):
        self.stage = stage
        super().__init__(f"non-finite values after stage '{stage}'")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    heads: int = 4
    pw_hidden: int = 32
    memory: int = 64

    def __post_init__(self):
        for name in ("d_model", "heads", "pw_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.memory < 0:
            raise ConfigError("memory must be >= 0")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by heads {self.heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class PolicyConfig:
    n_assets: int
    n_features: int
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_assets < 1 or self.n_features < 1:
            raise ConfigError("n_assets and n_features must be >= 1")

    @property
    def n_actions(self) -> int:
        return self.n_assets + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PolicyConfig:
        return cls(d["n_assets"], d["n_features"], AttentionConfig(**d["attention"]), d["variant"])


# ---------------------------------------------------------------------------
# memory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryTensor:
    """Up to ``capacity`` cached d-vectors, oldest first. Never carries gradients."""

    states: np.ndarray
    capacity: int

    @classmethod
    def empty(cls, d_model: int, capacity: int) -> MemoryTensor:
        return cls(np.zeros((0, d_model)), capacity)

    def __len__(self) -> int:
        return self.states.shape[0]

    def push(self, rows: np.ndarray) -> MemoryTensor:
        if self.capacity == 0:
            return self
        merged = np.concatenate([self.states, np.asarray(rows, dtype=np.float64)], axis=0)
        return MemoryTensor(merged[-self.capacity:].copy(), self.capacity)


def pad_memories(memories: Sequence[MemoryTensor], d_model: int, capacity: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad memories into a (B, capacity, d) array plus a validity mask."""
    out = np.zeros((len(memories), capacity, d_model))
    mask = np.zeros((len(memories), capacity), dtype=bool)
    for b, m in enumerate(memories):
        k = len(m)
        if k:
            out[b, capacity - k:] = m.states
            mask[b, capacity - k:] = True
    return out, mask


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def param_shapes(config: PolicyConfig) -> dict[str, tuple[int, ...]]:
    a = config.attention
    d, n_in = a.d_model, config.n_assets * config.n_features
    shapes = {"embed.w": (n_in, d), "embed.b": (d,)}
    if config.variant != "no_transformer":
        shapes.update({
            "norm1.gain": (d,), "norm1.bias": (d,),
            "attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d),
            "attn.wo": (d, d), "attn.bo": (d,),
            "norm2.gain": (d,), "norm2.bias": (d,),
        })
        if config.variant != "no_gating":
            for g in ("lgu1", "lgu2"):
                shapes.update({f"{g}.wz": (d, d), f"{g}.uz": (d, d), f"{g}.wg": (d, d),
                               f"{g}.ug": (d, d), f"{g}.bg": (d,)})
    shapes.update({
        "pw.w1": (d, a.pw_hidden), "pw.b1": (a.pw_hidden,),
        "pw.w2": (a.pw_hidden, d), "pw.b2": (d,),
        "pi.w1": (d, d), "pi.b1": (d,), "pi.w2": (d, config.n_actions), "pi.b2": (config.n_actions,),
        "v.w1": (d, d), "v.b1": (d,), "v.w2": (d, 1), "v.b2": (1,),
    })
    return shapes


def init_params(config: PolicyConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    gains = {
        "embed.w": 1.0, "attn.wq": 1.0, "attn.wk": 1.0, "attn.wv": 1.0, "attn.wo": 1.0,
        "pw.w1": math.sqrt(2.0), "pw.w2": 1.0,
        "pi.w1": math.sqrt(2.0), "pi.w2": 0.01, "v.w1": math.sqrt(2.0), "v.w2": 1.0,
    }
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[1]
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif leaf == "bg":
            value = np.full(shape, GATE_BIAS_INIT)
        elif len(shape) == 1:
            value = np.zeros(shape)
        elif name.startswith("lgu"):
            # small gate weights keep the gate near its bias-set operating point
            value = orthogonal(rng, *shape, gain=0.25)
        else:
            value = orthogonal(rng, *shape, gain=gains[name])
        params[name] = Tensor(value, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else y + b


def instance_norm(x, gain=None, bias=None, eps: float = NORM_EPS) -> Tensor:
    """Standardise each instance (row) over its feature axis, then apply gain/bias."""
    mu, var = ad.mean_var(x, axis=-1)
    y = (x - mu) / ad.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def attention_weights(q, k, mask: np.ndarray | None = None) -> Tensor:
    d_k = q.shape[-1]
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) / math.sqrt(d_k)
    return ad.softmax(scores, axis=-1, mask=mask)


def scaled_dot_attention(q, k, v, mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V."""
    if k.shape[-2] == 0:
        raise ValueError("attention over zero keys")
    return ad.matmul(attention_weights(q, k, mask), v)


def causal_mask(t: int, m: int, memory_mask: np.ndarray | None = None) -> np.ndarray:
    """(…, t, m+t) boolean mask: query i sees every valid memory slot and window positions <= i."""
    window = np.tril(np.ones((t, t), dtype=bool))
    if memory_mask is None:
        mem = np.ones((t, m), dtype=bool)
        return np.concatenate([mem, window], axis=1)
    b = memory_mask.shape[0]
    mem = np.broadcast_to(memory_mask[:, None, :], (b, t, m))
    return np.concatenate([mem, np.broadcast_to(window, (b, t, t))], axis=2)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return ad.transpose(ad.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def multi_head_attention(x, memory, params: dict, heads: int, memory_mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Causal multi-head attention; queries from ``x`` (B,T,d), keys/values from [memory; x]."""
    x = ad.as_tensor(x)
    memory = ad.as_tensor(memory)
    t, m = x.shape[1], memory.shape[1]
    seq = ad.concat([memory, x], axis=1) if m else x
    q = split_heads(linear(x, params["attn.wq"]), heads)
    k = split_heads(linear(seq, params["attn.wk"]), heads)
    v = split_heads(linear(seq, params["attn.wv"]), heads)
    mask = causal_mask(t, m, memory_mask)
    if mask.ndim == 3:
        mask = mask[:, None]
    weights = attention_weights(q, k, mask)
    out = linear(merge_heads(ad.matmul(weights, v)), params["attn.wo"], params["attn.bo"])
    return (out, weights) if return_weights else out


def lgu(x, y, params: dict, prefix: str) -> Tensor:
    """Lite gate unit: z = s(W_z y + U_z x - b_g); h = s(W_g y + U_g (z*x)); (1-z)*x + z*h."""
    p = {k: params[f"{prefix}.{k}"] for k in ("wz", "uz", "wg", "ug", "bg")}
    z = ad.sigmoid(ad.matmul(y, p["wz"]) + ad.matmul(x, p["uz"]) - p["bg"])
    h = ad.sigmoid(ad.matmul(y, p["wg"]) + ad.matmul(z * x, p["ug"]))
    return (1.0 - z) * x + z * h


def pw_mlp(x, params: dict) -> Tensor:
    """Position-wise d -> hidden -> d with ReLU between."""
    return linear(ad.relu(linear(x, params["pw.w1"], params["pw.b1"])), params["pw.w2"], params["pw.b2"])


def gia_block(x, memory, params: dict, heads: int, variant: str = "full",
              memory_mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Gated Instance Attention block over x (B,T,d) with memory (B,M,d).

    Returns the block output and the new memory contents (the block inputs, detached).
    """
    x = ad.as_tensor(x)
    memory = ad.as_tensor(memory)
    norm = variant != "no_norm"
    gated = variant != "no_gating"
    m = memory.shape[1]
    seq = ad.concat([memory, x], axis=1) if m else x
    if norm:
        seq = instance_norm(seq, params["norm1.gain"], params["norm1.bias"])
    y = ad.relu(multi_head_attention(seq[:, m:], seq[:, :m], params, heads, memory_mask))
    h = lgu(x, y, params, "lgu1") if gated else x + y
    inner = instance_norm(h, params["norm2.gain"], params["norm2.bias"]) if norm else h
    y2 = pw_mlp(inner, params)
    out = lgu(h, y2, params, "lgu2") if gated else h + y2
    new_memory = np.concatenate([memory.data, x.data], axis=1)
    return out, new_memory


def sinusoidal(positions: np.ndarray, d: int) -> np.ndarray:
    i = np.arange(d // 2 + d % 2)
    freq = 1.0 / (10000.0 ** (2 * i / d))
    ang = positions[:, None] * freq[None, :]
    pe = np.zeros((len(positions), d))
    pe[:, 0::2] = np.sin(ang)[:, : (d + 1) // 2]
    pe[:, 1::2] = np.cos(ang)[:, : d // 2]
    return pe


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, n+1)
    value: Tensor  # (B,)
    embeddings: np.ndarray  # (B, T, d) raw day embeddings, for memory updates


def _check(stage: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise StageError(stage)
    return t


class MIGTPolicy:
    def __init__(self, config: PolicyConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = param_shapes(config)
        if set(self.params) != set(expected):
            raise ConfigError(f"parameter names do not match variant {config.variant}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def d_model(self) -> int:
        return self.config.attention.d_model

    @property
    def memory_capacity(self) -> int:
        return self.config.attention.memory

    def new_memory(self) -> MemoryTensor:
        return MemoryTensor.empty(self.d_model, self.memory_capacity)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in sorted(self.params.items())}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {arrays[name].shape}, expected {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64, copy=True)

    def copy(self) -> MIGTPolicy:
        return MIGTPolicy(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    def forward(self, states, memory: np.ndarray | None = None, memory_mask: np.ndarray | None = None,
                params: dict[str, Tensor] | None = None) -> ForwardOutput:
        """Batched forward. ``states`` is (B, T, n, F); ``memory`` is (B, M, d) raw embeddings."""
        p = self.params if params is None else params
        cfg = self.config
        x = np.asarray(states.data if isinstance(states, Tensor) else states, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        b, t, n, f = x.shape
        if (n, f) != (cfg.n_assets, cfg.n_features):
            raise ConfigError(f"state has {n} assets x {f} features; policy expects "
                              f"{cfg.n_assets} x {cfg.n_features}")
        if not np.all(np.isfinite(x)):
            raise StageError("input")
        flat = states.reshape((b, t, n * f)) if isinstance(states, Tensor) else Tensor(x.reshape(b, t, n * f))
        emb = _check("embedding", linear(flat, p["embed.w"], p["embed.b"]))
        d = self.d_model

        if cfg.variant == "no_transformer":
            hidden = _check("pw_mlp", pw_mlp(emb, p))
        else:
            if memory is None:
                memory = np.zeros((b, 0, d))
            m = memory.shape[1]
            pos = np.arange(-(m + t - 1), 1, dtype=np.float64)
            pe = sinusoidal(pos, d)
            mem_in = Tensor(memory + pe[:m]) if m else Tensor(np.zeros((b, 0, d)))
            x_in = emb + pe[m:]
            hidden, _ = gia_block(x_in, mem_in, p, cfg.attention.heads, cfg.variant,
                                  memory_mask if m else None)
            _check("gia_block", hidden)
        last = hidden[:, -1, :]
        logits = linear(ad.relu(linear(last, p["pi.w1"], p["pi.b1"])), p["pi.w2"], p["pi.b2"])
        value = linear(ad.relu(linear(last, p["v.w1"], p["v.b1"])), p["v.w2"], p["v.b2"])
        _check("logits", logits)
        _check("value", value)
        return ForwardOutput(logits, ad.reshape(value, (b,)), emb.data)

    def step(self, state: np.ndarray, memory: MemoryTensor | None = None,
             advance: int | None = None) -> tuple[np.ndarray, float, MemoryTensor]:
        """Single-state inference: (logits, value, new memory).

        ``advance`` leading window rows are pushed into memory (default: the whole window).
        """
        memory = memory if memory is not None else self.new_memory()
        mem = memory.states[None] if len(memory) else None
        with ad.no_grad():
            out = self.forward(state[None] if state.ndim == 3 else state, mem,
                               np.ones((1, len(memory)), dtype=bool) if len(memory) else None)
        t = out.embeddings.shape[1]
        k = t if advance is None else advance
        new_mem = memory if self.variant == "no_transformer" else memory.push(out.embeddings[0, :k])
        return out.logits.data[0], float(out.value.data[0]), new_mem


def policy_forward(state: np.ndarray, memory: MemoryTensor | None, policy: MIGTPolicy):
    """(logits length n+1, value, new memory) for one state with the policy's variant."""
    return policy.step(state, memory)


# ---------------------------------------------------------------------------
# checkpoints: magic | u32 version | u32 header length | JSON header | float64 payload
# ---------------------------------------------------------------------------


def save_checkpoint(policy: MIGTPolicy, path: str | Path, extra: dict | None = None) -> None:
    arrays = policy.state_dict()
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {"config": policy.config.to_dict(), "tensors": entries, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, expect: PolicyConfig | None = None) -> tuple[MIGTPolicy, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    config = PolicyConfig.from_dict(header["config"])
    if expect is not None and expect != config:
        raise CheckpointError(f"{path}: checkpoint config {config} does not match {expect}")
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    shapes = param_shapes(config)
    arrays = {}
    for e in header["tensors"]:
        name, shape = e["name"], tuple(e["shape"])
        if shapes.get(name) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, config needs {shapes.get(name)}")
        size = int(np.prod(shape))
        chunk = payload[e["offset"]:e["offset"] + size]
        if chunk.size != size:
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = chunk.reshape(shape).astype(np.float64)
    if set(arrays) != set(shapes):
        raise CheckpointError(f"{path}: missing tensors {sorted(set(shapes) - set(arrays))}")
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return MIGTPolicy(config, params), header.get("extra", {})
