"""Inference-only layered encoder-decoder with a prediction head at every layer.

Each decoder layer is pre-norm (RMS) with residual connections::

    h = x + Wo_self  . MHA(norm1(x) ; cached keys/values of earlier tokens)
    a = h + Wo_cross . MHA(norm2(h) ; encoder states)
    d = a + W2 . relu(W1 . norm3(a))

Self-attention keys/values for token ``s`` at layer ``i`` are projections of
``norm1_i(d_s^{i-1})`` with layer ``i``'s own matrices.  All layers share one
output head, ``logits = W_head @ d``.

Layer indices are 1-based in the public API (``1 <= i <= L``) and in tensor
names (``dec.3.self.wk``).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

DTYPE = np.float32
EOS = 0
BOS = 0
RMS_EPS = 1e-6

EXIT_W = "exit.w"
EXIT_B = "exit.b"

MAGIC = b"EEXW"
FORMAT_VERSION = 1


class WeightsError(ValueError):
    """Raised for malformed or inconsistent weight containers."""


class CacheError(RuntimeError):
    """A decoder step found holes in the key/value cache."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    vocab_size: int = 32
    d_model: int = 32
    d_k: int = 16
    d_v: int = 16
    d_ff: int = 64
    num_heads: int = 2
    max_len: int = 16

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def qk_width(self) -> int:
        return self.d_k * self.num_heads

    @property
    def v_width(self) -> int:
        return self.d_v * self.num_heads

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {k: int(v) for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _attn_shapes(prefix, cfg):
    D = cfg.d_model
    return {
        f"{prefix}.wq": (cfg.qk_width, D),
        f"{prefix}.wk": (cfg.qk_width, D),
        f"{prefix}.wv": (cfg.v_width, D),
        f"{prefix}.wo": (D, cfg.v_width),
    }


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor directory (name -> shape) implied by a config, in file order."""
    D, F = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.vocab_size, D)}
    for i in range(1, cfg.num_layers + 1):
        p = f"enc.{i}"
        shapes.update(_attn_shapes(f"{p}.attn", cfg))
        shapes[f"{p}.norm1"] = (D,)
        shapes[f"{p}.norm2"] = (D,)
        shapes[f"{p}.ff.w1"] = (F, D)
        shapes[f"{p}.ff.w2"] = (D, F)
    shapes["enc.final_norm"] = (D,)
    for i in range(1, cfg.num_layers + 1):
        p = f"dec.{i}"
        shapes.update(_attn_shapes(f"{p}.self", cfg))
        shapes.update(_attn_shapes(f"{p}.cross", cfg))
        shapes[f"{p}.norm1"] = (D,)
        shapes[f"{p}.norm2"] = (D,)
        shapes[f"{p}.norm3"] = (D,)
        shapes[f"{p}.ff.w1"] = (F, D)
        shapes[f"{p}.ff.w2"] = (D, F)
    shapes["head"] = (cfg.vocab_size, D)
    shapes[EXIT_W] = (D,)
    shapes[EXIT_B] = (1,)
    return shapes


class Weights:
    """Named float32 tensors for one model.  Read-only once constructed."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        shapes = expected_shapes(config)
        missing = [n for n in shapes if n not in tensors]
        if missing:
            raise WeightsError(f"missing tensor {missing[0]!r}")
        extra = sorted(set(tensors) - set(shapes))
        if extra:
            raise WeightsError(f"unexpected tensor {extra[0]!r}")
        frozen = {}
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(tensors[name], dtype=DTYPE)
            if arr.shape != shape:
                raise WeightsError(
                    f"shape mismatch for tensor {name!r}: expected {shape}, got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise WeightsError(f"non-finite values in tensor {name!r}")
            arr = arr.copy()
            arr.setflags(write=False)
            frozen[name] = arr
        self.config = config
        self.tensors = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def exit_classifier(self) -> tuple[np.ndarray, float]:
        return self.tensors[EXIT_W], float(self.tensors[EXIT_B][0])

    def with_exit_classifier(self, w, b) -> "Weights":
        tensors = dict(self.tensors)
        tensors[EXIT_W] = np.asarray(w, dtype=DTYPE)
        tensors[EXIT_B] = np.asarray([b], dtype=DTYPE)
        return Weights(self.config, tensors)

    def backbone_bytes(self) -> bytes:
        """Concatenated bytes of every tensor except the exit classifier."""
        return b"".join(
            arr.tobytes() for name, arr in self.tensors.items() if not name.startswith("exit.")
        )


def init_weights(config: ModelConfig, seed: int = 0, scale: float = 0.1) -> Weights:
    """Seeded uniform(-scale, scale) init; norm gains start at 1 and the exit bias at 0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if "norm" in name:
            tensors[name] = np.ones(shape, dtype=DTYPE)
        elif name == EXIT_B:
            tensors[name] = np.zeros(shape, dtype=DTYPE)
        else:
            tensors[name] = rng.uniform(-scale, scale, size=shape).astype(DTYPE)
    return Weights(config, tensors)


# --------------------------------------------------------------------------
# Weight container
# --------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..3   magic b"EEXW"
#   bytes 4..7   uint32 format version (1)
#   bytes 8..15  uint64 header length H
#   next H bytes UTF-8 JSON header:
#       {"config": {...ModelConfig fields...},
#        "tensors": [{"name": str, "shape": [int], "offset": int}, ...]}
#   remaining    raw float32 data; each offset is relative to the data start


def save_weights(weights: Weights, path) -> None:
    directory = []
    offset = 0
    for name, arr in weights.tensors.items():
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = json.dumps(
        {"config": asdict(weights.config), "tensors": directory}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for arr in weights.tensors.values():
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_weights(path, config: ModelConfig | None = None) -> Weights:
    """Read a weight container; ``config`` (if given) must match the file's."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise WeightsError(f"{path}: not a weight container (bad magic)")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise WeightsError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
        file_config = ModelConfig.from_dict(header["config"])
        directory = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise WeightsError(f"{path}: malformed header ({exc})") from exc
    if config is not None and config != file_config:
        diffs = [
            k for k in config.__dataclass_fields__ if getattr(config, k) != getattr(file_config, k)
        ]
        raise WeightsError(f"{path}: config mismatch in field(s) {', '.join(diffs)}")
    data = raw[16 + header_len :]
    entries = {e["name"]: e for e in directory}
    tensors = {}
    for name, shape in expected_shapes(file_config).items():
        entry = entries.get(name)
        if entry is None:
            raise WeightsError(f"{path}: missing tensor {name!r}")
        if tuple(entry["shape"]) != shape:
            raise WeightsError(
                f"{path}: shape mismatch for tensor {name!r}: "
                f"expected {shape}, got {tuple(entry['shape'])}"
            )
        start = int(entry["offset"])
        nbytes = math.prod(shape) * 4
        if start < 0 or start + nbytes > len(data):
            raise WeightsError(f"{path}: truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=math.prod(shape), offset=start).reshape(shape)
    return Weights(file_config, tensors)


# --------------------------------------------------------------------------
# Forward pieces
# --------------------------------------------------------------------------


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + RMS_EPS) * gain).astype(DTYPE)


def positional_encoding(position: int, d_model: int) -> np.ndarray:
    half = (d_model + 1) // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = position * freqs
    pe = np.empty(2 * half)
    pe[0::2] = np.sin(angles)
    pe[1::2] = np.cos(angles)
    return pe[:d_model].astype(DTYPE)


def embed(weights: Weights, token: int, position: int) -> np.ndarray:
    cfg = weights.config
    if not 0 <= token < cfg.vocab_size:
        raise ValueError(f"token id {token} out of range [0, {cfg.vocab_size})")
    return weights["embedding"][token] + positional_encoding(position, cfg.d_model)


def attention(query: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """softmax(q K^T / sqrt(d_k)) V for one already-projected query."""
    query = np.asarray(query)
    keys = np.atleast_2d(keys)
    values = np.atleast_2d(values)
    if query.ndim != 1:
        raise ValueError(f"query must be a vector, got shape {query.shape}")
    if keys.shape[0] < 1:
        raise ValueError("attention needs at least one key")
    if keys.shape[1] != query.shape[0]:
        raise ValueError(f"key width {keys.shape[1]} != query width {query.shape[0]}")
    if values.shape[0] != keys.shape[0]:
        raise ValueError(f"{values.shape[0]} values for {keys.shape[0]} keys")
    scores = keys @ query / np.sqrt(np.float32(query.shape[0]))
    scores = scores - scores.max()
    probs = np.exp(scores)
    probs /= probs.sum()
    return (probs @ values).astype(DTYPE)


def _multihead(cfg: ModelConfig, q, K, V):
    out = np.empty(cfg.v_width, dtype=DTYPE)
    for h in range(cfg.num_heads):
        qs = slice(h * cfg.d_k, (h + 1) * cfg.d_k)
        vs = slice(h * cfg.d_v, (h + 1) * cfg.d_v)
        out[vs] = attention(q[qs], K[:, qs], V[:, vs])
    return out


def _feed_forward(weights, prefix, x):
    hidden = np.maximum(weights[f"{prefix}.ff.w1"] @ x, 0)
    return weights[f"{prefix}.ff.w2"] @ hidden


def encode(weights: Weights, prompt) -> np.ndarray:
    """Encoder states, shape (p, d_model)."""
    cfg = weights.config
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    x = np.stack([embed(weights, tok, pos) for pos, tok in enumerate(prompt)])
    for i in range(1, cfg.num_layers + 1):
        p = f"enc.{i}"
        xn = rms_norm(x, weights[f"{p}.norm1"])
        Q = xn @ weights[f"{p}.attn.wq"].T
        K = xn @ weights[f"{p}.attn.wk"].T
        V = xn @ weights[f"{p}.attn.wv"].T
        mixed = np.stack([_multihead(cfg, Q[s], K, V) for s in range(len(prompt))])
        x = x + mixed @ weights[f"{p}.attn.wo"].T
        xn = rms_norm(x, weights[f"{p}.norm2"])
        x = x + np.maximum(xn @ weights[f"{p}.ff.w1"].T, 0) @ weights[f"{p}.ff.w2"].T
    return rms_norm(x, weights["enc.final_norm"])


def cross_kv(weights: Weights, layer: int, encoder_states: np.ndarray):
    p = f"dec.{layer}.cross"
    return encoder_states @ weights[f"{p}.wk"].T, encoder_states @ weights[f"{p}.wv"].T


def self_kv(weights: Weights, layer: int, source: np.ndarray):
    """Self-attention K/V of layer ``layer`` for input state(s) ``source``."""
    p = f"dec.{layer}"
    xn = rms_norm(source, weights[f"{p}.norm1"])
    return xn @ weights[f"{p}.self.wk"].T, xn @ weights[f"{p}.self.wv"].T


class KVCache:
    """Per-layer self-attention keys/values, indexed by token position.

    An entry is *missing*, *concrete* (projected already) or *lazy* (only the
    hidden state to project from is stored; the owning layer projects it on
    first use).  ``proj_layer`` records which layer's matrices produced each
    concrete entry.
    """

    MISSING, CONCRETE, LAZY = 0, 1, 2

    def __init__(self, config: ModelConfig):
        L, N = config.num_layers, config.max_len
        self.config = config
        self.keys = np.zeros((L + 1, N, config.qk_width), dtype=DTYPE)
        self.values = np.zeros((L + 1, N, config.v_width), dtype=DTYPE)
        self.sources = np.zeros((L + 1, N, config.d_model), dtype=DTYPE)
        self.state = np.zeros((L + 1, N), dtype=np.int8)
        self.proj_layer = np.zeros((L + 1, N), dtype=np.int16)

    def put(self, layer, pos, key, value, proj_layer):
        self.keys[layer, pos] = key
        self.values[layer, pos] = value
        self.state[layer, pos] = self.CONCRETE
        self.proj_layer[layer, pos] = proj_layer

    def put_lazy(self, layer, pos, source):
        self.sources[layer, pos] = source
        self.state[layer, pos] = self.LAZY
        self.proj_layer[layer, pos] = 0

    def materialize(self, weights: Weights, layer: int, upto: int) -> int:
        """Project every lazy entry below ``upto`` at ``layer``; returns how many."""
        idx = np.flatnonzero(self.state[layer, :upto] == self.LAZY)
        if idx.size:
            k, v = self_kv(weights, layer, self.sources[layer, idx])
            self.keys[layer, idx] = k
            self.values[layer, idx] = v
            self.state[layer, idx] = self.CONCRETE
            self.proj_layer[layer, idx] = layer
        return int(idx.size)


def decoder_step(
    weights: Weights,
    layer: int,
    input_state: np.ndarray,
    cache: KVCache,
    cross: tuple[np.ndarray, np.ndarray],
    pos: int,
) -> np.ndarray:
    """Compute d_t^i from d_t^{i-1}; writes token ``pos``'s K/V at ``layer``."""
    cfg = weights.config
    if not 1 <= layer <= cfg.num_layers:
        raise ValueError(f"layer {layer} outside 1..{cfg.num_layers}")
    holes = np.flatnonzero(cache.state[layer, :pos] == KVCache.MISSING)
    if holes.size:
        raise CacheError(f"layer {layer}: no K/V for earlier token(s) {holes.tolist()}")
    cache.materialize(weights, layer, pos)

    p = f"dec.{layer}"
    x = input_state
    xn = rms_norm(x, weights[f"{p}.norm1"])
    q = weights[f"{p}.self.wq"] @ xn
    cache.put(layer, pos, weights[f"{p}.self.wk"] @ xn, weights[f"{p}.self.wv"] @ xn, layer)
    K = cache.keys[layer, : pos + 1]
    V = cache.values[layer, : pos + 1]
    h = x + weights[f"{p}.self.wo"] @ _multihead(cfg, q, K, V)

    hn = rms_norm(h, weights[f"{p}.norm2"])
    q = weights[f"{p}.cross.wq"] @ hn
    a = h + weights[f"{p}.cross.wo"] @ _multihead(cfg, q, *cross)

    an = rms_norm(a, weights[f"{p}.norm3"])
    return (a + _feed_forward(weights, p, an)).astype(DTYPE)


def logits(weights: Weights, layer: int, d: np.ndarray) -> np.ndarray:
    """Shared output head; ``layer`` is validated but does not change the result."""
    if not 1 <= layer <= weights.config.num_layers:
        raise ValueError(f"layer {layer} outside 1..{weights.config.num_layers}")
    return weights["head"] @ d


def layer_loss_weights(num_layers: int) -> np.ndarray:
    i = np.arange(1, num_layers + 1, dtype=np.float64)
    return i / i.sum()


def aggregate_layer_losses(per_layer_nll) -> float:
    """Depth-weighted average of per-layer losses, weight of layer i proportional to i."""
    losses = np.asarray(per_layer_nll, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("need a non-empty list of per-layer losses")
    if np.any(losses < 0):
        raise ValueError("per-layer losses must be non-negative")
    # divide once at the end so simple cases come out exact
    i = np.arange(1, losses.size + 1)
    return float(math.fsum(i * losses) / i.sum())
