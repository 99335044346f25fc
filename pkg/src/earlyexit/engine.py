"""Adaptive-depth greedy decoding with per-token early exits.

A backend exposes ``num_layers``, ``max_len``, ``config`` (used for cost
accounting), ``classifier`` (``(w, b)`` or ``None``) and ``start(prompt, mode)``
returning a session.  A session walks one generation: ``hidden(i)`` computes
layer ``i`` of the current step (lower layers first), ``logits(i)`` applies
the shared head, ``commit(token, exit_layer)`` closes the step.
"""

from __future__ import annotations

import enum
import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .confidence import (
    ConfidenceKind,
    ThresholdPolicy,
    argmax,
    classifier_confidence,
    decayed_threshold,
    oracle_confidence,
    softmax_response,
    state_saturation,
)
from .model import (
    BOS,
    EOS,
    KVCache,
    ModelConfig,
    Weights,
    cross_kv,
    decoder_step,
    embed,
    encode,
    logits,
)


class PropagationMode(str, enum.Enum):
    COPY_HIDDEN = "copy-hidden"
    COPY_KV = "copy-kv"
    # debug probe: every later layer reads token s through d_s^1
    FIRST_LAYER = "first-layer"


def propagate_state(cache: KVCache, pos: int, exit_layer: int, states, mode) -> None:
    """Fill the cache of layers above ``exit_layer`` for token ``pos``.

    ``states[k]`` is the token's hidden state after layer ``k`` (``states[0]``
    is its input embedding).  ``copy-hidden`` queues ``d^j`` for lazy
    projection by each skipped layer's own K/V matrices; ``copy-kv`` copies
    layer ``j``'s projected K/V verbatim.
    """
    mode = PropagationMode(mode)
    L = cache.config.num_layers
    if mode is PropagationMode.FIRST_LAYER:
        for k in range(2, L + 1):
            cache.put_lazy(k, pos, states[1])
        return
    if exit_layer >= L:
        return
    j = exit_layer
    for k in range(j + 1, L + 1):
        if mode is PropagationMode.COPY_HIDDEN:
            cache.put_lazy(k, pos, states[j])
        else:
            cache.put(k, pos, cache.keys[j, pos], cache.values[j, pos], cache.proj_layer[j, pos])


class ModelSession:
    def __init__(self, backend: "ModelBackend", prompt, mode):
        self.weights = backend.weights
        self.mode = PropagationMode(mode)
        cfg = self.weights.config
        enc = encode(self.weights, prompt)
        self.cross = [None] + [cross_kv(self.weights, i, enc) for i in range(1, cfg.num_layers + 1)]
        self.cache = KVCache(cfg)
        self.t = 0
        self.layers_computed = 0
        self._begin(BOS)

    def _begin(self, token):
        self.states = {0: embed(self.weights, token, self.t)}
        self._logits = {}

    def hidden(self, layer: int) -> np.ndarray:
        if layer not in self.states:
            below = self.hidden(layer - 1)
            self.states[layer] = decoder_step(
                self.weights, layer, below, self.cache, self.cross[layer], self.t
            )
            self.layers_computed += 1
        return self.states[layer]

    def logits(self, layer: int) -> np.ndarray:
        if layer not in self._logits:
            self._logits[layer] = logits(self.weights, layer, self.hidden(layer))
        return self._logits[layer]

    def commit(self, token: int, exit_layer: int) -> None:
        propagate_state(self.cache, self.t, exit_layer, self.states, self.mode)
        self.t += 1
        if self.t < self.weights.config.max_len:
            self._begin(token)


class ModelBackend:
    def __init__(self, weights: Weights):
        self.weights = weights
        self.config = weights.config
        self.num_layers = weights.config.num_layers
        self.max_len = weights.config.max_len
        self.classifier = weights.exit_classifier

    def start(self, prompt, mode=PropagationMode.COPY_HIDDEN) -> ModelSession:
        return ModelSession(self, prompt, mode)


# --------------------------------------------------------------------------
# Cost model
# --------------------------------------------------------------------------


def layer_flops(config: ModelConfig, prompt_len: float | None = None) -> float:
    """Multiply-adds of one decoder layer at nominal position max_len/2."""
    D, H = config.d_model, config.num_heads
    t = config.max_len / 2
    p = config.max_len / 2 if prompt_len is None else prompt_len

    def attn(m):
        return H * (2 * D * config.d_k + 2 * D * config.d_v + 2 * m * config.d_k + 2 * m * config.d_v)

    return attn(t) + attn(p) + 2 * D * config.d_ff * 2


def check_flops(config: ModelConfig, kind) -> float:
    """Cost of one confidence evaluation (the oracle is free by convention)."""
    if kind is None:
        return 0.0
    kind = ConfidenceKind(kind)
    if kind is ConfidenceKind.SOFTMAX:
        return float(config.d_model * config.vocab_size)
    if kind is ConfidenceKind.STATE:
        return float(3 * config.d_model)
    if kind is ConfidenceKind.CLASSIFIER:
        return float(config.d_model + 1)
    return 0.0


def flops_per_token(config: ModelConfig, exit_layer: int, kind=None, prompt_len=None) -> float:
    L = config.num_layers
    if not 1 <= exit_layer <= L:
        raise ValueError(f"exit layer {exit_layer} outside 1..{L}")
    n_checks = min(exit_layer, L - 1) if kind is not None else 0
    if kind is not None and ConfidenceKind(kind) is ConfidenceKind.STATE:
        n_checks = max(0, n_checks - 1)  # no cosine at layer 1
    head = config.d_model * config.vocab_size
    reproject = config.num_heads * config.d_model * (config.d_k + config.d_v)
    return (
        exit_layer * layer_flops(config, prompt_len)
        + n_checks * check_flops(config, kind)
        + head
        + (L - exit_layer) * reproject
    )


def baseline_flops(config: ModelConfig, prompt_len=None) -> float:
    return flops_per_token(config, config.num_layers, None, prompt_len)


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------


@dataclass
class StepRecord:
    token: int
    exit_layer: int
    confidences: tuple[float, ...]
    threshold: float | None
    cum_layers: int
    cum_flops: float


@dataclass
class GenerationOutput:
    tokens: tuple[int, ...]
    steps: list[StepRecord]
    num_layers: int
    wall_ms: float = 0.0
    ended_with_eos: bool = False

    @property
    def exit_layers(self) -> list[int]:
        return [s.exit_layer for s in self.steps]

    @property
    def average_layers(self) -> float:
        if not self.steps:
            return 0.0
        return self.steps[-1].cum_layers / len(self.steps)

    @property
    def total_flops(self) -> float:
        return self.steps[-1].cum_flops if self.steps else 0.0

    def to_json(self) -> dict:
        return {
            "tokens": [s.token for s in self.steps],
            "exit_layers": self.exit_layers,
            "confidences": [list(s.confidences) for s in self.steps],
            "thresholds": [s.threshold for s in self.steps],
            "flops": [s.cum_flops for s in self.steps],
            "wall_ms": self.wall_ms,
            "num_layers": self.num_layers,
        }


def write_traces(outputs, path) -> None:
    with open(path, "w") as fh:
        for out in outputs:
            fh.write(json.dumps(out.to_json()) + "\n")


def _decode(backend, prompt, choose, cost_kind, mode) -> GenerationOutput:
    start = time.perf_counter()
    session = backend.start(prompt, mode)
    L = backend.num_layers
    tokens, steps = [], []
    cum_layers, cum_flops = 0, 0.0
    eos = False
    for t in range(backend.max_len):
        exit_layer, confs, threshold = choose(session, t)
        token = argmax(session.logits(exit_layer))
        session.commit(token, exit_layer)
        cum_layers += exit_layer
        cum_flops += flops_per_token(backend.config, exit_layer, cost_kind)
        steps.append(StepRecord(token, exit_layer, tuple(confs), threshold, cum_layers, cum_flops))
        if token == EOS:
            eos = True
            break
        tokens.append(token)
    wall = (time.perf_counter() - start) * 1e3
    return GenerationOutput(tuple(tokens), steps, L, wall, eos)


def _measure_fn(kind: ConfidenceKind, classifier):
    if kind is ConfidenceKind.SOFTMAX:
        return lambda s, i: softmax_response(s.logits(i))
    if kind is ConfidenceKind.STATE:
        return lambda s, i: 0.0 if i == 1 else state_saturation(s.hidden(i), s.hidden(i - 1))
    if kind is ConfidenceKind.CLASSIFIER:
        if classifier is None:
            raise ValueError("classifier measure needs exit-classifier parameters")
        w, b = classifier
        return lambda s, i: classifier_confidence(s.hidden(i), w, b)
    raise ValueError(f"no direct measure for {kind}")


def generate_adaptive(
    backend,
    prompt,
    kind,
    policy: ThresholdPolicy,
    mode=PropagationMode.COPY_HIDDEN,
    classifier=None,
) -> GenerationOutput:
    """Greedy decoding that exits at the first layer whose confidence reaches
    the step's threshold; layer ``L`` always emits."""
    kind = ConfidenceKind(kind)
    L = backend.num_layers
    if kind is ConfidenceKind.ORACLE:
        measure = None
    else:
        measure = _measure_fn(kind, classifier if classifier is not None else backend.classifier)

    def choose(session, t):
        threshold = decayed_threshold(policy, t)
        if kind is ConfidenceKind.ORACLE:
            session.hidden(L)
            final = session.logits(L)
        confs = []
        for i in range(1, L):
            session.hidden(i)
            if measure is None:
                c = oracle_confidence(session.logits(i), final)
            else:
                c = measure(session, i)
            confs.append(c)
            if c >= threshold:
                return i, confs, threshold
        session.hidden(L)
        return L, confs, threshold

    return _decode(backend, prompt, choose, kind, mode)


def generate_full(backend, prompt, mode=PropagationMode.COPY_HIDDEN) -> GenerationOutput:
    L = backend.num_layers

    def choose(session, t):
        session.hidden(L)
        return L, [], None

    return _decode(backend, prompt, choose, None, mode)


def generate_static(backend, prompt, layer: int, mode=PropagationMode.COPY_HIDDEN) -> GenerationOutput:
    """Baseline that exits every token at the same fixed layer."""
    if not 1 <= layer <= backend.num_layers:
        raise ValueError(f"layer {layer} outside 1..{backend.num_layers}")

    def choose(session, t):
        session.hidden(layer)
        return layer, [], None

    return _decode(backend, prompt, choose, None, mode)


# --------------------------------------------------------------------------
# Wall-clock benchmark
# --------------------------------------------------------------------------


@dataclass
class BenchReport:
    runs: int
    full_ms: list[float] = field(default_factory=list)
    adaptive_ms: list[float] = field(default_factory=list)

    @property
    def full_mean_ms(self) -> float:
        return statistics.fmean(self.full_ms)

    @property
    def adaptive_mean_ms(self) -> float:
        return statistics.fmean(self.adaptive_ms)

    @property
    def speedup(self) -> float:
        return self.full_mean_ms / self.adaptive_mean_ms

    def to_json(self) -> dict:
        return {
            "runs": self.runs,
            "timed_runs": len(self.full_ms),
            "full_ms": self.full_ms,
            "adaptive_ms": self.adaptive_ms,
            "full_mean_ms": self.full_mean_ms,
            "adaptive_mean_ms": self.adaptive_mean_ms,
            "speedup": self.speedup,
        }


def bench(
    backend,
    prompts,
    runs: int = 200,
    kind=None,
    policy: ThresholdPolicy | None = None,
    mode=PropagationMode.COPY_HIDDEN,
    classifier=None,
) -> BenchReport:
    """Time whole generations (encoder plus every decoding step), one prompt
    at a time.  Full and adaptive runs are interleaved; the first run of each
    is discarded as warm-up.  ``kind=None`` times the full model against itself.
    """
    if runs < 2:
        raise ValueError("need at least 2 runs (the first is discarded)")
    prompts = list(prompts)
    if not prompts:
        raise ValueError("no prompts to benchmark")
    if kind is not None and policy is None:
        raise ValueError("adaptive benchmark needs a threshold policy")

    def timed(fn):
        start = time.perf_counter()
        fn()
        return (time.perf_counter() - start) * 1e3

    report = BenchReport(runs)
    for r in range(runs):
        prompt = prompts[r % len(prompts)]
        full = timed(lambda: generate_full(backend, prompt, mode))
        if kind is None:
            adaptive = timed(lambda: generate_full(backend, prompt, mode))
        else:
            adaptive = timed(
                lambda: generate_adaptive(backend, prompt, kind, policy, mode, classifier)
            )
        if r == 0:
            continue
        report.full_ms.append(full)
        report.adaptive_ms.append(adaptive)
    return report
