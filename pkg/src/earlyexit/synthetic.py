"""A deterministic stand-in for a trained layered model.

Layer ``i`` emits ``alpha_i * true_logits + (1 - alpha_i) * noise``, where the
true logits put ``TRUE_LOGIT`` on the task's correct next token; hidden states
drift from a random direction toward a fixed per-token direction as depth
grows.  The correct answer comes from the task rule applied to the prompt, so
the model needs no targets at inference time.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .model import EOS, ModelConfig

TRUE_LOGIT = 8.0
SEP = 1
FIRST_CONTENT_TOKEN = 2


class TaskKind(str, enum.Enum):
    COPY = "copy"
    REVERSE = "reverse"
    KV_LOOKUP = "kv_lookup"


@dataclass(frozen=True)
class Example:
    prompt: tuple[int, ...]
    target: tuple[int, ...] | None = None

    def to_json(self) -> dict:
        record = {"prompt": list(self.prompt)}
        if self.target is not None:
            record["target"] = list(self.target)
        return record

    @classmethod
    def from_json(cls, record: dict) -> "Example":
        target = record.get("target")
        return cls(tuple(int(x) for x in record["prompt"]),
                   None if target is None else tuple(int(x) for x in target))


@dataclass(frozen=True)
class SynthTask:
    kind: TaskKind = TaskKind.COPY
    prompt_len: tuple[int, int] = (3, 8)
    output_len: tuple[int, int] = (1, 3)
    vocab_size: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        lo, hi = self.prompt_len
        if not 1 <= lo <= hi:
            raise ValueError(f"bad prompt length range {self.prompt_len}")
        if self.vocab_size < FIRST_CONTENT_TOKEN + 1:
            raise ValueError("vocab too small for content tokens")
        if self.kind is TaskKind.KV_LOOKUP:
            if hi > self.vocab_size - FIRST_CONTENT_TOKEN:
                raise ValueError("kv_lookup needs one distinct key per pair")
            olo, ohi = self.output_len
            if not 1 <= olo <= ohi:
                raise ValueError(f"bad output length range {self.output_len}")


def solve(kind, prompt) -> tuple[int, ...]:
    """The unique target of ``prompt`` under task ``kind``."""
    kind = TaskKind(kind)
    prompt = tuple(prompt)
    if kind is TaskKind.COPY:
        return prompt
    if kind is TaskKind.REVERSE:
        return prompt[::-1]
    sep = prompt.index(SEP)
    pairs = dict(zip(prompt[0:sep:2], prompt[1:sep:2]))
    return tuple(pairs[q] for q in prompt[sep + 1 :])


def gen_dataset(task: SynthTask, n: int) -> list[Example]:
    rng = np.random.default_rng(task.seed)
    lo, hi = task.prompt_len
    content = np.arange(FIRST_CONTENT_TOKEN, task.vocab_size)
    out = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        if task.kind is TaskKind.KV_LOOKUP:
            keys = rng.choice(content, size=length, replace=False)
            vals = rng.choice(content, size=length)
            n_q = int(rng.integers(task.output_len[0], task.output_len[1] + 1))
            queries = rng.choice(keys, size=n_q)
            body = np.empty(2 * length, dtype=int)
            body[0::2], body[1::2] = keys, vals
            prompt = tuple(int(x) for x in body) + (SEP,) + tuple(int(q) for q in queries)
        else:
            prompt = tuple(int(x) for x in rng.choice(content, size=length))
        out.append(Example(prompt, solve(task.kind, prompt)))
    return out


def save_dataset(examples, path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json()) + "\n")


def load_dataset(path) -> list[Example]:
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                examples.append(Example.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad dataset record ({exc})") from exc
    return examples


@dataclass(frozen=True)
class SyntheticSpec:
    num_layers: int
    vocab_size: int = 16
    d_model: int = 16
    alphas: tuple[float, ...] = ()
    gamma: float = 0.5
    seed: int = 0
    max_len: int = 32
    task: TaskKind = TaskKind.COPY
    classifier: tuple[tuple[float, ...], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "task", TaskKind(self.task))
        a = np.asarray(self.alphas)
        if self.num_layers < 1 or a.size != self.num_layers:
            raise ValueError(f"need {self.num_layers} alphas, got {a.size}")
        if np.any(a < 0) or np.any(a > 1) or np.any(np.diff(a) < 0):
            raise ValueError("alphas must be non-decreasing within [0, 1]")
        if a[-1] != 1.0:
            raise ValueError("the final layer must be exact (alpha_L = 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.vocab_size < 2 or self.d_model < 1 or self.max_len < 1:
            raise ValueError("vocab_size >= 2, d_model >= 1, max_len >= 1 required")
        if self.classifier is not None:
            w, b = self.classifier
            if len(w) != self.d_model:
                raise ValueError("classifier weight length must equal d_model")
            object.__setattr__(self, "classifier", (tuple(float(x) for x in w), float(b)))

    def to_json(self) -> dict:
        data = asdict(self)
        data["task"] = self.task.value
        data["alphas"] = list(self.alphas)
        if self.classifier is None:
            data.pop("classifier")
        else:
            data["classifier"] = {"w": list(self.classifier[0]), "b": self.classifier[1]}
        return data

    @classmethod
    def from_json(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        clf = data.pop("classifier", None)
        if clf is not None:
            data["classifier"] = (tuple(clf["w"]), clf["b"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def _unit(v):
    return v / np.linalg.norm(v)


def synth_forward(spec: SyntheticSpec, prompt, t: int):
    """Per-layer hidden states (L, d_model) and logits (L, vocab) for step ``t``.

    The correct token at step ``t`` is the task target's ``t``-th entry, and
    EOS once the target is exhausted.
    """
    prompt = tuple(int(x) for x in prompt)
    if not 0 <= t < spec.max_len:
        raise ValueError(f"step {t} outside 0..{spec.max_len - 1}")
    target = solve(spec.task, prompt)
    true_token = target[t] if t < len(target) else EOS
    # one stream per (seed, example, step); rows index layers
    rng = np.random.default_rng([spec.seed, t, len(prompt), *prompt])
    L, V, D = spec.num_layers, spec.vocab_size, spec.d_model
    noise = rng.standard_normal((L, V))
    u = _unit(rng.standard_normal(D))
    r = rng.standard_normal((L, D))
    r /= np.linalg.norm(r, axis=1, keepdims=True)

    true_logits = np.zeros(V)
    true_logits[true_token] = TRUE_LOGIT
    alpha = np.asarray(spec.alphas)[:, None]
    logits = alpha * true_logits + (1 - alpha) * noise

    g = spec.gamma ** np.arange(1, L + 1)[:, None]
    hidden = (1 - g) * u + g * r
    hidden /= np.linalg.norm(hidden, axis=1, keepdims=True)
    return hidden, logits


class SyntheticSession:
    def __init__(self, model: "SyntheticModel", prompt):
        self.model = model
        self.prompt = tuple(int(x) for x in prompt)
        self.t = 0
        self.layers_computed = 0

    def _step(self):
        return self.model.forward(self.prompt, self.t)

    def hidden(self, layer: int) -> np.ndarray:
        self.layers_computed += 1
        return self._step()[0][layer - 1]

    def logits(self, layer: int) -> np.ndarray:
        return self._step()[1][layer - 1]

    def commit(self, token: int, exit_layer: int) -> None:
        self.t += 1


class SyntheticModel:
    """Engine backend over :func:`synth_forward` (memoized per prompt and step)."""

    def __init__(self, spec: SyntheticSpec, cost_config: ModelConfig | None = None):
        self.spec = spec
        self.num_layers = spec.num_layers
        self.max_len = spec.max_len
        self.config = cost_config or ModelConfig(
            num_layers=spec.num_layers,
            vocab_size=spec.vocab_size,
            d_model=spec.d_model,
            d_k=spec.d_model,
            d_v=spec.d_model,
            d_ff=4 * spec.d_model,
            num_heads=1,
            max_len=spec.max_len,
        )
        self.classifier = None
        if spec.classifier is not None:
            self.classifier = (np.asarray(spec.classifier[0]), spec.classifier[1])
        self.forward = lru_cache(maxsize=None)(lambda prompt, t: synth_forward(spec, prompt, t))

    def start(self, prompt, mode=None) -> SyntheticSession:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        if min(prompt) < 0 or max(prompt) >= self.spec.vocab_size:
            raise ValueError(f"prompt token outside vocab 0..{self.spec.vocab_size - 1}")
        return SyntheticSession(self, prompt)
