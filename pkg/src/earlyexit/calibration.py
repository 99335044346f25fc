"""Distribution-free calibration of the shared exit threshold.

Candidate thresholds are tested in descending order (fixed sequence testing)
with a p-value for the null "mean consistency loss exceeds delta"; the lowest
threshold reached before the first non-rejection is returned, and 1.0 (the
full model) when nothing is rejected.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from . import metrics
from .confidence import ConfidenceKind, ThresholdPolicy
from .engine import PropagationMode, baseline_flops, generate_adaptive, generate_full


class ConsistencyMode(str, enum.Enum):
    TEXTUAL = "textual"
    RISK = "risk"


@dataclass(frozen=True)
class ConsistencyObjective:
    mode: ConsistencyMode = ConsistencyMode.TEXTUAL
    metric: metrics.MetricKind = metrics.MetricKind.TOKEN_F1
    delta: float = 0.1
    epsilon: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "mode", ConsistencyMode(self.mode))
        object.__setattr__(self, "metric", metrics.MetricKind(self.metric))
        for name in ("delta", "epsilon"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")


def consistency_loss(objective: ConsistencyObjective, early, full, references=None) -> float:
    if objective.mode is ConsistencyMode.TEXTUAL:
        return metrics.dissimilarity(objective.metric, early, full)
    if not references:
        raise ValueError("risk consistency needs a non-empty reference set")
    gap = metrics.risk(objective.metric, early, references) - metrics.risk(
        objective.metric, full, references
    )
    return max(0.0, gap)


# --------------------------------------------------------------------------
# p-values
# --------------------------------------------------------------------------


# p-values are floored here so they never underflow to exactly 0
P_FLOOR = sys.float_info.min


def hoeffding_pvalue(mean_loss: float, n: int, delta: float) -> float:
    return max(P_FLOOR, math.exp(-2.0 * n * max(0.0, delta - mean_loss) ** 2))


def _kl_bernoulli(a: float, b: float) -> float:
    def term(x, y):
        return 0.0 if x == 0 else x * math.log(x / y)

    return term(a, b) + term(1 - a, 1 - b)


def bentkus_term(mean_loss: float, n: int, delta: float) -> float:
    return math.e * float(binom.cdf(math.ceil(n * mean_loss), n, delta))


def hb_pvalue(mean_loss: float, n: int, delta: float) -> float:
    """Hoeffding-Bentkus p-value: the smaller of the KL-Hoeffding and Bentkus tails."""
    hoeffding_kl = math.exp(-n * _kl_bernoulli(min(mean_loss, delta), delta))
    return max(P_FLOOR, min(1.0, hoeffding_kl, bentkus_term(mean_loss, n, delta)))


PVALUES: dict[str, Callable[[float, int, float], float]] = {
    "hoeffding": hoeffding_pvalue,
    "hb": hb_pvalue,
}


# --------------------------------------------------------------------------
# Fixed sequence testing
# --------------------------------------------------------------------------


def lambda_grid(start: float = 1.0, stop: float = 0.0, step: float = 0.05) -> tuple[float, ...]:
    """Descending thresholds start, start-step, ... down to stop (inclusive)."""
    if step <= 0:
        raise ValueError("step must be positive")
    if not 0.0 <= stop <= start <= 1.0:
        raise ValueError("need 0 <= stop <= start <= 1")
    count = int(math.floor((start - stop) / step + 1e-9)) + 1
    return tuple(round(start - j * step, 10) for j in range(count))


def parse_grid(text: str) -> tuple[float, ...]:
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise ValueError(f"grid must look like start:stop:step, got {text!r}") from exc
    if start < stop:
        start, stop = stop, start
    return lambda_grid(start, stop, abs(step))


def _check_grid(grid):
    grid = tuple(float(x) for x in grid)
    if not grid:
        raise ValueError("empty threshold grid")
    if any(not 0.0 <= x <= 1.0 for x in grid) or any(a <= b for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly descending within [0, 1]")
    return grid


def fixed_sequence_test(grid, pvalues, epsilon: float) -> float:
    """Walk precomputed p-values in grid order; stop at the first p > epsilon."""
    lam_min = 1.0
    for lam, p in zip(_check_grid(grid), pvalues):
        if p > epsilon:
            return lam_min
        lam_min = lam
    return lam_min


def fst_calibrate(
    loss_evaluator: Callable[[float], Sequence[float]],
    grid,
    delta: float,
    epsilon: float,
    pvalue="hb",
) -> float:
    """Lowest threshold certified by fixed sequence testing (1.0 as fallback).

    ``loss_evaluator(lam)`` returns the per-example losses in [0, 1] on the
    calibration set; it is only called for thresholds the walk reaches.
    """
    pfn = PVALUES[pvalue] if isinstance(pvalue, str) else pvalue
    lam_min = 1.0
    for lam in _check_grid(grid):
        try:
            losses = np.asarray(loss_evaluator(lam), dtype=np.float64)
        except Exception as exc:
            raise RuntimeError(f"loss evaluation failed at threshold {lam}: {exc}") from exc
        if losses.size == 0:
            raise ValueError("calibration set is empty")
        p = pfn(float(losses.mean()), losses.size, delta)
        if p > epsilon:
            return lam_min
        lam_min = lam
    return lam_min


# --------------------------------------------------------------------------
# Cached grid evaluation and Monte Carlo trials
# --------------------------------------------------------------------------


@dataclass
class GridOutputs:
    """Full and early outputs for every example at every evaluated threshold.

    Column order follows ``lambdas``, which always contains 1.0 (the
    fallback) in addition to the requested grid.
    """

    lambdas: tuple[float, ...]
    full: list[tuple[int, ...]]
    early: list[list[tuple[int, ...]]]
    layers: np.ndarray  # (n, k) exit layers summed over an example's steps
    steps: np.ndarray  # (n, k) decoding steps
    flops: np.ndarray  # (n, k) total FLOPs
    baseline_flops: float
    num_layers: int

    def column(self, lam: float) -> int:
        return self.lambdas.index(round(float(lam), 10))


def evaluate_grid(
    backend,
    examples,
    kind,
    grid,
    tau: float | None = None,
    mode=PropagationMode.COPY_HIDDEN,
    classifier=None,
) -> GridOutputs:
    lambdas = tuple(sorted({round(float(x), 10) for x in grid} | {1.0}, reverse=True))
    n, k = len(examples), len(lambdas)
    layers = np.zeros((n, k))
    steps = np.zeros((n, k))
    flops = np.zeros((n, k))
    full, early = [], []
    for e, ex in enumerate(examples):
        full.append(generate_full(backend, ex.prompt, mode).tokens)
        row = []
        for j, lam in enumerate(lambdas):
            policy = ThresholdPolicy(lam, tau, backend.max_len)
            out = generate_adaptive(backend, ex.prompt, kind, policy, mode, classifier)
            row.append(out.tokens)
            layers[e, j] = out.steps[-1].cum_layers if out.steps else 0
            steps[e, j] = len(out.steps)
            flops[e, j] = out.total_flops
        early.append(row)
    return GridOutputs(
        lambdas, full, early, layers, steps, flops,
        baseline_flops(backend.config), backend.num_layers,
    )


def loss_matrix(outputs: GridOutputs, examples, objective: ConsistencyObjective) -> np.ndarray:
    """Per-example consistency losses, shape (n, k).

    Textual mode compares against the full model only and never touches targets.
    """
    n, k = len(outputs.full), len(outputs.lambdas)
    losses = np.zeros((n, k))
    for e in range(n):
        refs = None
        if objective.mode is ConsistencyMode.RISK:
            target = examples[e].target
            if target is None:
                raise ValueError(f"risk mode needs targets; example {e} has none")
            refs = [target]
        for j in range(k):
            losses[e, j] = consistency_loss(objective, outputs.early[e][j], outputs.full[e], refs)
    return losses


@dataclass
class TrialResult:
    trial: int
    lambda_min: float
    calib_loss: float
    test_loss: float
    test_exit_layers: float
    test_flops_ratio: float
    violated: bool


CSV_COLUMNS = (
    "trial",
    "lambda_min",
    "calib_loss",
    "test_loss",
    "test_exit_layers",
    "test_flops_ratio",
    "violated",
)


@dataclass
class CalibrationReport:
    objective: ConsistencyObjective
    grid: tuple[float, ...]
    num_layers: int
    trials: list[TrialResult] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def _column(self, name):
        return np.array([getattr(t, name) for t in self.trials], dtype=np.float64)

    @property
    def violation_rate(self) -> float:
        return float(np.mean(self._column("violated")))

    @property
    def validity_rate(self) -> float:
        return 1.0 - self.violation_rate

    def summary(self) -> dict:
        out = {
            "trials": len(self.trials),
            "validity_rate": self.validity_rate,
            "violation_rate": self.violation_rate,
        }
        for name in ("lambda_min", "test_loss", "test_exit_layers", "test_flops_ratio"):
            col = self._column(name)
            out[f"{name}_mean"] = float(col.mean())
            out[f"{name}_std"] = float(col.std())
        return out

    def to_json(self) -> dict:
        return {
            "objective": {
                "mode": self.objective.mode.value,
                "metric": self.objective.metric.value,
                "delta": self.objective.delta,
                "epsilon": self.objective.epsilon,
            },
            "grid": list(self.grid),
            "num_layers": self.num_layers,
            "settings": self.settings,
            "summary": self.summary(),
            "trials": [t.__dict__ for t in self.trials],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for t in self.trials:
                writer.writerow([getattr(t, c) if c != "violated" else int(t.violated) for c in CSV_COLUMNS])


def run_trials_on_outputs(
    outputs: GridOutputs,
    losses: np.ndarray,
    objective: ConsistencyObjective,
    grid,
    trials: int = 50,
    calib_fraction: float = 0.8,
    seed: int = 0,
    pvalue="hb",
) -> CalibrationReport:
    """Random calibration/test splits over precomputed losses."""
    grid = _check_grid(grid)
    n = losses.shape[0]
    if n < 10:
        raise ValueError("need at least 10 examples for calibration trials")
    n_cal = int(round(calib_fraction * n))
    if not 1 <= n_cal < n:
        raise ValueError("calibration fraction leaves an empty split")
    cols = {lam: outputs.column(lam) for lam in grid}
    rng = np.random.default_rng(seed)
    report = CalibrationReport(
        objective, grid, outputs.num_layers,
        settings={"calib_fraction": calib_fraction, "seed": seed, "pvalue": str(pvalue),
                  "examples": n},
    )
    for trial in range(trials):
        perm = rng.permutation(n)
        cal, test = perm[:n_cal], perm[n_cal:]
        lam = fst_calibrate(lambda l: losses[cal, cols[l]], grid, objective.delta,
                            objective.epsilon, pvalue)
        c = outputs.column(lam)
        test_loss = float(losses[test, c].mean())
        steps = outputs.steps[test, c].sum()
        report.trials.append(
            TrialResult(
                trial=trial,
                lambda_min=lam,
                calib_loss=float(losses[cal, c].mean()),
                test_loss=test_loss,
                test_exit_layers=float(outputs.layers[test, c].sum() / steps),
                test_flops_ratio=float(outputs.flops[test, c].sum() / (steps * outputs.baseline_flops)),
                violated=test_loss > objective.delta,
            )
        )
    return report


def run_trials(
    examples,
    backend,
    objective: ConsistencyObjective,
    grid,
    trials: int = 50,
    calib_fraction: float = 0.8,
    seed: int = 0,
    kind=ConfidenceKind.SOFTMAX,
    tau: float | None = None,
    mode=PropagationMode.COPY_HIDDEN,
    classifier=None,
    pvalue="hb",
) -> CalibrationReport:
    if len(examples) < 10:
        raise ValueError("need at least 10 examples for calibration trials")
    if objective.mode is ConsistencyMode.RISK and any(ex.target is None for ex in examples):
        raise ValueError("risk mode needs a target for every example")
    outputs = evaluate_grid(backend, examples, kind, grid, tau, mode, classifier)
    losses = loss_matrix(outputs, examples, objective)
    report = run_trials_on_outputs(outputs, losses, objective, grid, trials, calib_fraction, seed, pvalue)
    report.settings.update({"measure": ConfidenceKind(kind).value, "tau": tau})
    return report
