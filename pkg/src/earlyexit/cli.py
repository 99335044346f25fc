"""``earlyexit`` command line: data generation, sweeps, calibration,
benchmarks, exit-classifier training and per-token exit-depth rendering.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import html
import json
import math
import sys
from pathlib import Path

from . import exitcls, metrics
from .calibration import (
    ConsistencyObjective,
    evaluate_grid,
    loss_matrix,
    parse_grid,
    run_trials_on_outputs,
)
from .confidence import ConfidenceKind, ThresholdPolicy
from .engine import (
    ModelBackend,
    PropagationMode,
    baseline_flops,
    bench,
    generate_adaptive,
    generate_full,
    generate_static,
    write_traces,
)
from .model import ModelConfig, init_weights, load_weights, save_weights
from .synthetic import (
    SyntheticModel,
    SyntheticSpec,
    SynthTask,
    TaskKind,
    gen_dataset,
    load_dataset,
    save_dataset,
)

SWEEP_COLUMNS = (
    "measure",
    "lambda",
    "static_layer",
    "consistency",
    "target_metric",
    "exit_layers",
    "flops_ratio",
)

METRIC_CHOICES = [m.value for m in metrics.MetricKind]
MEASURE_CHOICES = [k.value for k in ConfidenceKind]


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument plumbing
# --------------------------------------------------------------------------


def _unit_open(name):
    def parse(text):
        value = float(text)
        if not 0.0 < value < 1.0:
            raise argparse.ArgumentTypeError(f"{name} must lie in (0, 1), got {text}")
        return value

    return parse


def _unit_closed(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"lambda must lie in [0, 1], got {text}")
    return value


def _range(text):
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    return lo, hi


def _grid(text):
    try:
        return parse_grid(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_backend(p):
    p.add_argument("--backend", choices=["model", "synthetic"], required=True)
    p.add_argument("--weights", type=Path, help="weight container (model backend)")
    p.add_argument("--spec", type=Path, help="synthetic spec JSON (synthetic backend)")
    p.add_argument("--data", type=Path, required=True, help="JSON-lines dataset")
    p.add_argument("--propagation", choices=[m.value for m in PropagationMode],
                   default=PropagationMode.COPY_HIDDEN.value)
    p.add_argument("--tau", type=float, default=None,
                   help="decay temperature; omit for a constant threshold")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earlyexit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-weights", help="write seeded random model weights")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--d-k", type=int, default=16)
    p.add_argument("--d-v", type=int, default=16)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic task dataset")
    p.add_argument("--task", choices=[t.value for t in TaskKind], default="copy")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--prompt-len", type=_range, default=(3, 8))
    p.add_argument("--output-len", type=_range, default=(1, 3))
    p.add_argument("--no-targets", action="store_true", help="omit target sequences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("generate", help="decode a dataset and export per-token traces")
    _add_backend(p)
    p.add_argument("--measure", choices=MEASURE_CHOICES + ["full"], default="softmax")
    p.add_argument("--lambda", dest="lam", type=_unit_closed, default=0.9)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sweep", help="consistency/efficiency over a threshold grid")
    _add_backend(p)
    p.add_argument("--measure", choices=MEASURE_CHOICES, action="append",
                   help="repeatable; default: every available measure")
    p.add_argument("--metric", choices=METRIC_CHOICES, default="token_f1")
    p.add_argument("--grid", type=_grid, default=parse_grid("1:0:0.05"))
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("calibrate", help="Monte Carlo calibration trials")
    _add_backend(p)
    p.add_argument("--measure", choices=MEASURE_CHOICES, default="softmax")
    p.add_argument("--mode", choices=["textual", "risk"], default="textual")
    p.add_argument("--metric", choices=METRIC_CHOICES, default="token_f1")
    p.add_argument("--delta", type=_unit_open("delta"), required=True)
    p.add_argument("--epsilon", type=_unit_open("epsilon"), default=0.05)
    p.add_argument("--grid", type=_grid, default=parse_grid("1:0:0.05"))
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--calib-fraction", type=_unit_open("calib-fraction"), default=0.8)
    p.add_argument("--pvalue", choices=["hb", "hoeffding"], default="hb")
    p.add_argument("--out", type=Path, required=True, help="report JSON; CSV written alongside")

    p = sub.add_parser("bench", help="wall-clock speedup versus the full model")
    _add_backend(p)
    p.add_argument("--measure", choices=MEASURE_CHOICES + ["full"], default="softmax")
    p.add_argument("--lambda", dest="lam", type=_unit_closed, default=0.9)
    p.add_argument("--runs", type=int, default=200)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train-exit", help="train the shared exit classifier")
    _add_backend(p)
    p.add_argument("--objective", choices=["independent", "geometric"], default="independent")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--out", type=Path, help="updated weights/spec (default: overwrite input)")

    p = sub.add_parser("visualize", help="color tokens by exit depth")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--out", type=Path, help="HTML output path")
    p.add_argument("--no-ansi", action="store_true")
    return parser


def _validate(args):
    if getattr(args, "backend", None) == "model" and args.weights is None:
        raise UsageError("--backend model requires --weights")
    if getattr(args, "backend", None) == "synthetic" and args.spec is None:
        raise UsageError("--backend synthetic requires --spec")
    if getattr(args, "backend", None) == "model" and args.spec is not None:
        raise UsageError("--spec is only valid with --backend synthetic")
    if getattr(args, "backend", None) == "synthetic" and args.weights is not None:
        raise UsageError("--weights is only valid with --backend model")
    if getattr(args, "tau", None) is not None and args.tau < 0:
        raise UsageError("--tau must be >= 0")
    for name in ("n", "trials", "epochs"):
        if getattr(args, name, 1) < 1:
            raise UsageError(f"--{name} must be >= 1")
    if getattr(args, "runs", 2) < 2:
        raise UsageError("--runs must be >= 2 (the first run is discarded)")


def _backend(args):
    if args.backend == "model":
        return ModelBackend(load_weights(args.weights))
    return SyntheticModel(SyntheticSpec.load(args.spec))


def _classifier_available(backend):
    return backend.classifier is not None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_init_weights(args):
    cfg = ModelConfig(args.layers, args.vocab, args.d_model, args.d_k, args.d_v,
                      args.d_ff, args.heads, args.max_len)
    save_weights(init_weights(cfg, seed=args.seed), args.out)
    print(f"wrote {args.out}")


def cmd_synth_data(args):
    task = SynthTask(TaskKind(args.task), args.prompt_len, args.output_len, args.vocab, args.seed)
    examples = gen_dataset(task, args.n)
    if args.no_targets:
        examples = [type(e)(e.prompt) for e in examples]
    save_dataset(examples, args.out)
    print(len(examples))


def cmd_generate(args):
    backend = _backend(args)
    examples = load_dataset(args.data)
    mode = PropagationMode(args.propagation)
    outputs = []
    for ex in examples:
        if args.measure == "full":
            outputs.append(generate_full(backend, ex.prompt, mode))
        else:
            policy = ThresholdPolicy(args.lam, args.tau, backend.max_len)
            outputs.append(generate_adaptive(backend, ex.prompt, args.measure, policy, mode))
    write_traces(outputs, args.out)
    layers = sum(o.steps[-1].cum_layers for o in outputs if o.steps)
    steps = sum(len(o.steps) for o in outputs)
    print(f"{len(outputs)} generations, average decoder layers {layers / max(steps, 1):.4f}")


def sweep_rows(backend, examples, measures, grid, metric, tau=None, mode=PropagationMode.COPY_HIDDEN):
    """Rows of the tradeoff table: per measure and threshold, plus static baselines."""
    has_targets = all(ex.target is not None for ex in examples)
    rows = []

    def summarize(early_outputs, full_outputs, layers, steps, flops, base):
        n = len(early_outputs)
        consistency = sum(metrics.similarity(metric, e, f) for e, f in zip(early_outputs, full_outputs)) / n
        target_metric = ""
        if has_targets:
            target_metric = sum(
                metrics.similarity(metric, e, ex.target) for e, ex in zip(early_outputs, examples)
            ) / n
        return consistency, target_metric, layers / steps, flops / (steps * base)

    full = None
    for kind in measures:
        out = evaluate_grid(backend, examples, kind, grid, tau, mode)
        full = out.full
        for lam in grid:
            c = out.column(lam)
            stats = summarize(
                [row[c] for row in out.early], out.full,
                out.layers[:, c].sum(), out.steps[:, c].sum(), out.flops[:, c].sum(),
                out.baseline_flops,
            )
            rows.append((ConfidenceKind(kind).value, lam, "", *stats))
    if full is None:
        full = [generate_full(backend, ex.prompt, mode).tokens for ex in examples]
    base = baseline_flops(backend.config)
    for layer in range(1, backend.num_layers + 1):
        gens = [generate_static(backend, ex.prompt, layer, mode) for ex in examples]
        stats = summarize(
            [g.tokens for g in gens], full,
            sum(g.steps[-1].cum_layers for g in gens), sum(len(g.steps) for g in gens),
            sum(g.total_flops for g in gens), base,
        )
        rows.append(("static", "", layer, *stats))
    return rows


def cmd_sweep(args):
    backend = _backend(args)
    examples = load_dataset(args.data)
    measures = args.measure or [
        k.value for k in ConfidenceKind
        if k is not ConfidenceKind.CLASSIFIER or _classifier_available(backend)
    ]
    if ConfidenceKind.CLASSIFIER.value in measures and not _classifier_available(backend):
        raise RuntimeError("classifier measure requested but the backend has no exit classifier")
    rows = sweep_rows(backend, examples, measures, args.grid, args.metric, args.tau,
                      PropagationMode(args.propagation))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_calibrate(args):
    backend = _backend(args)
    examples = load_dataset(args.data)
    objective = ConsistencyObjective(args.mode, args.metric, args.delta, args.epsilon)
    if objective.mode.value == "risk" and any(ex.target is None for ex in examples):
        raise RuntimeError("risk mode needs a target for every example in the dataset")
    if len(examples) < 10:
        raise RuntimeError("calibration needs at least 10 examples")
    outputs = evaluate_grid(backend, examples, args.measure, args.grid, args.tau,
                            PropagationMode(args.propagation))
    losses = loss_matrix(outputs, examples, objective)
    report = run_trials_on_outputs(outputs, losses, objective, args.grid, args.trials,
                                   args.calib_fraction, args.seed, args.pvalue)
    report.settings.update({"measure": args.measure, "tau": args.tau, "backend": args.backend})
    report.write_json(args.out)
    report.write_csv(args.out.with_suffix(".csv"))
    s = report.summary()
    print(f"validity rate {s['validity_rate']:.4f} over {s['trials']} trials; "
          f"mean lambda_min {s['lambda_min_mean']:.4f}; "
          f"mean exit layers {s['test_exit_layers_mean']:.4f}")


def cmd_bench(args):
    backend = _backend(args)
    prompts = [ex.prompt for ex in load_dataset(args.data)]
    kind = None if args.measure == "full" else args.measure
    policy = None if kind is None else ThresholdPolicy(args.lam, args.tau, backend.max_len)
    report = bench(backend, prompts, args.runs, kind, policy, PropagationMode(args.propagation))
    data = report.to_json()
    data["measure"] = args.measure
    data["lambda"] = None if kind is None else args.lam
    text = json.dumps(data, indent=2)
    if args.out:
        args.out.write_text(text + "\n")
    print(f"full {report.full_mean_ms:.3f} ms, adaptive {report.adaptive_mean_ms:.3f} ms, "
          f"speedup x{report.speedup:.3f} over {len(report.full_ms)} timed runs")


def cmd_train_exit(args):
    backend = _backend(args)
    if backend.num_layers < 2:
        raise RuntimeError("exit classifier training needs at least two layers")
    examples = exitcls.collect_examples(backend, [ex.prompt for ex in load_dataset(args.data)])
    train = exitcls.train_independent if args.objective == "independent" else exitcls.train_geometric
    params = train(examples, args.epochs, args.lr, args.seed)
    f1 = exitcls.eval_layerwise_f1(params, examples)
    out = args.out
    if args.backend == "model":
        updated = backend.weights.with_exit_classifier(params.w, params.b)
        save_weights(updated, out or args.weights)
    else:
        spec = SyntheticSpec.load(args.spec)
        spec = SyntheticSpec.from_json({**spec.to_json(),
                                        "classifier": {"w": params.w.tolist(), "b": params.b}})
        spec.save(out or args.spec)
    print(f"objective {args.objective}, {len(examples)} token examples, "
          f"final loss {params.history[-1]:.6f}")
    print("layer\tf1_dont_exit")
    for i, value in enumerate(f1, 1):
        print(f"{i}\t{value:.4f}")


# --------------------------------------------------------------------------
# exit-depth rendering
# --------------------------------------------------------------------------

# light green -> deep red, index 0 = fewest layers
PALETTE = ("#c7f0c2", "#8fd88a", "#f2e394", "#f0a35e", "#d7301f")


def depth_bucket(exit_layer: int, num_layers: int, shades: int = len(PALETTE)) -> int:
    """Palette index for an exit layer: (exit-1)/(L-1) scaled to 0..shades-1, rounded half up."""
    if num_layers <= 1:
        return shades - 1
    frac = (exit_layer - 1) / (num_layers - 1)
    return int(math.floor(frac * (shades - 1) + 0.5))


class TraceParseError(ValueError):
    pass


TRACE_FIELDS = ("tokens", "exit_layers", "num_layers")


def read_traces(path) -> list[dict]:
    raw = Path(path).read_bytes()
    traces, offset = [], 0
    for line in raw.splitlines(keepends=True):
        if line.strip():
            text = line.decode("utf-8", errors="replace")
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                pos = offset + len(text[: exc.pos].encode("utf-8"))
                raise TraceParseError(f"{path}: invalid JSON at byte offset {pos}: {exc.msg}") from None
            if not isinstance(record, dict) or any(f not in record for f in TRACE_FIELDS):
                raise TraceParseError(f"{path}: trace record at byte offset {offset} lacks "
                                      f"one of {', '.join(TRACE_FIELDS)}")
            traces.append(record)
        offset += len(line)
    return traces


def _hex_rgb(color):
    return tuple(int(color[i : i + 2], 16) for i in (1, 3, 5))


def render_ansi(traces) -> str:
    lines = []
    for tr in traces:
        parts = []
        for tok, layer in zip(tr["tokens"], tr["exit_layers"]):
            r, g, b = _hex_rgb(PALETTE[depth_bucket(layer, tr["num_layers"])])
            parts.append(f"\x1b[48;2;{r};{g};{b}m\x1b[30m {tok} \x1b[0m")
        lines.append("".join(parts))
    return "\n".join(lines)


def render_html(traces) -> str:
    legend = "".join(
        f'<span class="tok" style="background:{c}">{i + 1}/{len(PALETTE)}</span>'
        for i, c in enumerate(PALETTE)
    )
    rows = []
    for tr in traces:
        spans = "".join(
            f'<span class="tok" style="background:{PALETTE[depth_bucket(layer, tr["num_layers"])]}" '
            f'title="exit layer {layer}/{tr["num_layers"]}">{html.escape(str(tok))}</span>'
            for tok, layer in zip(tr["tokens"], tr["exit_layers"])
        )
        rows.append(f"<p>{spans}</p>")
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>exit depth</title>"
        "<style>body{font-family:monospace}.tok{padding:2px 4px;margin:1px;"
        "display:inline-block}</style></head><body>"
        f"<p>depth buckets: {legend}</p>{''.join(rows)}</body></html>\n"
    )


def cmd_visualize(args):
    traces = read_traces(args.trace)
    if not args.no_ansi:
        print(render_ansi(traces))
    if args.out:
        args.out.write_text(render_html(traces))


COMMANDS = {
    "init-weights": cmd_init_weights,
    "synth-data": cmd_synth_data,
    "generate": cmd_generate,
    "sweep": cmd_sweep,
    "calibrate": cmd_calibrate,
    "bench": cmd_bench,
    "train-exit": cmd_train_exit,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _validate(args)
    except UsageError as exc:
        parser.error(str(exc))
    try:
        COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
