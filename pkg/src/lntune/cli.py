"""``lntune`` command-line front end.

Every invocation writes a JSON run manifest (command, resolved options,
seeds, input and output hashes).  Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .containers import dumps, load_checkpoint
from .data import SYNTH_RE, load_dataset, task_for_source
from .fisher import (FisherMap, MaskSpec, build_mask, estimate_fisher, global_fisher, heatmap_csv,
                     layer_heatmap, mask_from_elements, rank_components, ranking_csv, summarize_components)
from .metrics import drift_csv, drift_heatmap, fmt, kruskal_wallis
from .model import PRESETS, attach_head, build_model, param_shapes, preset
from .pretrain import pretrain
from .selectors import COMPONENTS, count_params, parse_layer_path, resolve_selector
from .svg import heatmap_svg
from .train import PLAN_SELECTORS, STRATEGIES, TrainConfig, default_grid, grid_search, make_freeze_plan

SEED_ENV = "LNTUNE_SEED"


class Run:
    """Collects what one invocation read, wrote and printed."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.inputs: dict[str, str | None] = {}
        self.outputs: dict[str, str] = {}
        self.lines: list[str] = []

    def read(self, source) -> str:
        source = str(source)
        if SYNTH_RE.match(source):
            self.inputs[source] = None
        else:
            self.inputs[source] = _sha256(Path(source).read_bytes())
        return source

    def write_bytes(self, path, data: bytes) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.outputs[str(path)] = _sha256(data)

    def write_text(self, path, text: str) -> None:
        self.write_bytes(path, text.encode("utf-8"))

    def print(self, line: str = "") -> None:
        self.lines.append(line)
        print(line)

    def manifest(self) -> dict:
        config = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func", "manifest")}
        seeds = {k: v for k, v in config.items() if "seed" in k}
        return {
            "command": self.args.command,
            "config": config,
            "seeds": seeds,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "stdout_sha256": _sha256("\n".join(self.lines).encode("utf-8")),
            "tool_version": __version__,
        }


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


# -- model/data helpers --------------------------------------------------------

def _base_model(run: Run):
    a = run.args
    if getattr(a, "checkpoint", None):
        params, config = load_checkpoint(run.read(a.checkpoint))
        return params, config
    config = preset(a.preset, a.num_labels, a.regression)
    return build_model(config, a.seed), config


def _task_model(run: Run, task):
    """Base model with a task head matching ``task`` (fresh head if needed)."""
    params, config = _base_model(run)
    wanted = 1 if task.regression else task.num_labels
    if config.regression != task.regression or config.head_outputs != wanted:
        params, config = attach_head(params, config, task.num_labels, task.regression, run.args.seed)
    return params, config


def _task(run: Run, source: str):
    a = run.args
    labels = a.labels.split(",") if getattr(a, "labels", None) else None
    return task_for_source(source, a.task_name, a.kind, a.metric, labels)


def _load(run: Run, source: str, task):
    return load_dataset(run.read(source), task)


def _train_config(args, strategy: str, metric: str) -> TrainConfig:
    grid = _floats(args.lr_grid) if args.lr_grid else list(default_grid(strategy))
    grid = [float(f"{lr * args.lr_scale:.12g}") for lr in grid]
    return TrainConfig(strategy=strategy, lr_grid=tuple(grid), max_epochs=args.epochs,
                       batch_size=args.batch_size, seed=args.seed, metric=metric)


# -- commands -------------------------------------------------------------------

def cmd_count_params(run: Run) -> None:
    a = run.args
    if a.checkpoint:
        _, config = load_checkpoint(run.read(a.checkpoint))
    else:
        config = preset(a.preset, a.num_labels, a.regression)
    shapes = param_shapes(config)
    if a.plan:
        if a.plan == "random":
            selector = f"random({count_params(shapes, 'output.LayerNorm')},{a.seed})+head"
        else:
            selector = PLAN_SELECTORS[a.plan]
    else:
        selector = a.selector
    run.print(str(count_params(shapes, selector)))


def cmd_init(run: Run) -> None:
    a = run.args
    config = preset(a.preset, a.num_labels, a.regression)
    params = build_model(config, a.seed)
    _save_ckpt(run, a.out, params, config)


def cmd_pretrain(run: Run) -> None:
    a = run.args
    params, config, history = pretrain(preset(a.preset), a.seed, a.samples, a.epochs, a.lr)
    _save_ckpt(run, a.out, params, config)
    run.print(f"held-out mse {fmt(history[-1])}")


def _save_ckpt(run: Run, path, params, config) -> None:
    run.write_bytes(path, dumps("checkpoint", {"config": config.to_dict()}, params))


def cmd_fisher(run: Run) -> None:
    a = run.args
    task = _task(run, a.train)
    data = _load(run, a.train, task)
    params, config = _task_model(run, task)
    fm = estimate_fisher(params, config, data, a.scope, a.max_samples, a.seed)
    meta = {"task": fm.task, "n_samples": fm.n_samples, "seed": fm.seed, "warnings": fm.warnings}
    run.write_bytes(a.out, dumps("fisher", meta, fm.values))
    for w in fm.warnings:
        print(f"warning: {w}", file=sys.stderr)
    run.print(f"{fm.task}: {fm.n_samples} samples, {sum(v.size for v in fm.values.values())} elements")


def _fishers(run: Run, paths: Sequence[str]) -> list[FisherMap]:
    return [FisherMap.load(run.read(p)) for p in paths]


def cmd_rank_components(run: Run) -> None:
    ranking = rank_components([summarize_components(fm) for fm in _fishers(run, run.args.fisher)])
    text = ranking_csv(ranking)
    if run.args.out:
        run.write_text(run.args.out, text)
    for line in text.splitlines()[1:]:
        rank, comp, score = line.split(",")
        run.print(f"{rank}\t{comp}\t{score}")


def cmd_mask(run: Run) -> None:
    a = run.args
    fishers = _fishers(run, a.fisher)
    target = a.exclude if a.mode == "cv" else a.task
    if a.mode == "cv" and not a.exclude:
        raise ValueError("--mode cv requires --exclude TASK")
    spec = build_mask(a.mode, fishers, a.fraction, target, a.candidates)
    run.write_bytes(a.out, spec.to_bytes())
    run.print(f"selected {spec.count()} elements (fraction {a.fraction}, sources {','.join(spec.sources)})")


def _plan(run: Run, strategy: str, params):
    a = run.args
    if strategy == "mask":
        if not a.mask:
            raise ValueError("--strategy mask requires --mask FILE")
        return MaskSpec.load(run.read(a.mask)).union(mask_from_elements(params, "head", "mask"))
    return make_freeze_plan(strategy, params, seed=a.seed)


def cmd_train(run: Run) -> None:
    a = run.args
    task = _task(run, a.train)
    train, validation = _load(run, a.train, task), _load(run, a.validation, task)
    params, config = _task_model(run, task)
    plan = _plan(run, a.strategy, params)
    report = grid_search(params, config, _train_config(a, a.strategy, task.metric), plan, train, validation,
                         threads=a.threads)
    out = Path(a.out_dir)
    run.write_text(out / "report.json", report.to_json())
    run.write_text(out / "metrics.csv", report.metrics_csv())
    _save_ckpt(run, out / "start.ckpt", params, config)
    _save_ckpt(run, out / "best.ckpt", report.best_params, config)
    run.print(f"{a.strategy}: lr={report.lr!r} epoch={report.epoch} {task.metric}={fmt(report.best_metric)} "
              f"trainable={report.trainable_count}")


def cmd_drift(run: Run) -> None:
    a = run.args
    pre, _ = load_checkpoint(run.read(a.pre))
    fine, _ = load_checkpoint(run.read(a.fine))
    # the task head may differ between checkpoints; drift is defined on encoder layers only
    shared = [p for p in pre if parse_layer_path(p) and p in fine]
    table = drift_heatmap({p: pre[p] for p in shared}, {p: fine[p] for p in shared})
    run.write_text(a.out, drift_csv(table))
    if a.svg:
        layers = sorted({layer for layer, _ in table})
        values = [[table.get((layer, c), 0.0) for layer in layers] for c in COMPONENTS]
        run.write_text(a.svg, heatmap_svg(COMPONENTS, [str(i) for i in layers], values, "drift D"))


def cmd_heatmap(run: Run) -> None:
    a = run.args
    fishers = _fishers(run, a.fisher)
    if len(fishers) == 1:
        values = fishers[0].values
    else:
        paths = resolve_selector(fishers[0].values, a.component).paths()
        values = global_fisher(fishers, paths)
    table = layer_heatmap(values, a.component)
    run.write_text(a.out, heatmap_csv(table))
    if a.svg:
        layers = sorted(table)
        rows = [f"layer {i}" for i in layers]
        run.write_text(a.svg, heatmap_svg(rows, ["weight", "bias"], [list(table[i]) for i in layers],
                                          f"Fisher {a.component}"))


def _vector(text: str) -> list[float]:
    out = []
    for token in text.replace("\n", ",").replace("\t", ",").split(","):
        token = token.strip()
        if not token:
            continue
        try:
            out.append(float(token))
        except ValueError:
            continue  # header cell
    return out


def cmd_kwtest(run: Run) -> None:
    groups = [_vector(Path(run.read(p)).read_text(encoding="utf-8")) for p in run.args.files]
    h, p = kruskal_wallis(groups)
    text = f"H={fmt(h)}\np={fmt(p)}"
    if run.args.out:
        run.write_text(run.args.out, "H,p\n" + f"{fmt(h)},{fmt(p)}\n")
    for line in text.splitlines():
        run.print(line)


def cmd_sweep_f(run: Run) -> None:
    a = run.args
    task = _task(run, a.train)
    train, validation = _load(run, a.train, task), _load(run, a.validation, task)
    params, config = _task_model(run, task)
    if a.mode == "task":
        fishers = [estimate_fisher(params, config, train, a.candidates, a.max_samples, a.seed)]
        target = fishers[0].task
    else:
        if not a.fisher:
            raise ValueError(f"--mode {a.mode} requires --fisher FILES")
        fishers = _fishers(run, a.fisher)
        target = task.name if a.mode == "cv" else None
    lines = ["f,metric,lr,epoch,trainable"]
    for f in _floats(a.fractions):
        plan = make_freeze_plan("mask", params, f, fishers, a.mode, target, a.seed, a.candidates)
        report = grid_search(params, config, _train_config(a, "mask", task.metric), plan, train, validation,
                             threads=a.threads)
        lines.append(f"{fmt(f)},{fmt(report.best_metric)},{fmt(report.lr)},{report.epoch},{report.trainable_count}")
        run.print(lines[-1])
    run.write_text(a.out, "\n".join(lines) + "\n")


# -- parser -------------------------------------------------------------------

def _model_opts(p: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    if checkpoint:
        p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh preset")
    p.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    p.add_argument("--num-labels", type=int, default=2)
    p.add_argument("--regression", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def _task_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=("single", "pairclass", "pairreg"),
                   help="task kind (inferred for synth:// sources)")
    p.add_argument("--metric", help="override the kind's default metric")
    p.add_argument("--labels", help="comma-separated label set for classification files")
    p.add_argument("--task-name", help="task name recorded in Fisher maps and masks")


def _train_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr-grid", help="comma-separated learning rates (default: strategy grid)")
    p.add_argument("--lr-scale", type=float, default=1.0, help="multiply every grid learning rate")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lntune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lntune {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="run manifest path (default derived from the outputs)")
    common.add_argument("--threads", type=int, default=1, help="cap on parallel grid cells")
    common.add_argument("--config", help="flat key = value file supplying option defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", parents=[common], help="count elements a selector or plan resolves to")
    _model_opts(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--selector", default="all")
    g.add_argument("--plan", choices=("full", "bitfit", "layernorm", "random"))
    p.set_defaults(func=cmd_count_params, preset="bert-large-cased")

    p = sub.add_parser("init", parents=[common], help="write a freshly initialized checkpoint")
    _model_opts(p, checkpoint=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("pretrain", parents=[common], help="desk-scale pre-training of an encoder")
    p.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=2048)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fisher", parents=[common], help="estimate a Fisher map for one task")
    _model_opts(p)
    _task_opts(p)
    p.add_argument("--train", required=True, help="TSV file or synth://<kind>/<seed>/<n>")
    p.add_argument("--scope", default="all", help="selector of paths to estimate")
    p.add_argument("--max-samples", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fisher)

    p = sub.add_parser("rank-components", parents=[common], help="rank encoder components by Fisher information")
    p.add_argument("fisher", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rank_components)

    p = sub.add_parser("mask", parents=[common], help="build a Fisher-guided trainability mask")
    p.add_argument("--mode", choices=("task", "global", "cv"), required=True)
    p.add_argument("--fraction", "-f", type=float, required=True)
    p.add_argument("--fisher", nargs="+", required=True)
    p.add_argument("--task", help="task whose map ranks elements (task mode)")
    p.add_argument("--exclude", help="task left out of the aggregation (cv mode)")
    p.add_argument("--candidates", default="output.LayerNorm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", parents=[common], help="fine-tune under a freeze plan with an lr grid")
    _model_opts(p)
    _task_opts(p)
    _train_opts(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="layernorm")
    p.add_argument("--mask", help="MaskSpec file for --strategy mask")
    p.add_argument("--train", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("drift", parents=[common], help="per-layer, per-component drift between checkpoints")
    p.add_argument("pre")
    p.add_argument("fine")
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("heatmap", parents=[common], help="per-layer LayerNorm Fisher sums")
    p.add_argument("fisher", nargs="+")
    p.add_argument("--component", default="output.LayerNorm")
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("kwtest", parents=[common], help="Kruskal-Wallis test over CSV value vectors")
    p.add_argument("files", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_kwtest)

    p = sub.add_parser("sweep-f", parents=[common], help="validation metric against mask fraction")
    _model_opts(p)
    _task_opts(p)
    _train_opts(p)
    p.add_argument("--train", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--fractions", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--mode", choices=("task", "global", "cv"), default="task")
    p.add_argument("--fisher", nargs="*", help="Fisher maps for global/cv modes")
    p.add_argument("--candidates", default="output.LayerNorm")
    p.add_argument("--max-samples", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_f)
    return parser


def read_config(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; a ``--config`` file supplies defaults that flags override."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((t for t in argv if t in choices), None)
    if known.config and command:
        subparser = choices[command]
        actions = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, raw in read_config(known.config).items():
            action = actions.get(key)
            if action is None or key in ("help", "config"):
                parser.error(f"config key {key!r} is not an option of {command}")
            if action.nargs in ("+", "*"):
                defaults[key] = raw.split()
            elif isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes")
            else:
                defaults[key] = action.type(raw) if action.type else raw
            action.required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if getattr(args, "out_dir", None):
        return Path(args.out_dir) / "manifest.json"
    if getattr(args, "out", None):
        return Path(str(args.out) + ".manifest.json")
    return Path(f"lntune-{args.command}.manifest.json")


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if SEED_ENV in os.environ and hasattr(args, "seed"):
        args.seed = int(os.environ[SEED_ENV])
    run = Run(args)
    if args.config:
        run.read(args.config)
    try:
        args.func(run)
    except Exception as exc:  # reported as a runtime failure
        print(f"lntune {args.command}: error: {exc}", file=sys.stderr)
        return 1
    path = _manifest_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(run.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
