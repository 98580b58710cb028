"""Command-line entry point.

Every command prints one JSON document on stdout and logs to stderr.

Exit codes: 0 ok, 2 usage or config, 3 data, 4 checkpoint, 5 numeric or
precondition error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .errors import CheckpointError, ConfigError, CottError, DataError, PreconditionError
from .evaluation import apply_monitors, format_report, hamming_loss, hierarchical_f1, relation_f1
from .reasoner import predict_batch, read_traces, rectify_probs, write_traces
from .training import TrainConfig, load_checkpoint, load_config, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4, 5
CONFIG_ENV = "COTT_CONFIG"

logger = logging.getLogger("cott")


class UsageError(Exception):
    pass


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv_floats(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()], dtype=np.float64)
    except ValueError:
        raise UsageError(f"not a comma-separated list of numbers: {text!r}") from None


def _split_metrics(task, instances, traces) -> dict:
    preds = [t.prediction for t in traces]
    golds = [x.label for x in instances]
    out: dict = {"n": len(instances)}
    out["hamming_loss"] = hamming_loss(
        [(*t.step, t.prediction) for t in traces], [(*x.step, x.label) for x in instances]
    )
    if task.kind == "re":
        score = relation_f1(preds, golds, task.negative_label or "no_relation")
        out.update(relation_f1=score.f1, precision=score.precision, recall=score.recall, defined=score.defined)
    else:
        levels = [*task.step_sets, task.labels]
        f1 = hierarchical_f1([(*t.step, t.prediction) for t in traces], [(*x.step, x.label) for x in instances], levels)
        out.update(
            micro_f1=f1["joint"][0],
            macro_f1=f1["joint"][1],
            leaf_micro_f1=f1["leaf"][0],
            leaf_macro_f1=f1["leaf"][1],
        )
    return out


def _load_split(path, kind: str, declared=None):
    task, splits = data_mod.load_dataset(path, kind, declared)
    instances = [x for items in splits.values() for x in items]
    return task, instances


# ----------------------------------------------------------------- commands


def cmd_train(args) -> dict:
    config_path = args.config or os.environ.get(CONFIG_ENV)
    config = load_config(config_path) if config_path else TrainConfig()
    config = config.replace(seed=args.seed)
    paths = {"train": args.train}
    if args.dev:
        paths["dev"] = args.dev
    task, splits = data_mod.load_dataset(paths, args.kind)
    log_fh = open(args.log + ".tmp", "w", encoding="utf-8") if args.log else None
    try:
        result = train(config, splits, task, log=log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    if args.log:
        os.replace(args.log + ".tmp", args.log)
    save_checkpoint(args.out, result.backend, result.head, task, config)
    payload = {
        "command": "train",
        "checkpoint": str(args.out),
        "seed": config.seed,
        "best_epoch": result.best_epoch,
        "selection_split": result.selection_split,
        "history": result.history,
    }
    for name, items in splits.items():
        traces = predict_batch(result.backend, task, items, keep_hidden=False)
        payload[name] = _split_metrics(task, items, traces)
    return payload


def cmd_eval(args) -> dict:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        kind = "re" if ckpt.task.kind == "re" else "hc"
        task, instances = _load_split(args.data, kind, ckpt.task)
        traces = predict_batch(ckpt.backend, task, instances, keep_hidden=False)
    else:
        with open(args.traces, encoding="utf-8") as fh:
            traces = read_traces(fh)
        task, instances = _load_split(args.data, args.kind)
        if len(traces) != len(instances):
            raise DataError(f"{len(traces)} traces vs {len(instances)} gold records")
        # score against the candidate sets the model actually used
        task = data_mod.TaskSpec(
            kind=task.kind,
            template=task.template,
            step_sets=tuple(d.candidates for d in traces[0].step_dists),
            labels=traces[0].rectified.candidates,
            negative_label=task.negative_label,
        )
    if task.kind == "re" and args.negative_label:
        task = dataclasses.replace(task, negative_label=args.negative_label)
    return {"command": "eval", **_split_metrics(task, instances, traces)}


def cmd_predict(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    kind = "re" if ckpt.task.kind == "re" else "hc"
    task, instances = _load_split(args.data, kind, ckpt.task)
    traces = predict_batch(ckpt.backend, task, instances, keep_hidden=not args.no_hidden)
    out = Path(args.trace_out)
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        write_traces(traces, fh)
    os.replace(tmp, out)
    return {"command": "predict", "n": len(traces), "trace_file": str(out)}


def cmd_monitor(args) -> dict:
    active = [m for m, on in (("M1", args.m1), ("M2", args.m2)) if on]
    with open(args.traces, encoding="utf-8") as fh:
        traces = read_traces(fh)
    golds = None
    if args.gold:
        _, instances = _load_split(args.gold, args.kind)
        golds = {x.id: x for x in instances}
    verdicts, report = apply_monitors(traces, golds, active)
    if args.text:
        print(format_report(report), file=sys.stderr)
    return {
        "command": "monitor",
        "report": report,
        "verdicts": [
            {"id": v.id, "m1_inconsistent": v.m1_inconsistent, "m2_wrong_step": v.m2_wrong_step, "accepted": v.accepted}
            for v in verdicts
        ],
    }


def cmd_rectify(args) -> dict:
    p1, p2 = _csv_floats(args.p1), _csv_floats(args.p2)
    rect = rectify_probs(args.conf, p1, p2)
    payload = {"command": "rectify", "conf": args.conf, "rectified": [float(v) for v in rect]}
    if args.labels:
        labels = [l.strip() for l in args.labels.split(",")]
        if len(labels) != len(rect):
            raise UsageError("--labels must have one entry per probability")
        payload["labels"] = labels
        payload["prediction"] = labels[int(np.argmax(rect))]
    return payload


def cmd_synth(args) -> dict:
    config = data_mod.SynthConfig(
        n_train=args.n_train,
        n_dev=args.n_dev,
        n_test=args.n_test,
        num_steps=args.steps,
        labels_per_step=args.labels_per_step,
        p_clue=args.p_clue,
        noise=args.noise,
        noise_mode=args.noise_mode,
        text_length=args.text_length,
        cues_per_step=args.cues_per_step,
        seed=args.seed,
    )
    task, splits = data_mod.synth_generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, items in splits.items():
        data_mod.save_hc(items, out / f"{name}.jsonl")
    _atomic_write(out / "task.json", json.dumps(task.to_dict(), indent=2))
    return {
        "command": "synth",
        "out": str(out),
        "seed": args.seed,
        "sizes": {k: len(v) for k, v in splits.items()},
        "steps": list(task.step_sets[0]),
        "labels": list(task.labels),
    }


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cott", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", help=f"flat JSON TrainConfig (default: ${CONFIG_ENV})")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--kind", choices=("hc", "re"), default="hc")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--log", help="per-step JSON lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a trace file against gold data")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--traces")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("hc", "re"), default="hc")
    p.add_argument("--negative-label", help="negative relation class (default: no_relation)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write reasoning traces as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trace-out", required=True)
    p.add_argument("--no-hidden", action="store_true", help="omit hidden vectors from traces")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("monitor", help="filter traces with the reasoning monitors")
    p.add_argument("--traces", required=True)
    p.add_argument("--gold")
    p.add_argument("--kind", choices=("hc", "re"), default="hc")
    p.add_argument("--m1", action="store_true", help="self-consistency monitor")
    p.add_argument("--m2", action="store_true", help="step-correctness monitor (needs --gold)")
    p.add_argument("--text", action="store_true", help="also print a table on stderr")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("rectify", help="mix step I and step II label probabilities")
    p.add_argument("--conf", type=float, required=True)
    p.add_argument("--p1", required=True, help="step I probabilities, comma separated")
    p.add_argument("--p2", required=True, help="step II probabilities, comma separated")
    p.add_argument("--labels", help="optional comma-separated label names")
    p.set_defaults(func=cmd_rectify)

    p = sub.add_parser("synth", help="generate a synthetic two-step corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-dev", type=int, default=0)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--labels-per-step", type=int, default=2)
    p.add_argument("--p-clue", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--noise-mode", choices=("uniform", "clueless"), default="uniform")
    p.add_argument("--text-length", type=int, default=8)
    p.add_argument("--cues-per-step", type=int, default=1)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        payload = args.func(args)
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        print(f"cott {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"cott {args.command}: checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as e:
        print(f"cott {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        code = EXIT_CHECKPOINT if args.command in ("eval", "predict") and getattr(args, "checkpoint", None) == e.filename else EXIT_DATA
        print(f"cott {args.command}: no such file: {e.filename}", file=sys.stderr)
        return code
    except (PreconditionError, CottError) as e:
        print(f"cott {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
