"""Command-line entry point: gen-data, train, eval, ablate, wer-analysis.

Every subcommand writes only under ``--out`` and leaves one ``manifest.json``
there. Exit status is 0 on success, 1 on usage errors and 2 on runtime
failures.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import __version__
from .checkpoint import Checkpoint
from .evaluation import (
    ABLATIONS, DEFAULT_BUCKET_EDGES, EVAL_MODES, ablation_run, evaluate, wer_bucket_analysis,
    write_ablation, write_bucket_rows, write_reports,
)
from .losses import TERMS, LossWeights
from .model import ModelConfig
from .synthdata import CorpusFormatError, gen_corpus, load_task, make_task, read_corpus, save_task, write_corpus
from .trainer import NonFiniteLossError, TrainConfig, Trainer, split_flat_config

log = logging.getLogger("fstlab")

SPLITS = ("train", "dev", "test")
GEN_DEFAULTS = {
    "seed": 0,
    "vocab": 32,
    "frame_dim": 8,
    "n_train": 2000,
    "n_dev": 200,
    "n_test": 200,
    "wer_schedule": "0:0.5,0.22:0.5",
    "noise_sigma": 1.0,
    "min_len": 6,
    "max_len": 12,
    "frames_min": 4,
    "frames_max": 8,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract here reserves 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_identity():
    from .kernels import BACKEND
    import torch

    return f"fstlab {__version__} (kernels={BACKEND}, torch={torch.__version__}, numpy={np.__version__})"


def parse_schedule(text):
    """'0:0.5,0.22:0.5' -> [(0.0, 0.5), (0.22, 0.5)]."""
    out = []
    for part in str(text).split(","):
        try:
            w, f = part.split(":")
            out.append((float(w), float(f)))
        except ValueError:
            raise UsageError(f"bad WER schedule entry {part!r} (expected wer:fraction)") from None
    if any(not 0 <= w <= 1 or f < 0 for w, f in out) or abs(sum(f for _, f in out) - 1) > 1e-9:
        raise UsageError(f"bad WER schedule {text!r}: rates in [0,1], fractions summing to 1")
    return out


def parse_edges(text):
    try:
        edges = [float(x) for x in str(text).split(",")]
    except ValueError:
        raise UsageError(f"bad bucket edges {text!r}") from None
    if edges != sorted(set(edges)) or edges[0] != 0:
        raise UsageError(f"bucket edges must start at 0 and increase strictly: {text!r}")
    return edges


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict) or any(isinstance(v, (dict, list)) for v in cfg.values()):
        raise UsageError(f"config {path} must be a flat JSON object")
    return cfg


def merge(config, args, keys):
    """Config file values, overridden by any flag given on the command line."""
    out = dict(config)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


class Run:
    """Bookkeeping for one invocation: output dir, inputs, artifacts, manifest."""

    def __init__(self, command, args):
        self.command = command
        self.out = os.path.abspath(args.out)
        self.started = time.time()
        self.inputs = {}
        self.config_path = getattr(args, "config", None)
        self.extra = {}

    def path(self, name):
        # created on first write so failed validation leaves nothing behind
        os.makedirs(self.out, exist_ok=True)
        return os.path.join(self.out, name)

    def add_input(self, path):
        self.inputs[os.path.abspath(path)] = sha256(path)

    def finish(self, seed=None):
        artifacts = {}
        self.path("")
        for name in sorted(os.listdir(self.out)):
            p = self.path(name)
            if name != "manifest.json" and os.path.isfile(p):
                artifacts[name] = sha256(p)
        manifest = {
            "command": self.command,
            "argv": sys.argv[1:],
            "version": build_identity(),
            "config_path": os.path.abspath(self.config_path) if self.config_path else None,
            "inputs": self.inputs,
            "seed": seed,
            "out": self.out,
            "started": self.started,
            "finished": time.time(),
            "artifacts": artifacts,
            **self.extra,
        }
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest


def _data_file(data, split):
    path = os.path.join(data, f"{split}.jsonl") if os.path.isdir(data) else data
    if not os.path.isfile(path):
        raise FileNotFoundError(f"corpus not found: {path}")
    return path


def _read(run, data, split):
    path = _data_file(data, split)
    run.add_input(path)
    return read_corpus(path)


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    cfg = merge(load_config(args.config), args, GEN_DEFAULTS)
    unknown = set(cfg) - set(GEN_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown gen-data config keys: {sorted(unknown)}")
    cfg = {**GEN_DEFAULTS, **cfg}
    schedule = parse_schedule(cfg["wer_schedule"])
    try:
        task = make_task(int(cfg["seed"]), int(cfg["vocab"]), int(cfg["frame_dim"]),
                         (int(cfg["frames_min"]), int(cfg["frames_max"])))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = Run("gen-data", args)
    save_task(run.path("task.json"), task)
    sizes = {"train": cfg["n_train"], "dev": cfg["n_dev"], "test": cfg["n_test"]}
    for i, split in enumerate(SPLITS):
        n = int(sizes[split])
        if n <= 0:
            continue
        # one independent stream per split so split sizes do not shift each other
        rng = np.random.default_rng([int(cfg["seed"]), i])
        samples = gen_corpus(task, n, schedule, rng, (int(cfg["min_len"]), int(cfg["max_len"])),
                             float(cfg["noise_sigma"]))
        write_corpus(run.path(f"{split}.jsonl"), samples)
        log.info("wrote %d %s samples", n, split)
    run.extra["gen_config"] = cfg
    run.finish(int(cfg["seed"]))
    return 0


TRAIN_KEYS = (
    [f.name for f in fields(ModelConfig) if f.name not in ("vocab_size", "frame_dim")]
    + [f.name for f in fields(TrainConfig) if f.name != "weights"]
    + [f.name for f in fields(LossWeights)]
)


def _train_configs(args, task):
    flat = merge(load_config(args.config), args, TRAIN_KEYS)
    flat["vocab_size"], flat["frame_dim"] = task.vocab_size, task.frame_dim
    try:
        return split_flat_config(flat)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    task_path = os.path.join(args.data, "task.json")
    if not os.path.isfile(task_path):
        raise FileNotFoundError(f"no task.json in {args.data}")
    task = load_task(task_path)
    model_cfg, train_cfg = _train_configs(args, task)
    resume_cfg = _resume_config(args, args.resume) if args.resume else None
    run = Run("train", args)
    run.add_input(task_path)
    train = _read(run, args.data, "train")
    dev_path = os.path.join(args.data, "dev.jsonl")
    dev = _read(run, args.data, "dev") if os.path.isfile(dev_path) else None
    if args.resume:
        _check_resume_inputs(run)
        run.add_input(args.resume)
        trainer = Trainer.resume(args.resume, train, dev=dev, out_dir=run.out, config=resume_cfg)
        run.extra["resumed_from_step"] = trainer.step
        train_cfg, model_cfg = trainer.config, trainer.model.config
    else:
        trainer = Trainer(train, train_cfg, model_cfg, dev=dev, out_dir=run.out)
    with open(run.path("config.json"), "w") as fh:
        json.dump({**model_cfg.to_dict(), **train_cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.extra["ablate"] = sorted(train_cfg.ablate)
    try:
        result = trainer.train()
    finally:
        run.extra["steps_completed"] = trainer.step
    run.extra["best_step"] = result.best_step
    run.extra["best_dev_ft_bleu"] = result.best_score if result.best_step else None
    run.finish(train_cfg.seed)
    return 0


def _resume_config(args, path):
    """The checkpoint's training config with any flags given now applied on top."""
    ckpt = Checkpoint(path)
    if ckpt.train_config_dict is None:
        raise ValueError(f"{path} holds no training config")
    flat = {**ckpt.model_config.to_dict(), **ckpt.train_config_dict}
    model_keys = {f.name for f in fields(ModelConfig)}
    for k in TRAIN_KEYS:
        v = getattr(args, k, None)
        if v is None:
            continue
        if k in model_keys and v != flat[k]:
            raise UsageError(f"--{k.replace('_', '-')} cannot change when resuming")
        flat[k] = v
    try:
        _, cfg = split_flat_config(flat)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _check_resume_inputs(run):
    """Resuming against a changed corpus would silently break reproducibility."""
    old = os.path.join(run.out, "manifest.json")
    if not os.path.isfile(old):
        return
    with open(old) as fh:
        previous = json.load(fh).get("inputs", {})
    for path, digest in run.inputs.items():
        if path in previous and previous[path] != digest:
            raise RuntimeError(f"input changed since the original run: {path}")


def _load_checkpoint(run, path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    run.add_input(path)
    return Checkpoint(path)


def cmd_eval(args):
    modes = [m for m in args.modes.split(",") if m]
    bad = [m for m in modes if m not in EVAL_MODES]
    if bad or not modes:
        raise UsageError(f"--modes must be drawn from {','.join(EVAL_MODES)}")
    run = Run("eval", args)
    ckpt = _load_checkpoint(run, args.checkpoint)
    corpus = _read(run, args.data, args.split)
    reports = evaluate(ckpt, corpus, modes)
    write_reports(reports, run.path("reports.csv"), run.path("reports.jsonl"))
    for r in reports:
        log.info("%-10s BLEU %6.2f  EM %.3f  n=%d", r.mode, r.bleu, r.exact_match, r.n_sentences)
    run.finish()
    return 0


def cmd_wer_analysis(args):
    edges = parse_edges(args.edges)
    run = Run("wer-analysis", args)
    ckpt = _load_checkpoint(run, args.checkpoint)
    corpus = _read(run, args.data, args.split)
    rows = wer_bucket_analysis(ckpt, corpus, edges)
    write_bucket_rows(rows, run.path("buckets.csv"), run.path("buckets.jsonl"))
    run.finish()
    return 0


def cmd_ablate(args):
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s]
    except ValueError:
        raise UsageError(f"bad --seeds {args.seeds!r}") from None
    names = list(ABLATIONS) if args.masks is None else [m for m in args.masks.split(",") if m]
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown or not names or not seeds:
        raise UsageError(f"--masks must be drawn from {','.join(ABLATIONS)}")
    task_path = os.path.join(args.data, "task.json")
    if not os.path.isfile(task_path):
        raise FileNotFoundError(f"no task.json in {args.data}")
    task = load_task(task_path)
    model_cfg, train_cfg = _train_configs(args, task)
    run = Run("ablate", args)
    run.add_input(task_path)
    train = _read(run, args.data, "train")
    test = _read(run, args.data, "test")
    dev_path = os.path.join(args.data, "dev.jsonl")
    dev = _read(run, args.data, "dev") if os.path.isfile(dev_path) else None
    masks = {n: ABLATIONS[n] for n in names}
    rows = ablation_run(train, test, model_cfg, train_cfg, masks, seeds, dev=dev,
                        progress=lambda r: log.info("%s", r))
    write_ablation(rows, run.path("ablation.csv"))
    summary = {}
    for name in names:
        sub = [r for r in rows if r["config"] == name]
        summary[name] = {col: {"mean": float(np.mean([r[col] for r in sub])),
                               "std": float(np.std([r[col] for r in sub]))}
                         for col in ("mt_golden", "mt_asr", "st", "ft")}
    with open(run.path("ablation_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    run.extra.update(masks={n: list(m) for n, m in masks.items()}, seeds=seeds)
    run.finish(seeds[0])
    return 0


# -- parser ------------------------------------------------------------------------


def _add_train_flags(p):
    typed = {f.name: f for f in fields(ModelConfig)}
    typed.update({f.name: f for f in fields(TrainConfig)})
    typed.update({f.name: f for f in fields(LossWeights)})
    g = p.add_argument_group("model / training / loss weights (override --config)")
    for key in TRAIN_KEYS:
        f = typed[key]
        flag = "--" + key.replace("_", "-")
        if key == "ablate":
            g.add_argument(flag, default=None, metavar="TERMS",
                           help=f"comma-separated loss terms to zero: {','.join(TERMS)}")
        elif key == "pretrain_mt_steps":
            g.add_argument("--pretrain-mt", "--pretrain-mt-steps", dest=key, type=int, nargs="?",
                           const=1000, default=None, metavar="STEPS",
                           help="MT-only warm-up phase before joint training (default 1000 steps if bare)")
        elif f.type in (bool, "bool"):
            g.add_argument(flag, dest=key, default=None, type=_bool, metavar="BOOL")
        else:
            kind = {"int": int, "float": float, "str": str}.get(getattr(f.type, "__name__", f.type), str)
            g.add_argument(flag, dest=key, default=None, type=kind)


def _bool(text):
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser():
    p = _Parser(prog="fstlab", description="Fused speech-text translation lab on synthetic data.")
    p.add_argument("--version", action="version", version=build_identity())
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a task and train/dev/test corpora")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--vocab", type=int)
    g.add_argument("--frame-dim", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-dev", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--wer-schedule", help="wer:fraction pairs, e.g. 0:0.5,0.22:0.5")
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--min-len", type=int)
    g.add_argument("--max-len", type=int)
    g.add_argument("--frames-min", type=int)
    g.add_argument("--frames-max", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated data directory")
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume", metavar="CHECKPOINT")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="BLEU and exact match per input mode")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="corpus file or gen-data directory")
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--out", required=True)
    e.add_argument("--modes", default=",".join(EVAL_MODES))
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score each loss-ablation configuration")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--seeds", default="0")
    a.add_argument("--masks", help=f"subset of {','.join(ABLATIONS)}")
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)

    w = sub.add_parser("wer-analysis", help="FT minus MT-asr BLEU per WER bucket")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--split", default="test", choices=SPLITS)
    w.add_argument("--out", required=True)
    w.add_argument("--edges", default=",".join(str(e) for e in DEFAULT_BUCKET_EDGES))
    w.set_defaults(func=cmd_wer_analysis)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CorpusFormatError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
