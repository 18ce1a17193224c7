"""Command-line entry point: ``python -m lamae <subcommand> ...``.

Configuration files hold flat ``key = value`` lines with ``#`` comments.
Keys are the fields of :class:`ModelConfig`, :class:`TrainConfig` and
:class:`EvalConfig`; ``lr`` is accepted as a short form of ``learning_rate``.
``--set key=value`` overrides are applied after the file. Every run writes
``effective_config.txt`` into its output directory.

Exit codes: 0 success, 2 usage error, 3 config error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import read_labels_csv, read_record, write_labels_csv, write_record
from .evaluate import (ProbeResult, compute_embeddings, finetune, hash_split, label_efficiency_sweep, summarize,
                       train_linear_probe, write_sweep_csv)
from .model import ModelConfig
from .synthgen import LABEL_NAMES, DipoleConfig, label_matrix, synth_dataset
from .train import (ConfigError, DivergenceError, TrainConfig, load_checkpoint, pretrain, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
ALIASES = {"lr": "learning_rate"}


@dataclass(frozen=True)
class EvalConfig:
    probe_iterations: int = 500
    probe_lr: float = 0.1
    finetune_with_masking: bool = False
    finetune_epochs: int = 10
    train_sizes: tuple = (100, 1000)
    sweep_seeds: tuple = (0, 1, 2, 3, 4)
    sweep_mode: str = "linear_probe"


@dataclass(frozen=True)
class Settings:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _owners():
    table = {}
    for section, cls in (("model", ModelConfig), ("train", TrainConfig), ("eval", EvalConfig)):
        for f in fields(cls):
            if f.name != "model":
                table[f.name] = (section, f)
    return table


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in ("grad_clip", "warmup_epochs") and raw.lower() in ("none", ""):
            return None
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None


def _parse_lines(text: str, origin: str) -> list:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_settings(path=None, overrides=()) -> Settings:
    """Typed, validated settings from a config file plus ``key=value`` overrides."""
    pairs = []
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        pairs += _parse_lines(text, str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))

    owners = _owners()
    defaults = {"model": ModelConfig(), "train": TrainConfig(), "eval": EvalConfig()}
    values = {"model": {}, "train": {}, "eval": {}}
    for key, raw in pairs:
        key = ALIASES.get(key, key)
        if key not in owners:
            raise ConfigError(f"unknown config key {key!r}")
        section, f = owners[key]
        values[section][key] = _convert(key, raw, getattr(defaults[section], f.name))

    def build(section, cls, **extra):
        try:
            return cls(**values[section], **extra)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            keys = ", ".join(sorted(values[section])) or "defaults"
            raise ConfigError(f"invalid {section} config ({keys}): {exc}") from None

    model = build("model", ModelConfig)
    train = build("train", TrainConfig, model=model)
    ev = build("eval", EvalConfig)
    if ev.sweep_mode not in ("linear_probe", "finetune"):
        raise ConfigError("config key 'sweep_mode' must be linear_probe or finetune")
    return Settings(model, train, ev)


def parse_config(path=None, overrides=()):
    """(ModelConfig, TrainConfig) from a flat config file and overrides."""
    s = load_settings(path, overrides)
    return s.model, s.train


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def effective_config_text(settings: Settings) -> str:
    lines = ["# effective configuration; reproduces this run when passed back via --config"]
    for section, obj in (("model", settings.model), ("train", settings.train), ("eval", settings.eval)):
        lines.append(f"# [{section}]")
        lines += [f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj) if f.name != "model"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data loading


def load_labeled(data: str, seed: int = 0):
    """(records, labels (N, k), label names) from a directory or ``synth:n=..`` spec."""
    if data.startswith("synth:"):
        opts = dict(kv.split("=", 1) for kv in data[len("synth:"):].split(",") if kv)
        cfg = DipoleConfig(seed=int(opts.get("seed", seed)), noise_std=float(opts.get("noise", 0.01)))
        records, labels = synth_dataset(int(opts.get("n", 1000)), cfg)
        return records, label_matrix(labels), LABEL_NAMES
    root = Path(data)
    if not root.is_dir():
        raise ConfigError(f"data directory {data!r} does not exist")
    ids, y, names = read_labels_csv(root / "labels.csv")
    records = [read_record(root / f"{rid}.lecg") for rid in ids]
    return records, y, tuple(names)


# ---------------------------------------------------------------------------
# subcommands


def _probe_result_json(r: ProbeResult) -> dict:
    return {"model": r.model, "mode": r.mode, "n_train": r.n_train, "seed": r.seed,
            "per_label_auroc": r.per_label, "macro_auroc": r.macro}


def cmd_synth(args, settings, out: Path) -> dict:
    cfg = DipoleConfig(seed=args.seed, noise_std=args.noise)
    records, labels = synth_dataset(args.n, cfg)
    for r in records:
        write_record(r, out / f"{r.record_id}.lecg")
    write_labels_csv(out / "labels.csv", [r.record_id for r in records], label_matrix(labels), LABEL_NAMES)
    return {"seed": args.seed, "n_records": len(records), "metrics": {}}


def cmd_pretrain(args, settings, out: Path) -> dict:
    cfg = settings.train
    if args.data:
        cfg = replace(cfg, dataset=args.data)
    resume = load_checkpoint(args.resume, cfg.model) if args.resume else None
    ckpt = pretrain(cfg, resume=resume, stop_after_epoch=args.stop_after_epoch,
                    on_epoch=lambda c: save_checkpoint(c, out / "checkpoint.lmae"))
    save_checkpoint(ckpt, out / "checkpoint.lmae")
    hist = ckpt.loss_history
    return {"seed": cfg.seed, "metrics": {"epochs": ckpt.epoch, "first_epoch_loss": hist[0] if hist else None,
                                          "final_loss": hist[-1] if hist else None, "steps": ckpt.step},
            "checkpoint": str(out / "checkpoint.lmae")}


def _tag(ckpt) -> str:
    return "lamae" if ckpt.model_config.latent_attention_enabled else "baseline"


def cmd_probe(args, settings, out: Path) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    records, y, names = load_labeled(args.data, settings.train.seed)
    emb = compute_embeddings(ckpt.tensors(), ckpt.model_config, records)
    res = train_linear_probe(emb, y, hash_split(len(records)), settings.train.seed, names, _tag(ckpt),
                             iterations=settings.eval.probe_iterations, lr=settings.eval.probe_lr)
    (out / "probe.json").write_text(json.dumps(_probe_result_json(res), indent=2))
    return {"seed": settings.train.seed, "metrics": _probe_result_json(res)}


def cmd_finetune(args, settings, out: Path) -> dict:
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    records, y, names = load_labeled(args.data, settings.train.seed)
    tag = "scratch" if ckpt is None else _tag(ckpt)
    res, _ = finetune(ckpt, records, y, hash_split(len(records)), settings.train, settings.train.seed, names, tag,
                      epochs=settings.eval.finetune_epochs,
                      finetune_with_masking=settings.eval.finetune_with_masking)
    (out / "finetune.json").write_text(json.dumps(_probe_result_json(res), indent=2))
    return {"seed": settings.train.seed, "metrics": _probe_result_json(res)}


def cmd_sweep(args, settings, out: Path) -> dict:
    models = {}
    for item in args.checkpoint:
        tag, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--checkpoint expects tag=path, got {item!r}")
        models[tag] = None if path == "scratch" else load_checkpoint(path)
    records, y, names = load_labeled(args.data, settings.train.seed)
    ev = settings.eval
    results = label_efficiency_sweep(models, records, y, ev.train_sizes, ev.sweep_mode, ev.sweep_seeds,
                                     label_names=names, finetune_config=settings.train,
                                     finetune_epochs=ev.finetune_epochs)
    write_sweep_csv(results, out / "sweep.csv")
    summary = {f"{m}/{mode}/{n}": {"mean": mu, "std": sd} for (m, mode, n), (mu, sd) in summarize(results).items()}
    return {"seed": settings.train.seed, "metrics": summary, "csv": str(out / "sweep.csv")}


def cmd_eval_icd(args, settings, out) -> dict:
    if args.expand:
        result = [str(c) for c in dataio.expand_icd(args.expand)]
    elif args.normalize:
        c = dataio.normalize_icd(args.normalize)
        result = {"code": c.code, "level": c.level}
    else:
        result = dataio.covered_categories()
    return result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lamae", description="Multi-lead masked autoencoder toolkit")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("synth", help="write synthetic LECG records and labels.csv")
    common(sp)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", type=float, default=0.01)

    sp = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(sp)
    sp.add_argument("--data", help="dataset spec: directory of .lecg files or synth:n=..,seed=..,noise=..")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--stop-after-epoch", type=int)

    for name, text in (("probe", "linear probe on frozen embeddings"), ("finetune", "end-to-end fine-tuning")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--checkpoint", required=(name == "probe"))
        sp.add_argument("--data", required=True, help="directory with .lecg files and labels.csv, or synth:n=..")

    sp = sub.add_parser("sweep", help="label-efficiency sweep to CSV")
    common(sp)
    sp.add_argument("--checkpoint", action="append", required=True, metavar="TAG=PATH",
                    help="model to evaluate; PATH 'scratch' means a randomly initialized backbone")
    sp.add_argument("--data", required=True)

    sp = sub.add_parser("eval-icd", help="normalize or expand ICD-10 chapter IX codes")
    common(sp, out_required=False)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--expand")
    g.add_argument("--normalize")
    g.add_argument("--list-categories", action="store_true")
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "probe": cmd_probe, "finetune": cmd_finetune,
            "sweep": cmd_sweep, "eval-icd": cmd_eval_icd}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        settings = load_settings(args.config, args.set)
        out = None
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "effective_config.txt").write_text(effective_config_text(settings))
        result = COMMANDS[args.subcommand](args, settings, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, dataio.RecordFormatError, dataio.CsvFormatError, dataio.IcdError, OSError,
            ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.subcommand == "eval-icd":
        print(json.dumps(result))
    else:
        summary = {"subcommand": args.subcommand, "seed": result.pop("seed"),
                   "wall_time_s": round(time.perf_counter() - start, 3), "metrics": result.pop("metrics")}
        summary.update(result)
        print(json.dumps(summary))
    return EXIT_OK
