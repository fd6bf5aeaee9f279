"""Command line entry point: ``rcar <subcommand> ...``.

Config files are flat ``key = value`` lines (``#`` starts a comment); ``--set
key=value`` overrides them. Every subcommand that produces files writes them
to a run directory together with a ``config.json`` snapshot.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .datamodel import SyntheticSpec, load_dataset, read_feature_header, read_manifest, save_dataset, synthetic_dataset
from .errors import ConfigError, DataError, RcarError
from .evaluation import bidirectional_recall, five_fold_eval
from .gradcheck import FRAGMENTS, ProbeSpec, grad_check
from .pipeline import PipelineConfig, ensemble, matrix_to_records, read_scores, records_to_matrix, write_scores
from .training import LossConfig, TrainConfig, TrainSchedule, model_from_checkpoint, score_dataset, train

EXIT_GRAD_CHECK_FAILED = 3


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return json.loads(text)
    except ValueError:
        return text


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    out = {}
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = parse_value(value)
    return out


def apply_overrides(values: dict, overrides: Sequence[str] | None) -> dict:
    values = dict(values)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = parse_value(value)
    return values


_PIPELINE_KEYS = {f.name for f in dataclasses.fields(PipelineConfig)}
_TRAIN_KEYS = {"steps", "margin", "batch_size", "host_warmup_epochs", "lr", "epochs", "lr_decay", "decay_epochs", "schedule", "embed_dim", "seed", "grad_clip"}


def train_config_from(values: dict) -> TrainConfig:
    unknown = set(values) - _PIPELINE_KEYS - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    mode = values.get("mode", "rcar")
    pipe_kw = {k: v for k, v in values.items() if k in _PIPELINE_KEYS and k != "mode"}
    if "n_rar" in pipe_kw or "n_rcr" in pipe_kw:
        pipeline = PipelineConfig(mode=mode, **pipe_kw)
    else:
        pipeline = PipelineConfig.for_mode(mode, int(values.get("steps", 2)), **pipe_kw)

    preset = values.get("schedule")
    if preset is not None:
        if preset not in ("coco", "flickr"):
            raise ConfigError(f"schedule must be coco or flickr, got {preset!r}")
        schedule = getattr(TrainSchedule, preset)()
    else:
        lr = float(values.get("lr", 2e-4))
        phases = [(lr, int(values.get("epochs", 10)))]
        if values.get("decay_epochs"):
            phases.append((lr * float(values.get("lr_decay", 0.1)), int(values["decay_epochs"])))
        schedule = TrainSchedule(tuple(phases))
    loss = LossConfig(float(values.get("margin", 0.2)), int(values.get("batch_size", 128)))
    grad_clip = values.get("grad_clip")
    return TrainConfig(
        pipeline, loss, schedule,
        embed_dim=int(values.get("embed_dim", 300)),
        seed=int(values.get("seed", 0)),
        grad_clip=None if grad_clip is None else float(grad_clip),
        host_warmup_epochs=int(values.get("host_warmup_epochs", 0)),
    )


def _run_dir(path: str, snapshot: dict) -> str:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
    return path


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise ConfigError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks:
        raise ConfigError("--ks is empty")
    return ks


# -- subcommands -----------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    values = apply_overrides(read_config(args.config), args.set)
    names = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")
    spec = SyntheticSpec(**values)
    data = synthetic_dataset(spec)
    save_dataset(args.out, data)
    _run_dir(args.out, {"command": "gen-synthetic", "synthetic": dataclasses.asdict(spec)})
    print(f"wrote {len(data.regions)} images / {len(data.sentences)} captions to {args.out}")
    return 0


def cmd_train(args) -> int:
    values = apply_overrides(read_config(args.config), args.set)
    config = train_config_from(values)
    data = load_dataset(args.data)
    valid = load_dataset(args.valid) if args.valid else None
    run = _run_dir(args.run_dir, {"command": "train", "data": args.data, "valid": args.valid, "values": values, **config.snapshot()})
    result = train(config, data, valid=valid, run_dir=run)
    with open(os.path.join(run, "history.json"), "w", encoding="utf-8") as fh:
        json.dump(result.history, fh, indent=2)
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} epochs, final loss {last.get('loss', float('nan')):.4f}; checkpoints in {run}")
    return 0


def _report(reports, folded=None) -> dict:
    out = {name: r.to_dict() for name, r in reports.items()}
    if folded is not None:
        out = {"full": out, "five_fold_mean": {n: r.to_dict() for n, r in folded.mean.items()}}
    return out


def _print_reports(reports) -> None:
    for name, r in reports.items():
        cells = "  ".join(f"R@{k}={v:.4f}" for k, v in sorted(r.recalls.items()))
        print(f"{name:14s} {cells}  rsum={r.rsum:.4f}")


def cmd_eval(args) -> int:
    ks = _parse_ks(args.ks)
    if bool(args.scores) == bool(args.checkpoint):
        raise ConfigError("eval needs exactly one of --scores or --checkpoint")
    run = _run_dir(args.run_dir, {"command": "eval", **{k: v for k, v in vars(args).items() if k != "func"}})
    if args.scores:
        if not args.manifest:
            raise ConfigError("--scores needs --manifest")
        manifest = read_manifest(args.manifest)
        image_ids, caption_ids = manifest.image_ids, manifest.caption_ids
        sims = records_to_matrix(read_scores(args.scores), image_ids, caption_ids)
        index = {x: i for i, x in enumerate(image_ids)}
        targets = np.array([index[manifest.image_of(c)] for c in caption_ids])
    else:
        if not args.data:
            raise ConfigError("--checkpoint needs --data")
        model = model_from_checkpoint(ckpt_io.load(args.checkpoint))
        data = load_dataset(args.data)
        sims = score_dataset(model, data)
        targets = data.caption_targets()
        records = matrix_to_records(
            sims, [r.image_id for r in data.regions], [s.caption_id for s in data.sentences],
            model.config.direction, model.config.mode,
        )
        write_scores(os.path.join(run, "scores.tsv"), records)
        manifest = data.manifest
    reports = bidirectional_recall(sims, targets, ks)
    folded = None
    if args.five_fold:
        cpi = manifest.captions_per_image
        if not np.array_equal(targets, np.repeat(np.arange(sims.shape[0]), cpi)):
            raise DataError("five-fold evaluation needs captions grouped by image in manifest order")
        folded = five_fold_eval(sims, cpi, 5, ks)
    _print_reports(reports)
    if folded is not None:
        print("five-fold mean:")
        _print_reports(folded.mean)
    with open(os.path.join(run, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(_report(reports, folded), fh, indent=2)
    return 0


def cmd_ensemble(args) -> int:
    paths = [p for p in args.inputs.split(",") if p]
    if len(paths) != 2:
        raise ConfigError(f"--in expects two comma-separated score files, got {len(paths)}")
    merged = ensemble(read_scores(paths[0]), read_scores(paths[1]))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _run_dir(args.run_dir or out_dir, {"command": "ensemble", "inputs": paths, "out": args.out})
    write_scores(args.out, merged)
    print(f"wrote {len(merged)} ensembled scores to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    names = sorted(FRAGMENTS) if args.fragment == "all" else args.fragment.split(",")
    spec_kw = dict(probes=args.probes, seed=args.seed, step=args.step, tol=args.tol, corrupt=args.corrupt)
    reports = [grad_check(name, ProbeSpec(**spec_kw)) for name in names]
    for r in reports:
        print(r.summary())
    if args.run_dir:
        _run_dir(args.run_dir, {"command": "grad-check", "fragments": names, **spec_kw})
        with open(os.path.join(args.run_dir, "grad_check.json"), "w", encoding="utf-8") as fh:
            json.dump([{k: v for k, v in dataclasses.asdict(r).items() if k != "errors"} | {"passed": r.passed} for r in reports], fh, indent=2)
    return 0 if all(r.passed for r in reports) else EXIT_GRAD_CHECK_FAILED


def cmd_inspect(args) -> int:
    path = args.path
    if os.path.isdir(path):
        data = load_dataset(path)
        print(f"dataset {path}: {len(data.regions)} images, {len(data.sentences)} captions, vocab {data.vocab_size}")
        print(f"regions per image {data.regions[0].num_regions}, raw width {data.regions[0].raw_dim}, split {data.manifest.split!r}")
        return 0
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"XMRF":
        with open(path, "rb") as fh:
            n, K, d = read_feature_header(fh)
        print(f"feature file {path}: {n} images x {K} regions x {d} channels")
    elif head[:2] == b"PK":
        ck = ckpt_io.load(path)
        total = sum(int(np.prod(v.shape)) for v in ck.tensors.values())
        print(f"checkpoint {path}: {len(ck.tensors)} tensors, {total} parameters")
        for name, v in sorted(ck.tensors.items()):
            print(f"  {name:50s} {tuple(v.shape)}")
        print(json.dumps(ck.config, indent=2, sort_keys=True))
    else:
        records = read_scores(path)
        scores = np.array([r.score for r in records])
        pairs = sorted({(r.direction, r.mode) for r in records})
        print(f"scores {path}: {len(records)} pairs, direction/mode {pairs}")
        if len(scores):
            print(f"  min {scores.min():.6g}  mean {scores.mean():.6g}  max {scores.max():.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcar", description="Image-text matching with attention regulators.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train a matching model")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--data", required=True)
    t.add_argument("--valid")
    t.add_argument("--run-dir", default="runs/train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="recall@K from a score file or a checkpoint")
    e.add_argument("--scores")
    e.add_argument("--manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--ks", default="1,5,10")
    e.add_argument("--five-fold", action="store_true")
    e.add_argument("--run-dir", default="runs/eval")
    e.set_defaults(func=cmd_eval)

    en = sub.add_parser("ensemble", help="average two score files per pair")
    en.add_argument("--in", dest="inputs", required=True, metavar="A,B")
    en.add_argument("--out", required=True)
    en.add_argument("--run-dir")
    en.set_defaults(func=cmd_ensemble)

    gc = sub.add_parser("grad-check", help="finite-difference gradient audit")
    gc.add_argument("--fragment", default="all", help=f"one of {sorted(FRAGMENTS)}, comma-separated, or 'all'")
    gc.add_argument("--probes", type=int, default=50)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--step", type=float, default=1e-3)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--corrupt", help="scale this parameter's analytic gradient by 1.1 (self-test)")
    gc.add_argument("--run-dir")
    gc.set_defaults(func=cmd_grad_check)

    i = sub.add_parser("inspect", help="summarize a dataset dir, feature file, checkpoint or score file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RcarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
