"""Command-line entry point: ``tbcnn <command> [options]``.

Every command that writes files puts them under ``--out`` together with
``config.json``, the fully resolved run configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._runtime import tune_allocator
from .config import RunConfig
from .data import LOCATIONS, Dataset, generate_synthetic, rankings_for, split_by_major, \
    write_labels, write_records
from .gradcheck import run_suite
from .model import BRANCHES, Checkpoint, embed, export_attention
from .train import evaluate, train

logger = logging.getLogger("tbcnn")

LOSS_FLAGS = {"topk": "topk_focused", "uniform": "uniform"}


class CommandError(Exception):
    pass


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CommandError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve(args, extra: dict | None = None) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = _parse_set(getattr(args, "set", None))
    overrides.update(extra or {})
    return cfg.with_overrides(overrides) if overrides else cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(cfg: RunConfig, data_dir: str) -> Dataset:
    ds = Dataset.load(data_dir, cfg.dims)
    if not ds.labels:
        raise CommandError(f"{data_dir}: no students in labels.csv")
    return ds


def _checkpoint_context(path: str, data_dir: str) -> tuple[Checkpoint, RunConfig, Dataset]:
    ckpt = Checkpoint.load(path)
    cfg = RunConfig.from_flat(ckpt.run_config) if ckpt.run_config else RunConfig()
    return ckpt, cfg, _load_data(cfg, data_dir)


def _split_part(cfg: RunConfig, ds: Dataset, name: str) -> dict[str, list[int]]:
    if name == "all":
        part: dict[str, list[int]] = {}
        for lab in ds.labels:
            part.setdefault(lab.major, []).append(lab.student)
        return {m: sorted(ids) for m, ids in part.items()}
    return split_by_major(ds.labels, seed=cfg.split_seed).part(name)


# commands ------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve(args, {"synthetic.seed": args.seed} if args.seed is not None else None)
    out = _out_dir(args.out)
    syn = generate_synthetic(cfg.synthetic_config())
    write_records(out / "records.jsonl", syn.records)
    write_labels(out / "labels.csv", syn.labels)
    cfg.with_overrides({"paths.out": str(out)}).save(out / "config.json")
    print(f"wrote {len(syn.records)} records for {len(syn.labels)} students to {out}")
    return 0


def cmd_train(args) -> int:
    extra: dict = {"paths.data": args.data, "paths.out": args.out}
    if args.branches is not None:
        branches = list(dict.fromkeys(args.branches.upper()))
        if not branches or set(branches) - set(BRANCHES):
            raise CommandError(f"--branches takes a subset of {''.join(BRANCHES)}, "
                               f"got {args.branches!r}")
        extra["model.enabled_branches"] = branches
    if args.no_attention:
        extra["model.attention_enabled"] = False
    if args.loss is not None:
        extra["train.loss_mode"] = LOSS_FLAGS[args.loss]
    if args.epochs is not None:
        extra["train.epochs"] = args.epochs
    if args.seed is not None:
        extra["train.seed"] = args.seed
    cfg = _resolve(args, extra)
    out = _out_dir(args.out)
    cfg.save(out / "config.json")
    ds = _load_data(cfg, args.data)
    split = split_by_major(ds.labels, seed=cfg.split_seed)
    model_cfg = cfg.model_for({lab.major for lab in ds.labels})
    result = train(ds, split, model_cfg, cfg.train, run_config=cfg.to_flat(),
                   log_path=out / "train_log.jsonl")
    result.final.save(out / "checkpoint_final.json")
    result.best.save(out / "checkpoint_best.json")
    report = evaluate(result.best, ds, split.test)
    _write_json(out / "metrics_test.json", report.to_dict())
    macro = report.macro
    print(f"test macro: acc={macro['acc']:.4f} rho={macro['rho']:.4f} "
          f"p@10={_fmt(macro['p_at_10'])} p@20={_fmt(macro['p_at_20'])} "
          f"(best epoch {result.best.epoch})")
    return 0


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def cmd_eval(args) -> int:
    ckpt, cfg, ds = _checkpoint_context(args.checkpoint, args.data)
    report = evaluate(ckpt, ds, _split_part(cfg, ds, args.split))
    out = _out_dir(args.out)
    cfg.with_overrides({"paths.data": args.data, "paths.out": str(out)}).save(out / "config.json")
    _write_json(out / f"metrics_{args.split}.json", report.to_dict())
    print(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, h=args.h, tol=args.tol)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<34} max rel err {r.max_rel_error:.2e}"
              f"  ({r.checked} entries)")
    failed = [r.name for r in results if not r.passed]
    if args.out:
        out = _out_dir(args.out)
        _write_json(out / "config.json", {"seed": args.seed, "h": args.h, "tol": args.tol})
        _write_json(out / "gradcheck.json", [r.__dict__ for r in results])
    print(f"{len(results) - len(failed)}/{len(results)} cases passed")
    return 1 if failed else 0


def cmd_export_attention(args) -> int:
    ckpt, cfg, ds = _checkpoint_context(args.checkpoint, args.data)
    part = _split_part(cfg, ds, args.split)
    students = [s for m in sorted(part) for s in part[m]]
    weights = export_attention(np.stack([ds.tensors[s] for s in students]), ckpt.params, ckpt.config)
    out = _out_dir(args.out)
    cfg.with_overrides({"paths.data": args.data, "paths.out": str(out)}).save(out / "config.json")
    with open(out / "attention.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "index", "label", "weight"])
        for axis, vec in weights.items():
            for i, v in enumerate(vec):
                label = LOCATIONS[i] if axis == "location" and len(vec) == len(LOCATIONS) else str(i)
                w.writerow([axis, i, label, repr(float(v))])
    print(f"wrote attention for {len(students)} students to {out / 'attention.csv'}")
    return 0


def cmd_export_embeddings(args) -> int:
    ckpt, cfg, ds = _checkpoint_context(args.checkpoint, args.data)
    part = _split_part(cfg, ds, args.split)
    truths = rankings_for(part, ds.gpa)
    frozen = ckpt.params.frozen()
    out = _out_dir(args.out)
    cfg.with_overrides({"paths.data": args.data, "paths.out": str(out)}).save(out / "config.json")
    rows = 0
    with open(out / "embeddings.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        width = ckpt.config.fusion_hidden[1]
        w.writerow(["student", "major", "true_position"] + [f"e{i}" for i in range(width)])
        for major in sorted(part):
            ids = part[major]
            if not ids:
                continue
            emb = embed(np.stack([ds.tensors[s] for s in ids]), major, frozen, ckpt.config).data
            for s, vec in zip(ids, emb):
                w.writerow([s, major, truths[major][s]] + [repr(float(v)) for v in vec])
                rows += 1
    print(f"wrote {rows} embeddings to {out / 'embeddings.csv'}")
    return 0


# parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tbcnn", description="Trajectory-based student ranking.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON file of dotted configuration keys")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one configuration key (repeatable)")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--seed", type=int, help="generator seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and report test metrics")
    common(t)
    t.add_argument("--data", required=True, help="directory with records.jsonl and labels.csv")
    t.add_argument("--branches", help="enabled branches, e.g. PR or PRD")
    t.add_argument("--no-attention", action="store_true", help="disable the attention blocks")
    t.add_argument("--loss", choices=sorted(LOSS_FLAGS), help="pair weighting")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, help="initialisation and shuffling seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(e, config=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--out", help="optional directory for a JSON report")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--h", type=float, default=1e-6)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    for name, func, what in (("export-attention", cmd_export_attention, "attention vectors"),
                             ("export-embeddings", cmd_export_embeddings, "student embeddings")):
        x = sub.add_parser(name, help=f"write {what} as CSV")
        common(x, config=False)
        x.add_argument("--checkpoint", required=True)
        x.add_argument("--data", required=True)
        x.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
        x.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        return args.func(args)
    except (CommandError, ValueError, KeyError, OSError) as exc:
        print(f"tbcnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
