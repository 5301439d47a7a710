"""Command-line entry point: ``semadv <command> ...``.

Every attack flag overrides the matching field of an optional YAML config.
Pretrained weights are looked up in ``$SEMADV_WEIGHTS`` unless ``--weights``
is given.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from .captioning import CaptionConfig, CaptionTarget, attack_caption, nearest_source
from .defenses import DefenseSpec
from .experiment import (
    ConfigError, ExperimentConfig, _defense, defend, load_records, record_to_result, report,
    run_experiment, transfer_matrix, write_defense_reports,
)
from .imaging import load_image, save_png
from .models import load_model
from .models.registry import MissingWeightsError
from .models.toy import toy_dataset
from .results import AttackAborted
from .tadv import TextureBank

logger = logging.getLogger("semadv")

_CADV_FLAGS = {"k": int, "n_hints": int, "lr": float, "max_iters": int, "conf_delta": float,
               "sigma": float, "n_clusters": int}
_TADV_FLAGS = {"alpha": float, "beta": float, "iters": int, "steps_per_iter": int,
               "conf_stop": float, "source_strategy": str}


def _read_config(path) -> dict:
    if path is None:
        return {}
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return raw


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--victim", help="victim model tag")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset directory with index.csv, or 'toy'")
    p.add_argument("--per-class", type=int)
    p.add_argument("--classes", type=int, nargs="+")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--seed", type=int)
    p.add_argument("--transfer", nargs="+", metavar="TAG")
    p.add_argument("--defense", action="append", metavar="SPEC",
                   help="e.g. jpeg:quality=75, bit_depth:bits=4, median:window=2x2, nlm, robust_model:model=TAG")
    p.add_argument("--weights", help="weights directory (default: $SEMADV_WEIGHTS)")


def parse_defense(text: str) -> DefenseSpec:
    kind, _, rest = text.partition(":")
    params: dict = {}
    for item in filter(None, rest.split(",")):
        key, _, value = item.partition("=")
        if key == "window":
            params[key] = tuple(int(v) for v in value.lower().split("x"))
        elif key == "model":
            params[key] = value
        else:
            params[key] = yaml.safe_load(value)
    return _defense({"kind": kind, **params})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semadv", description="Semantic adversarial attacks on image models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    attack = sub.add_parser("attack", help="run an attack over a dataset slice")
    kinds = attack.add_subparsers(dest="kind", required=True)
    pc = kinds.add_parser("cadv", help="colorization attack")
    _common(pc)
    pc.add_argument("--colorizer")
    for name, typ in _CADV_FLAGS.items():
        pc.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)
    pt = kinds.add_parser("tadv", help="texture attack")
    _common(pt)
    pt.add_argument("--extractor")
    pt.add_argument("--bank", help="texture bank directory with index.csv, or 'toy'")
    for name, typ in _TADV_FLAGS.items():
        pt.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)
    pb = kinds.add_parser("bim", help="iterative gradient-sign baseline")
    _common(pb)
    pb.add_argument("--eps", type=float)
    pb.add_argument("--step", type=float)
    pb.add_argument("--iters", type=int)

    cap = kinds.add_parser("caption", help="targeted caption attack on one image")
    cap.add_argument("image")
    cap.add_argument("--mechanism", choices=("cadv", "tadv"), default="cadv")
    group = cap.add_mutually_exclusive_group(required=True)
    group.add_argument("--word", action="append", metavar="POS:WORD", help="substitute one word")
    group.add_argument("--caption", help="full target caption")
    cap.add_argument("--captioner", default="toy-captioner")
    cap.add_argument("--colorizer", default="toy-colorizer")
    cap.add_argument("--extractor", default="toy-extractor")
    cap.add_argument("--bank", help="texture bank directory (tadv mechanism)")
    cap.add_argument("--lr", type=float, default=1e-4)
    cap.add_argument("--alpha", type=float, default=250.0)
    cap.add_argument("--max-iters", type=int, default=1000)
    cap.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    cap.add_argument("--out", default="runs/caption")
    cap.add_argument("--weights")

    d = sub.add_parser("defend", help="evaluate stored adversarial images under defenses")
    d.add_argument("run", help="run directory written by 'attack'")
    d.add_argument("--victim", required=True)
    d.add_argument("--defense", action="append", required=True, metavar="SPEC")
    d.add_argument("--weights")

    t = sub.add_parser("transfer", help="reclassify stored runs on other models")
    t.add_argument("runs", nargs="+", help="run directories, one per attacked model")
    t.add_argument("--models", nargs="+", required=True)
    t.add_argument("--out", default="transfer.csv")
    t.add_argument("--weights")

    r = sub.add_parser("report", help="summary tables and perturbation images")
    r.add_argument("results")
    r.add_argument("--out")

    td = sub.add_parser("toy-data", help="write the synthetic dataset and texture bank as PNGs")
    td.add_argument("out")
    td.add_argument("--per-class", type=int, default=2)
    td.add_argument("--seed", type=int, default=0)
    return parser


def _experiment_config(args) -> ExperimentConfig:
    raw = _read_config(args.config)
    raw["attack"] = args.kind
    overrides = {"victim": args.victim, "output": args.out, "seed": args.seed,
                 "weights": args.weights, "transfer": args.transfer}
    overrides.update({k: getattr(args, k, None) for k in ("colorizer", "extractor")})
    raw.update({k: v for k, v in overrides.items() if v is not None})
    raw.setdefault("victim", "toy-classifier")
    data = dict(raw.get("data") or {})
    for key, attr in (("source", "data"), ("per_class", "per_class"), ("classes", "classes"), ("size", "size")):
        if getattr(args, attr, None) is not None:
            data[key] = getattr(args, attr)
    raw["data"] = data
    if getattr(args, "bank", None):
        raw["bank"] = {"per_class": None, **(raw.get("bank") or {}), "source": args.bank}
    if args.defense:
        raw["defenses"] = list(raw.get("defenses") or []) + [
            {"kind": s.kind, **s.params} for s in map(parse_defense, args.defense)
        ]
    flags = {"cadv": _CADV_FLAGS, "tadv": _TADV_FLAGS, "bim": {"eps": 0, "step": 0, "iters": 0}}[args.kind]
    params = dict(raw.get("params") or {})
    params.update({k: getattr(args, k) for k in flags if getattr(args, k, None) is not None})
    raw["params"] = params
    return ExperimentConfig.from_dict(raw)


def cmd_attack(args) -> int:
    if args.kind == "caption":
        return cmd_caption(args)
    cfg = _experiment_config(args)
    rep = run_experiment(cfg)
    print(f"{len(rep.records)} images attacked, {len(rep.failures)} failed, "
          f"targeted success {rep.success_rate:.2f}% -> {rep.output}")
    for d in rep.defenses:
        print(f"  {d.defense}: misclassification {d.misclassification:.2f}%, targeted {d.targeted:.2f}%")
    if rep.transfer is not None:
        for dst in rep.transfer.targets:
            print(f"  transfer to {dst}: {rep.transfer.cell(cfg.victim, dst):.2f}%")
    return 0


def cmd_caption(args) -> int:
    captioner = load_model(args.captioner, args.weights)
    image = load_image(args.image, args.size)
    if args.caption:
        target = CaptionTarget.from_caption(captioner, args.caption)
    else:
        pairs = []
        for item in args.word:
            pos, _, word = item.partition(":")
            pairs.append((int(pos), word))
        target = CaptionTarget.from_pairs(captioner, pairs)
    cfg = CaptionConfig(lr=args.lr, alpha=args.alpha, max_iters=args.max_iters)
    kwargs = {}
    if args.mechanism == "cadv":
        kwargs["colorizer"] = load_model(args.colorizer, args.weights)
    else:
        if not args.bank:
            raise ConfigError("the tadv mechanism needs --bank")
        extractor = load_model(args.extractor, args.weights)
        bank = TextureBank.from_directory(args.bank, image.shape[:2])
        kwargs.update(extractor=extractor, source=nearest_source(image, bank, extractor))
    result = attack_caption(captioner, image, target, args.mechanism, cfg, **kwargs)
    out = Path(args.out)
    save_png(result.adversarial, out / "adversarial.png")
    record = {
        "mechanism": result.mechanism,
        "original_caption": captioner.decode(result.original_caption),
        "caption": captioner.decode(result.caption),
        "matches": result.matches,
        "success": result.success,
        "iterations": result.iterations,
        "norms": result.norms.as_dict(),
    }
    (out / "caption.json").write_text(json.dumps(record, indent=1))
    print(f"'{record['original_caption']}' -> '{record['caption']}' success={result.success}")
    return 0


def cmd_defend(args) -> int:
    records = load_records(args.run)
    if not records:
        raise ConfigError(f"no records found in {args.run}")
    specs = [parse_defense(s) for s in args.defense]
    victim = load_model(args.victim, args.weights)
    reports = defend([record_to_result(r) for r in records], specs, victim,
                     lambda tag: load_model(tag, args.weights))
    write_defense_reports(reports, Path(args.run))
    for d in reports:
        print(f"{d.defense}: misclassification {d.misclassification:.2f}%, targeted {d.targeted:.2f}%")
    return 0


def cmd_transfer(args) -> int:
    batches = {}
    for run in args.runs:
        records = load_records(run)
        if not records:
            raise ConfigError(f"no records found in {run}")
        tags = {r["model"] for r in records}
        if len(tags) != 1:
            raise ConfigError(f"{run} mixes attacked models {sorted(tags)}")
        batches.setdefault(tags.pop(), []).extend(record_to_result(r) for r in records)
    models = {t: load_model(t, args.weights) for t in dict.fromkeys(list(batches) + args.models)}
    matrix = transfer_matrix(batches, models)
    matrix.write_csv(args.out)
    print(f"transfer matrix -> {args.out}")
    return 0


def cmd_report(args) -> int:
    tables = report(args.results, args.out)
    for row in tables["table1"]:
        print(*row)
    return 0


def cmd_toy_data(args) -> int:
    out = Path(args.out)
    for name, seed in (("images", args.seed), ("bank", args.seed + 1)):
        images, labels = toy_dataset(args.per_class, seed=seed)
        root = out / name
        root.mkdir(parents=True, exist_ok=True)
        with (root / "index.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["file", "label"])
            for i, (img, y) in enumerate(zip(images, labels)):
                fname = f"{i:03d}.png"
                save_png(img, root / fname)
                writer.writerow([fname, y])
    print(f"toy data written to {out}")
    return 0


_COMMANDS = {"attack": cmd_attack, "defend": cmd_defend, "transfer": cmd_transfer,
             "report": cmd_report, "toy-data": cmd_toy_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, MissingWeightsError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AttackAborted as exc:
        print(f"attack aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
