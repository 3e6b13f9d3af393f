"""``idal`` command line: gen-data, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import ablation
from .data import ShiftSpec, generate_shift_pair, load_csv, save_csv
from .errors import CheckpointError, ConfigError, DataFormatError, IdalError, NumericError
from .gradcheck import LOSS_NAMES, TOLERANCE, run_gradchecks
from .trainer import (PRESETS, TrainConfig, Trainer, domain_separability, evaluate,
                      load_checkpoint, proxy_a_distance, resume_trainer, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(IdalError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(flag):
    def parse(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects an integer, got {s!r}")
        if v < 1:
            raise argparse.ArgumentTypeError(f"{flag} must be >= 1, got {v}")
        return v
    return parse


# -- config resolution ------------------------------------------------------------------

WEIGHT_FLAGS = {"lambda_": "lambda_adv", "beta": "beta", "gamma": "gamma",
                "delta": "delta", "eta": "eta"}
TOP_FLAGS = {"seed": "seed", "epochs": "epochs", "batch_size": "batch_size",
             "lr": "learning_rate", "weight_decay": "weight_decay",
             "tau": "pseudo_label_confidence", "warmup_epochs": "pseudo_label_warmup_epochs",
             "conditioning": "conditioning", "pseudo_refresh": "pseudo_label_refresh"}


def resolve_config(args) -> TrainConfig:
    """defaults < preset < config file < flags."""
    preset = args.preset or "desk-default"
    resolved = PRESETS[preset].to_dict()
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config: invalid JSON ({exc})") from None
        if not isinstance(overrides, dict):
            raise UsageError("--config: top level must be a JSON object")
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(resolved.get(key), dict):
                resolved[key].update(value)
            else:
                resolved[key] = value
    for flag, key in WEIGHT_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            resolved["loss_weights"][key] = v
    for flag, key in TOP_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            resolved[key] = v
    try:
        return TrainConfig.from_dict(resolved)
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _echo(payload: dict, out_dir: Path | None, name: str):
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text + "\n", encoding="utf-8")


def _load_pair(args):
    for flag in ("source", "target"):
        if getattr(args, flag) is None:
            raise UsageError(f"--{flag} is required")
    return load_csv(args.source), load_csv(args.target)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--source", type=Path)
    p.add_argument("--target", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=_positive_int("--batch-size"))
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--conditioning", choices=["concat", "multilinear", "randomized"])
    p.add_argument("--pseudo-refresh", choices=["epoch", "step"])
    p.add_argument("--dry-run", action="store_true",
                   help="print the resolved configuration and exit")


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = ShiftSpec(k=args.k, d=args.d, n_source=args.n_source, n_target=args.n_target,
                     class_separation=args.separation, rotation_angle=args.rotation,
                     scale_factor=args.scale, style_offset_magnitude=args.style_offset,
                     noise_sigma_source=args.noise_source, noise_sigma_target=args.noise_target,
                     seed=args.seed)
    try:
        spec.validate()
    except ConfigError as exc:
        raise UsageError(str(exc).replace("ShiftSpec.", "--")) from None
    _echo({"command": "gen-data", "spec": asdict(spec)}, None if args.dry_run else args.out,
          "spec.json")
    if args.dry_run:
        return EXIT_OK
    source, target = generate_shift_pair(spec)
    save_csv(source, args.out / "source.csv")
    save_csv(target, args.out / "target.csv")
    print(f"wrote {args.out / 'source.csv'} ({len(source)} rows), "
          f"{args.out / 'target.csv'} ({len(target)} rows)")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = args.out
    _echo({"command": "train", "preset": args.preset or "desk-default",
           "config": config.to_dict()}, None if args.dry_run else out, "config.json")
    if args.dry_run:
        return EXIT_OK
    if out is None:
        raise UsageError("--out is required")
    source, target = _load_pair(args)
    if args.resume:
        trainer = resume_trainer(args.resume, source, target, config)
    else:
        trainer = Trainer(config, source, target)
    ckpt = out / "checkpoint"
    try:
        records = trainer.fit(metrics_path=out / "metrics.jsonl",
                              on_epoch=lambda r: _after_epoch(trainer, r, ckpt))
    except NumericError as exc:
        dump = out / "failure.json"
        dump.write_text(json.dumps({"error": str(exc), "terms": {
            k: (v if math.isfinite(v) else repr(v)) for k, v in exc.terms.items()}}, indent=2))
        print(f"numeric failure: {exc}; per-term dump at {dump}", file=sys.stderr)
        save_checkpoint(trainer, out / "checkpoint-failed")
        return EXIT_NUMERIC
    save_checkpoint(trainer, ckpt)
    write_embeddings(trainer, out / "embeddings.csv")
    if records:
        print(f"final target accuracy: {records[-1].target_accuracy:.4f}")
    else:
        acc, _ = evaluate(trainer.net, target) if target.eval_labels is not None else (None, None)
        print(f"no epochs run; initial target accuracy: {acc}")
    return EXIT_OK


def _after_epoch(trainer: Trainer, r, ckpt: Path):
    # per-epoch checkpoint so an interrupted run can be resumed
    save_checkpoint(trainer, ckpt)
    print(f"epoch {r.epoch:3d}  clc {r.loss_clc:.4f}  dis {r.loss_dis:.4f}"
          f"  src {r.source_accuracy:.4f}  tgt {r.target_accuracy:.4f}")


def write_embeddings(trainer: Trainer, path: Path):
    rows = []
    for ds in (trainer.source, trainer._target_eval):
        feats = trainer.net.features(ds.features)
        labels = ds.eval_labels if ds.eval_labels is not None else np.full(len(ds), -1)
        for f, y in zip(feats, labels):
            rows.append(",".join(repr(float(v)) for v in f) + f",{int(y)},{ds.domain}")
    header = ",".join(f"f{i}" for i in range(trainer.net.extractor.d_f)) + ",eval_label,domain"
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    if args.checkpoint is None or args.target is None:
        raise UsageError("--checkpoint and --target are required")
    print(json.dumps({"command": "eval", "checkpoint": str(args.checkpoint),
                      "target": str(args.target),
                      "source": str(args.source) if args.source else None}))
    net, _, manifest = load_checkpoint(args.checkpoint)
    target = load_csv(args.target)
    source = load_csv(args.source) if args.source else None
    for ds in filter(None, (source, target)):
        if ds.dim != net.arch["d_in"] or ds.num_classes != net.num_classes:
            raise ConfigError(f"{ds.domain} data has d={ds.dim}, K={ds.num_classes}; checkpoint "
                              f"expects d={net.arch['d_in']}, K={net.num_classes}")
    report = {"checkpoint": str(args.checkpoint),
              "epochs_completed": manifest["seed_state"]["epochs_completed"]}
    acc, per_class = evaluate(net, target)
    report[f"{target.domain}_accuracy"] = acc
    report[f"per_class_{target.domain}_accuracy"] = per_class
    if source is not None:
        report["source_accuracy"] = evaluate(net, source)[0]
        eps = domain_separability(net.features(source.features), net.features(target.features),
                                  seed=manifest["seed_state"]["seed"])
        report["proxy_a_distance"] = proxy_a_distance(eps)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    losses = [args.loss] if args.loss else None
    print(json.dumps({"command": "gradcheck", "seed": args.seed, "losses": losses or
                      list(LOSS_NAMES), "tolerance": TOLERANCE}))
    rows = run_gradchecks(args.seed, losses)
    ok = True
    print(f"{'loss':<8}{'max rel err':>14}  status")
    for name, err in rows:
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:<8}{err:>14.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    seeds = list(range(config.seed, config.seed + args.seeds))
    rows = ablation.ladder_configs(config)
    _echo({"command": "ablate", "preset": args.preset or "desk-default", "seeds": seeds,
           "rows": [{"row": name, "loss_weights": cfg.to_dict()["loss_weights"]}
                    for name, cfg in rows],
           "config": config.to_dict()}, None if args.dry_run else args.out, "config.json")
    if args.dry_run:
        return EXIT_OK
    if args.out is None:
        raise UsageError("--out is required")
    source, target = _load_pair(args)
    table = ablation.summarize(ablation.run_rows(rows, source, target, seeds))
    text = ablation.format_table(table)
    (args.out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    (args.out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic source/target pair")
    g.add_argument("--k", type=int, default=4)
    g.add_argument("--d", type=int, default=8)
    g.add_argument("--n-source", type=int, default=2000)
    g.add_argument("--n-target", type=int, default=2000)
    g.add_argument("--separation", type=float, default=4.0)
    g.add_argument("--rotation", type=float, default=math.pi / 4, help="radians")
    g.add_argument("--scale", type=float, default=1.3)
    g.add_argument("--style-offset", type=float, default=1.0)
    g.add_argument("--noise-source", type=float, default=0.5)
    g.add_argument("--noise-target", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, default=Path("data"))
    g.add_argument("--dry-run", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a source/target pair")
    _add_train_flags(t)
    t.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--target", type=Path, help="dataset to score")
    e.add_argument("--source", type=Path, help="optional source set for the proxy A-distance")
    e.add_argument("--out", type=Path, help="JSON report path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    c.add_argument("--loss", choices=LOSS_NAMES)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="loss-combination ladder over several seeds")
    _add_train_flags(a)
    a.add_argument("--seeds", type=_positive_int("--seeds"), default=5)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"idal {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"idal {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, CheckpointError, OSError) as exc:
        print(f"idal {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
