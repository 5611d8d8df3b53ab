"""``clipos`` command line: train, eval, mask, ablate, sweep-beta, convert-dataset, gen-synthetic.

Exit codes: 0 success, 1 validation, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline
from .config import OODSet, RunConfig, load_config
from .errors import ClipOSError, ConfigError

log = logging.getLogger("clipos")


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if getattr(args, "ood", None):
        sets = []
        for item in args.ood:
            if "=" not in item:
                raise ConfigError(f"expected NAME=ROOT, got {item!r}", "ood")
            name, root = item.split("=", 1)
            sets.append(dataclasses.asdict(OODSet(name, root)))
        cfg = cfg.replace(data={"ood": sets})
    return cfg


def _out(args, cfg: RunConfig, suffix="") -> Path:
    if args.out:
        return Path(args.out)
    return cfg.run_dir if not suffix else cfg.run_dir / suffix


def cmd_train(args):
    cfg = _config(args)
    out = _out(args, cfg)
    result = pipeline.train_run(cfg, out_dir=out)
    last = result.history[-1]
    print(f"trained {cfg.train.epochs} epochs: id={last.id_loss:.6f} ood={last.ood_loss:.6f} "
          f"total={last.total:.6f}")
    print(f"wrote {out / 'checkpoint.pt'}")


def cmd_eval(args):
    cfg = _config(args)
    checkpoint = Path(args.checkpoint)
    out = _out(args, cfg, "eval")
    report = pipeline.eval_run(cfg, checkpoint, out_dir=out)
    print(report.table())
    print(f"wrote {out / 'metrics.csv'}")


def cmd_mask(args):
    cfg = _config(args)
    out = _out(args, cfg, "masks")
    written = pipeline.mask_images(cfg, [Path(p) for p in args.images], args.class_name,
                                   checkpoint=args.checkpoint, out_dir=out)
    cfg.dump(out / "config.yaml")
    for path in written:
        print(path)


def cmd_ablate(args):
    cfg = _config(args)
    out = _out(args, cfg, "ablate")
    variants = args.variant or list(pipeline.VARIANTS)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    reports = pipeline.ablate(cfg, variants, out_dir=out)
    for name, r in reports.items():
        print(f"{name:14s} avg AUROC {r.average:.4f}")
    print(f"wrote {out / 'ablation.csv'}")


def cmd_sweep_beta(args):
    cfg = _config(args)
    out = _out(args, cfg, "sweep_beta")
    try:
        betas = [float(b) for b in args.betas.split(",") if b.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {args.betas!r}", "betas") from exc
    if not betas:
        raise ConfigError("empty list", "betas")
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    reports = pipeline.sweep_beta(cfg, betas, out_dir=out)
    for b, r in reports.items():
        print(f"beta={b:g}  avg AUROC {r.average:.4f}")
    print(f"wrote {out / 'sweep_beta.csv'}")


def cmd_convert(args):
    from .data import convert_cifar

    out = convert_cifar(args.src, args.out, name=args.name, limit_per_class=args.limit_per_class)
    (out / "convert.yaml").write_text(yaml.safe_dump(
        {"src": str(args.src), "name": args.name, "limit_per_class": args.limit_per_class}, sort_keys=False))
    print(f"wrote {out / 'manifest.yaml'}")


def cmd_gen_synthetic(args):
    from .backbone import build_backbone
    from .data import SyntheticConfig, generate_synthetic

    cfg = _config(args)
    if cfg.backbone.name != "toy":
        raise ConfigError("synthetic images are rendered through the toy backbone", "backbone.name")
    fields = {f.name for f in dataclasses.fields(SyntheticConfig)}
    overrides = {}
    for item in args.param or []:
        key, _, value = item.partition("=")
        if key not in fields:
            raise ConfigError(f"unknown generator field; choose from {', '.join(sorted(fields))}", key)
        overrides[key] = yaml.safe_load(value)
    overrides.setdefault("seed", cfg.seed)
    syn = SyntheticConfig(**overrides)
    roots = generate_synthetic(build_backbone(cfg.backbone), args.out, syn)
    Path(args.out, "synthetic.yaml").write_text(yaml.safe_dump(
        {"backbone": dataclasses.asdict(cfg.backbone), "generator": dataclasses.asdict(syn)}, sort_keys=False))
    for name, root in roots.items():
        print(f"{name}: {root}")


class _Parser(argparse.ArgumentParser):
    # usage mistakes are validation errors (1); argparse would use 2, which means data here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clipos", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, ood=False):
        sp.add_argument("--config", "-c", help="run config YAML")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. train.epochs=3 (repeatable)")
        sp.add_argument("--out", "-o", help="output directory (default: output_dir/run_id[/command])")
        if ood:
            sp.add_argument("--ood", action="append", metavar="NAME=ROOT", help="OOD test set (repeatable)")
        return sp

    sp = with_config(sub.add_parser("train", help="learn the prompt context on a few-shot episode"))
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("eval", help="MCM/AUROC of a checkpoint on the OOD test sets"), ood=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("mask", help="write ID-region masks and heatmaps"))
    sp.add_argument("images", nargs="+")
    sp.add_argument("--class", dest="class_name", required=True)
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_mask)

    sp = with_config(sub.add_parser("ablate", help="train and evaluate ablation variants"), ood=True)
    sp.add_argument("--variant", action="append", choices=pipeline.VARIANTS)
    sp.set_defaults(func=cmd_ablate)

    sp = with_config(sub.add_parser("sweep-beta", help="AUROC against the patch-context weight"), ood=True)
    sp.add_argument("--betas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8")
    sp.set_defaults(func=cmd_sweep_beta)

    sp = sub.add_parser("convert-dataset", help="unpack CIFAR-10/100 python archives")
    sp.add_argument("--src", required=True, help="extracted directory or .tar.gz")
    sp.add_argument("--out", "-o", required=True)
    sp.add_argument("--name")
    sp.add_argument("--limit-per-class", type=int)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("gen-synthetic", help="write the toy Gaussian-cluster benchmark")
    sp.add_argument("--config", "-c")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out", "-o", required=True)
    sp.add_argument("--param", action="append", metavar="FIELD=VALUE",
                    help="generator field, e.g. n_classes=5 (repeatable)")
    sp.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ClipOSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
