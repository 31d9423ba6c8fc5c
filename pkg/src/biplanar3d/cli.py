"""Command-line entry point: ``biplanar3d <subcommand> ...``.

Training reads a JSON run config; every field can also be set by flag
(``--optim.lr 1e-3``, ``--model.window 4``, ``--disable-cross-loss``).
``biplanar3d train --print-config`` shows the resolved config.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, asdict, fields
from pathlib import Path

from .drr import ProjectionConfig, synthesize_drr, write_projection_set, read_projection_set
from .encoder import PRESETS, ModelConfig
from .metrics import evaluate
from .morphometry import measure
from .network import count_params, dump_features, forward, init_params
from .phantoms import KINDS, AugmentParams, PhantomSpec, build_dataset, generate_phantom
from .pipeline import (ConfigError, OptimConfig, RunConfig, evaluate_run, load_config, load_model,
                       set_field, train)
from .volume import read_lvv, write_lvv

log = logging.getLogger("biplanar3d")

# dict-valued sections of RunConfig and the dataclass describing their fields
SECTIONS = {"model": ModelConfig, "projection": ProjectionConfig, "augment": AugmentParams,
            "optim": OptimConfig}


def _value(text: str):
    """Parse a flag value as JSON when possible (numbers, lists, null), else keep the string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace("x", ",").split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


# -- config flags ---------------------------------------------------------------------

def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (defaults when omitted)")
    g = p.add_argument_group("run config overrides")
    for f in fields(RunConfig):
        if f.name in SECTIONS:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f"cfg__{f.name}", action="store_const", const=True,
                           default=None)
        else:
            g.add_argument(flag, dest=f"cfg__{f.name}", type=_value, default=None,
                           metavar=f.name.upper())
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            g.add_argument(f"--{section}.{f.name}", dest=f"cfg__{section}__{f.name}", type=_value,
                           default=None, metavar="VALUE")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for key, value in vars(args).items():
        if not key.startswith("cfg__") or value is None:
            continue
        set_field(cfg, key[5:].replace("__", "."), value)
    return cfg.validate()


def config_schema() -> dict:
    """Every config field with its default, grouped like the JSON file."""
    def defaults(cls):
        out = {}
        for f in fields(cls):
            if f.default is not MISSING:
                out[f.name] = f.default
            elif f.default_factory is not MISSING:
                out[f.name] = f.default_factory()
        return out

    doc = asdict(RunConfig())
    for section, cls in SECTIONS.items():
        doc[section] = defaults(cls)
    doc["model"] = {k: list(v) if isinstance(v, tuple) else v for k, v in doc["model"].items()}
    return doc


# -- subcommands ------------------------------------------------------------------------

def cmd_generate_phantom(args) -> int:
    spec = PhantomSpec(args.kind, args.k, args.dims, args.spacing, args.seed)
    if args.dataset:
        m = build_dataset(args.out, args.n, spec, ProjectionConfig(n_views=args.n_views),
                          first_seed=args.seed)
        counts = {s: len(m.split(s)) for s in ("train", "val", "test")}
        print(json.dumps({"manifest": str(m.root / "manifest.json"), **counts}))
        return 0
    vol = generate_phantom(spec)
    write_lvv(args.out, vol)
    print(json.dumps({"volume": str(args.out), "classes": vol.class_names}, sort_keys=True))
    return 0


def cmd_project(args) -> int:
    vol = read_lvv(args.volume)
    cfg = ProjectionConfig(n_views=args.n_views, noise_std=args.noise_std,
                           normalize=not args.raw, seed=args.seed)
    paths = write_projection_set(args.out, synthesize_drr(vol, cfg))
    print(json.dumps({"files": [str(p) for p in paths]}))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        print(cfg.to_json())
        return 0
    if args.manifest is None:
        raise ConfigError("--manifest is required")
    res = train(cfg, args.manifest, resume=args.resume)
    print(json.dumps({"out_dir": str(res.out_dir), "steps": res.steps,
                      "last_checkpoint": str(res.last_checkpoint) if res.last_checkpoint else None,
                      "best_val_dice": res.best_val_dice}))
    return 0


def cmd_evaluate(args) -> int:
    if args.pred and args.gt:
        text = evaluate(read_lvv(args.pred), read_lvv(args.gt), args.threshold,
                        args.strict).to_json()
    elif args.checkpoint and args.manifest:
        text = evaluate_run(args.checkpoint, args.manifest, args.split).to_json()
    else:
        raise ConfigError("give --pred and --gt, or --checkpoint and --manifest")
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_morphometry(args) -> int:
    vol = read_lvv(args.volume)
    ref = read_lvv(args.reference) if args.reference else None
    classes = args.classes or vol.present_classes()
    text = measure(vol, list(classes), ref).to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_count_params(args) -> int:
    if args.config or args.which == "config":
        cfg = resolve_config(args).model_config()
        print(json.dumps({"config": count_params(cfg)}))
        return 0
    names = list(PRESETS) if args.which == "all" else [args.which]
    out = {n: count_params(PRESETS[n]) for n in names}
    if args.millions:
        out = {n: round(v / 1e6, 2) for n, v in out.items()}
    print(json.dumps(out))
    return 0


def cmd_dump_features(args) -> int:
    if args.checkpoint:
        params, model_cfg, _ = load_model(args.checkpoint)
    else:
        model_cfg = resolve_config(args).model_config()
        params = init_params(model_cfg, args.seed_init)
    res = forward(read_projection_set(args.projections), params, model_cfg, keep_features=True)
    paths = dump_features(res.features, args.out)
    print(json.dumps({"features": len(paths), "dir": str(args.out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="biplanar3d", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-phantom", help="write a phantom volume or a whole dataset")
    p.add_argument("--kind", choices=KINDS, default="spine")
    p.add_argument("--k", type=int, default=5, help="number of structures")
    p.add_argument("--dims", type=_ints, default=(32, 32, 40), help="H,W,D voxels")
    p.add_argument("--spacing", type=_floats, default=(1.0, 1.0, 1.0), help="mm per voxel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", action="store_true", help="write --n samples and a manifest")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--n-views", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate_phantom)

    p = sub.add_parser("project", help="render DRRs of a label volume")
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--n-views", type=int, default=1)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--raw", action="store_true", help="skip min-max normalisation")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--print-config", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a prediction pair or a trained run")
    p.add_argument("--pred", type=Path)
    p.add_argument("--gt", type=Path)
    p.add_argument("--threshold", type=float, default=20.0, help="identification radius (mm)")
    p.add_argument("--strict", action="store_true", help="charge missing classes the volume diagonal")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("morphometry", help="femur parameters and rib centerlines")
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--reference", type=Path, help="ground truth for centerline scores")
    p.add_argument("--classes", type=int, nargs="*")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_morphometry)

    p = sub.add_parser("count-params", help="trainable parameter counts")
    p.add_argument("which", nargs="?", default="all", choices=[*PRESETS, "all", "config"],
                   help="a preset name, all presets, or the resolved run config")
    p.add_argument("--millions", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("dump-features", help="write intermediate feature maps as raw arrays")
    p.add_argument("--projections", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--seed-init", type=int, default=0, help="init seed without a checkpoint")
    p.add_argument("--out", type=Path, required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_dump_features)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
