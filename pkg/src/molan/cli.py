"""Command-line entry point: ``molan <command> [options]``.

Configuration is a flat JSON object. Keys are the union of the generator,
model and training fields plus ``data_dir``, ``out_dir`` and ``checkpoint``;
shared keys (shapes, ``task``, ``num_classes``) feed both generator and model.
Flags override the file, the file overrides the defaults.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
Set ``MOLAN_LOG`` (e.g. ``DEBUG``) for log output on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import ConfigError, GeneratorConfig, ParseError, SchemaError, collate, generate, read_splits, write_splits
from .experiments import (
    TrainConfig,
    TrainingError,
    block_sweep,
    config_hash,
    evaluate,
    loss_grad_check,
    mask_sweep,
    provenance_header,
    run_ablations,
    sigma_map_export,
    train,
)
from .model import CheckpointError, ModelConfig, init, load_checkpoint, save_checkpoint
from .numerics import DimensionError, DomainError, EvaluationError

log = logging.getLogger("molan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
GRAD_TOLERANCE = 1e-5
PATH_KEYS = {"data_dir": None, "out_dir": None, "checkpoint": None}
SECTIONS = {"generator": GeneratorConfig, "model": ModelConfig, "train": TrainConfig}


def _keys(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def default_config() -> dict:
    """Flat view of every documented key with its default value."""
    merged: dict = {}
    for cls in SECTIONS.values():
        d = asdict(cls())
        merged.update(d)
    if merged.get("visual_block") is not None:
        merged["visual_block"] = list(merged["visual_block"])
    merged.update(PATH_KEYS)
    return dict(sorted(merged.items()))


@dataclass
class CliConfig:
    generator: GeneratorConfig
    model: ModelConfig
    train: TrainConfig
    paths: dict
    effective: dict

    @property
    def digest(self) -> str:
        return config_hash(self.effective)


def build_config(overrides: dict | None = None) -> CliConfig:
    flat = default_config()
    for key, value in (overrides or {}).items():
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = value
    try:
        sections = {
            name: cls(**{k: flat[k] for k in _keys(cls)})
            for name, cls in SECTIONS.items()
        }
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    paths = {k: flat[k] for k in PATH_KEYS}
    return CliConfig(sections["generator"], sections["model"], sections["train"], paths, flat)


def load_config(path: str | None, flags: dict | None = None) -> CliConfig:
    overrides: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            overrides = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        if not isinstance(overrides, dict):
            raise ConfigError("config must be a JSON object")
    overrides.update({k: v for k, v in (flags or {}).items() if v is not None})
    return build_config(overrides)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(path)


def _splits(cfg: CliConfig, data: str | None):
    directory = data or cfg.paths["data_dir"]
    if directory is None:
        return generate(cfg.generator)
    splits = read_splits(directory)
    if not splits:
        raise FileNotFoundError(f"no train/val/test .jsonl files in {directory}")
    return splits


def _checkpoint_config(extra: dict) -> dict:
    return extra.get("config", {})


# -- commands ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {"out_dir": args.out})
    out = cfg.paths["out_dir"]
    if out is None:
        raise ConfigError("gen-data needs --out or out_dir")
    paths = write_splits(generate(cfg.generator), out)
    files = {name: hashlib.sha256(p.read_bytes()).hexdigest() for name, p in sorted(paths.items())}
    manifest = {"version": __version__, "config": cfg.effective, "files": files}
    (Path(out) / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
    print(Path(out) / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, {"data_dir": args.data, "out_dir": args.out})
    out = cfg.paths["out_dir"]
    if out is None:
        raise ConfigError("train needs --out or out_dir")
    splits = _splits(cfg, None)
    model = init(cfg.model, cfg.train.seed)
    record = train(model, splits, cfg.train, config_echo=cfg.effective)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.paths["checkpoint"] or out / f"model-{cfg.digest}.ckpt")
    save_checkpoint(model, ckpt, extra={"config": cfg.effective, "version": __version__})
    run = out / f"run-{cfg.digest}.json"
    run.write_text(record.to_json() + "\n", encoding="utf-8")
    print(run)
    print(ckpt)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint, with_extra=True)
    splits = read_splits(args.data, names=(args.split,))
    if args.split not in splits:
        raise FileNotFoundError(f"no {args.split}.jsonl in {args.data}")
    report = evaluate(model, splits[args.split])
    doc = {
        "version": __version__,
        "config": _checkpoint_config(extra),
        "split": args.split,
        "metrics": report.to_dict(),
    }
    _emit(_dump(doc), args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, {"data_dir": args.data, "out_dir": args.out})
    out = cfg.paths["out_dir"]
    if out is None:
        raise ConfigError("ablate needs --out or out_dir")
    variants = tuple(args.variants.split(",")) if args.variants else None
    kwargs = {"workers": args.workers}
    if variants:
        kwargs["variants"] = variants
    table = run_ablations(_splits(cfg, None), cfg.model, cfg.train, **kwargs)
    path = Path(out) / f"ablation-{cfg.digest}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table.to_csv(provenance_header(cfg.effective)), encoding="utf-8")
    print(path)
    return EXIT_OK


def _parse_ratios(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad ratio list {text!r}") from None


def _rows_csv(rows: list[dict], header: str) -> str:
    buf = io.StringIO()
    buf.write(header)
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def cmd_mask_sweep(args) -> int:
    ratios = _parse_ratios(args.ratios)
    modalities = tuple(m for m in args.modalities.split(",") if m)
    model, extra = load_checkpoint(args.checkpoint, with_extra=True)
    splits = read_splits(args.data, names=(args.split,))
    if args.split not in splits:
        raise FileNotFoundError(f"no {args.split}.jsonl in {args.data}")
    rows = mask_sweep(model, splits[args.split], ratios, modalities, seed=args.seed, repeats=args.repeats)
    echo = dict(_checkpoint_config(extra), sweep={"ratios": ratios, "modalities": list(modalities),
                                                  "seed": args.seed, "repeats": args.repeats, "split": args.split})
    _emit(_rows_csv(rows, provenance_header(echo)), args.out)
    return EXIT_OK


def _parse_sizes(items: list[str]) -> dict[str, list]:
    """``visual:3x4`` / ``audio:4`` entries into per-modality candidate lists."""
    out: dict[str, list] = {"visual": [], "audio": []}
    for item in items:
        for part in item.split(","):
            if not part:
                continue
            modality, _, size = part.partition(":")
            try:
                if modality == "visual":
                    r, c = size.split("x")
                    out["visual"].append((int(r), int(c)))
                elif modality == "audio":
                    out["audio"].append(int(size))
                else:
                    raise ConfigError(f"unknown modality in size {part!r}")
            except ValueError:
                raise ConfigError(f"bad block size {part!r}; use visual:RxC or audio:N") from None
    return out


def cmd_block_sweep(args) -> int:
    cfg = load_config(args.config, {"data_dir": args.data})
    candidates = _parse_sizes(args.sizes or [])
    rows = block_sweep(_splits(cfg, None), cfg.model, cfg.train, candidates)
    _emit(_rows_csv(rows, provenance_header(cfg.effective)), args.out)
    return EXIT_OK


def cmd_sigma_map(args) -> int:
    model, extra = load_checkpoint(args.checkpoint, with_extra=True)
    splits = read_splits(args.data, names=(args.split,))
    if args.split not in splits:
        raise FileNotFoundError(f"no {args.split}.jsonl in {args.data}")
    path = sigma_map_export(model, splits[args.split], args.out, config=_checkpoint_config(extra))
    print(path)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config)
    gen = GeneratorConfig(**{**asdict(cfg.generator), "n_train": args.batch, "n_val": 0, "n_test": 0})
    batch = collate(generate(gen)["train"])
    model = init(cfg.model, cfg.train.seed)
    err = loss_grad_check(model, batch)
    print(f"max_relative_error {err:.6e}")
    return EXIT_OK if err <= GRAD_TOLERANCE else EXIT_RUNTIME


# -- wiring --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molan", description="Block-wise noise editing for multimodal sentiment models.")
    parser.add_argument("--version", action="version", version=f"molan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/val/test JSON-Lines splits")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model; writes a run record and a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every ablation variant over the seed set")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--variants", help="comma-separated subset of variants")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("mask-sweep", help="Acc2 under random feature masking")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--modalities", default="audio,visual")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask_sweep)

    p = sub.add_parser("block-sweep", help="train with alternative block sizes")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--sizes", nargs="*", help="entries like visual:3x4 audio:4 (comma or space separated)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_block_sweep)

    p = sub.add_parser("sigma-map", help="export per-block denoising strengths as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sigma_map)

    p = sub.add_parser("grad-check", help="finite-difference check of the full training loss")
    p.add_argument("--config")
    p.add_argument("--batch", type=int, default=2)
    p.set_defaults(func=cmd_grad_check)
    return parser


RUNTIME_ERRORS = (
    TrainingError, CheckpointError, ParseError, SchemaError, DimensionError,
    DomainError, EvaluationError, OSError, ValueError, FloatingPointError,
)


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("MOLAN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
