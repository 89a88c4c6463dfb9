"""Command-line entry points.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DataError, load_manifest, load_pgm, save_pgm, synth_generate, write_dataset
from .harness import (
    AblateCell,
    ConfigError,
    DivergenceError,
    TrainConfig,
    ablate,
    ablate_table,
    evaluate_cls,
    model_from_state,
    model_state_with_meta,
    parse_config_text,
    pipeline_predict_masks,
    report_text,
    result_from_json,
    result_to_json,
    run_seeds,
    write_report,
)
from .nn import LoadError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="msx", description="chest X-ray segmentation + classification pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset tree")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--profile", choices=("desk", "paper"), default="desk")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--no-distractors", action="store_true")
    s.add_argument("--imbalanced", action="store_true")

    s = sub.add_parser("seg-train", help="train the segmentation model")
    s.add_argument("--config", required=True)

    s = sub.add_parser("seg-predict", help="write predicted masks for a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)

    s = sub.add_parser("cls-train", help="train the classifier")
    s.add_argument("--config", required=True)
    s.add_argument("--masks", help="directory of mask PGMs matched to images by stem")

    s = sub.add_parser("cls-eval", help="evaluate a classifier checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("ablate", help="run an ablation grid")
    s.add_argument("--grid", required=True)

    s = sub.add_parser("report", help="re-emit the report for a finished run")
    s.add_argument("--in", dest="in_dir", required=True)
    return p


def _read_config(path: str, task: str) -> tuple[TrainConfig, dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file {p} does not exist")
    cfg, paths = parse_config_text(p.read_text(), source=str(p))
    if cfg.task != task:
        raise ConfigError(f"{p}: task = {cfg.task!r}, expected {task!r} for this command")
    return cfg, paths


def _masks_for(samples, masks_dir: str) -> list[np.ndarray]:
    root = Path(masks_dir)
    if not root.is_dir():
        raise DataError(f"masks directory {root} does not exist")
    out = []
    for s in samples:
        stem = Path(s.source).stem
        path = root / f"{stem}.pgm"
        if not path.exists():
            raise DataError(f"no mask for {s.source}: expected {path}")
        out.append((load_pgm(path) >= 0.5).astype(np.float32)[None])
    return out


def _train_command(task: str, config_path: str, masks_dir: str | None) -> int:
    cfg, paths = _read_config(config_path, task)
    if "train_manifest" not in paths:
        raise ConfigError(f"{config_path}: train_manifest is required")
    train = load_manifest(paths["train_manifest"], task)
    test = load_manifest(paths["test_manifest"], task) if "test_manifest" in paths else None
    if task == "cls" and (masks_dir or paths.get("masks_dir")):
        mdir = masks_dir or paths["masks_dir"]
        train = H.masked_cls_samples(train, _masks_for(train, mdir))
        if test is not None:
            test = H.masked_cls_samples(test, _masks_for(test, mdir))
    result = run_seeds(cfg, train, test)
    out_dir = Path(paths.get("out_dir", f"msx-out/{task}"))
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_model = H.build_model(cfg, np.random.default_rng(0))
    meta = {k: v for k, v in model_state_with_meta(meta_model, cfg).items() if k.startswith("_cfg.")}
    for run in result.runs:
        state = dict(run.state)
        state.update(meta)
        save_checkpoint(state, out_dir / f"seed{run.seed}.ckpt")
    text = report_text(result)
    write_report(out_dir / "report.txt", text)
    write_report(out_dir / "result.json", result_to_json(result))
    sys.stdout.write(text)
    return 0


def _seg_predict(args) -> int:
    state = load_checkpoint(args.ckpt)
    model, cfg = model_from_state(state)
    if cfg.task != "seg":
        raise DataError(f"{args.ckpt} is not a segmentation checkpoint")
    kind = _sniff_manifest_kind(args.manifest)
    samples = load_manifest(args.manifest, kind)
    out = Path(args.out)
    from .transunet import predict_mask

    for s in samples:
        mask = predict_mask(model, s.image, threshold=args.threshold)
        save_pgm(out / f"{Path(s.source).stem}.pgm", mask)
    sys.stdout.write(f"wrote {len(samples)} masks to {out}\n")
    return 0


def _sniff_manifest_kind(path) -> str:
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest {p} does not exist")
    header = p.read_text().splitlines()[0].strip() if p.read_text() else ""
    if header == "image,mask":
        return "seg"
    if header == "image,label":
        return "cls"
    raise DataError(f"{p}: unrecognized manifest header {header!r}")


def _cls_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    model, cfg = model_from_state(state)
    if cfg.task != "cls":
        raise DataError(f"{args.ckpt} is not a classification checkpoint")
    samples = load_manifest(args.manifest, "cls")
    loss, suite = evaluate_cls(model, samples)
    lines = [f"samples = {len(samples)}", f"loss = {loss:.6f}"] + suite.lines("eval.")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def parse_grid_text(text: str, source: str) -> tuple[dict, list[AblateCell]]:
    """Grid file: an optional [data] section plus one [cell NAME] per run."""
    sections: list[tuple[str, list[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source} line {lineno}: malformed section header {raw!r}")
            sections.append((line[1:-1].strip(), []))
        else:
            if not sections:
                raise ConfigError(f"{source} line {lineno}: key outside any section")
            sections[-1][1].append(line)
    data_paths: dict = {}
    cells: list[AblateCell] = []
    for header, lines in sections:
        body = "\n".join(lines)
        if header == "data":
            _, data_paths = parse_config_text(body, source=f"{source} [data]")
        elif header.startswith("cell "):
            name = header[5:].strip()
            if not name:
                raise ConfigError(f"{source}: empty cell name")
            cfg, extra = parse_config_text(body, source=f"{source} [{header}]")
            if extra:
                raise ConfigError(f"{source} [{header}]: path keys belong in [data], got {sorted(extra)}")
            cells.append(AblateCell(name, cfg))
        else:
            raise ConfigError(f"{source}: unknown section [{header}]")
    if not cells:
        raise ConfigError(f"{source}: no [cell ...] sections")
    return data_paths, cells


def _ablate(args) -> int:
    p = Path(args.grid)
    if not p.exists():
        raise DataError(f"grid file {p} does not exist")
    data_paths, cells = parse_grid_text(p.read_text(), str(p))
    if "train_manifest" not in data_paths:
        raise ConfigError(f"{p}: [data] train_manifest is required")
    task = cells[0].config.task
    train = load_manifest(data_paths["train_manifest"], task)
    test = load_manifest(data_paths["test_manifest"], task) if "test_manifest" in data_paths else None
    masks = None
    if any(c.config.use_masks for c in cells):
        if "masks_dir" not in data_paths:
            raise ConfigError(f"{p}: a cell sets use_masks but [data] has no masks_dir")
        masks = _masks_for(train, data_paths["masks_dir"])
        if test is not None:
            masks = masks + _masks_for(test, data_paths["masks_dir"])
    rows = ablate(cells, train, test, masks)
    table = ablate_table(rows)
    out_dir = Path(data_paths.get("out_dir", "msx-out/ablate"))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(out_dir / "ablate.txt", table)
    for row in rows:
        if row.result is not None:
            write_report(out_dir / f"{row.name}.report.txt", report_text(row.result))
            write_report(out_dir / f"{row.name}.result.json", result_to_json(row.result))
    sys.stdout.write(table)
    return 0


def _report(args) -> int:
    path = Path(args.in_dir) / "result.json"
    if not path.exists():
        raise DataError(f"{path} does not exist")
    result = result_from_json(path.read_text())
    sys.stdout.write(report_text(result))
    return 0


def _synth(args) -> int:
    data = synth_generate(
        args.n,
        profile=args.profile,
        seed=args.seed,
        distractors=not args.no_distractors,
        balanced=not args.imbalanced,
    )
    manifests = write_dataset(args.out, data)
    for name in sorted(manifests):
        sys.stdout.write(f"{name} = {manifests[name]}\n")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth":
            return _synth(args)
        if args.command == "seg-train":
            return _train_command("seg", args.config, None)
        if args.command == "cls-train":
            return _train_command("cls", args.config, args.masks)
        if args.command == "seg-predict":
            return _seg_predict(args)
        if args.command == "cls-eval":
            return _cls_eval(args)
        if args.command == "ablate":
            return _ablate(args)
        if args.command == "report":
            return _report(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (DataError, LoadError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except DivergenceError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
