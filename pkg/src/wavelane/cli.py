"""``wavelane`` command line: synth, dwt, train, predict, eval, gradcheck, ablate, replay.

Every command writes ``run-manifest.ini`` (the fully resolved configuration)
into its output directory; ``wavelane replay <manifest>`` reruns it.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .ablation import AblationData, directional_checks, prepare_data, run_ablation, standard_conditions, sweep_conditions
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, write_container
from .metrics import ConfusionMatrix, accumulate, report
from .network import build
from .pipeline import (
    DataError,
    compute_stats,
    ensure_dir,
    extract,
    make_grid,
    read_mask,
    read_rgb,
    write_gray,
    write_mask,
    write_overlay,
)
from .synthgen import Manifest, make_dataset
from .tensor import ShapeError
from .training import (
    PURPOSE_INIT,
    EvalImage,
    NumericalError,
    Sample,
    grad_check,
    predict_full,
    prepare_input,
    sample_seed,
    train,
)
from .wavelet import COMPONENTS, daubechies_filters, dwt_pyramid

log = logging.getLogger("wavelane")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# per-command shortcut flags -> config keys
SHORTCUTS = {
    "synth": {"out": "run.out_dir", "count": "data.count", "seed": "run.seed"},
    "dwt": {"image": "paths.image", "levels": "dwt.levels", "order": "dwt.order", "out": "run.out_dir"},
    "train": {"manifest": "paths.manifest", "out": "run.out_dir", "seed": "run.seed"},
    "predict": {"checkpoint": "paths.checkpoint", "image": "paths.image", "mask": "paths.mask", "out": "run.out_dir"},
    "eval": {"pred": "paths.pred", "truth": "paths.truth", "out": "run.out_dir"},
    "gradcheck": {"out": "run.out_dir", "seed": "run.seed"},
    "ablate": {"out": "run.out_dir"},
}


class UsageError(C.ConfigError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavelane", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="config file ([section] / key = value)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, flags in SHORTCUTS.items():
        sp = sub.add_parser(name)
        for flag in flags:
            sp.add_argument(f"--{flag}")
    rp = sub.add_parser("replay")
    rp.add_argument("manifest")
    return p


def resolve(argv: list[str]) -> tuple[str, C.RunConfig]:
    parser = _parser()
    args, rest = parser.parse_known_args(argv)
    overrides = [a for a in rest if a.startswith("--") and "." in a.split("=", 1)[0]]
    unknown = [a for a in rest if a not in overrides]
    if unknown:
        raise UsageError(f"unrecognised arguments: {' '.join(unknown)}")
    if args.command == "replay":
        cfg = C.load(args.manifest)
        command = cfg.run.command
        if command not in SHORTCUTS:
            raise UsageError(f"manifest {args.manifest} names no replayable command ({command!r})")
    else:
        command = args.command
        cfg = C.load(args.config) if args.config else C.RunConfig()
        for flag, key in SHORTCUTS[command].items():
            value = getattr(args, flag)
            if value is not None:
                C.apply_overrides(cfg, [f"--{key}={value}"])
    C.apply_overrides(cfg, overrides)
    cfg.run = replace(cfg.run, command=command)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    return command, cfg


def _out(cfg: C.RunConfig) -> Path:
    out = ensure_dir(cfg.run.out_dir)
    cfg.write(out / "run-manifest.ini")
    return out


def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: C.RunConfig) -> None:
    out = _out(cfg)
    d = cfg.data
    manifest = make_dataset(d.count, cfg.scene_spec(), (d.train_fraction, d.val_fraction, d.test_fraction), out / "data")
    print(f"wrote {len(manifest.entries)} scenes to {manifest.root}")


def cmd_dwt(cfg: C.RunConfig) -> None:
    image = read_rgb(_require(cfg.paths.image, "image"))
    out = _out(cfg)
    filters = daubechies_filters(cfg.dwt.order)
    pyramid = dwt_pyramid(image.astype(np.float64), cfg.dwt.levels, filters)
    tensors = {}
    for j, bands in enumerate(pyramid.levels, start=1):
        for comp in COMPONENTS:
            coeffs = bands.band(comp)[0]
            write_gray(out / f"L{j}_{comp}.png", coeffs)
            tensors[f"L{j}/{comp}"] = coeffs
    write_container(out / "coefficients.alnw", tensors, {"kind": "dwt", "order": cfg.dwt.order, "source_shape": list(pyramid.source_shape)})
    print(f"wrote {4 * len(pyramid)} sub-band images to {out}")


def _load_split(manifest: Manifest, split: str) -> list[tuple[str, np.ndarray, np.ndarray]]:
    return [(e.name, *manifest.load(e)) for e in manifest.split(split)]


def cmd_train(cfg: C.RunConfig) -> None:
    manifest = Manifest.read(_require(cfg.paths.manifest, "manifest"))
    train_scenes = _load_split(manifest, "train")
    if not train_scenes:
        raise DataError("manifest has no training scenes")
    out = _out(cfg)
    d = cfg.data
    stats = compute_stats([s[1] for s in train_scenes], [s[2] for s in train_scenes])
    samples = []
    for _, img, mask in train_scenes:
        grid = make_grid((img.shape[2], img.shape[1]), d.patch, d.train_stride)
        samples += [Sample(p, m) for p, m in zip(extract(img, grid), extract(mask, grid))]
    val = [EvalImage(img, mask, name) for name, img, mask in _load_split(manifest, "val")]
    lam = cfg.train.lambda_lane if cfg.train.lambda_lane > 0 else stats.class_ratio
    graph = build(cfg.network_config(), seed=sample_seed(cfg.run.seed, PURPOSE_INIT))
    result = train(graph, samples, cfg.train_config(lam), stats, val, d.patch, d.test_stride)
    ckpt = Checkpoint.from_training(graph, result.optimizer, stats, {"lambda_lane": lam})
    save_checkpoint(ckpt, out / "checkpoint.alnw")
    with open(out / "train_log.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\tsteps\tloss\tval_mean_iou\tval_dice\n")
        for e in result.log:
            vm = f"{e.val.mean_iou:.6f}\t{e.val.dice:.6f}" if e.val else "\t"
            fh.write(f"{e.epoch}\t{e.steps}\t{e.mean_loss:.8f}\t{vm}\n")
    print(f"trained {result.optimizer.step_count} steps; checkpoint at {out / 'checkpoint.alnw'}")


def cmd_predict(cfg: C.RunConfig) -> None:
    ckpt = load_checkpoint(_require(cfg.paths.checkpoint, "checkpoint"))
    image = read_rgb(_require(cfg.paths.image, "image"))
    truth = read_mask(_require(cfg.paths.mask, "mask")) if cfg.paths.mask else None
    if ckpt.stats is None:
        raise DataError("checkpoint carries no dataset statistics")
    out = _out(cfg)
    _, mask = predict_full(ckpt.graph(), image, ckpt.stats, cfg.data.patch, cfg.data.test_stride, cfg.run.workers)
    stem = Path(cfg.paths.image).stem
    write_mask(out / f"{stem}_mask.png", mask)
    write_overlay(out / f"{stem}_overlay.png", image, mask, truth)
    print(f"wrote {out / (stem + '_mask.png')}")


def _mask_pairs(pred: Path, truth: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_file() and truth.is_file():
        return [(pred.stem, pred, truth)]
    if pred.is_dir() and truth.is_dir():
        pairs = []
        for t in sorted(truth.glob("*.png")):
            cands = [pred / t.name, pred / f"{t.stem}_mask.png"]
            match = next((c for c in cands if c.exists()), None)
            if match is None:
                raise DataError(f"no prediction for truth mask {t.name} in {pred}")
            pairs.append((t.stem, match, t))
        if not pairs:
            raise DataError(f"no truth masks in {truth}")
        return pairs
    raise UsageError("pred and truth must both be files or both be directories")


def cmd_eval(cfg: C.RunConfig) -> None:
    pairs = _mask_pairs(_require(cfg.paths.pred, "prediction"), _require(cfg.paths.truth, "truth"))
    out = _out(cfg)
    total = ConfusionMatrix()
    rows = ["image\tmean_iou\tdice\tprecision_background\trecall_background\tprecision_lane\trecall_lane"]
    for name, p, t in pairs:
        cm = accumulate(ConfusionMatrix(), read_mask(p), read_mask(t))
        total = total + cm
        r = report(cm)
        rows.append(f"{name}\t{r.mean_iou:.6f}\t{r.dice:.6f}\t{r.precision[0]:.6f}\t{r.recall[0]:.6f}\t{r.precision[1]:.6f}\t{r.recall[1]:.6f}")
    (out / "report.txt").write_text(report(total).to_text(), encoding="utf-8")
    (out / "per_image.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(report(total).to_text(), end="")


def cmd_gradcheck(cfg: C.RunConfig) -> None:
    out = _out(cfg)
    g = cfg.gradcheck
    rng = np.random.default_rng(cfg.run.seed)
    graph = build(cfg.network_config(), seed=sample_seed(cfg.run.seed, PURPOSE_INIT), dtype=np.float64)
    x = rng.normal(size=(3, g.size, g.size))
    mask = (rng.random((g.size, g.size)) < 0.1).astype(np.uint8)
    from .training import LossParams

    rep = grad_check(graph, x, mask, LossParams(g.lambda_lane), per_block=g.per_block, seed=cfg.run.seed)
    (out / "gradcheck.txt").write_text(rep.to_text(), encoding="utf-8")
    print(rep.to_text(), end="")
    if rep.max_error >= g.tolerance:
        raise NumericalError(0, rep.max_error)


def cmd_ablate(cfg: C.RunConfig) -> None:
    out = _out(cfg)
    a = cfg.ablate
    d = cfg.data
    data: AblationData = prepare_data(a.train_scenes, a.test_scenes, cfg.scene_spec(), d.patch, d.train_stride, d.test_stride)
    order = cfg.injection.order
    conds = standard_conditions(order) if a.standard else sweep_conditions(a.lambdas, a.levels, a.components, a.placements, order)
    net = replace(cfg.network_config(), dropout=a.dropout)
    tc = replace(cfg.train_config(), lr=a.lr, epochs=1, steps_per_epoch=a.steps, final_lr_fraction=a.final_lr_fraction)
    result = run_ablation(conds, data, net, tc, a.seeds)
    lines = [result.table()]
    for label, better, worse, ok in directional_checks(result):
        lines.append(f"# {label}: {better:.6f} vs {worse:.6f} -> {'holds' if ok else 'fails'}")
    text = "\n".join(lines) + "\n"
    (out / "ablation.tsv").write_text(text, encoding="utf-8")
    print(text, end="")


COMMANDS = {
    "synth": cmd_synth,
    "dwt": cmd_dwt,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def _origin(exc: BaseException) -> str:
    """Innermost package module on the traceback, for diagnostics."""
    mod = "cli"
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("wavelane."):
            mod = name.rsplit(".", 1)[-1]
        tb = tb.tb_next
    return mod


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command, cfg = resolve(argv)
        COMMANDS[command](cfg)
    except SystemExit as exc:  # argparse
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    except C.ConfigError as exc:
        print(f"wavelane: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"wavelane: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, CheckpointError, OSError) as exc:
        print(f"wavelane: data error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"wavelane: invalid configuration [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
