"""Command-line entry point: ``mfpn <subcommand> [--flags]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis
from .backbone import generate_blob_scene, synth_backbone_forward
from .checks import check_composite, gradient_suite
from .config import ConfigError, ExperimentConfig, load_config, override, save_config
from .pyramids import KINDS, apply_laterals, build
from .training import (
    TrainState,
    evaluate_by_size,
    init_model,
    model_shapes,
    train_epoch,
    write_loss_log,
)
from .weights import load_weights

log = logging.getLogger("mfpn")

SUBCOMMANDS = ("paramcount", "flow", "gradcheck", "train", "eval", "heatmap", "demo")
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("MFPN_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return override(cfg, kind=getattr(args, "builder", None), seed=args.seed, out=args.out)


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_paramcount(args) -> int:
    """Parameter report for a preset or config, plus the reconciliation table."""
    if args.preset:
        fpn_cfg, kind = analysis.PRESETS[args.preset]
        kind = args.builder or kind
    else:
        cfg = _config(args)
        fpn_cfg, kind = cfg.fpn_config(), cfg.kind
    report = analysis.count_params(fpn_cfg, kind)
    recon = analysis.reconciliation_report()
    _emit(f"# {args.preset or 'config'}: kind={kind}\n" + report.to_text() + "\n" + recon)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "paramcount.txt").write_text(report.to_text())
        (out / "paramcount.json").write_text(report.to_json())
        (out / "reconciliation.txt").write_text(recon)
    return 0


def cmd_flow(args) -> int:
    """Gradient-probed flow matrices for three weight seeds, checked against the analytic masks."""
    cfg = _config(args)
    fpn_cfg = cfg.fpn_config()
    kinds = [args.builder] if args.builder else list(KINDS)
    ok = True
    lines = ["kind,seed,out_level,in_level,value,flag,expected"]
    for kind in kinds:
        expected = analysis.analytic_mask(kind, fpn_cfg.backbone_levels)
        for seed in range(cfg.seed, cfg.seed + 3):
            fm = analysis.flow_matrix(kind, fpn_cfg, seed)
            match = bool((fm.mask == expected).all())
            ok &= match
            _emit(f"# {kind} seed={seed} {'matches' if match else 'DIFFERS FROM'} analytic mask\n" + fm.to_text())
            for r, i in enumerate(fm.levels):
                for c, j in enumerate(fm.levels):
                    lines.append(f"{kind},{seed},{i},{j},{fm.values[r, c]!r},{int(fm.mask[r, c])},"
                                 f"{int(expected[r, c])}")
    if args.out:
        (_outdir(cfg) / "flow.csv").write_text("\n".join(lines) + "\n")
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    """Finite-difference gradient suite; nonzero exit on any failure."""
    seed = args.seed if args.seed is not None else 0
    t0 = time.perf_counter()
    reports = gradient_suite(seeds=(seed,), composite=False)
    reports[f"composite/mfpn/seed{seed}"] = check_composite("mfpn", seed)
    lines = []
    for name, rep in reports.items():
        lines.append(f"{name:<36} max_rel_err={rep.max_error:.3e} {'PASS' if rep.passed else 'FAIL'}")
    passed = all(r.passed for r in reports.values())
    lines.append(f"{'overall':<36} {'PASS' if passed else 'FAIL'} ({time.perf_counter() - t0:.1f}s)")
    _emit("\n".join(lines) + "\n")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text("\n".join(lines[:-1]) + "\n")
    return 0 if passed else 1


def run_training(cfg: ExperimentConfig, out: Path) -> TrainState:
    fpn_cfg = cfg.fpn_config()
    state = TrainState(0, cfg.lr, init_model(fpn_cfg, cfg.kind, cfg.seed, cfg.stem_channels), cfg.seed)
    for epoch in range(cfg.epochs):
        train_epoch(state, cfg.scenes_per_epoch, cfg.kind, fpn_cfg, image_size=cfg.image_size)
        log.info("%s epoch %d: step %d running loss %.5f", cfg.kind, epoch + 1, state.step, state.running_loss)
    out.mkdir(parents=True, exist_ok=True)
    state.save(out)
    write_loss_log(out / "loss.csv", state.losses)
    save_config(out / "config.txt", cfg)
    return state


def cmd_train(args) -> int:
    """Train one builder on synthetic blob scenes; writes checkpoint and loss.csv."""
    cfg = _config(args)
    state = run_training(cfg, _outdir(cfg))
    _emit(f"{cfg.kind}: {state.step} steps, initial loss {state.losses[0]:.5f}, "
          f"final running loss {state.running_loss:.5f}\n")
    return 0


def _checkpoint(cfg: ExperimentConfig, weights_dir, kind: str):
    """Weights for ``kind`` from ``<dir>/<kind>/`` or a flat ``<dir>/``;
    None when neither holds a checkpoint for that builder."""
    root = Path(weights_dir or cfg.out)
    needed = set(model_shapes(cfg.fpn_config(), kind, cfg.stem_channels))
    for path in (root / kind / "checkpoint.mfpw", root / "checkpoint.mfpw"):
        if path.exists():
            weights = load_weights(path)
            if needed <= set(weights.names()):
                return weights
            log.info("%s has no %s weights; skipping", path, kind)
    return None


def cmd_eval(args) -> int:
    """Per-size F1 of a trained checkpoint; writes eval.csv."""
    cfg = _config(args)
    weights = _checkpoint(cfg, args.weights_dir, cfg.kind)
    if weights is None:
        raise FileNotFoundError(f"no checkpoint for {cfg.kind} under {args.weights_dir or cfg.out}")
    scores = evaluate_by_size(weights, cfg.kind, cfg.fpn_config(), cfg.eval_scenes, cfg.eval_seed,
                              image_size=cfg.image_size)
    csv = scores.to_csv()
    (_outdir(cfg) / "eval.csv").write_text(csv)
    _emit(csv)
    return 0


def side_by_side(left: np.ndarray, right: np.ndarray, gap: int = 2) -> np.ndarray:
    h = max(left.shape[0], right.shape[0])
    out = np.full((h, left.shape[1] + gap + right.shape[1]), 255, dtype=np.uint8)
    out[: left.shape[0], : left.shape[1]] = left
    out[: right.shape[0], left.shape[1] + gap:] = right
    return out


def run_heatmaps(cfg: ExperimentConfig, weights_dir=None) -> list:
    """Heatmaps of one seeded scene through FPN and MFPN (plus MFPN branches)."""
    out = _outdir(cfg) / "heatmaps"
    fpn_cfg = cfg.fpn_config()
    scene = generate_blob_scene(cfg.seed, size=cfg.image_size, levels=fpn_cfg.backbone_levels)
    pyramids = {}
    for kind in ("fpn", "mfpn"):
        weights = _checkpoint(cfg, weights_dir, kind) if weights_dir else None
        if weights is None:
            weights = init_model(fpn_cfg, kind, cfg.seed, cfg.stem_channels)
        feats = apply_laterals(synth_backbone_forward(scene.image, weights, fpn_cfg), fpn_cfg, weights)
        pyramids[kind] = build(kind, feats, fpn_cfg, weights)
    written = analysis.export_heatmap(pyramids["fpn"], out / "fpn")
    written += analysis.export_heatmap(pyramids["mfpn"], out / "mfpn")
    for branch, pyr in pyramids["mfpn"].branches.items():
        written += analysis.export_heatmap(pyr, out / f"mfpn-{branch}")
    for lvl in pyramids["mfpn"].levels:
        pair = side_by_side(analysis.to_gray(analysis.activation_map(pyramids["fpn"].maps[lvl])),
                            analysis.to_gray(analysis.activation_map(pyramids["mfpn"].maps[lvl])))
        path = out / f"fpn-vs-mfpn_L{lvl}.pgm"
        analysis.write_pgm(path, pair)
        written.append(path)
    (out / "scene.json").write_text(scene.record() + "\n")
    return written


def cmd_heatmap(args) -> int:
    """Per-level PGM/CSV heatmaps of one seeded scene under FPN and MFPN."""
    written = run_heatmaps(_config(args), args.weights_dir)
    _emit("".join(f"{p}\n" for p in written))
    return 0


def cmd_demo(args) -> int:
    """Everything end to end at C=8 with short training runs."""
    base = _config(args)
    base = override(base, channels=8, backbone_channels=(8, 8, 8, 8), levels=(2, 3, 4, 5), extra_levels="off",
                    scenes_per_epoch=min(base.scenes_per_epoch, 150), epochs=1, eval_scenes=40)
    out = _outdir(base)
    ns = argparse.Namespace(preset="retinanet-fpn", builder=None, config=None, seed=base.seed,
                            out=str(out / "paramcount"), weights_dir=None)
    cmd_paramcount(ns)
    flow_ok = True
    for kind in KINDS:
        fm = analysis.flow_matrix(kind, base.fpn_config(), base.seed)
        flow_ok &= bool((fm.mask == analysis.analytic_mask(kind, fm.levels)).all())
        _emit(f"# flow {kind}\n{fm.to_text()}")
    grad = gradient_suite(seeds=(base.seed,), composite=False)
    grad_ok = all(r.passed for r in grad.values())
    _emit(f"gradient suite ({len(grad)} checks): {'PASS' if grad_ok else 'FAIL'}\n")

    rows = ["builder,initial_loss,final_running_loss,f1_small,f1_medium,f1_large"]
    for kind in KINDS:
        cfg = override(base, kind=kind, out=str(out / "train" / kind))
        state = run_training(cfg, Path(cfg.out))
        scores = evaluate_by_size(state.weights, kind, cfg.fpn_config(), cfg.eval_scenes, cfg.eval_seed,
                                  image_size=cfg.image_size)
        (Path(cfg.out) / "eval.csv").write_text(scores.to_csv())
        f1 = scores.as_tuple()
        rows.append(f"{kind},{state.losses[0]:.6f},{state.running_loss:.6f},{f1[0]:.4f},{f1[1]:.4f},{f1[2]:.4f}")
    (out / "comparison.csv").write_text("\n".join(rows) + "\n")
    _emit("\n".join(rows) + "\n")

    for path in run_heatmaps(base, out / "train"):
        log.info("wrote %s", path)
    return 0 if flow_ok and grad_ok else 1


COMMANDS = {
    "paramcount": cmd_paramcount,
    "flow": cmd_flow,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "demo": cmd_demo,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfpn", description="Feature-pyramid laboratory.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", help="flat key: value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="directory for all artifacts")
        p.add_argument("--builder", choices=KINDS)
        if name == "paramcount":
            p.add_argument("--preset", choices=sorted(analysis.PRESETS))
        if name in ("eval", "heatmap"):
            p.add_argument("--weights-dir", help="directory holding checkpoint.mfpw or <kind>/checkpoint.mfpw")
    return parser


def run_command(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging()
    for attr in ("preset", "weights_dir"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, KeyError, OSError, RuntimeError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
