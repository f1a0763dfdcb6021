"""Command-line entry point: ``arped <command> [--config PATH] [--set k=v ...] [--seed N] [--out DIR]``.

Commands
  gen-data  write the synthetic train/test splits to ``<out>/train`` and ``<out>/test``
  train     train the RPN (and the second stage when ``rcnn.enabled``)
  eval      per-phase and final miss-rate curves for a checkpoint
  infer     detections for the test split or for given pixmaps
  analyze   score heatmaps, phase-disagreement maps, centre-line profiles, MAC table
  ablate    train and evaluate a list of config variants under one seed
  macs      analytic MAC counts for the desk model and the full-scale grid
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from arped import rcnn
from arped.config import ConfigError, RunConfig
from arped.evaluation import (EvalCurve, category_rgb, evaluate, heat_rgb, peak_profile,
                              phase_disagreement, upscale, write_detections)
from arped.inference import ImagePrediction, evaluate_phases, phase_detections, predict
from arped.macs import ablation_table, count_macs
from arped.params import ParamStore, load_checkpoint
from arped.rpn import ModelConfig, build_rpn
from arped.synthdata import SceneConfig, generate_split, read_ppm, write_dataset, write_ppm
from arped.train import load_split, train_rpn

log = logging.getLogger("arped")

RPN_CHECKPOINT = "model.ckpt"
RCNN_CHECKPOINT = "rcnn.ckpt"


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def prepare_out(cfg: RunConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "run.cfg")
    return out


def load_model(cfg: RunConfig, checkpoint) -> tuple[ModelConfig, ParamStore]:
    mcfg = ModelConfig.from_run_config(cfg)
    store = build_rpn(mcfg, cfg["seed"])
    store.load_state(load_checkpoint(checkpoint))
    return mcfg, store


def load_rcnn(cfg: RunConfig, checkpoint) -> ParamStore | None:
    if not cfg["rcnn.enabled"]:
        return None
    path = Path(checkpoint).with_name(RCNN_CHECKPOINT)
    if not path.exists():
        raise FileNotFoundError(f"rcnn.enabled is set but {path} is missing")
    store = rcnn.init_rcnn(ParamStore(cfg["seed"] + 1), rcnn.RCNNConfig.from_run_config(cfg))
    store.load_state(load_checkpoint(path))
    return store


def require_test_split(cfg: RunConfig):
    scenes = load_split(cfg, "test")
    if not scenes:
        raise ValueError("test set is empty")
    return scenes


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out) -> Path:
    out = prepare_out(cfg, out)
    scfg = SceneConfig.from_run_config(cfg)
    meta = {"seed": scfg.seed, "size": scfg.size}
    for split, n in (("train", cfg["data.train"]), ("test", cfg["data.test"])):
        write_dataset(out / split, generate_split(scfg, split, n), {**meta, "split": split})
    return out


def cmd_train(cfg: RunConfig, out) -> Path:
    """Train the RPN; then, if enabled, the second stage on its suppressed proposals."""
    out = prepare_out(cfg, out)
    scenes = load_split(cfg, "train")
    ckpt = out / RPN_CHECKPOINT
    start = time.perf_counter()
    with open(out / "loss.txt", "w") as fh:
        result = train_rpn(cfg, scenes, fh, ckpt)
    log.info("RPN trained in %.1f s", time.perf_counter() - start)
    if cfg["rcnn.enabled"]:
        mcfg = ModelConfig.from_run_config(cfg)
        images = [s.image for s in scenes]
        preds = predict(result.store, mcfg, images)
        props = phase_detections(preds, mcfg.num_phases, cfg, images[0].shape[1:])
        pool = rcnn.build_pool(images, props, [s.boxes for s in scenes], cfg)
        with open(out / "rcnn_loss.txt", "w") as fh:
            store = rcnn.train_rcnn(cfg, pool, fh)
        store.save(out / RCNN_CHECKPOINT)
    return ckpt


@dataclass
class EvalResult:
    curves: dict[int, EvalCurve]
    final: EvalCurve
    num_proposals: int = 0
    num_suppressed: int = 0
    files: list[Path] = field(default_factory=list)


def final_detections(preds: list[ImagePrediction], scenes, cfg: RunConfig, rcnn_store):
    """Final-phase detections, rescored by the second stage when it is enabled."""
    n = max(preds[0].logits)
    dets = phase_detections(preds, n, cfg, scenes[0].image.shape[1:])
    if rcnn_store is not None:
        dets = rcnn.rescore([s.image for s in scenes], dets, rcnn_store, cfg)
    return dets


def cmd_eval(cfg: RunConfig, checkpoint, out, phase: int | None = None) -> EvalResult:
    out = prepare_out(cfg, out)
    scenes = require_test_split(cfg)
    mcfg, store = load_model(cfg, checkpoint)
    phases = ModelConfig.predicting_phases(mcfg)
    if phase is not None and phase not in phases:
        raise ValueError(f"phase {phase} out of range; model predicts at phases {phases}")
    preds = predict(store, mcfg, [s.image for s in scenes])
    gts = [s.boxes for s in scenes]
    ev = evaluate_phases(preds, gts, cfg, scenes[0].image.shape[1:],
                         [phase] if phase is not None else phases)
    files = []
    for k, curve in ev.curves.items():
        path = out / f"curve_phase{k}.txt"
        curve.write(path)
        files.append(path)
    dets = final_detections(preds, scenes, cfg, load_rcnn(cfg, checkpoint))
    lo, hi = cfg["eval.fppi_range"]
    final = evaluate(dets, gts, lo, hi, cfg["eval.match_iou"])
    final.write(out / "curve_final.txt")
    write_detections(out / "detections.txt", dets)
    files += [out / "curve_final.txt", out / "detections.txt"]
    n_props = sum(len(d) for d in ev.detections[max(ev.curves)])
    n_kept = sum(len(rcnn.hard_suppress(d, cfg["rcnn.z"])) for d in ev.detections[max(ev.curves)])
    for k, curve in ev.curves.items():
        print(f"phase {k}: log-average MR {curve.log_avg:.4f}  recall@1FPPI {curve.recall_at(1.0):.4f}")
    print(f"final: log-average MR {final.log_avg:.4f}  recall@1FPPI {final.recall_at(1.0):.4f}")
    return EvalResult(ev.curves, final, n_props, n_props - n_kept, files)


def cmd_infer(cfg: RunConfig, checkpoint, out, images=None) -> Path:
    out = prepare_out(cfg, out)
    if images:
        arrays = [read_ppm(p) for p in images]
        scenes = [type("Scene", (), {"image": a}) for a in arrays]
    else:
        scenes = require_test_split(cfg)
    mcfg, store = load_model(cfg, checkpoint)
    preds = predict(store, mcfg, [s.image for s in scenes])
    dets = final_detections(preds, scenes, cfg, load_rcnn(cfg, checkpoint))
    path = out / "detections.txt"
    write_detections(path, dets)
    return path


def cmd_analyze(cfg: RunConfig, checkpoint, out) -> list[Path]:
    """Heatmaps of every phase's foreground-max map, first-to-last disagreement
    maps, centre-line profiles and the MAC table."""
    out = prepare_out(cfg, out)
    scenes = require_test_split(cfg)
    mcfg, store = load_model(cfg, checkpoint)
    preds = predict(store, mcfg, [s.image for s in scenes])
    phases = sorted(preds[0].logits)
    files = []
    size = scenes[0].image.shape[1]
    for n, p in enumerate(preds[:cfg["analyze.images"]]):
        maps = {k: p.fg_max(k) for k in phases}
        factor = size // maps[phases[0]].shape[0]
        path = out / f"image{n:02d}.ppm"
        write_ppm(path, scenes[n].image)
        files.append(path)
        for k in phases:
            path = out / f"heat{n:02d}_phase{k}.ppm"
            write_ppm(path, upscale(heat_rgb(maps[k]), factor) / 255)
            files.append(path)
        for a, b in zip(phases, phases[1:]):
            path = out / f"delta{n:02d}_{a}to{b}.ppm"
            write_ppm(path, upscale(category_rgb(phase_disagreement(maps[a], maps[b])), factor) / 255)
            files.append(path)
        if len(phases) > 2:
            a, b = phases[0], phases[-1]
            path = out / f"delta{n:02d}_{a}to{b}.ppm"
            write_ppm(path, upscale(category_rgb(phase_disagreement(maps[a], maps[b])), factor) / 255)
            files.append(path)
    prof = peak_profile([[p.fg_max(k) for k in phases] for p in preds], [s.boxes for s in scenes],
                        phases=phases)
    text = prof.to_text() + "".join(f"peakedness phase{k} {v:.6g}\n"
                                    for k, v in zip(phases, prof.peakedness()))
    (out / "profiles.txt").write_text(text)
    (out / "macs.txt").write_text(macs_text(cfg))
    return files + [out / "profiles.txt", out / "macs.txt"]


def macs_text(cfg: RunConfig) -> str:
    mcfg = ModelConfig.from_run_config(cfg)
    s = cfg["data.image_size"]
    desk = count_macs(mcfg, s, s)
    lines = [f"desk model {s}x{s}: {desk.total} MACs ({desk.giga:.4g} G)\n"]
    lines += [f"desk phase {k}: {v}\n" for k, v in sorted(desk.by_phase().items())]
    lines.append("full scale 960x720 (phases widths GMACs)\n")
    lines += [f"{n} {c} {g:.4f}\n" for n, c, g in ablation_table()]
    return "".join(lines)


def cmd_macs(cfg: RunConfig, out=None) -> str:
    text = macs_text(cfg)
    if out is not None:
        out = prepare_out(cfg, out)
        (out / "macs.txt").write_text(text)
    print(text, end="")
    return text


def parse_sweep(text: str, source: str = "<sweep>") -> list[tuple[str, list[str]]]:
    """Sweep lines ``name: key=value key=value``; ``#`` starts a comment."""
    variants = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, rest = line.partition(":")
        if not sep or not name.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'name: key=value ...'")
        variants.append((name.strip(), rest.split()))
    return variants


@dataclass
class AblationRow:
    name: str
    log_avg: float
    recall: float
    status: str = "ok"


def cmd_ablate(cfg: RunConfig, variants, out) -> list[AblationRow]:
    out = prepare_out(cfg, out)
    rows = []
    for name, deltas in variants:
        try:
            vcfg = cfg.with_overrides(deltas)
            ckpt = cmd_train(vcfg, out / name)
            res = cmd_eval(vcfg, ckpt, out / name)
            rows.append(AblationRow(name, res.final.log_avg, res.final.recall_at(1.0)))
        except Exception as exc:  # a failed variant is recorded and the sweep continues
            log.error("variant %s failed: %s", name, exc)
            (out / f"{name}.error.txt").parent.mkdir(parents=True, exist_ok=True)
            (out / f"{name}.error.txt").write_text(traceback.format_exc())
            rows.append(AblationRow(name, float("nan"), float("nan"), f"failed: {exc}"))
    lines = ["variant log_avg_mr recall_at_1fppi status\n"]
    lines += [f"{r.name} {r.log_avg:.6g} {r.recall:.6g} {r.status.replace(' ', '_')}\n" for r in rows]
    (out / "ablation.txt").write_text("".join(lines))
    print("".join(lines), end="")
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = RunConfig.read(args.config)
    elif getattr(args, "checkpoint", None):
        sibling = Path(args.checkpoint).with_name("run.cfg")
        if sibling.exists():
            cfg = RunConfig.read(sibling)
    cfg = cfg.with_overrides(args.set or [])
    if args.seed is not None:
        cfg.set("seed", args.seed)
    return cfg


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="arped", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic splits")
    sub.add_parser("train", parents=[common], help="train the detector")
    helps = {"eval": "miss-rate curves on the test split", "infer": "write detections for images",
             "analyze": "heat maps, profiles and MAC table"}
    for name in ("eval", "infer", "analyze"):
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        sp.add_argument("--checkpoint", required=True)
        if name == "eval":
            sp.add_argument("--phase", type=int, help="evaluate a single phase")
        if name == "infer":
            sp.add_argument("images", nargs="*", help="pixmaps to run on (default: test split)")
    sp = sub.add_parser("ablate", parents=[common], help="run a sweep of config variants")
    sp.add_argument("--sweep", required=True, help="file of 'name: key=value ...' lines")
    sub.add_parser("macs", parents=[common], help="analytic MAC counts")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "train":
            print(cmd_train(cfg, args.out))
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.out, args.phase)
        elif args.command == "infer":
            print(cmd_infer(cfg, args.checkpoint, args.out, args.images))
        elif args.command == "analyze":
            cmd_analyze(cfg, args.checkpoint, args.out)
        elif args.command == "ablate":
            cmd_ablate(cfg, parse_sweep(Path(args.sweep).read_text(), args.sweep), args.out)
        elif args.command == "macs":
            cmd_macs(cfg, args.out)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"arped {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
