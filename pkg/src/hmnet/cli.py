"""Command-line entry point: ``hmnet {train,eval,predict,synth,gradcheck}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .datasets import SYNTH_KINDS, synth_generate, write_tracks
from .harness import (Checkpoint, ConfigurationError, baseline_constant_velocity, evaluate,
                      evaluate_predictor, gradcheck, gradcheck_config, load_config, load_scenes,
                      predict_scenes, save_config, split_scenes, train)
from .plotting import plot_scene

log = logging.getLogger("hmnet")


def _write_table(table, out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / f"{stem}.csv")
    (out_dir / f"{stem}.txt").write_text(table.to_text() + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.resolved.yaml")
    splits = split_scenes(cfg)
    log.info("scenes: train %d, val %d, test %d", *(len(splits[s]) for s in ("train", "val", "test")))

    def progress(rec):
        log.info("epoch %3d  %s  loss %.4f  val ADE %.4f  (%.1fs)", rec["epoch"], rec["loss_kind"],
                 rec["train_loss"], rec["val_ade"], rec["seconds"])

    t0 = time.perf_counter()
    ckpt = train(cfg, splits, progress)
    path = ckpt.save(out / "checkpoint.npz")
    log.info("best epoch %d, %.1fs, checkpoint %s", ckpt.epoch, time.perf_counter() - t0, path)
    if splits["test"]:
        table = evaluate(ckpt, "test", scenes=splits["test"])
        _write_table(table, out, f"metrics_test_{table.mode}")
        print(table.to_text())
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.config
    if args.set:
        cfg = load_config(None, {**cfg.to_dict(), **dict(s.split("=", 1) for s in args.set)})
        ckpt.config = cfg  # data keys only; model keys must match the stored parameters
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    save_config(cfg, out / "config.resolved.yaml")
    scenes = split_scenes(cfg)[args.split]
    mode = args.mode or cfg.mode
    table = evaluate(ckpt, args.split, mode, args.k, scenes=scenes)
    stem = f"metrics_{args.split}_{mode}" + (f"_k{table.k}" if mode == "multimodal" else "")
    _write_table(table, out, stem)
    print(table.to_text())
    if args.baseline == "cv":
        base = evaluate_predictor(baseline_constant_velocity, scenes, cfg.sample_rate)
        _write_table(base, out, f"metrics_{args.split}_cv")
        print("\nconstant-velocity baseline")
        print(base.to_text())
    return 0


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.resolved.yaml")
    scenes = {sc.scene_id: sc for sc in load_scenes(cfg)}
    if args.scene not in scenes:
        some = ", ".join(list(scenes)[:5])
        raise ConfigurationError(f"unknown scene {args.scene!r}; ids look like {some}")
    scene = scenes[args.scene]
    mode = args.mode or cfg.mode
    k = 1 if mode == "unimodal" else (args.k or cfg.k)
    preds = predict_scenes(ckpt.model(), [scene], mode, k, cfg.eval_seed)[0]  # (K, T, 2)
    stem = args.scene.replace("@", "_")
    with open(out / f"{stem}_pred.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["track", "step", "x", "y"])
        for j, track in enumerate(preds):
            for i, (x, y) in enumerate(track, start=1):
                w.writerow([j, i, repr(float(x)), repr(float(y))])
    plot_scene(scene.history, scene.future, preds, cfg.sample_rate, out / f"{stem}.svg",
               title=f"scene {args.scene} ({mode}, K={k})")
    print(f"wrote {out / (stem + '_pred.csv')} and {out / (stem + '.svg')}")
    return 0


def cmd_synth(args) -> int:
    tracks = synth_generate(args.kind, args.n, args.noise, seed=args.seed, n_steps=args.steps,
                            multi_agent=args.multi_agent)
    write_tracks(tracks, args.out)
    print(f"wrote {len(tracks)} tracks to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = gradcheck_config()
    res = gradcheck(cfg, step=args.step)
    width = max(len(g) for g in res["groups"])
    for name, g in sorted(res["groups"].items()):
        print(f"{name:<{width}}  {g['entries']:>5}  {g['max_rel_error']:.3e}")
    ok = res["max_rel_error"] < args.tol
    print(f"max relative error {res['max_rel_error']:.3e} over {res['n_params']} entries "
          f"in {res['seconds']:.1f}s: {'PASS' if ok else 'FAIL'}")
    if args.out:
        Path(args.out).write_text(json.dumps(res, indent=2), encoding="utf-8")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmnet", description="Hierarchical motion encoder-decoder forecaster")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", help="YAML key-value file; omitted keys take defaults")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="metric table for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--mode", choices=("unimodal", "multimodal"))
    e.add_argument("--k", type=int)
    e.add_argument("--baseline", choices=("cv",), help="also tabulate the constant-velocity baseline")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override data keys of the embedded config")
    e.add_argument("--out", help="output directory (default: next to the checkpoint)")
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="predict one scene, write CSV and SVG")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--scene", required=True, help="scene id, <ego id>@<frame>")
    pr.add_argument("--out", required=True)
    pr.add_argument("--mode", choices=("unimodal", "multimodal"))
    pr.add_argument("--k", type=int)
    pr.set_defaults(fn=cmd_predict)

    s = sub.add_parser("synth", help="generate a synthetic track CSV")
    s.add_argument("--kind", required=True, choices=SYNTH_KINDS)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--steps", type=int, default=80)
    s.add_argument("--multi-agent", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--out", help="write the full report as JSON")
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", datefmt="%H:%M:%S")
    np.seterr(over="ignore")
    try:
        return args.fn(args)
    except (ConfigurationError, FileNotFoundError, ValueError) as exc:
        print(f"hmnet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
