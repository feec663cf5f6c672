"""Unimodal V+A model on noisy constant-velocity tracks, against the constant-velocity baseline.

Usage::

    python scripts/train_constant_velocity.py [--config configs/cv_unimodal.yaml] [key=value ...]

The baseline is near-optimal on this corpus, so the ratio of the model's ADE
to the baseline's is the quantity of interest (at or below 1.5 means the
model has learned the kinematics).
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

from hmnet.harness import (baseline_constant_velocity, evaluate, evaluate_predictor, load_config,
                           save_config, split_scenes, train)

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "cv_unimodal.yaml"))
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    args = p.parse_args(argv)

    cfg = load_config(args.config, args.overrides)
    out = Path(cfg.out_dir)
    save_config(cfg, out / "config.resolved.yaml")
    splits = split_scenes(cfg)
    t0 = time.perf_counter()
    ckpt = train(cfg, splits, lambda r: print(
        f"epoch {r['epoch']:3d} {r['loss_kind']}  loss {r['train_loss']:.4f}  val ADE {r['val_ade']:.4f}",
        flush=True))
    seconds = time.perf_counter() - t0
    ckpt.save(out / "checkpoint.npz")

    model = evaluate(ckpt, "test", scenes=splits["test"])
    base = evaluate_predictor(baseline_constant_velocity, splits["test"], cfg.sample_rate)
    model.to_csv(out / "metrics_test_unimodal.csv")
    base.to_csv(out / "metrics_test_cv.csv")
    ratio = model.rows[-1]["ade"] / base.rows[-1]["ade"]
    text = (f"{model.to_text()}\n\nconstant-velocity baseline\n{base.to_text()}\n\n"
            f"ADE@5s ratio model/baseline: {ratio:.3f}  (training {seconds:.0f}s, best epoch {ckpt.epoch})\n")
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
