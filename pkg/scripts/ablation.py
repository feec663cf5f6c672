"""Ablation ladder: S, V and V+A trained on one mixed synthetic corpus under several seeds.

Usage::

    python scripts/ablation.py [--config configs/ablation_mix.yaml] [--seeds 0,1,2] [key=value ...]

Writes ``ablation.csv``, ``ablation.txt`` and ``config.resolved.yaml`` to the
config's ``out_dir``.  The ordering ADE(V+A) <= ADE(V) <= ADE(S) is reported,
not enforced.
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

from hmnet.harness import ablation_ladder, load_config, save_config

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "ablation_mix.yaml"))
    p.add_argument("--seeds", default="0,1,2", help="comma separated")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    args = p.parse_args(argv)

    cfg = load_config(args.config, args.overrides)
    out = Path(cfg.out_dir)
    save_config(cfg, out / "config.resolved.yaml")
    t0 = time.perf_counter()

    def progress(variant, seed, table):
        print(f"  {variant:<4} seed {seed}: ADE@5s {table.rows[-1]['ade']:.3f}  "
              f"FDE@5s {table.rows[-1]['fde']:.3f}  ({time.perf_counter() - t0:.0f}s)", flush=True)

    report = ablation_ladder(cfg, seeds=tuple(int(s) for s in args.seeds.split(",")), progress=progress)
    report.to_csv(out / "ablation.csv")
    text = report.to_text()
    verdict = "holds" if report.ordering_holds() else "does not hold"
    means = ", ".join(f"{v} {report.mean_ade(v):.3f}" for v in report.tables)
    text += f"\n\nmean ADE over the horizon: {means}\nordering V+A <= V <= S {verdict}\n"
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    print(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
