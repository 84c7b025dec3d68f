#!/usr/bin/env python3
"""Sweep the regularization weight on a seeded synthetic benchmark.

Trains one prototype bank per lambda against the frozen general bank,
then tabulates detection metrics next to every computable term of the
generalization bound. Writes the table as CSV and prints it aligned.

Example:
    python3 scripts/lambda_sweep.py --shift 0.5 --out sweep.csv
"""

import argparse
import sys
import warnings

from good.embedkit import GeneratorSpec, concat_sets, fstar_rows, synth_generate
from good.scoring import bank_from_means
from good.trainer import SWEEP_COLUMNS, TrainConfig, sweep, sweep_csv


def parse_args(argv):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--radius", type=float, default=2.0)
    ap.add_argument("--per-class", type=int, default=500)
    ap.add_argument("--shift", type=float, default=0.5)
    ap.add_argument("--ood", choices=["near", "far"], default="near")
    ap.add_argument("--shots", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--mode", choices=["baseline", "reg", "kde"], default="kde")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lambdas", default="0,0.1,0.2,0.3,0.4,0.5",
                    help="comma-separated regularization weights")
    ap.add_argument("--out", default=None, help="CSV path (default: stdout only)")
    return ap.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    grid = [float(x) for x in args.lambdas.split(",") if x.strip()]
    spec = GeneratorSpec(n_classes=args.classes, dim=args.dim,
                         mean_radius=args.radius, noise_sigma=args.sigma,
                         samples_per_class=args.per_class,
                         shift_delta=args.shift, ood_family=args.ood,
                         seed=args.seed)
    res = synth_generate(spec)
    gkm = bank_from_means(res.means, args.sigma**2)
    joint = concat_sets(res.test_id, res.test_ood)
    fs_train = fstar_rows(res.train, spec, res.means)
    fs_test = fstar_rows(joint, spec, res.means)
    cfg = TrainConfig(mode=args.mode, shots_per_class=args.shots,
                      epochs=args.epochs, seed=args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rows = sweep(res.train, res.test_id, res.test_ood, gkm, None, cfg,
                     grid, fs_train, fs_test)

    if args.out:
        with open(args.out, "w") as fh:
            fh.write(sweep_csv(rows))
        print(f"wrote {args.out}")

    fmt = "{:>8}" * len(SWEEP_COLUMNS)
    print(fmt.format(*(c[:8] for c in SWEEP_COLUMNS)))
    for r in rows:
        cells = [r[c] for c in SWEEP_COLUMNS]
        print(fmt.format(*(f"{v:.4f}"[:8] if isinstance(v, float) else str(v)[:8]
                           for v in cells)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
