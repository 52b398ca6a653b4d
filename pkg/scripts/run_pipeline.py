#!/usr/bin/env python3
"""Run the full experiment pipeline into one output directory:

train -> train-predictor -> eval -> sweep-budget -> sweep-distance
-> target-accuracy

Equivalent to invoking the `pwcmoe` CLI once per stage, but reuses the
in-memory model and dataset between stages, so it is considerably faster.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from pwcmoe import harness, moe
from pwcmoe.config import ExperimentSpec, load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="runs/pipeline")
    parser.add_argument("--emit-gnuplot", action="store_true")
    args = parser.parse_args()

    spec = load_config(args.config) if args.config else ExperimentSpec()
    if args.seed is not None:
        spec.seed = args.seed
    os.makedirs(args.out, exist_ok=True)

    bundle = harness.prepare_data(spec)
    print(f"dataset: {len(bundle.train)} train / {len(bundle.test)} test, "
          f"vocab {len(bundle.vocab)}, {bundle.num_classes} classes")

    model, _ = harness.run_train(spec, args.out)
    predictor, _ = harness.run_train_predictor(spec, args.out, model=model,
                                               bundle=bundle)
    acc = harness.run_eval(spec, args.out, model=model, bundle=bundle)
    print(f"test accuracy (all tokens): {acc:.4f}")

    harness.run_budget_sweep(spec, args.out, model=model, predictor=predictor,
                             bundle=bundle, emit_gnuplot=args.emit_gnuplot)
    harness.run_distance_sweep(spec, args.out, model=model, predictor=predictor,
                               bundle=bundle, emit_gnuplot=args.emit_gnuplot)
    harness.run_target_accuracy(spec, args.out, model=model, predictor=predictor,
                                bundle=bundle, emit_gnuplot=args.emit_gnuplot)
    print(f"artifacts written to {args.out}")


if __name__ == "__main__":
    main()
