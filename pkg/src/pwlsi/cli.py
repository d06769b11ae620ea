"""Command-line entry points: train, test, experiment.

Exit codes: 0 success, 2 undefined hypothesis (no testable region),
3 numerical failure, 4 I/O or parse failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import experiments
from .graph import assemble_detector
from .inference import SweepBudgetError, run_test
from .linalg import FactorizationError, Image
from .noise import CalibrationError
from .vae import (TrainConfig, TrainingDivergedError, VaeModel, WeightFormatError,
                  load_weights, save_weights, train)

EXIT_OK = 0
EXIT_UNDEFINED = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pwlsi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on synthetic normal images")
    p_train.add_argument("--n", type=int, default=64)
    p_train.add_argument("--m", type=int, default=10)
    p_train.add_argument("--epochs", type=int, default=200)
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument("--batch-size", type=int, default=64)
    p_train.add_argument("--train-images", type=int, default=1000)
    p_train.add_argument("--conv", action="store_true", help="conv/pool/upsample variant")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", required=True, help="weight file to write")

    p_test = sub.add_parser("test", help="test one image file")
    p_test.add_argument("--weights", required=True)
    p_test.add_argument("--image", required=True, help="plain-text CSV grid of reals")
    p_test.add_argument("--cov", choices=("indep", "ar"), default="indep")
    p_test.add_argument("--lambda", dest="lam", type=float, default=1.2)
    p_test.add_argument("--filter-window", type=int, default=1)
    p_test.add_argument("--out", help="also write the outcome JSON here")

    p_exp = sub.add_parser("experiment", help="run a Monte Carlo study, emit CSV")
    p_exp.add_argument("--kind", choices=("type1", "power", "robustness", "single-test"),
                       default="type1")
    p_exp.add_argument("--n", type=int, default=64)
    p_exp.add_argument("--trials", type=int, default=1000)
    p_exp.add_argument("--delta", type=float, nargs="+", default=None,
                       help="signal heights (default: 1 2 3 4 for power, 0 otherwise)")
    p_exp.add_argument("--cov", choices=("indep", "ar"), default="indep")
    p_exp.add_argument("--alpha", type=float, default=0.05)
    p_exp.add_argument("--lambda", dest="lam", type=float, default=1.2)
    p_exp.add_argument("--filter-window", type=int, default=1)
    p_exp.add_argument("--region-size", type=int, default=16)
    p_exp.add_argument("--seed", type=int, default=0)
    p_exp.add_argument("--weights", required=True)
    p_exp.add_argument("--workers", type=int, default=1)
    p_exp.add_argument("--large", action="store_true", help="allow n in {1024, 4096}")
    p_exp.add_argument("--out", required=True, help="CSV file to write")
    return parser


def cmd_train(args) -> int:
    model = VaeModel.init(args.n, m=args.m, seed=args.seed, conv=args.conv)
    rng = np.random.default_rng(args.seed)
    data = rng.standard_normal((args.train_images, args.n))
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.lr, seed=args.seed)
    trained = train(model, data, cfg)
    save_weights(trained, args.out)
    for epoch, loss in enumerate(trained.loss_trace):
        print(f"epoch {epoch:4d}  loss {loss:.6f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _load_image(path) -> Image:
    try:
        grid = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise WeightFormatError(f"{path}: cannot parse image grid ({exc})") from exc
    return Image(grid.ravel(), (grid.shape[0], grid.shape[1]))


def cmd_test(args) -> int:
    model = load_weights(args.weights)
    image = _load_image(args.image)
    if image.n != model.n:
        raise WeightFormatError(
            f"image has {image.n} pixels but the weights expect {model.n}")
    cov = experiments.make_cov(args.cov, model.n)
    graph = assemble_detector(model, args.lam, args.filter_window)
    outcome = run_test(graph, image, cov)
    payload = json.dumps(outcome.to_dict(), indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    print(payload)
    if outcome.undefined:
        print("no testable region", file=sys.stderr)
        return EXIT_UNDEFINED
    return EXIT_OK


def cmd_experiment(args) -> int:
    model = load_weights(args.weights)
    if args.delta is None:
        args.delta = [1.0, 2.0, 3.0, 4.0] if args.kind == "power" else [0.0]
    spec = experiments.ExperimentSpec(
        kind=args.kind,
        n=args.n,
        trials=args.trials,
        deltas=tuple(args.delta),
        cov_kind=args.cov,
        alpha=args.alpha,
        lam=args.lam,
        filter_window=args.filter_window,
        seed=args.seed,
        region_size=args.region_size,
        workers=args.workers,
        large=args.large,
    )
    rows, _ = experiments.run_experiment(spec, model)
    csv_text = experiments.rows_to_csv(rows)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text)
    print(csv_text, end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors; 2 is reserved for
        # undefined hypotheses here, so usage problems map to the I/O code.
        return EXIT_IO if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "test":
            return cmd_test(args)
        return cmd_experiment(args)
    except (WeightFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FactorizationError, SweepBudgetError, TrainingDivergedError,
            CalibrationError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
