"""Command-line entry point: ``irisadv <command> [options]``.

Exit codes: 0 success, 2 attack failed, 3 corpus calibration failed,
4 I/O or parse error (1 is left to argparse usage errors and bugs).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .codec import load_filter_bank
from .harness import AttackFailed, ExperimentConfig
from .io import FormatError
from .synth import CalibrationError

EXIT_OK, EXIT_ATTACK_FAILED, EXIT_CALIBRATION, EXIT_IO = 0, 2, 3, 4


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    for key in ExperimentConfig.keys():
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar=key.upper())


def _experiment(args) -> ExperimentConfig:
    overrides = {}
    for key in ExperimentConfig.keys():
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = ExperimentConfig.parse_value(key, value)
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig(**overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irisadv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and calibrate a synthetic corpus")
    _config_args(p)
    p = sub.add_parser("train", help="train the surrogate on a corpus")
    _config_args(p)
    p = sub.add_parser("attack", help="attack one corpus sample")
    _config_args(p)
    p.add_argument("--sample", required=True, help="sample id, e.g. 0041L02")
    p.add_argument("--target", help="target sample id for targeted mode")
    p.add_argument("--epsilon", type=float, default=0.03)
    p.add_argument("--scenario", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=300)
    p = sub.add_parser("sweep", help="epsilon sweep writing distances.csv, success_rates.csv and trials.csv")
    _config_args(p)

    p = sub.add_parser("encode", help="encode an iris/mask pair into a code PBM")
    p.add_argument("iris")
    p.add_argument("mask")
    p.add_argument("out")
    p.add_argument("--bank", required=True, help="filter-bank file")
    p = sub.add_parser("match", help="masked Hamming distance between two code PBMs")
    p.add_argument("code_a")
    p.add_argument("code_b")
    p.add_argument("--threshold", type=float, default=0.32)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            corpus = harness.cmd_gen_data(_experiment(args))
            print(f"{len(corpus)} samples\n{corpus.stats.summary()}")
        elif args.command == "train":
            rep = harness.cmd_train(_experiment(args))
            print(f"final loss {rep.curve[-1] if rep.curve else float('nan'):.5f}")
            print(f"bit error {rep.bit_error:.6f} (untrained {rep.untrained_bit_error:.6f}) "
                  f"on {rep.n_test} held-out samples")
        elif args.command == "attack":
            try:
                res = harness.cmd_attack(_experiment(args), args.sample, args.epsilon, args.scenario,
                                         args.target, args.seed, args.cap)
            except AttackFailed as exc:
                print(f"attack failed: {exc}", file=sys.stderr)
                return EXIT_ATTACK_FAILED
            print(f"success after {res.iterations} iterations, dist {res.dist:.6g}, hd {res.hd:.4f}")
        elif args.command == "sweep":
            cfg = _experiment(args)
            rep = harness.cmd_sweep(cfg)
            print(f"{len(rep.trials)} attacks; tables in {cfg.out_dir / 'sweep'}")
        elif args.command == "encode":
            code = harness.cmd_encode(args.iris, args.mask, args.out, load_filter_bank(args.bank))
            print(f"{code.shape[0]}x{code.shape[1]} code, {int(code.code_mask.sum())} valid bits")
        elif args.command == "match":
            d = harness.cmd_match(args.code_a, args.code_b, args.threshold)
            print(f"hd {d.hd:.6f} over {d.compared_bits} bits: {'accept' if d.accepted else 'reject'}")
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (OSError, FormatError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
