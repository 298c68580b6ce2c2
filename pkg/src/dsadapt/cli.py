"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 training aborted.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DatasetError, IdxError, SynthSpec, generate_direct_sum_toy, write_idx
from .harness import (
    PlanError,
    TrainingAborted,
    emit_results,
    load_plan,
    run_plan,
    with_overrides,
    write_outputs,
)
from .networks import ConfigError
from .objective import UnknownConfigError

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2

log = logging.getLogger("dsadapt")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsadapt", description="Direct-sum domain adaptation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train and evaluate the configs in a plan file")
    run.add_argument("plan")
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir", default="results")
    run.add_argument("--latent-dim", type=int)
    run.add_argument("--config", help="config name, ';'-separated names, or 'all'")

    sub.add_parser("check", help="run the gradient oracle checks")

    gen = sub.add_parser("gen-toy", help="write the toy source/target datasets as IDX files")
    gen.add_argument("spec", help="key = value file with n_per_class, std, seed, scale")
    gen.add_argument("--out-dir", default="data")

    conv = sub.add_parser("convert-usps", help="convert 16x16 USPS (libsvm or .h5) to 28x28 IDX")
    conv.add_argument("input")
    conv.add_argument("output")
    return p


def _read_synth_spec(path) -> SynthSpec:
    fields = {"n_per_class": int, "std": float, "seed": int, "scale": float}
    kwargs = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or key not in fields:
            raise PlanError(f"{path}:{lineno}: expected one of {sorted(fields)} as 'key = value'")
        try:
            kwargs[key] = fields[key](value)
        except ValueError:
            raise PlanError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return SynthSpec(**kwargs)


def _cmd_run(args) -> int:
    plan = with_overrides(load_plan(args.plan), seed=args.seed, latent_dim=args.latent_dim, config=args.config)
    results = run_plan(plan, out_dir=args.out_dir)
    write_outputs(results, args.out_dir)
    sys.stdout.write(emit_results(results, "table"))
    return EXIT_OK


def _cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} err={r.error:.3e}  tol={r.tolerance:.0e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def _cmd_gen_toy(args) -> int:
    src, tgt = generate_direct_sum_toy(_read_synth_spec(args.spec))
    for name, ds in (("toy_source", src), ("toy_target", tgt)):
        d = Path(args.out_dir) / name
        d.mkdir(parents=True, exist_ok=True)
        write_idx(d / "train-images-idx3-ubyte", ds.samples)
        write_idx(d / "train-labels-idx1-ubyte", ds.labels.astype("uint8"))
        print(f"wrote {len(ds)} samples of dim {ds.samples.shape[1]} to {d}")
    return EXIT_OK


def _cmd_convert_usps(args) -> int:
    from .data import convert_usps

    n = convert_usps(args.input, args.output)
    print(f"wrote {n} images to {args.output}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": _cmd_run, "check": _cmd_check, "gen-toy": _cmd_gen_toy,
               "convert-usps": _cmd_convert_usps}[args.command]
    try:
        return handler(args)
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except (PlanError, UnknownConfigError, ConfigError, DatasetError, IdxError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
