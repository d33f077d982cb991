"""Command-line front end: ``fedpm run|validate|oracle <config-path>``.

Exit codes: 0 success, 1 configuration or data error, 2 numerical failure.
Errors go to stderr as a single ``ERROR <code>: <message>`` line.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from .config import parse_config, render, sweep_seeds
from .errors import ConfigError, DataError, FedpmError, NumericalError
from .harness import build_problem, records_to_csv, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with the numerical code
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedpm", description="Federated optimization simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run the experiment (every seed) and write CSV files plus a manifest"),
        ("validate", "check a config and print its resolved form"),
        ("oracle", "compute the centralized optimum and print diagnostics"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a key = value config file")
    return parser


def write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _diagnostics(prob) -> list[str]:
    lines = []
    if prob.theta_star is not None:
        lines.append(f"oracle_grad_norm = {prob.oracle_grad_norm!r}")
        lines.append(f"theta_star_norm = {float(np.linalg.norm(prob.theta_star))!r}")
        lines.append(f"f_star = {prob.global_objective.value(prob.theta_star)!r}")
    if prob.constants is not None:
        c = prob.constants
        lines.append(f"mu = {c.mu!r}")
        lines.append(f"l_star = {c.l_star!r}")
        lines.append(f"l_f = {c.l_f!r}")
    if prob.condition1 is not None:
        r = prob.condition1
        lines.append(f"condition1.holds = {str(r.holds).lower()}")
        lines.append(f"condition1.distance = {r.distance!r}")
        lines.append(f"condition1.radius = {r.radius!r}")
        lines.append(f"condition1.distance_margin = {r.distance_margin!r}")
        lines.append(f"condition1.hessian_gap = {r.hessian_gap!r}")
        lines.append(f"condition1.hessian_bound = {r.hessian_bound!r}")
        lines.append(f"condition1.hessian_margin = {r.hessian_margin!r}")
    return lines


def cmd_validate(cfg, out) -> int:
    out.write(render(cfg))
    return EXIT_OK


def cmd_oracle(cfg, out) -> int:
    if cfg.model != "logistic":
        raise ConfigError("oracle needs model = logistic; no optimum is computed for mlp")
    prob = build_problem(cfg)
    out.write("\n".join(_diagnostics(prob)) + "\n")
    return EXIT_OK


def cmd_run(cfg, out) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    manifest = [render(cfg).rstrip("\n")]
    for seed in sweep_seeds(cfg):
        run_cfg = cfg.with_seed(seed)
        prob = build_problem(run_cfg)
        try:
            records = run_experiment(run_cfg, prob)
        except NumericalError as exc:
            exc.seed = seed
            raise
        name = f"run_{seed}.csv"
        write_atomic(os.path.join(cfg.out, name), records_to_csv(records))
        manifest.append(f"# run {seed}: {name}")
        manifest.extend(f"#   {line}" for line in _diagnostics(prob))
        out.write(f"wrote {os.path.join(cfg.out, name)}\n")
    write_atomic(os.path.join(cfg.out, "manifest.txt"), "\n".join(manifest) + "\n")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "oracle": cmd_oracle}


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(f"ERROR {code}: {message}\n")
    return status


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        return _fail("Usage", str(exc), EXIT_CONFIG)
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        return _fail("MissingFile", f"cannot read config {args.config!r}: {exc.strerror}", EXIT_CONFIG)
    except UnicodeDecodeError:
        return _fail("ConfigError", f"config {args.config!r} is not UTF-8", EXIT_CONFIG)

    try:
        cfg = parse_config(text)
        return COMMANDS[args.command](cfg, sys.stdout)
    except ConfigError as exc:
        return _fail(exc.code, str(exc), EXIT_CONFIG)
    except NumericalError as exc:
        where = f"round {exc.round_index}" if exc.round_index is not None else "setup"
        seed = getattr(exc, "seed", None)
        if seed is not None:
            where = f"seed {seed}, {where}"
        return _fail(type(exc).__name__, f"{where}: {exc}", EXIT_NUMERICAL)
    except (DataError, FedpmError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_CONFIG)
    except OSError as exc:
        return _fail("IOError", str(exc), EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
