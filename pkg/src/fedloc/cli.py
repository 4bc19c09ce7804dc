"""Command-line surface: validate, run, summarize.

Exit codes: 0 on success, 1 when a run completed with failed cells, 2 for
config or input errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .experiments import (
    CONFIG_SNAPSHOT,
    ConfigError,
    RESULTS_CSV,
    SUMMARY_CSV,
    load_config,
    read_results_csv,
    run_experiment,
    summarize,
    validate_config,
    write_summary_csv,
)

EXIT_OK = 0
EXIT_RUN_FAILURES = 1
EXIT_CONFIG_ERROR = 2


def _parse_seed_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError as exc:
        raise ConfigError(f"--seed-override expects comma-separated integers, got {text!r}") from exc


def _apply_overrides(nested: dict, args: argparse.Namespace) -> dict:
    """Overrides rewrite the nested config before re-validation, so every
    downstream check still applies."""
    if args.seed_override is not None:
        nested["seeds"] = _parse_seed_list(args.seed_override)
    if args.rounds_override is not None:
        rounds = int(args.rounds_override)
        nested.setdefault("federation", {})["rounds"] = rounds
        transfer = nested.setdefault("transfer", {})
        # Keep short smoke runs valid: the hand-over cannot sit past the end.
        if transfer.get("transfer_round", 0) > rounds:
            transfer["transfer_round"] = max(1, rounds // 2)
            print(
                f"note: transfer_round clamped to {transfer['transfer_round']} "
                f"for --rounds-override {rounds}",
                file=sys.stderr,
            )
        floor3d = nested.setdefault("floor3d", {})
        if floor3d.get("regression_rounds", 0) > rounds:
            floor3d["regression_rounds"] = rounds
    if args.out is not None:
        nested["output_dir"] = args.out
    return nested


def _cmd_validate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    print(f"OK: {cfg.experiment}")
    print(json.dumps(cfg.resolved(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    nested = _apply_overrides(cfg.resolved(), args)
    cfg = validate_config(nested, base_dir=os.path.dirname(os.path.abspath(args.config)))
    artifacts = run_experiment(cfg)
    print(f"{cfg.experiment}: {len(artifacts.rows)} metric rows -> {artifacts.output_dir}")
    for row in artifacts.summary:
        if row["kind"] == "final":
            print(
                f"  {row['experiment_id']} {row['method_tag']} {row['metric']}"
                f" final {row['mean']:.4f} +/- {row['std']:.4f} {row['units']}"
                f" ({row['n_seeds']} seeds, round {row['final_round']})"
            )
        else:
            print(
                f"  {row['experiment_id']} {row['method_tag']} vs {row['reference']}"
                f" ({row['metric']}): {row['kind']} {row['value']:.4f}"
            )
    if artifacts.failures:
        print(f"{len(artifacts.failures)} failed cell(s):", file=sys.stderr)
        for failure in artifacts.failures:
            print(f"  {failure}", file=sys.stderr)
        return EXIT_RUN_FAILURES
    return EXIT_OK


def _cmd_summarize(args: argparse.Namespace) -> int:
    results_path = os.path.join(args.results_dir, RESULTS_CSV)
    if not os.path.isfile(results_path):
        raise ConfigError(f"no {RESULTS_CSV} under {args.results_dir!r}")
    rows = read_results_csv(results_path)
    if not rows:
        raise ConfigError(f"{results_path} holds no rows")
    summary = summarize(rows)
    out_path = os.path.join(args.out or args.results_dir, SUMMARY_CSV)
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    write_summary_csv(summary, out_path)
    for row in summary:
        if row["kind"] == "final":
            print(
                f"{row['experiment_id']} {row['method_tag']} {row['metric']}:"
                f" {row['mean']:.4f} +/- {row['std']:.4f} {row['units']}"
            )
        else:
            print(
                f"{row['experiment_id']} {row['method_tag']} vs {row['reference']}"
                f" ({row['metric']}): {row['kind']} {row['value']:.4f}"
            )
    print(f"wrote {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedloc",
        description="Federated WiFi-fingerprint localization experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a config and print its resolved form")
    p_validate.add_argument("config", help="path to a JSON experiment config")
    p_validate.set_defaults(func=_cmd_validate)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="path to a JSON experiment config")
    p_run.add_argument("--seed-override", help="comma-separated seeds replacing the config's list")
    p_run.add_argument("--rounds-override", type=int, help="replace the federation round count")
    p_run.add_argument("--out", help="replace the config's output directory")
    p_run.set_defaults(func=_cmd_run)

    p_sum = sub.add_parser("summarize", help=f"recompute {SUMMARY_CSV} from a results directory")
    p_sum.add_argument("results_dir", help=f"directory holding {RESULTS_CSV}")
    p_sum.add_argument("--out", help="directory to write the summary into (default: results dir)")
    p_sum.set_defaults(func=_cmd_summarize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
