"""Command line front door: gen-task, run, compare, report."""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

from .harness import (
    ExperimentConfig,
    compare_to_reference,
    emit_report,
    load_records,
    run_experiment,
)
from .models import ConfigurationError
from .tasks import (
    export_task,
    make_conjugate_task,
    make_gap_regression,
    make_grouped_classification,
    make_two_moons,
)


def _gen_task(args) -> int:
    if args.generator == "two-moons":
        task = make_two_moons(args.n, label_noise=args.label_noise, seed=args.seed)
    elif args.generator == "gap-regression":
        task = make_gap_regression(args.n, seed=args.seed)
    elif args.generator == "grouped-blobs":
        task = make_grouped_classification(args.n, groups=args.groups,
                                           imbalance=args.imbalance, seed=args.seed)
    elif args.generator == "conjugate":
        task, _ = make_conjugate_task(args.d, args.n, noise_std=args.noise_std,
                                      prior_std=args.prior_std, seed=args.seed)
    else:
        raise ConfigurationError(f"unknown generator {args.generator!r}")
    export_task(task, args.out)
    print(f"wrote {task.name} (seed {args.seed}) to {args.out}")
    return 0


def _run(args) -> int:
    config = ExperimentConfig.from_json_file(args.config)
    if args.seed is not None:
        config.seeds = tuple(args.seed)
    records = run_experiment(config, jobs=args.jobs, force=args.force)
    failed = [r for r in records if r.status != "ok"]
    for record in records:
        line = f"{record.algorithm} seed={record.seed}: {record.status} ({record.wall_seconds:.1f}s)"
        if record.error:
            line += f" [{record.error}]"
        print(line)
    print(f"{len(records) - len(failed)}/{len(records)} cells ok")
    return 0 if not failed else 1


def _compare(args) -> int:
    fidelity = compare_to_reference(args.model, args.reference)
    print(json.dumps(fidelity, indent=2, sort_keys=True))
    return 0


def _report(args) -> int:
    records = load_records(args.dir)
    if not records:
        print(f"no records under {args.dir}", file=sys.stderr)
        return 1
    bundle = emit_report(records, args.dir)
    print(f"wrote {bundle.summary_csv}")
    for fig in bundle.figures:
        print(f"wrote {fig}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesbench",
                                     description="Posterior approximation benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-task", help="generate a synthetic task as CSV files")
    gen.add_argument("--generator", required=True,
                     choices=["two-moons", "gap-regression", "grouped-blobs", "conjugate"])
    gen.add_argument("--n", type=int, default=400)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--label-noise", type=float, default=0.0)
    gen.add_argument("--groups", type=int, default=4)
    gen.add_argument("--imbalance", type=float, default=0.1)
    gen.add_argument("--d", type=int, default=2)
    gen.add_argument("--noise-std", type=float, default=0.1)
    gen.add_argument("--prior-std", type=float, default=1.0)
    gen.set_defaults(func=_gen_task)

    run = sub.add_parser("run", help="run an experiment grid from a JSON config")
    run.add_argument("-c", "--config", required=True)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--force", action="store_true",
                     help="retrain cells even when a matching record exists")
    run.add_argument("--seed", type=int, action="append",
                     help="override the config seed list (repeatable)")
    run.set_defaults(func=_run)

    cmp_parser = sub.add_parser("compare", help="fidelity of a model cell vs a reference cell")
    cmp_parser.add_argument("--model", required=True)
    cmp_parser.add_argument("--reference", required=True)
    cmp_parser.set_defaults(func=_compare)

    rep = sub.add_parser("report", help="aggregate records into summary tables and figures")
    rep.add_argument("--dir", required=True)
    rep.set_defaults(func=_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
