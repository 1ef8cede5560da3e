"""Command-line front end.

Commands: ``run``, ``sweep-t``, ``compare``, ``verify`` and ``make-task``.
Exit codes: 0 success, 1 validation error, 2 IO error, 3 numeric failure,
4 verification failure.
"""

import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from . import reporting
from .config import ExperimentConfig, VerifyConfig, load_config, parse_config, validate
from .errors import ConfigError, NumericError, PreconditionError
from .runner import build_task, run_experiment
from .tasks import save_task
from .verify import run_battery

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4
DEFAULT_T_VALUES = (1, 5, 10, 20)


def _load(args):
    if args.config is None:
        raise ConfigError([("--config", "a config file is required for this command")])
    cfg = load_config(args.config, args.set or ())
    if args.out:
        cfg = cfg.model_copy(update={"output_dir": args.out})
    return cfg


def _echo(cfg):
    data = cfg.model_dump(mode="json")
    data.pop("output_dir", None)
    return data


def _run_seed(cfg, seed):
    result = run_experiment(cfg, seed)
    return seed, result


def execute(cfg, jobs=1, log=print):
    """Run every seed of ``cfg``, write traces and ``summary.json``; return the summary."""
    echo = _echo(cfg)
    rid = reporting.run_id(echo, cfg.seeds)
    run_dir = os.path.join(cfg.resolved_output_dir, rid)
    os.makedirs(run_dir, exist_ok=True)
    start = time.perf_counter()
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = [_run_seed(cfg, s) for s in cfg.seeds]
    per_seed = []
    for seed, res in results:
        name = f"trace_seed{seed}.csv"
        reporting.write_trace_csv(os.path.join(run_dir, name), res.trace + [res.final])
        per_seed.append({"seed": seed, "trace": name, "wall_time": res.wall_time,
                         "final": reporting.final_metrics(res)})
    summary = reporting.build_summary(echo, rid, per_seed, time.perf_counter() - start)
    reporting.write_json(os.path.join(run_dir, "summary.json"), summary)
    log(f"run {rid}: {len(per_seed)} seed(s) -> {run_dir}")
    return summary


def _variant(cfg, **changes):
    """Re-validate ``cfg`` with method fields replaced."""
    data = cfg.model_dump(mode="json")
    data["method"].update(changes)
    if data.get("periods") is not None:
        data["rounds"] = None
        if data["method"]["name"] not in ("rolora_cfl", "rolora_dfl", "adf"):
            data["rounds"] = cfg.rounds
            data["periods"] = None
    return validate(data, ExperimentConfig)


def _write_table(out_dir, stem, rows, label_header):
    os.makedirs(out_dir, exist_ok=True)
    reporting.write_table_csv(os.path.join(out_dir, f"{stem}.csv"), rows)
    text = reporting.format_table(rows, label_header)
    with open(os.path.join(out_dir, f"{stem}.txt"), "w") as fh:
        fh.write(text)
    return text


def sweep_t(cfg, t_values=DEFAULT_T_VALUES, jobs=1, log=print):
    if not cfg.method.alternating:
        raise ConfigError([("method.name", "sweep-t needs an alternating method")])
    labelled = []
    for t in t_values:
        summary = execute(_variant(cfg, interval=int(t)), jobs, log)
        labelled.append((t, summary))
    rows = reporting.table_rows(labelled)
    rid = reporting.run_id({"sweep_t": [s["run_id"] for _, s in labelled]}, cfg.seeds)
    out_dir = os.path.join(cfg.resolved_output_dir, f"sweep_t_{rid}")
    text = _write_table(out_dir, "table", rows, "T")
    key = "mean_accuracy_mean" if rows[0].get("mean_accuracy_mean") is not None else "mean_loss_mean"
    reverse = key.startswith("mean_accuracy")
    order = sorted(rows, key=lambda r: r[key], reverse=reverse)
    log(text + f"ordering by {key[:-5]}: " + " > ".join(f"T={r['label']}" for r in order))
    return out_dir, rows


def compare(cfg, methods, jobs=1, log=print):
    labelled = [(m, execute(_variant(cfg, name=m), jobs, log)) for m in methods]
    rows = reporting.table_rows(labelled)
    rid = reporting.run_id({"compare": [s["run_id"] for _, s in labelled]}, cfg.seeds)
    out_dir = os.path.join(cfg.resolved_output_dir, f"compare_{rid}")
    log(_write_table(out_dir, "table", rows, "method"))
    return out_dir, rows


def _cmd_run(args):
    execute(_load(args), args.jobs)
    return EXIT_OK


def _cmd_sweep_t(args):
    values = [int(v) for v in args.t_values.split(",")] if args.t_values else DEFAULT_T_VALUES
    sweep_t(_load(args), values, args.jobs)
    return EXIT_OK


def _cmd_compare(args):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    compare(_load(args), methods, args.jobs)
    return EXIT_OK


def _cmd_verify(args):
    if args.config:
        vcfg = load_config(args.config, args.set or (), VerifyConfig)
    else:
        vcfg = parse_config("", args.set or (), VerifyConfig)
    outcomes = run_battery(vcfg)
    for o in outcomes:
        print(o.line())
    failed = [o.name for o in outcomes if not o.passed]
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _cmd_make_task(args):
    cfg = _load(args)
    seed = cfg.seeds[0]
    path = args.path or os.path.join(cfg.resolved_output_dir, f"task_{cfg.task.kind}_seed{seed}.bin")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_task(build_task(cfg, seed), path)
    print(path)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="adflora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted path); repeatable")
        p.add_argument("--out", help="output directory (default: config output_dir, "
                                     "$ADFLORA_OUTPUT_ROOT, or ./runs)")

    p = sub.add_parser("run", help="run every seed of a config")
    common(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep-t", help="ablate the switching interval T")
    common(p)
    p.add_argument("--t-values", help="comma-separated T values (default 1,5,10,20)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_sweep_t)

    p = sub.add_parser("compare", help="run several methods on the same task and seeds")
    common(p)
    p.add_argument("--methods", default="adf,rolora_dfl,ffa,naive")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("verify", help="run the executable property battery")
    common(p, config_required=False)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("make-task", help="write the generated task data to a binary file")
    common(p)
    p.add_argument("--path", help="output file (default under the output directory)")
    p.set_defaults(func=_cmd_make_task)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
