"""Command-line entry point: ``wsr-precoding {run,summarize,check-gradients,bench-flops}``."""

import argparse
import json
import sys
from pathlib import Path

from .errors import PrecodingError
from .harness import (
    channels_for,
    initial_point,
    load_spec,
    read_runs,
    run_experiment,
    run_single,
    summarize,
    write_summary,
)
from .optimizers import flop_counter_report
from .oracles import gradient_check
from .types import ConstraintKind

GRADIENT_TOL = 1e-5


def _spec_with_overrides(args):
    spec = load_spec(args.spec)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    if getattr(args, "out", None) is not None:
        changes["output_dir"] = args.out
    for key in ("init", "constraint", "solver", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = val
    return spec.replace(**changes) if changes else spec


def _print_table(rows, out):
    cols = ["solver", "constraint", "snr_db", "n_runs", "n_failed", "mean_wsr_bits",
            "median_wsr_bits", "mean_iterations", "mean_wall_time", "mean_flops_per_iteration"]
    print("  ".join(cols), file=out)
    for r in rows:
        vals = [getattr(r, c) for c in cols]
        print("  ".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in vals), file=out)


def cmd_run(args, out):
    spec = _spec_with_overrides(args)
    records = run_experiment(spec)
    _print_table(summarize(records), out)
    failed = [r for r in records if not r.ok]
    for r in failed:
        print(f"run seed={r.seed} snr={r.snr_db:g} failed: {r.error}", file=out)
    print(f"wrote {len(records)} runs to {spec.output_dir}", file=out)
    return 1 if failed else 0


def cmd_summarize(args, out):
    rows = summarize(read_runs(args.dir))
    write_summary(rows, args.dir)
    _print_table(rows, out)
    return 0


def cmd_check_gradients(args, out):
    spec = _spec_with_overrides(args)
    worst = 0.0
    for seed in spec.seeds:
        for snr in spec.snr_points_db:
            cfg = spec.system_config(snr)
            ch = channels_for(spec, cfg, seed)
            pt = initial_point(cfg, ch, spec.constraint, seed, "gaussian")
            rep = gradient_check(cfg, ch, pt, step=args.step)
            worst = max(worst, rep.max_rel_error)
            status = "ok" if rep.max_rel_error < GRADIENT_TOL else "FAIL"
            print(
                f"seed={seed} snr={snr:g} constraint={spec.constraint.value} "
                f"max_rel_error={rep.max_rel_error:.3e} worst={rep.worst_coordinate} {status}",
                file=out,
            )
    print(f"worst relative error {worst:.3e} (tolerance {GRADIENT_TOL:g})", file=out)
    return 0 if worst < GRADIENT_TOL else 1


def cmd_bench_flops(args, out):
    spec = _spec_with_overrides(args)
    spec = spec.replace(max_outer=args.iterations, rel_obj_tol=0.0, grad_norm_tol=0.0, workers=1)
    seed, snr = spec.seeds[0], spec.snr_points_db[0]
    reports = []
    for scale in (1, 2, 4):
        s = spec.replace(num_bs_antennas=spec.num_bs_antennas * scale)
        rec = run_single(s, seed, snr)
        if rec.trace is None:
            print(f"Mt={s.num_bs_antennas}: run failed: {rec.error}", file=out)
            return 1
        rep = flop_counter_report(rec.trace)
        del rep["per_iteration"], rep["model_per_iteration"]
        reports.append(rep)
        print(
            f"Mt={s.num_bs_antennas} solver={s.solver} constraint={s.constraint.value} "
            f"iterations={rep['iterations']} mults/iter={rep['mean_per_iteration']:.4g} "
            f"model/iter={rep['mean_model_per_iteration']:.4g} ratio={rep['ratio_mean']:.3f}",
            file=out,
        )
    for a, b in zip(reports[:-1], reports[1:]):
        print(
            f"Mt {a['dims']['Mt']} -> {b['dims']['Mt']}: measured x{b['mean_per_iteration'] / a['mean_per_iteration']:.3f}, "
            f"model x{b['mean_model_per_iteration'] / a['mean_model_per_iteration']:.3f}",
            file=out,
        )
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench_flops.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="wsr-precoding", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def spec_cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("spec", help="experiment spec file (key = value lines)")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--init", choices=("gaussian", "rzf"))
        p.add_argument("--constraint", choices=[k.value for k in ConstraintKind])
        p.add_argument("--solver", choices=("rsd", "rcg", "rtr"))
        return p

    p = spec_cmd("run", "run every (seed, snr) pair of a spec")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("summarize", help="rebuild summary.csv/json from a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_summarize)

    p = spec_cmd("check-gradients", "compare analytic gradients with finite differences")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.set_defaults(func=cmd_check_gradients)

    p = spec_cmd("bench-flops", "measure multiplies per iteration at Mt, 2Mt and 4Mt")
    p.add_argument("--iterations", type=int, default=20, help="outer iterations per measurement")
    p.set_defaults(func=cmd_bench_flops)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except (PrecodingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
