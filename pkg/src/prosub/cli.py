"""Command line: ``run``, ``evaluate`` and ``compare``.

``PROSUB_THREADS`` caps BLAS threads; it is read before numpy is imported.
"""

from __future__ import annotations

import os

_threads = os.environ.get("PROSUB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

import numpy as np  # noqa: E402


def _int_list(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _pair(text):
    vals = _int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two integers T1,T, got {text!r}")
    return vals


def build_parser():
    p = argparse.ArgumentParser(prog="prosub", description="Measurement subsampling experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="cross-validated subsampling run")
    run.add_argument("--config", metavar="FILE",
                     help="JSON experiment config; flags given explicitly override it")
    run.add_argument("--method",
                     choices=["prosub", "prosub-no-nas", "sardu", "sardu-bof", "sardu-nas"])
    src = run.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset file (.osds binary or .csv)")
    src.add_argument("--synthetic", metavar="SPEC.json", help="synthetic generator spec")
    run.add_argument("--m-schedule", type=_int_list, help="descending targets, e.g. 500,250,100")
    run.add_argument("--epochs", type=int, help="epochs per step (default 200)")
    run.add_argument("--anneal-window", type=int, help="annealing epochs E_d (default 20)")
    run.add_argument("--batch", type=int, help="minibatch size (default 1500)")
    run.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    run.add_argument("--seed", type=int)
    run.add_argument("--folds", type=int, help="CV folds (default 5)")
    run.add_argument("--first-stage", type=_pair, metavar="T1,T", help="default 4,8")
    run.add_argument("--later-stage", type=_pair, metavar="T1,T", help="default 1,5")
    run.add_argument("--units", type=_int_list, help="NAS width choices")
    run.add_argument("--normalization", choices=["per_measurement_max99", "global_max99"])
    run.add_argument("--out")

    ev = sub.add_parser("evaluate", help="MSE of a stored checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)

    cmp_ = sub.add_parser("compare", help="paired one-sided Wilcoxon test on two run dirs")
    cmp_.add_argument("--a", required=True)
    cmp_.add_argument("--b", required=True)
    return p


_RUN_KEYS = ("method", "m_schedule", "data", "epochs", "anneal_window", "batch", "lr", "seed",
             "folds", "first_stage", "later_stage", "units", "normalization", "out")


def run_config(args):
    """Merge an optional JSON config file with explicitly given flags."""
    from .data import SyntheticSpec
    from .harness import ExperimentConfig

    merged = {}
    if args.config:
        with open(args.config) as fh:
            merged = json.load(fh)
    for key in _RUN_KEYS:
        value = getattr(args, key)
        if value is not None:
            merged[key] = value
    if args.synthetic:
        with open(args.synthetic) as fh:
            merged["synthetic"] = json.load(fh)
        merged.pop("data", None)
    elif args.data:
        merged.pop("synthetic", None)
    for key in ("method", "m_schedule", "out"):
        if merged.get(key) is None:
            raise ValueError(f"--{key.replace('_', '-')} is required (flag or config file)")
    merged["method"] = merged["method"].replace("-", "_")
    if isinstance(merged.get("synthetic"), dict):
        merged["synthetic"] = SyntheticSpec.from_dict(merged["synthetic"]).to_dict()
    return ExperimentConfig.from_dict(merged)


def cmd_run(args):
    from .harness import run_experiment

    config = run_config(args)
    reports = run_experiment(config)
    failed = [r for r in reports if r.status != "ok"]
    for r in reports:
        print(f"fold {r.fold} M={r.M:<5d} {r.status:6s} test_mse={r.test_mse:.6g}")
    return 1 if failed else 0


def cmd_evaluate(args):
    from .data import load_dataset
    from .harness import evaluate_checkpoint

    ds = load_dataset(args.data)
    mse = evaluate_checkpoint(args.checkpoint, ds)
    print(json.dumps({"mse": mse, "n": ds.n, "N": ds.N}))
    return 0


def paired_results(dir_a, dir_b):
    """Test MSE pairs keyed by (fold, M), restricted to keys present in both."""
    from .harness import collect_reports

    def table(d):
        return {(r.fold, r.M): r.test_mse for r in collect_reports(d) if r.status == "ok"}

    ta, tb = table(dir_a), table(dir_b)
    keys = sorted(set(ta) & set(tb), key=lambda k: (-k[1], k[0]))
    return keys, np.array([ta[k] for k in keys]), np.array([tb[k] for k in keys])


def cmd_compare(args):
    from .stats import wilcoxon_one_sided

    keys, a, b = paired_results(args.a, args.b)
    if not keys:
        print("no (fold, M) pairs in common", file=sys.stderr)
        return 2
    print(f"{'M':>6} {'folds':>5} {'a mean':>12} {'a sd':>10} {'b mean':>12} {'b sd':>10}")
    for M in sorted({k[1] for k in keys}, reverse=True):
        sel = [i for i, k in enumerate(keys) if k[1] == M]
        print(f"{M:>6} {len(sel):>5} {a[sel].mean():>12.6g} {a[sel].std():>10.3g} "
              f"{b[sel].mean():>12.6g} {b[sel].std():>10.3g}")
    try:
        p = wilcoxon_one_sided(a, b)
        print(f"wilcoxon one-sided (a < b): n={len(keys)} p={p:.6g}")
    except ValueError as exc:
        print(f"wilcoxon not computed: {exc}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "evaluate": cmd_evaluate, "compare": cmd_compare}[args.command]
    try:
        return handler(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
