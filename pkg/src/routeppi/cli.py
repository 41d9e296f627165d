"""Command-line surface: dataset generation, budget sweeps, the closed-form
advantage grid, and static plots.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
All subcommands are reproducible: identical inputs and seed give identical
output bytes (plots are rendered with a fixed hash salt and no timestamps).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import analytic
from .config import (ConfigError, build_sweep, defaults_text, parse_config_file,
                     resolve)
from .core import TwoPopParams
from .datagen import fit_tree_predictor, gen_synthetic_regression, gen_two_population
from .harness import (Dataset, read_sweep_csv, run_sweep, write_csv_dataset,
                      write_sweep_csv)
from .rng import derive_seed


def _cmd_gen(args) -> int:
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    if args.generator == "synthetic":
        data, hard = gen_synthetic_regression(args.n, d=args.d,
                                              easy_frac=args.easy_frac,
                                              seed=args.seed)
        train, _ = gen_synthetic_regression(args.n_train, d=args.d,
                                            easy_frac=args.easy_frac,
                                            seed=derive_seed(args.seed, "train"))
        preds = {}
        for pid, depth in (("cheap", args.depth_cheap),
                           ("expensive", args.depth_expensive)):
            tree = fit_tree_predictor(train.covariates, train.labels, depth)
            preds[pid] = tree.predict(data.covariates)
        full = Dataset(covariates=data.covariates, predictions=preds,
                       labels=data.labels)
        write_csv_dataset(full, args.out, extra={"is_hard": hard.astype(float)})
    else:  # twopop
        params = TwoPopParams(p=args.p, r_e=args.r_easy, r_h=args.r_hard,
                              delta=args.delta, c1=1e-3, c2=1e-3, c_label=1.0,
                              b=1.0, n=args.n, var_y=args.var_y)
        data, easy = gen_two_population(params, args.n, args.seed)
        write_csv_dataset(data, args.out, covariate_names=["population"],
                          extra={"is_easy": easy.astype(float)})
    print(f"wrote {args.n} rows to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    values = resolve(parse_config_file(args.config))
    config, source = build_sweep(values, seed_override=args.seed,
                                 threads_override=args.threads)
    result = run_sweep(config, source,
                       progress=lambda msg: print(msg, file=sys.stderr))
    write_sweep_csv(result, args.out)
    print(f"wrote {len(result.rows)} rows to {args.out}")
    return 0


def _cmd_analytic(args) -> int:
    rows = analytic.heatmap_rows(p_grid=args.p_grid, phi_grid=args.phi_grid,
                                 delta_grid=args.delta_grid, p_fixed=args.p_fixed)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "p", "phi", "delta", "ratio",
                         "width_reduction_pct"])
        for row in rows:
            writer.writerow([row["case"], row["p"], row["phi"], row["delta"],
                             repr(float(row["ratio"])),
                             repr(float(row["width_reduction_pct"]))])
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_plot(args) -> int:
    rows = read_sweep_csv(args.sweep_csv)
    if not rows:
        raise ValueError(f"sweep CSV {args.sweep_csv} has no data rows")
    os.makedirs(args.out, exist_ok=True)
    paths = _render_sweep_plots(rows, args.out)
    print("wrote " + ", ".join(paths))
    return 0


def _render_sweep_plots(rows: list[dict], out_dir: str) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "routeppi"
    save_opts = {"metadata": {"Date": None}, "format": "svg"}
    methods = sorted({r["method"] for r in rows})

    def series(method, key):
        pts = sorted((r["budget"], r[key], r["ci_width_sem"]) for r in rows
                     if r["method"] == method)
        return (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]),
                np.array([p[2] for p in pts]))

    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for m in methods:
        b, w, sem = series(m, "ci_width_mean")
        ax.plot(b, w, marker="o", label=m)
        ax.fill_between(b, w - sem, w + sem, alpha=0.25)
    ax.set_xlabel("total budget B")
    ax.set_ylabel("mean CI width")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "width.svg")
    fig.savefig(path, **save_opts)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for m in methods:
        b, cov, _ = series(m, "coverage")
        ax.plot(b, cov, marker="o", label=m)
    ax.axhline(0.9, linestyle="--", color="black", label="0.90 target")
    ax.set_xlabel("total budget B")
    ax.set_ylabel("empirical coverage")
    ax.set_ylim(0.5, 1.02)
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "coverage.svg")
    fig.savefig(path, **save_opts)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    base_methods = [m for m in methods if m.startswith("asi:")]
    if "ampi" in methods and base_methods:
        b_a, w_a, _ = series("ampi", "ci_width_mean")
        for m in base_methods:
            b_b, w_b, _ = series(m, "ci_width_mean")
            shared = np.intersect1d(b_a, b_b)
            ratios = [100.0 * w_a[np.searchsorted(b_a, x)]
                      / w_b[np.searchsorted(b_b, x)] for x in shared]
            ax.plot(shared, ratios, marker="o", label=f"ampi / {m}")
    ax.axhline(100.0, linestyle="--", color="black")
    ax.set_xlabel("total budget B")
    ax.set_ylabel("CI width ratio (%)")
    ax.legend() if ax.lines else None
    fig.tight_layout()
    path = os.path.join(out_dir, "ratio.svg")
    fig.savefig(path, **save_opts)
    plt.close(fig)
    paths.append(path)

    return paths


def _cmd_config(args) -> int:
    if args.defaults:
        sys.stdout.write(defaults_text())
        return 0
    raise ValueError("nothing to do; try --defaults")


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routeppi",
        description="Budget-aware predictor routing and active labeling for "
                    "valid confidence intervals.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset CSV")
    gen.add_argument("generator", choices=["synthetic", "twopop"])
    gen.add_argument("--n", type=int, required=True, help="number of rows")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output CSV path")
    gen.add_argument("--d", type=int, default=5, help="covariate dimension (synthetic)")
    gen.add_argument("--easy-frac", type=float, default=0.7)
    gen.add_argument("--n-train", type=int, default=2000,
                     help="training rows for the tree predictors (synthetic)")
    gen.add_argument("--depth-cheap", type=int, default=2)
    gen.add_argument("--depth-expensive", type=int, default=6)
    gen.add_argument("--p", type=float, default=0.5, help="easy fraction (twopop)")
    gen.add_argument("--r-easy", type=float, default=1e-4)
    gen.add_argument("--r-hard", type=float, default=1.0)
    gen.add_argument("--delta", type=float, default=0.5)
    gen.add_argument("--var-y", type=float, default=0.25)
    gen.set_defaults(func=_cmd_gen)

    sweep = sub.add_parser(
        "sweep", help="run a budget sweep from a config file",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (see also `routeppi config --defaults`):\n\n"
               + defaults_text())
    sweep.add_argument("--config", required=True, help="key-value config file")
    sweep.add_argument("--out", required=True, help="output sweep CSV")
    sweep.add_argument("--seed", type=int, default=None,
                       help="override sweep.seed from the config")
    sweep.add_argument("--threads", type=int, default=None,
                       help="override sweep.threads (default: config value)")
    sweep.set_defaults(func=_cmd_sweep)

    ana = sub.add_parser("analytic",
                         help="emit the two-population advantage grid CSV")
    ana.add_argument("--out", required=True)
    ana.add_argument("--p-grid", type=_parse_float_list,
                     default=_parse_float_list("0.1,0.3,0.5,0.7,0.9"))
    ana.add_argument("--phi-grid", type=_parse_float_list,
                     default=_parse_float_list("0.1,0.3,0.5,0.7,0.9"))
    ana.add_argument("--delta-grid", type=_parse_float_list,
                     default=_parse_float_list("0.0,0.2,0.4,0.6,0.8"))
    ana.add_argument("--p-fixed", type=float, default=0.5,
                     help="easy fraction for the cheap-baseline block")
    ana.set_defaults(func=_cmd_analytic)

    plot = sub.add_parser("plot", help="render width/coverage/ratio SVGs "
                                       "from a sweep CSV")
    plot.add_argument("sweep_csv")
    plot.add_argument("--out", required=True, help="output directory")
    plot.set_defaults(func=_cmd_plot)

    cfg = sub.add_parser("config", help="configuration utilities")
    cfg.add_argument("--defaults", action="store_true",
                     help="print every config key with its default")
    cfg.set_defaults(func=_cmd_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- runtime failure boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
