"""Command-line interface.

Subcommands: ``fit`` (run chains on an annotation CSV), ``simulate``
(write a synthetic dataset), ``study`` (model-comparison harness),
``oracle-check`` (sampler-vs-exact-prior validation), ``summarize``
(consensus and annotator tables from draws), and ``metrics`` (agreement
and radius-violation tables).  Every command takes ``--seed`` and is
deterministic given it.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 internal error.
"""

from __future__ import annotations

import argparse
import math
import sys
import traceback
from pathlib import Path

import numpy as np
from scipy.stats import chisquare

from . import __version__, metrics as metrics_mod
from .config import ChainConfig, preset_hyperparams, PRESETS
from .io import (
    DataError,
    LoadedConfig,
    UsageError,
    build_manifest,
    load_config,
    parse_crater_csv,
    read_draws,
    write_crater_csv,
    write_draws,
    write_json,
    write_table_csv,
)
from .mixture import family_vector, features_matrix
from .partition import (
    canonical_labels,
    dfcrp_marginal_logprob_exact,
    enumerate_valid_partitions,
)
from .sampler import run_chains_parallel, run_prior_chain
from .simulation import (
    SimConfig,
    generate_dataset,
    run_simulation_study,
    study_chain_config,
)

# Published DBSCAN consensus counts for the lunar highlands image,
# reported here as reference constants alongside our posterior columns.
DBSCAN_REFERENCE = {
    ("small", 4): 795, ("small", 5): 754, ("small", 6): 714,
    ("medium", 4): 101, ("medium", 5): 94, ("medium", 6): 87,
    ("large", 4): 47, ("large", 5): 41, ("large", 6): 35,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dfcrp", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dfcrp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="run sampler chains on an annotation CSV")
    p_fit.add_argument("data", help="annotation CSV (expert_id,x_px,y_px,diameter_px)")
    p_fit.add_argument("--config", help="key = value configuration file")
    p_fit.add_argument("--preset", choices=sorted(PRESETS), help="hyperparameter preset")
    p_fit.add_argument("--chains", type=int, help="number of independent chains")
    p_fit.add_argument("--scans", type=int, help="scans per chain")
    p_fit.add_argument("--burn-in", type=int, help="scans discarded per chain")
    p_fit.add_argument("--thin", type=int, help="keep every thin-th scan")
    p_fit.add_argument("--rho", type=float, help="neighborhood radius (px); inf disables")
    p_fit.add_argument("--seed", type=int, help="master seed")
    p_fit.add_argument("--processes", type=int, default=1)
    p_fit.add_argument("--out", default="draws.txt", help="draw file to write")
    p_fit.add_argument("--manifest", help="manifest path (default <out>.manifest.json)")

    p_sim = sub.add_parser("simulate", help="write one synthetic dataset")
    p_sim.add_argument("--out", default="simulated.csv")
    p_sim.add_argument("--config", help="key = value configuration file")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--clusters", type=int, help="number of true objects")
    p_sim.add_argument("--experts", type=int, help="number of annotators")
    p_sim.add_argument("--false-mode", choices=("binomial", "poisson"))

    p_study = sub.add_parser("study", help="model-comparison study on synthetic data")
    p_study.add_argument("--out-dir", required=True)
    p_study.add_argument("--datasets", type=int, default=50)
    p_study.add_argument("--models", default="dfcrp,crp",
                         help="comma list from dfcrp,dfcrp_radius,crp")
    p_study.add_argument("--scans", type=int, default=10_000)
    p_study.add_argument("--burn-in", type=int, default=2_000)
    p_study.add_argument("--radius", type=float, default=75.0)
    p_study.add_argument("--seed", type=int, default=0)
    p_study.add_argument("--processes", type=int, default=1)
    p_study.add_argument("--config", help="key = value configuration file")

    p_oracle = sub.add_parser(
        "oracle-check",
        help="compare prior-only sampler frequencies against the exact prior",
    )
    p_oracle.add_argument("--iterations", type=int, default=50_000)
    p_oracle.add_argument("--thin", type=int, default=10)
    p_oracle.add_argument("--alpha", type=float, default=1.0)
    p_oracle.add_argument("--family-sizes", default="4,2",
                          help="comma list of family sizes for the test instance")
    p_oracle.add_argument("--seed", type=int, default=0)
    p_oracle.add_argument("--out", help="optional CSV for the comparison table")

    p_sum = sub.add_parser("summarize", help="consensus and annotator tables from draws")
    p_sum.add_argument("draws")
    p_sum.add_argument("data", help="the annotation CSV the draws were fitted on")
    p_sum.add_argument("--out-dir", required=True)
    p_sum.add_argument("--min-sizes", default="4,5,6")
    p_sum.add_argument("--bands", default="50,100",
                       help="diameter thresholds separating size bands (px)")

    p_met = sub.add_parser("metrics", help="agreement and radius-violation tables")
    p_met.add_argument("draws")
    p_met.add_argument("data")
    p_met.add_argument("--out-dir", required=True)
    p_met.add_argument("--truth-column", help="CSV column with true cluster ids")
    p_met.add_argument("--rhos", default="0,10,20,30,50,75,100,200,400,728",
                       help="radii at which to evaluate violating clusters")
    return parser


class _Outputs:
    """Tracks files written by a command so failures leave no partial
    results behind."""

    def __init__(self):
        self.paths: list[Path] = []

    def register(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def discard_all(self):
        for p in self.paths:
            try:
                p.unlink()
            except OSError:
                pass


def _positive(name: str, value: int) -> int:
    if value is None or value < 1:
        raise UsageError(f"--{name} must be a positive integer")
    return value


def _load_config_arg(path) -> LoadedConfig:
    return load_config(path) if path else load_config(text="")


def _cmd_fit(args, out: _Outputs) -> int:
    cfg = _load_config_arg(args.config)
    hyper = cfg.hyper
    if args.preset:
        hyper = preset_hyperparams(args.preset)
    if args.rho is not None:
        if not (args.rho >= 0 or math.isinf(args.rho)):
            raise UsageError("--rho must be >= 0 or inf")
        hyper = hyper.with_overrides(rho=args.rho)
    num_chains = args.chains if args.chains is not None else cfg.num_chains
    _positive("chains", num_chains)
    scans = args.scans if args.scans is not None else cfg.chain.num_scans
    burn = args.burn_in if args.burn_in is not None else cfg.chain.burn_in_scans
    thin = args.thin if args.thin is not None else cfg.chain.thin_every
    seed = args.seed if args.seed is not None else cfg.chain.seed
    try:
        chain = ChainConfig(
            num_scans=scans, burn_in_scans=burn, thin_every=thin, seed=seed, hyper=hyper
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    annotations, names = parse_crater_csv(args.data)
    feats = features_matrix(annotations)
    fams = family_vector(annotations)
    draws = run_chains_parallel(feats, fams, chain, num_chains, processes=args.processes)

    draws_path = out.register(args.out)
    write_draws(draws, draws_path, n_items=len(annotations))
    manifest_path = out.register(args.manifest or f"{args.out}.manifest.json")
    loaded = LoadedConfig(hyper=hyper, chain=chain, sim=cfg.sim,
                          num_chains=num_chains, preset=args.preset or cfg.preset)
    manifest = build_manifest(
        command="fit", seed=seed, num_chains=num_chains, input_path=args.data,
        n_annotations=len(annotations), num_families=len(names), config=loaded,
        outputs=[draws_path],
        extra={"family_names": names, "num_draws": len(draws)},
    )
    write_json(manifest, manifest_path)
    print(f"wrote {len(draws)} draws from {num_chains} chain(s) to {draws_path}")
    return 0


def _cmd_simulate(args, out: _Outputs) -> int:
    cfg = _load_config_arg(args.config).sim
    overrides = {}
    if args.clusters is not None:
        overrides["k_true"] = _positive("clusters", args.clusters)
    if args.experts is not None:
        j = _positive("experts", args.experts)
        overrides["j_experts"] = j
        if j != cfg.j_experts:
            overrides.setdefault("detect_probs", tuple([0.9] * j))
            overrides.setdefault("false_rates", tuple([0.05] * j))
    if args.false_mode:
        overrides["false_mode"] = args.false_mode
    try:
        cfg = SimConfig(**{**_sim_kwargs(cfg), **overrides})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = generate_dataset(cfg, np.random.default_rng(args.seed))
    path = out.register(args.out)
    write_crater_csv(path, data.annotations, truth=data.truth)
    print(f"wrote {len(data)} annotations ({cfg.j_experts} annotators, "
          f"{cfg.k_true} true objects) to {path}")
    return 0


def _sim_kwargs(cfg: SimConfig) -> dict:
    return {
        "k_true": cfg.k_true, "j_experts": cfg.j_experts,
        "bounds_x": cfg.bounds_x, "bounds_y": cfg.bounds_y,
        "a_ld": cfg.a_ld, "b_ld": cfg.b_ld,
        "detect_probs": cfg.detect_probs, "false_rates": cfg.false_rates,
        "noise_cov": cfg.noise_cov, "false_mode": cfg.false_mode,
    }


def _cmd_study(args, out: _Outputs) -> int:
    models = tuple(m.strip() for m in args.models.split(",") if m.strip())
    if not models:
        raise UsageError("--models must name at least one model")
    _positive("datasets", args.datasets)
    sim = _load_config_arg(args.config).sim
    try:
        chain = study_chain_config(seed=args.seed, num_scans=args.scans, burn_in=args.burn_in)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        result = run_simulation_study(
            args.datasets, sim, chain, models,
            master_seed=args.seed, radius=args.radius, processes=args.processes,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ari_rows = result.ari_summary()
    write_table_csv(
        out.register(out_dir / "ari_summary.csv"), ari_rows,
        ["type", "minimum", "p25", "mean", "p75", "maximum"],
    )
    count_rows = result.counts_summary()
    write_table_csv(
        out.register(out_dir / "cluster_counts.csv"), count_rows,
        ["type"] + [f"size{s}" for s in range(1, 7)],
    )
    per_rows = [
        {
            "dataset": r.dataset, "model": r.model, "n_items": r.n_items,
            "mean_ari": r.mean_ari, "dup_fraction": r.dup_fraction,
            **{f"size{s + 1}": c for s, c in enumerate(r.size_counts)},
            "seed": r.seed,
        }
        for r in sorted(result.records, key=lambda r: (r.dataset, r.model))
    ]
    write_table_csv(
        out.register(out_dir / "per_dataset.csv"), per_rows,
        ["dataset", "model", "n_items", "mean_ari", "dup_fraction"]
        + [f"size{s}" for s in range(1, 7)] + ["seed"],
    )
    summary = {
        "datasets": args.datasets,
        "models": list(models),
        "seed": args.seed,
        "scans": args.scans,
        "burn_in": args.burn_in,
        "dup_fraction": {m: result.mean_dup_fraction(m) for m in models},
    }
    if "dfcrp" in models and "crp" in models:
        summary["dfcrp_beats_crp"] = result.wins()
    write_json(summary, out.register(out_dir / "study_summary.json"))
    for row in ari_rows:
        print(f"{row['type']:>12}: mean agreement {row['mean']:.3f} "
              f"[{row['minimum']:.3f}, {row['maximum']:.3f}]")
    if "dfcrp_beats_crp" in summary:
        print(f"constrained model won {summary['dfcrp_beats_crp']} of "
              f"{args.datasets} datasets")
    return 0


def _cmd_oracle_check(args, out: _Outputs) -> int:
    try:
        sizes = [int(v) for v in args.family_sizes.split(",")]
    except ValueError:
        raise UsageError("--family-sizes must be a comma list of integers") from None
    if not sizes or any(s < 1 for s in sizes):
        raise UsageError("--family-sizes entries must be positive")
    _positive("iterations", args.iterations)
    _positive("thin", args.thin)
    if not args.alpha > 0:
        raise UsageError("--alpha must be positive")
    families = tuple(f for f, size in enumerate(sizes) for _ in range(size))

    parts = enumerate_valid_partitions(families)
    theoretical = {
        c: math.exp(dfcrp_marginal_logprob_exact(c, args.alpha, families)) for c in parts
    }
    draws = run_prior_chain(families, args.alpha, args.iterations, args.thin, args.seed)
    emp = {c: 0 for c in parts}
    for c in draws:
        emp[c] += 1

    rows = []
    for i, c in enumerate(parts, start=1):
        empirical = emp[c] / len(draws)
        rows.append({
            "partition": i,
            "labels": " ".join(str(v) for v in c),
            "empirical": empirical,
            "theoretical": theoretical[c],
            "difference": theoretical[c] - empirical,
        })
    observed = np.array([emp[c] for c in parts], dtype=float)
    expected = np.array([theoretical[c] for c in parts]) * len(draws)
    stat, pvalue = chisquare(observed, expected)

    print(f"{len(parts)} valid partitions, {len(draws)} retained draws "
          f"(alpha={args.alpha}, families of sizes {sizes})")
    print(f"{'partition':>9} {'empirical':>10} {'theoretical':>12} {'difference':>11}")
    for row in rows:
        print(f"{row['partition']:>9} {row['empirical']:>10.3f} "
              f"{row['theoretical']:>12.3f} {row['difference']:>11.3f}")
    worst = max(abs(r["difference"]) for r in rows)
    print(f"max |difference| = {worst:.4f}")
    print(f"chi-square statistic = {stat:.3f}, p-value = {pvalue:.4f}")
    if args.out:
        write_table_csv(
            out.register(args.out), rows,
            ["partition", "labels", "empirical", "theoretical", "difference"],
        )
    return 0


def _cmd_summarize(args, out: _Outputs) -> int:
    try:
        min_sizes = [int(v) for v in args.min_sizes.split(",")]
        thresholds = tuple(float(v) for v in args.bands.split(","))
    except ValueError:
        raise UsageError("--min-sizes and --bands must be comma lists of numbers") from None
    if any(s < 1 for s in min_sizes):
        raise UsageError("--min-sizes entries must be >= 1")
    try:
        band_labels = ("small", "medium", "large") if len(thresholds) == 2 else tuple(
            f"band{i}" for i in range(len(thresholds) + 1)
        )
        bands = metrics_mod.SizeBands(thresholds, band_labels)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    draws, n_items = read_draws(args.draws)
    if not draws:
        raise DataError(f"{args.draws}: no draws")
    annotations, names = parse_crater_csv(args.data)
    if len(annotations) != n_items:
        raise DataError(
            f"{args.data} has {len(annotations)} rows but draws cover {n_items} items"
        )
    feats = features_matrix(annotations)
    fams = [a.family for a in annotations]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    consensus_rows = []
    for band_idx, band in enumerate(bands.labels):
        for min_size in min_sizes:
            per_draw = np.array(
                [metrics_mod.consensus_counts(d, feats, min_size, bands)[band_idx]
                 for d in draws]
            )
            lo, hi = np.percentile(per_draw, [2.5, 97.5])
            ref = DBSCAN_REFERENCE.get((band, min_size), "")
            consensus_rows.append({
                "band": band, "min_size": min_size, "dbscan_reference": ref,
                "posterior_mean": float(per_draw.mean()),
                "ci_lower": float(lo), "ci_upper": float(hi),
            })
    write_table_csv(
        out.register(out_dir / "consensus_counts.csv"), consensus_rows,
        ["band", "min_size", "dbscan_reference", "posterior_mean", "ci_lower", "ci_upper"],
    )

    summaries = metrics_mod.expert_summaries(draws, fams)
    expert_rows = [{
        "expert": names[s.family], "count": s.count, "jaccard": s.jaccard,
        "singleton_pct": s.singleton_pct,
        "singleton_lo": s.singleton_interval[0], "singleton_hi": s.singleton_interval[1],
        "excluded_pct": s.excluded_pct,
        "excluded_lo": s.excluded_interval[0], "excluded_hi": s.excluded_interval[1],
    } for s in summaries]
    write_table_csv(
        out.register(out_dir / "expert_summary.csv"), expert_rows,
        ["expert", "count", "jaccard", "singleton_pct", "singleton_lo", "singleton_hi",
         "excluded_pct", "excluded_lo", "excluded_hi"],
    )

    fam_ids, jac = metrics_mod.pairwise_jaccard_matrix(draws, fams)
    jac_rows = []
    for i, f in enumerate(fam_ids):
        row = {"expert": names[f]}
        for k, g in enumerate(fam_ids):
            row[names[g]] = float(jac[i, k])
        jac_rows.append(row)
    write_table_csv(
        out.register(out_dir / "jaccard_matrix.csv"), jac_rows,
        ["expert"] + [names[g] for g in fam_ids],
    )
    print(f"wrote consensus_counts.csv, expert_summary.csv, jaccard_matrix.csv "
          f"to {out_dir} ({len(draws)} draws)")
    return 0


def _cmd_metrics(args, out: _Outputs) -> int:
    try:
        rhos = [float(v) for v in args.rhos.split(",")]
    except ValueError:
        raise UsageError("--rhos must be a comma list of numbers") from None
    if any(r < 0 for r in rhos):
        raise UsageError("--rhos entries must be >= 0")
    draws, n_items = read_draws(args.draws)
    if not draws:
        raise DataError(f"{args.draws}: no draws")
    truth = None
    if args.truth_column:
        annotations, _, truth = parse_crater_csv(args.data, truth_column=args.truth_column)
    else:
        annotations, _ = parse_crater_csv(args.data)
    if len(annotations) != n_items:
        raise DataError(
            f"{args.data} has {len(annotations)} rows but draws cover {n_items} items"
        )
    feats = features_matrix(annotations)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for rho in sorted(rhos):
        rows.append({
            "rho": rho,
            "violating_proportion": metrics_mod.violating_cluster_proportion(
                draws, feats, rho
            ),
        })
    write_table_csv(
        out.register(out_dir / "violating_clusters.csv"), rows,
        ["rho", "violating_proportion"],
    )
    written = ["violating_clusters.csv"]

    if truth is not None:
        aris = np.array(
            [metrics_mod.adjusted_rand_index(d.labels, truth) for d in draws]
        )
        lo, hi = np.percentile(aris, [2.5, 97.5])
        ari_rows = [{
            "mean_ari": float(aris.mean()), "ci_lower": float(lo),
            "ci_upper": float(hi), "min": float(aris.min()), "max": float(aris.max()),
            "num_draws": len(draws),
        }]
        write_table_csv(
            out.register(out_dir / "ari.csv"), ari_rows,
            ["mean_ari", "ci_lower", "ci_upper", "min", "max", "num_draws"],
        )
        written.append("ari.csv")
    print(f"wrote {', '.join(written)} to {out_dir}")
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "simulate": _cmd_simulate,
    "study": _cmd_study,
    "oracle-check": _cmd_oracle_check,
    "summarize": _cmd_summarize,
    "metrics": _cmd_metrics,
}


def cli_dispatch(argv=None) -> int:
    """Parse and run a command, mapping failures to exit codes; partial
    outputs of a failed command are removed."""
    parser = _build_parser()
    out = _Outputs()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        return _COMMANDS[args.command](args, out)
    except UsageError as exc:
        out.discard_all()
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        out.discard_all()
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        out.discard_all()
        traceback.print_exc()
        return 3


def main(argv=None) -> int:
    return cli_dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
