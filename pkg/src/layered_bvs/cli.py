"""Command-line entry point: ``phenotype``, ``fit``, ``simulate`` and ``bench``.

Every command reads an optional JSON config, lets flags override it, and writes
CSV/JSON outputs (plus PNG figures) into ``--out``. Each output carries a
provenance record with the package version, a hash of the effective config and
the seed. Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, LayeredBVSError, NumericalError
from .layering import build_layer_responses, phenotype_sidecar, read_manifest, read_voxel_csv
from .mcmc import mcmc_baseline
from .model import Hyperparams, make_layer_dataset
from .selection import (
    BIC_VARIANTS,
    default_v0_grid,
    parse_v0_grid,
    resolve_threads,
    select_over_grid,
    selected_coefficients,
    validate_grid,
)
from .simulation import (
    SCENARIOS,
    SimDesign,
    make_rng,
    replicate,
    scenario_hyperparams,
    simulate,
    table_rows,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
CONFIG_SECTIONS = ("hyperparams", "phenotype", "fit", "simulate", "bench")
ARRAY_HYPERPARAMS = ("Psi", "Lambda")


# ---------------------------------------------------------------------------
# Config and provenance

def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return cfg


def hyperparams_from_config(section: dict, base: Optional[Hyperparams] = None) -> Hyperparams:
    base = Hyperparams() if base is None else base
    names = {f.name for f in fields(Hyperparams)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown hyperparameters {sorted(unknown)}")
    kw = dict(section)
    for k in ARRAY_HYPERPARAMS:
        if kw.get(k) is not None:
            kw[k] = np.asarray(kw[k], dtype=float)
    for k in ("mu_weights", "starts"):
        if isinstance(kw.get(k), list):
            kw[k] = tuple(kw[k])
    try:
        return base.with_(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def provenance(cfg: dict, seed: Optional[int]) -> dict:
    return {"package": "layered_bvs", "version": __version__,
            "config_sha256": config_hash(cfg), "seed": seed}


def provenance_line(prov: dict) -> str:
    return (f"# layered_bvs {prov['version']} config={prov['config_sha256']} "
            f"seed={prov['seed']}")


def write_csv(path, rows: Sequence[dict], prov: dict, columns: Optional[list] = None) -> Path:
    path = Path(path)
    cols = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        fh.write(provenance_line(prov) + "\n")
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in cols})
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_json(path, obj: dict, prov: dict) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump({"provenance": prov, **obj}, fh, indent=1, sort_keys=False, default=_jsonable)
        fh.write("\n")
    return path


def read_table(path: str) -> tuple[list[str], list[str], np.ndarray]:
    """Read a CSV with an id column and a header; ``#`` lines are skipped.

    Returns ``(ids, column_names, values)``.
    """
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(rows) < 2:
        raise DataError(f"{path}: needs a header and at least one row")
    header = [c.strip() for c in rows[0]]
    ids, vals = [], []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")
        ids.append(r[0].strip())
        try:
            v = [float(x) for x in r[1:]]
        except ValueError:
            raise DataError(f"{path}: non-numeric entry on row {i}") from None
        if not np.all(np.isfinite(v)):
            raise DataError(f"{path}: non-finite entry on row {i}")
        vals.append(v)
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    return ids, header[1:], np.array(vals, dtype=float)


def blocks_from_labels(labels: Sequence[str], path: str = "") -> tuple[tuple, tuple]:
    """Group ``SEQ:j`` column labels into (sequences, block widths)."""
    seqs, widths = [], []
    for lab in labels:
        if ":" not in lab:
            raise DataError(f"{path}: column {lab!r} is not of the form SEQUENCE:index")
        s = lab.rsplit(":", 1)[0]
        if seqs and seqs[-1] == s:
            widths[-1] += 1
        elif s in seqs:
            raise DataError(f"{path}: columns of sequence {s!r} are not contiguous")
        else:
            seqs.append(s)
            widths.append(1)
    return tuple(seqs), tuple(widths)


# ---------------------------------------------------------------------------
# Commands

def cmd_phenotype(args, cfg: dict) -> dict:
    sec = dict(cfg.get("phenotype", {}))
    manifest = args.manifest or sec.get("manifest")
    if not manifest:
        raise ConfigError("phenotype needs --manifest")
    tau = int(args.tau if args.tau is not None else sec.get("tau", 3))
    cum_var = float(args.cum_var if args.cum_var is not None else sec.get("cum_var", 0.99))
    m = int(sec.get("grid_size", 512))
    if tau < 1 or not 0 < cum_var <= 1:
        raise ConfigError("need tau >= 1 and cum_var in (0, 1]")
    eff = {"phenotype": {"manifest": os.path.abspath(manifest), "tau": tau,
                         "cum_var": cum_var, "grid_size": m}}
    prov = provenance(eff, None)
    items = read_manifest(manifest)
    cohort, ids = [], []
    for sid, f in items:
        try:
            cohort.append(read_voxel_csv(f))
        except DataError as exc:
            raise DataError(f"subject {sid}: {exc}") from exc
        ids.append(sid)
    layers = build_layer_responses(cohort, tau, cum_var, m, ids)
    out = Path(args.out)
    written = []
    for lr in layers:
        labels = lr.column_labels()
        rows = [{"subject": sid, **dict(zip(labels, row))} for sid, row in zip(ids, lr.Y)]
        written.append(write_csv(out / f"layer{lr.layer}_scores.csv", rows, prov,
                                 ["subject"] + labels))
    side = phenotype_sidecar(layers)
    side["subjects"] = ids
    written.append(write_json(out / "phenotype.json", side, prov))
    if not args.no_figures:
        from .plotting import plot_mean_densities
        for lr, meta in zip(layers, side["layers"]):
            xs = [np.linspace(b["domain"][0], b["domain"][1], len(b["karcher_mean_density"]))
                  for b in meta["blocks"]]
            written.append(plot_mean_densities(
                xs, [b["karcher_mean_density"] for b in meta["blocks"]], lr.sequences,
                out / "figures" / f"layer{lr.layer}_mean_densities.png",
                title=f"layer {lr.layer}: Karcher mean densities"))
    return {"written": [str(p) for p in written]}


def _fit_settings(args, cfg: dict) -> dict:
    sec = dict(cfg.get("fit", {}))
    if args.v0_grid is not None:
        grid = parse_v0_grid(args.v0_grid)
    elif "v0_grid" in sec:
        g = sec["v0_grid"]
        grid = parse_v0_grid(g) if isinstance(g, str) else validate_grid(g)
    else:
        grid = default_v0_grid(40)
    bic = args.bic_variant or sec.get("bic_variant", "literal")
    if bic not in BIC_VARIANTS:
        raise ConfigError(f"unknown BIC variant {bic!r}")
    v1 = args.v1 if args.v1 is not None else sec.get("v1")
    return {"v0_grid": grid, "bic_variant": bic, "v1": None if v1 is None else float(v1)}


def cmd_fit(args, cfg: dict) -> dict:
    if not args.scores or not args.genes:
        raise ConfigError("fit needs --scores (one file per layer) and --genes")
    st = _fit_settings(args, cfg)
    hp = hyperparams_from_config(cfg.get("hyperparams", {}))
    threads = resolve_threads(args.threads)
    gid, genes, X = read_table(args.genes)
    datasets = []
    for t, path in enumerate(args.scores, start=1):
        ids, labels, Y = read_table(path)
        if ids != gid:
            if sorted(ids) != sorted(gid):
                raise DataError(f"{path}: subject ids differ from {args.genes}")
            order = {s: i for i, s in enumerate(ids)}
            Y = Y[[order[s] for s in gid]]
        seqs, widths = blocks_from_labels(labels, path)
        try:
            datasets.append(make_layer_dataset(Y, X, widths, t, seqs))
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from exc
    eff = {"fit": {**st, "scores": [os.path.abspath(p) for p in args.scores],
                   "genes": os.path.abspath(args.genes)},
           "hyperparams": cfg.get("hyperparams", {})}
    prov = provenance(eff, None)
    t0 = time.perf_counter()
    res = select_over_grid(datasets, hp, st["v0_grid"], st["v1"], st["bic_variant"], threads)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    rows = []
    layers_json = []
    for data, state in zip(datasets, res.states):
        B = data.to_original_scale(selected_coefficients(data, state))
        zeta = (state.w > 0.5).astype(int)
        entries = []
        for m, seq in enumerate(data.sequences):
            cols = np.flatnonzero(data.col_block == m)
            for k, gene in enumerate(genes):
                rows.append({"layer": data.layer, "sequence": seq, "gene": gene,
                             "w": float(state.w[m, k]), "zeta": int(zeta[m, k])})
                entries.append({"sequence": seq, "gene": gene, "w": float(state.w[m, k]),
                                "zeta": int(zeta[m, k]), "beta": B[k, cols].tolist()})
        layers_json.append({"layer": data.layer, "converged": bool(state.converged),
                            "n_iter": int(state.n_iter), "entries": entries,
                            "Delta": state.Delta.tolist()})
    path_json = [{"v0": gp.v0, "bic": gp.bic, "K": list(gp.K), "converged": gp.converged,
                  "v1": list(gp.v1), "error": gp.error} for gp in res.path]
    report = {"chosen_v0": res.chosen_v0, "bic_variant": res.bic_variant,
              "elapsed_seconds": elapsed, "genes": genes, "bic_path": path_json,
              "layers": layers_json}
    written = [write_json(out / "selection.json", report, prov),
               write_csv(out / "selection.csv", rows, prov,
                         ["layer", "sequence", "gene", "w", "zeta"]),
               write_csv(out / "bic_path.csv",
                         [{"v0": gp.v0, "bic": gp.bic, "converged": int(gp.converged),
                           "n_selected": gp.n_selected() if gp.states else 0}
                          for gp in res.path], prov)]
    if not args.no_figures:
        from .plotting import plot_bic_path, plot_inclusion_heatmaps
        written.append(plot_inclusion_heatmaps(res.w, genes, datasets[0].sequences,
                                               out / "figures" / "inclusion.png"))
        written.append(plot_bic_path(res.v0_grid, res.bic_path, res.chosen_index,
                                     out / "figures" / "bic_path.png"))
    return {"written": [str(p) for p in written], "chosen_v0": res.chosen_v0,
            "elapsed": elapsed}


def _design_from(sec: dict, **over) -> SimDesign:
    names = {f.name for f in fields(SimDesign)}
    d = {k: v for k, v in sec.get("design", {}).items()}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown design fields {sorted(unknown)}")
    if "blocks" in d:
        d["blocks"] = tuple(tuple(b) for b in d["blocks"])
    d.update(over)
    try:
        return SimDesign(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_simulate(args, cfg: dict) -> dict:
    sec = dict(cfg.get("simulate", {}))
    seed = int(args.seed if args.seed is not None else sec.get("seed", 0))
    reps = int(args.reps if args.reps is not None else sec.get("reps", 30))
    scenarios = tuple(args.scenarios.split(",")) if args.scenarios else tuple(
        sec.get("scenarios", ("A",)))
    for s in scenarios:
        if s not in SCENARIOS:
            raise ConfigError(f"unknown scenario {s!r}; choose from {sorted(SCENARIOS)}")
    base = _design_from(sec)
    level_key = "sigma2" if base.case == "case1" else "theta"
    levels = sec.get("levels", [getattr(base, level_key)])
    if args.levels:
        levels = [float(v) for v in args.levels.split(",")]
    g = sec.get("v0_grid", None)
    if args.v0_grid is not None:
        grid = parse_v0_grid(args.v0_grid)
    elif g is None:
        grid = default_v0_grid(10)
    else:
        grid = parse_v0_grid(g) if isinstance(g, str) else validate_grid(g)
    bic = sec.get("bic_variant", "literal")
    if bic not in BIC_VARIANTS:
        raise ConfigError(f"unknown BIC variant {bic!r}")
    hp_base = hyperparams_from_config(cfg.get("hyperparams", {}),
                                      Hyperparams(a1=4.0, a2=5.0, alpha=0.5))
    threads = resolve_threads(args.threads)
    eff = {"simulate": {"seed": seed, "reps": reps, "scenarios": list(scenarios),
                        "levels": list(levels), "v0_grid": grid, "bic_variant": bic,
                        "design": sec.get("design", {}), "v1": sec.get("v1")},
           "hyperparams": cfg.get("hyperparams", {})}
    prov = provenance(eff, seed)
    rows, fig_rows = [], []
    for lev in levels:
        design = _design_from(sec, **{level_key: float(lev)})
        rep = replicate(design, scenarios, reps, grid, seed, hp_base, sec.get("v1"), bic,
                        threads)
        for r in table_rows(rep):
            rows.append(r)
            fig_rows.append({"scenario": r["scenario"], level_key: r[level_key],
                             "layer": r["layer"], "tpr_mean": r["tpr_mean"],
                             "tpr_sd": r["tpr_sd"]})
    out = Path(args.out)
    written = [write_csv(out / "table.csv", rows, prov),
               write_csv(out / "figure_tpr.csv", fig_rows, prov)]
    if not args.no_figures and rows:
        from .plotting import plot_tpr_by_layer
        written.append(plot_tpr_by_layer(rows, out / "figures" / "tpr_by_layer.png"))
        written.append(plot_tpr_by_layer(rows, out / "figures" / "e_w_by_layer.png", "e_w"))
    return {"written": [str(p) for p in written], "rows": rows}


def bench_pair(g: int, p: int, n: int, tau: int, grid, seed: int, mode: str,
               proxy_sweeps: int, burn_in: int) -> dict:
    """Time EM selection on a simulated design, then count MCMC sweeps in that time."""
    if p % 4:
        raise ConfigError("bench p must be a multiple of the 4 sequences")
    design = SimDesign(n=n, g=g, tau=tau, p_per_block=p // 4)
    rng = make_rng(np.random.SeedSequence([seed, g, p]))
    truth = simulate(design, rng)
    datasets = truth.datasets(design.block_widths)
    hp = scenario_hyperparams("A", g)
    t0 = time.perf_counter()
    select_over_grid(datasets, hp, grid, threads=1)
    t_em = time.perf_counter() - t0
    mrng = make_rng(np.random.SeedSequence([seed, g, p, 1]))
    if mode == "time":
        mc = mcmc_baseline(datasets[0], hp, n_samples=10**9, burn_in=burn_in, rng=mrng,
                           time_budget=t_em)
    else:
        mc = mcmc_baseline(datasets[0], hp, n_samples=max(0, proxy_sweeps - burn_in),
                           burn_in=min(burn_in, proxy_sweeps), rng=mrng)
    return {"g": g, "p": p, "n": n, "tau": tau, "grid_size": len(grid), "mode": mode,
            "t_em": t_em, "mcmc_sweeps": mc.n_sweeps, "mcmc_seconds": mc.elapsed,
            "seconds_per_sweep": mc.elapsed / mc.n_sweeps if mc.n_sweeps else float("nan")}


def cmd_bench(args, cfg: dict) -> dict:
    sec = dict(cfg.get("bench", {}))
    seed = int(args.seed if args.seed is not None else sec.get("seed", 0))
    pairs = [tuple(int(v) for v in pr) for pr in sec.get("pairs", [[20, 12], [50, 12], [50, 36]])]
    mode = sec.get("mode", "time")
    if mode not in ("time", "proxy"):
        raise ConfigError("bench mode must be 'time' or 'proxy'")
    n = int(sec.get("n", 100))
    tau = int(sec.get("tau", 3))
    g = sec.get("v0_grid", "0.001:0.001:10")
    grid = parse_v0_grid(g) if isinstance(g, str) else validate_grid(g)
    if args.v0_grid is not None:
        grid = parse_v0_grid(args.v0_grid)
    proxy_sweeps = int(sec.get("proxy_sweeps", 50))
    burn_in = int(sec.get("burn_in", 0))
    eff = {"bench": {"seed": seed, "pairs": pairs, "mode": mode, "n": n, "tau": tau,
                     "v0_grid": grid, "proxy_sweeps": proxy_sweeps, "burn_in": burn_in}}
    prov = provenance(eff, seed)
    rows = [bench_pair(gg, pp, n, tau, grid, seed, mode, proxy_sweeps, burn_in)
            for gg, pp in pairs]
    out = Path(args.out)
    written = [write_csv(out / "bench.csv", rows, prov)]
    if not args.no_figures:
        from .plotting import plot_bench
        written.append(plot_bench(rows, out / "figures" / "bench.png"))
    return {"written": [str(p) for p in written], "rows": rows}


COMMANDS = {"phenotype": cmd_phenotype, "fit": cmd_fit, "simulate": cmd_simulate,
            "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="layered-bvs", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"layered_bvs {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=False, threads=False, grid=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
        if seed:
            p.add_argument("--seed", type=int, help="master seed")
        if threads:
            p.add_argument("--threads", type=int, help="worker processes (default: all cores)")
        if grid:
            p.add_argument("--v0-grid", help="spike variance grid as start:step:count")

    p = sub.add_parser("phenotype", help="voxel grids -> layer-wise PC-score files")
    common(p)
    p.add_argument("--manifest", help="JSON mapping subject id -> voxel CSV")
    p.add_argument("--tau", type=int, help="number of shells")
    p.add_argument("--cum-var", type=float, help="cumulative variance retained per block")

    p = sub.add_parser("fit", help="select genes for each layer over a v0 grid")
    common(p, threads=True, grid=True)
    p.add_argument("--scores", nargs="+", help="layer PC-score CSVs in layer order")
    p.add_argument("--genes", help="gene expression CSV (subject id, then genes)")
    p.add_argument("--bic-variant", choices=BIC_VARIANTS)
    p.add_argument("--v1", type=float, help="slab scale (default: per-layer OLS rule)")

    p = sub.add_parser("simulate", help="replicated simulation tables")
    common(p, seed=True, threads=True, grid=True)
    p.add_argument("--reps", type=int)
    p.add_argument("--scenarios", help="comma-separated subset of A,B,C,D")
    p.add_argument("--levels", help="comma-separated sigma2 (case1) or theta (case2) values")

    p = sub.add_parser("bench", help="EM selection time vs MCMC sweeps")
    common(p, seed=True, grid=True)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LayeredBVSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for p in result.get("written", []):
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
