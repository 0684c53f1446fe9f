"""Command-line interface.

Subcommands:
  run       sample the posterior and write summary, convergence, deviance
            tables plus a manifest that can reproduce the run
  validate  check a configuration and evidence set without sampling
  deviance  sample and write only the item-level conflict table

Outputs are plain CSV/JSON, deterministically formatted: the same inputs,
settings and seed produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_model_config
from .diagnostics import posterior_mean_deviance
from .evidence import EvidenceError, load_evidence
from .model import CompiledModel
from .priors import sample_from_prior
from .sampler import (SamplerConfig, default_seed, psrf_by_coordinate,
                      run_chains)
from .strata import ConfigurationError

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.entry(args)
    except (ConfigurationError, EvidenceError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # pragma: no cover - defensive
        _write_failed_manifest(getattr(args, "out", None), exc)
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mpes",
        description="Multi-parameter evidence synthesis for stratified "
                    "epidemic prevalence estimation")
    p.add_argument("--version", action="version", version=f"mpes {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="sample the posterior and write reports")
    _add_input_options(run)
    _add_sampler_options(run)
    run.add_argument("--out", type=Path, default=Path("."),
                     help="output directory (created if missing)")
    run.add_argument("--save-draws", action="store_true",
                     help="also write the retained draws as draws.csv")
    run.add_argument("--from-manifest", type=Path, default=None,
                     help="re-run with inputs and settings from a manifest")
    run.set_defaults(entry=_cmd_run)

    val = sub.add_parser("validate", help="check inputs without sampling")
    _add_input_options(val)
    val.set_defaults(entry=_cmd_validate)

    dev = sub.add_parser("deviance",
                         help="sample and write the conflict table only")
    _add_input_options(dev)
    _add_sampler_options(dev)
    dev.add_argument("--out", type=Path, default=Path("."))
    dev.set_defaults(entry=_cmd_deviance)
    return p


def _add_input_options(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", type=Path, help="model configuration YAML")
    sp.add_argument("--evidence", type=Path, action="append", default=None,
                    help="evidence CSV (repeatable; item or registry schema)")


def _add_sampler_options(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--chains", type=int, default=None)
    sp.add_argument("--burn", type=int, default=None)
    sp.add_argument("--keep", type=int, default=None,
                    help="total retained draws across chains")
    sp.add_argument("--thin", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None,
                    help="root seed (default: MPES_SEED or built-in)")
    sp.add_argument("--evidence-filter", choices=("all", "direct", "indirect"),
                    default="all")
    sp.add_argument("--flag-threshold", type=float, default=None,
                    help="mean-deviance flag level (default from config)")
    sp.add_argument("--progress", action="store_true")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_validate(args) -> int:
    config, items = _load_inputs(args.config, args.evidence)
    model = CompiledModel(config, items)
    state = sample_from_prior(model.space, model.constraints, model.hierarchy,
                              seed=0)
    lp = model.logpost(model.space.from_constrained(state))
    if not math.isfinite(lp):
        raise ConfigurationError(
            "a prior draw has non-finite posterior density; the inputs are "
            "inconsistent")
    n_direct = sum(it.direct for it in items)
    print(f"OK: {len(config.structure.strata)} strata, "
          f"{model.space.dim} free coordinates")
    print(f"OK: {len(items)} evidence items "
          f"({n_direct} direct, {len(items) - n_direct} indirect)")
    print(f"OK: {len(model.constraints.constraints)} constraints, "
          "prior draw has finite posterior density")
    return EXIT_OK


def _cmd_run(args) -> int:
    if args.from_manifest is not None:
        _apply_manifest(args)
    config, items = _load_inputs(args.config, args.evidence)
    _warn_degenerate_pooling(config)
    model = CompiledModel(config, items)
    scfg = _sampler_config(args)
    run_model = model.with_items_filter(args.evidence_filter)
    sample = run_chains(run_model, scfg, progress=args.progress)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_summary(out / "summary.csv", run_model, sample, config)
    rhats = psrf_by_coordinate(sample)
    _write_convergence(out / "convergence.csv", rhats)
    threshold = (args.flag_threshold if args.flag_threshold is not None
                 else config.flag_threshold)
    report = posterior_mean_deviance(sample, run_model.items, threshold)
    _write_deviance(out / "deviance.csv", report)
    outputs = ["summary.csv", "convergence.csv", "deviance.csv"]
    if args.save_draws:
        _write_draws(out / "draws.csv", sample)
        outputs.append("draws.csv")

    defined = [r for _, r in rhats if r is not None]
    worst = max(defined) if defined else None
    converged = worst is None or worst <= scfg.psrf_threshold
    _write_manifest(out / "manifest.json", args, scfg, threshold, outputs,
                    worst, report, converged)

    print(f"retained {sum(c.shape[0] for c in sample.chains)} draws "
          f"in {sample.n_chains} chains; wrote {', '.join(outputs)} "
          f"and manifest.json to {out}")
    if worst is not None:
        print(f"max split potential scale reduction: {worst:.4f} "
              f"(threshold {scfg.psrf_threshold})")
    flagged = report.flagged
    if flagged:
        print(f"{len(flagged)} item(s) above the conflict threshold "
              f"{threshold:g}:")
        for row in flagged:
            print(f"  CONFLICT {row.item_id}: mean deviance "
                  f"{row.mean_deviance:.2f}")
    else:
        print(f"no items above the conflict threshold {threshold:g}")
    if not converged:
        print("error: chains have not converged; outputs were still written",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _cmd_deviance(args) -> int:
    config, items = _load_inputs(args.config, args.evidence)
    _warn_degenerate_pooling(config)
    model = CompiledModel(config, items).with_items_filter(args.evidence_filter)
    sample = run_chains(model, _sampler_config(args), progress=args.progress)
    threshold = (args.flag_threshold if args.flag_threshold is not None
                 else config.flag_threshold)
    report = posterior_mean_deviance(sample, model.items, threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_deviance(out / "deviance.csv", report)
    print(f"scored {report.n_scored} items ({report.n_excluded} excluded); "
          f"wrote deviance.csv to {out}")
    for row in report.flagged:
        print(f"  CONFLICT {row.item_id}: mean deviance {row.mean_deviance:.2f}")
    if not report.flagged:
        print(f"no items above the conflict threshold {threshold:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# shared plumbing


def _load_inputs(config_path, evidence_paths):
    if config_path is None:
        raise ConfigurationError("--config is required")
    if not evidence_paths:
        raise EvidenceError("at least one --evidence file is required")
    config = load_model_config(config_path)
    items = load_evidence([str(p) for p in evidence_paths], config)
    return config, items


def _warn_degenerate_pooling(config) -> None:
    if config.hierarchy_enabled and len(config.structure.regions) == 1:
        print("WARNING: pooling layer with a single region; the "
              "between-region scale is informed only by its prior",
              file=sys.stderr)


def _sampler_config(args) -> SamplerConfig:
    kwargs = {}
    if args.chains is not None:
        kwargs["n_chains"] = args.chains
    if args.burn is not None:
        kwargs["n_burn"] = args.burn
    if args.keep is not None:
        kwargs["n_keep"] = args.keep
    if args.thin is not None:
        kwargs["thin"] = args.thin
    kwargs["seed"] = args.seed if args.seed is not None else default_seed()
    return SamplerConfig(**kwargs)


def _apply_manifest(args) -> None:
    with open(args.from_manifest, encoding="utf-8") as fh:
        man = json.load(fh)
    if man.get("status", "").startswith("FAILED"):
        raise ConfigurationError("manifest records a failed run")
    args.config = Path(man["config"]["path"])
    args.evidence = [Path(e["path"]) for e in man["evidence"]]
    s = man["sampler"]
    args.chains, args.burn = s["chains"], s["burn"]
    args.keep, args.thin, args.seed = s["keep"], s["thin"], s["seed"]
    args.evidence_filter = man["evidence_filter"]
    args.flag_threshold = man["flag_threshold"]
    args.save_draws = args.save_draws or "draws.csv" in man["outputs"]


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, args, scfg, threshold, outputs, worst_rhat,
                    report, converged) -> None:
    man = {
        "tool": "mpes",
        "version": __version__,
        "status": "ok" if converged else "not-converged",
        "config": {"path": str(Path(args.config).resolve()),
                   "sha256": _sha256(args.config)},
        "evidence": [{"path": str(Path(p).resolve()), "sha256": _sha256(p)}
                     for p in args.evidence],
        "sampler": {"chains": scfg.n_chains, "burn": scfg.n_burn,
                    "keep": scfg.n_keep, "thin": scfg.thin, "seed": scfg.seed,
                    "psrf_threshold": scfg.psrf_threshold},
        "evidence_filter": args.evidence_filter,
        "flag_threshold": threshold,
        "outputs": outputs,
        "max_psrf": worst_rhat,
        "n_flagged": len(report.flagged),
        "n_scored": report.n_scored,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_failed_manifest(out, exc) -> None:
    if out is None:
        return
    try:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "manifest.json", "w", encoding="utf-8",
                  newline="\n") as fh:
            json.dump({"tool": "mpes", "version": __version__,
                       "status": f"FAILED: {exc}"}, fh, indent=2,
                      sort_keys=True)
            fh.write("\n")
    except OSError:
        pass


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        if math.isinf(x):
            return "inf"
        return f"{x:.4g}"
    return str(x)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _quantiles(values: np.ndarray) -> tuple[str, str, str]:
    lo, med, hi = np.percentile(values, [2.5, 50.0, 97.5])
    return _fmt(float(med)), _fmt(float(lo)), _fmt(float(hi))


def _write_summary(path, model, sample, config) -> None:
    """Stratified estimates plus category and total rows, all per-draw."""
    st = model.structure
    dec = model.decode_draws(sample.matrix())
    rho, pi, delta = dec["rho"], dec["pi"], dec["delta"]
    rows = []
    for i, s in enumerate(st.strata):
        for qty, arr in (("size_share", rho), ("prevalence", pi),
                         ("diagnosed_fraction", delta)):
            med, lo, hi = _quantiles(arr[:, i])
            rows.append([qty, s.region, s.group, s.gender, med, lo, hi])

    # category unions (registry classification), only where non-trivial
    for r in st.regions:
        for gender in st.genders_present():
            for label in config.registry_category_order(gender):
                members = [st.stratum_index(r.id, g, gender)
                           for g in config.registry_category_groups(label)
                           if st.has_stratum(r.id, g, gender)]
                if len(members) < 2:
                    continue
                size = rho[:, members].sum(axis=1)
                inf_mass = (rho[:, members] * pi[:, members]).sum(axis=1)
                diag_mass = (rho[:, members] * pi[:, members]
                             * delta[:, members]).sum(axis=1)
                for qty, arr in (("size_share", size),
                                 ("prevalence", inf_mass / size),
                                 ("diagnosed_fraction", diag_mass / inf_mass)):
                    med, lo, hi = _quantiles(arr)
                    rows.append([qty, r.id, label, gender, med, lo, hi])

    # per-region and overall totals, by gender and combined
    genders = list(st.genders_present())
    region_ids = [r.id for r in st.regions] + (
        ["ALL"] if len(st.regions) > 1 else [])
    infected = {}
    diagnosed = {}
    population = {}
    for r in st.regions:
        for gender in genders:
            idx = st.strata_of_region(r.id, gender)
            n = st.population(r.id, gender)
            infected[(r.id, gender)] = n * (rho[:, idx] * pi[:, idx]).sum(axis=1)
            diagnosed[(r.id, gender)] = n * (
                rho[:, idx] * pi[:, idx] * delta[:, idx]).sum(axis=1)
            population[(r.id, gender)] = n
    for rid in region_ids:
        parts = ([rid] if rid != "ALL" else [r.id for r in st.regions])
        for gender in genders + ["all"]:
            gl = genders if gender == "all" else [gender]
            inf = sum(infected[(p, g)] for p in parts for g in gl)
            dia = sum(diagnosed[(p, g)] for p in parts for g in gl)
            pop = sum(population[(p, g)] for p in parts for g in gl)
            for qty, arr in (("prevalence", inf / pop),
                             ("diagnosed_fraction", dia / inf),
                             ("infected_count", inf),
                             ("undiagnosed_count", inf - dia)):
                med, lo, hi = _quantiles(arr)
                rows.append([qty, rid, "", gender, med, lo, hi])
    _write_csv(path, ["quantity", "region", "group", "gender",
                      "median", "lo95", "hi95"], rows)


def _write_convergence(path, rhats) -> None:
    rows = [[name, "" if r is None else f"{r:.6f}"] for name, r in rhats]
    _write_csv(path, ["coordinate", "psrf"], rows)


def _write_deviance(path, report) -> None:
    rows = []
    for r in report.rows:
        rows.append([r.item_id, r.region, r.gender, r.target_label,
                     _fmt(r.mean_deviance),
                     "true" if r.flagged else "false",
                     r.excluded_reason or ""])
    _write_csv(path, ["item_id", "region", "gender", "target",
                      "mean_deviance", "flagged", "excluded_reason"], rows)


def _write_draws(path, sample) -> None:
    header = ["chain", "draw"] + list(sample.coord_names)
    rows = []
    for c, chain in enumerate(sample.chains):
        for t in range(chain.shape[0]):
            rows.append([c, t] + [repr(float(v)) for v in chain[t]])
    _write_csv(path, header, rows)


if __name__ == "__main__":
    sys.exit(main())
