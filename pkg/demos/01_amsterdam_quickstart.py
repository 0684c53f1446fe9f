"""Fit the bundled Amsterdam snapshot and print headline estimates.

Runs a shortened chain so the script finishes in about a minute; pass
--full for the default estimation protocol (three long chains, about ten
minutes).
"""

import argparse

import numpy as np

from mpes import (CompiledModel, SamplerConfig, bundled_config_path,
                  bundled_evidence_paths, load_evidence, load_model_config,
                  psrf_by_coordinate, run_chains)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--full", action="store_true",
                    help="run the default protocol instead of a short demo chain")
    args = ap.parse_args()

    config = load_model_config(bundled_config_path())
    items = load_evidence(bundled_evidence_paths(), config)
    model = CompiledModel(config, items)
    st = model.structure
    n_direct = sum(it.direct for it in items)
    print(f"{len(st.strata)} strata, {model.space.dim} free coordinates")
    print(f"{len(items)} evidence items ({n_direct} direct, "
          f"{len(items) - n_direct} indirect)")

    scfg = (SamplerConfig() if args.full else
            SamplerConfig(n_chains=2, n_burn=3000, n_keep=3000, thin=2,
                          seed=1))
    print(f"sampling: {scfg.n_chains} chains, {scfg.n_burn} burn-in, "
          f"{scfg.keep_per_chain} retained per chain ...")
    sample = run_chains(model, scfg)

    dec = model.decode_draws(sample.matrix())
    infected = dec["rho"] * dec["pi"] * model.pop[None, :]
    print("\nposterior medians by stratum:")
    print(f"  {'stratum':<22} {'share':>7} {'prev':>7} {'diag':>6} "
          f"{'infected':>9}")
    for i, s in enumerate(st.strata):
        print(f"  {f'{s.region} {s.group} {s.gender}':<22} "
              f"{np.median(dec['rho'][:, i]):7.4f} "
              f"{np.median(dec['pi'][:, i]):7.4f} "
              f"{np.median(dec['delta'][:, i]):6.3f} "
              f"{np.median(infected[:, i]):9.0f}")

    total = infected.sum(axis=1)
    undiag = (infected - dec["mu"]).sum(axis=1)
    lo, med, hi = np.percentile(total, [2.5, 50, 97.5])
    print(f"\ntotal infected: {med:.0f} (95% interval {lo:.0f} to {hi:.0f})")
    print(f"of which undiagnosed: {np.median(undiag):.0f}")

    rhats = [r for _, r in psrf_by_coordinate(sample) if r is not None]
    note = "" if args.full else "  (short demo chains; --full for the real protocol)"
    print(f"worst split R-hat: {max(rhats):.3f}{note}")


if __name__ == "__main__":
    main()
