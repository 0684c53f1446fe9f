"""Check the sampler against posteriors known in closed form.

Three single-item models whose exact posteriors are textbook results:
binomial data with a flat prior on the proportion, a Poisson count with
an exponential prior on the rate, and a three-way multinomial split with
a uniform prior. The sampled moments must match the exact ones to within
Monte Carlo error.
"""

import math

import numpy as np

from mpes import GenericDensityModel, SamplerConfig, run_chains
from mpes.model import alr_shares


def beta_lp(u):  # 6 successes of 10, flat prior: posterior is Beta(7, 5)
    p = 1.0 / (1.0 + math.exp(-float(u[0])))
    if not 0.0 < p < 1.0:
        return -math.inf
    return 7 * math.log(p) + 5 * math.log1p(-p)


def gamma_lp(u):  # one count of 5, Exp(1) prior: posterior is Gamma(6, 2)
    v = float(u[0])
    return 6 * v - 2 * math.exp(v)


def dirichlet_lp(u):  # counts (3, 2, 5), flat prior: posterior Dir(4, 3, 6)
    p = alr_shares(np.asarray(u, dtype=float))
    if np.any(p <= 0.0):
        return -math.inf
    return 4 * math.log(p[0]) + 3 * math.log(p[1]) + 6 * math.log(p[2])


def run(name, model, seed, transform, exact):
    sample = run_chains(model, SamplerConfig(
        n_chains=2, n_burn=2000, n_keep=10000, thin=1, seed=seed))
    vals = transform(sample.matrix())
    print(f"\n{name}:")
    print(f"  {'':<10} {'sampled':>10} {'exact':>10}")
    for j, (mean, var) in enumerate(exact):
        col = vals[:, j]
        print(f"  mean[{j}]  {col.mean():10.5f} {mean:10.5f}")
        print(f"  var[{j}]   {col.var(ddof=1):10.5f} {var:10.5f}")


def main():
    run("flat prior + 6/10 successes -> Beta(7, 5)",
        GenericDensityModel(1, beta_lp, names=["logit_p"], initial=[0.0]),
        301, lambda M: 1.0 / (1.0 + np.exp(-M)),
        [(7 / 12, 35 / (144 * 13))])

    run("Exp(1) prior + one count of 5 -> Gamma(6, 2)",
        GenericDensityModel(1, gamma_lp, names=["log_rate"],
                            initial=[math.log(3.0)]),
        302, np.exp, [(3.0, 1.5)])

    a0 = 13.0
    run("flat prior + counts (3, 2, 5) -> Dirichlet(4, 3, 6)",
        GenericDensityModel(2, dirichlet_lp, names=["alr_1", "alr_2"],
                            initial=[0.0, 0.0]),
        303, lambda M: np.apply_along_axis(alr_shares, 1, M),
        [(a / a0, a * (a0 - a) / (a0 * a0 * (a0 + 1))) for a in (4, 3, 6)])


if __name__ == "__main__":
    main()
