"""Synthetic two-region, four-group model with a known interior truth.

The calibration and evidence-ordering tests both need a ground truth that
sits well inside every ordering constraint, so that simulated data never
push the posterior against a boundary. Shares, prevalences and diagnosed
fractions are chosen with wide margins between adjacent groups. Strata are
single-gender to keep the parameter count small; the male-from-female
offset machinery is covered by the bundled-model tests.
"""

from dataclasses import replace

import numpy as np

from mpes.config import ModelConfig
from mpes.evidence import (BinomialCount, DiagnosedFraction, EvidenceItem,
                           Prevalence, SizeShare)
from mpes.strata import ModelStructure, Region, RiskGroup

GROUPS = ("hr1", "hr2", "hr3", "gp")
RHO = {"hr1": 0.10, "hr2": 0.07, "hr3": 0.05, "gp": 0.78}
PI = {"hr1": 0.25, "hr2": 0.15, "hr3": 0.08, "gp": 0.03}
DELTA = {"hr1": 0.75, "hr2": 0.65, "hr3": 0.55, "gp": 0.45}

N_SIZE, N_PREV, N_DIAG = 2000, 400, 250


def make_config() -> ModelConfig:
    structure = ModelStructure(
        regions=[Region("N", pop_male=50000, pop_female=52000),
                 Region("S", pop_male=30000, pop_female=31000)],
        groups=[RiskGroup("hr1", genders=("m",), rank=1),
                RiskGroup("hr2", genders=("m",), rank=2),
                RiskGroup("hr3", genders=("m",), rank=3),
                RiskGroup("gp", genders=("m",), rank=4)],
        reference_group="gp",
    )
    return ModelConfig(
        structure=structure,
        hierarchy_enabled=False,
        reference_is_minimum=True,
        global_prevalence_floor=False,
    )


def true_values(config):
    """Per-stratum (rho, pi, delta) truth arrays in enumeration order."""
    st = config.structure
    rho = np.empty(st.n_strata)
    pi = np.empty(st.n_strata)
    delta = np.empty(st.n_strata)
    for i, s in enumerate(st.strata):
        rho[i] = RHO[s.group]
        pi[i] = PI[s.group]
        delta[i] = DELTA[s.group]
    return rho, pi, delta


def _stratum_items(s, i, size_x, prev_x, diag_x):
    tag = f"{s.region}_{s.group}"
    return [
        EvidenceItem(id=f"size_{tag}", region=s.region, gender=s.gender,
                     kind=BinomialCount(x=size_x, n=N_SIZE),
                     target=SizeShare(strata=(i,)),
                     target_label=f"size[{tag}]"),
        EvidenceItem(id=f"prev_{tag}", region=s.region, gender=s.gender,
                     kind=BinomialCount(x=prev_x, n=N_PREV),
                     target=Prevalence(stratum=i),
                     target_label=f"prev[{tag}]"),
        EvidenceItem(id=f"diag_{tag}", region=s.region, gender=s.gender,
                     kind=BinomialCount(x=diag_x, n=N_DIAG),
                     target=DiagnosedFraction(stratum=i),
                     target_label=f"diag[{tag}]"),
    ]


def simulate_items(config, rng) -> list[EvidenceItem]:
    """Three direct binomial items per stratum, drawn at the truth."""
    rho, pi, delta = true_values(config)
    items = []
    for i, s in enumerate(config.structure.strata):
        items.extend(_stratum_items(
            s, i,
            int(rng.binomial(N_SIZE, rho[i])),
            int(rng.binomial(N_PREV, pi[i])),
            int(rng.binomial(N_DIAG, delta[i]))))
    return items


def ordering_items(config) -> tuple[list[EvidenceItem], int]:
    """Evidence set where sources disagree about one prevalence.

    Every stratum gets a direct item trio and an equally strong indirect
    trio, so the model stays identified under either evidence filter. For
    the focal stratum the direct prevalence reads high, the indirect one
    reads low, and an overestimating study enters as a one-sided bound.
    Returns the items and the focal stratum index.
    """
    st = config.structure
    focus = st.stratum_index("N", "hr1", "m")
    rng = np.random.default_rng(20260816)
    rho, pi, delta = true_values(config)
    items = []
    for i, s in enumerate(st.strata):
        direct = _stratum_items(
            s, i,
            int(rng.binomial(N_SIZE, rho[i])),
            int(rng.binomial(N_PREV, pi[i])),
            int(rng.binomial(N_DIAG, delta[i])))
        echo = [replace(it, id=it.id + "_echo", direct=False)
                for it in _stratum_items(
                    s, i,
                    int(rng.binomial(N_SIZE, rho[i])),
                    int(rng.binomial(N_PREV, pi[i])),
                    int(rng.binomial(N_DIAG, delta[i])))]
        if i == focus:
            direct[1] = EvidenceItem(
                id="prev_focus_direct", region=s.region, gender=s.gender,
                kind=BinomialCount(x=21, n=60),
                target=Prevalence(stratum=i), target_label="prev[focus]")
            echo[1] = EvidenceItem(
                id="prev_focus_indirect", region=s.region, gender=s.gender,
                kind=BinomialCount(x=30, n=200),
                target=Prevalence(stratum=i), target_label="prev[focus]",
                direct=False)
            items.append(EvidenceItem(
                id="prev_focus_overestimate", region=s.region,
                gender=s.gender, kind=BinomialCount(x=90, n=200),
                target=Prevalence(stratum=i), target_label="prev[focus]",
                bias="upper", direct=False))
        items.extend(direct)
        items.extend(echo)
    return items, focus
