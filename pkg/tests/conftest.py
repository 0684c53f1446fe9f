"""Shared fixtures.

The bundled Amsterdam model is expensive to compile (a few seconds), so it
is built once per session.  The tiny model is a 1-region, 2-group setup
used by mechanics tests that do not need the full dataset.
"""

import numpy as np
import pytest

from mpes.config import (
    ModelConfig,
    bundled_config_path,
    bundled_evidence_paths,
    load_model_config,
)
from mpes.evidence import (
    BinomialCount,
    DiagnosedFraction,
    EvidenceItem,
    Prevalence,
    SizeShare,
    load_evidence,
)
from mpes.model import CompiledModel
from mpes.strata import ModelStructure, Region, RiskGroup


@pytest.fixture(scope="session")
def bundled_config():
    return load_model_config(bundled_config_path())


@pytest.fixture(scope="session")
def bundled_items(bundled_config):
    return load_evidence(bundled_evidence_paths(), bundled_config)


@pytest.fixture(scope="session")
def bundled_model(bundled_config, bundled_items):
    return CompiledModel(bundled_config, bundled_items)


def make_tiny_config() -> ModelConfig:
    structure = ModelStructure(
        regions=[Region("R", pop_male=10000, pop_female=12000)],
        groups=[
            RiskGroup("HR", genders=("m", "f"), rank=1),
            RiskGroup("GP", genders=("m", "f"), rank=2),
        ],
        reference_group="GP",
    )
    return ModelConfig(
        structure=structure,
        hierarchy_enabled=False,
        reference_is_minimum=True,
        global_prevalence_floor=False,
    )


def make_tiny_items(config) -> list[EvidenceItem]:
    def idx(group, gender):
        return config.structure.stratum_index("R", group, gender)

    return [
        EvidenceItem(
            id="hr_size_m",
            region="R",
            gender="m",
            kind=BinomialCount(x=50, n=1000),
            target=SizeShare(strata=(idx("HR", "m"),)),
            target_label="size_share[HR,m]",
        ),
        EvidenceItem(
            id="hr_prev_f",
            region="R",
            gender="f",
            kind=BinomialCount(x=30, n=200),
            target=Prevalence(stratum=idx("HR", "f")),
            target_label="prevalence[HR,f]",
        ),
        EvidenceItem(
            id="hr_prev_m",
            region="R",
            gender="m",
            kind=BinomialCount(x=24, n=150),
            target=Prevalence(stratum=idx("HR", "m")),
            target_label="prevalence[HR,m]",
        ),
        EvidenceItem(
            id="hr_diag_m",
            region="R",
            gender="m",
            kind=BinomialCount(x=40, n=60),
            target=DiagnosedFraction(stratum=idx("HR", "m")),
            target_label="diagnosed[HR,m]",
        ),
        EvidenceItem(
            id="gp_prev_f",
            region="R",
            gender="f",
            kind=BinomialCount(x=2, n=400),
            target=Prevalence(stratum=idx("GP", "f")),
            target_label="prevalence[GP,f]",
        ),
        # one bound-informing item so the auxiliary-slack path is exercised
        EvidenceItem(
            id="hr_prev_f_upper",
            region="R",
            gender="f",
            kind=BinomialCount(x=45, n=180),
            target=Prevalence(stratum=idx("HR", "f")),
            target_label="prevalence[HR,f] (upper bound)",
            bias="upper",
            direct=False,
        ),
    ]


@pytest.fixture(scope="session")
def tiny_config():
    return make_tiny_config()


@pytest.fixture(scope="session")
def tiny_items(tiny_config):
    return make_tiny_items(tiny_config)


@pytest.fixture(scope="session")
def tiny_model(tiny_config, tiny_items):
    return CompiledModel(tiny_config, tiny_items)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
