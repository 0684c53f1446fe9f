"""Model configuration: YAML schema, validation, bundled study inputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .space import OptOutBlock
from .strata import ConfigurationError, ModelStructure, Region, RiskGroup


@dataclass(frozen=True)
class LegalMigrantSpec:
    """Legally resident fraction of a migrant ethnicity, with a box prior."""

    region: str
    ethnicity: str
    low: float
    high: float
    sti_group: str
    nonsti_group: str

    def __post_init__(self):
        if not 0.0 <= self.low < self.high <= 1.0:
            raise ConfigurationError(
                f"legal fraction {self.region}:{self.ethnicity}: bad range")


@dataclass(frozen=True)
class ReportingChannel:
    """A diagnosis-reporting route with incomplete capture.

    The fraction reported gets a flat prior over (prior_low, prior_high)
    and scales the expected diagnosed counts of every covered stratum.
    """

    id: str
    groups: tuple[str, ...]
    genders: tuple[str, ...]
    regions: tuple[str, ...]
    prior_low: float = 0.0
    prior_high: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.prior_low < self.prior_high <= 1.0:
            raise ConfigurationError(f"channel {self.id!r}: bad prior range")


@dataclass
class ModelConfig:
    structure: ModelStructure
    hierarchy_enabled: bool = True
    hierarchy_mean_prior_sd: float = 10.0
    hierarchy_scale_prior_sd: float = 5.0
    reference_is_minimum: bool = True
    global_prevalence_floor: bool = True
    sti_delta_floor: float | None = None
    delta_orderings: list[tuple[str, str]] = field(default_factory=list)
    boxes: list[dict] = field(default_factory=list)
    legal_migrant: list[LegalMigrantSpec] = field(default_factory=list)
    reporting_channels: list[ReportingChannel] = field(default_factory=list)
    optout_blocks: list[OptOutBlock] = field(default_factory=list)
    sti_aggregate_groups: list[str] = field(default_factory=list)
    antenatal_classes: dict[str, list[str]] = field(default_factory=dict)
    registry_categories: dict[str, list[str]] = field(default_factory=dict)
    registry_unknown_category: str = "Unknown"
    flag_threshold: float = 4.0

    @property
    def reference_group(self) -> str:
        return self.structure.reference_group

    def optout_block(self, block_id: str) -> OptOutBlock:
        for b in self.optout_blocks:
            if b.id == block_id:
                return b
        raise ConfigurationError(f"unknown opt-out block {block_id!r}")

    def legal_migrant_spec(self, region: str, ethnicity: str) -> LegalMigrantSpec:
        for spec in self.legal_migrant:
            if spec.region == region and spec.ethnicity == ethnicity:
                return spec
        raise ConfigurationError(
            f"no legal-fraction entry for {region}:{ethnicity}")

    def registry_category_groups(self, label: str) -> list[str]:
        try:
            return self.registry_categories[label]
        except KeyError:
            raise ConfigurationError(
                f"unknown registry category {label!r}") from None

    def registry_category_order(self, gender: str) -> list[str]:
        st = self.structure
        out = []
        for label, groups in self.registry_categories.items():
            if any(st.has_stratum(r.id, g, gender)
                   for r in st.regions for g in groups):
                out.append(label)
        return out

    def antenatal_class_groups(self, label: str) -> list[str]:
        try:
            return self.antenatal_classes[label]
        except KeyError:
            raise ConfigurationError(
                f"unknown screening class {label!r}") from None


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigurationError(f"{where}: missing required key {key!r}")
    return mapping[key]


def _known_group(structure: ModelStructure, gid: str, where: str) -> str:
    try:
        structure.group(gid)
    except ConfigurationError:
        raise ConfigurationError(f"{where}: unknown group {gid!r}") from None
    return gid


def load_model_config(path) -> ModelConfig:
    """Parse and validate a model configuration file."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")

    regions = [Region(str(_require(r, "id", "regions")),
                      int(_require(r, "pop_male", "regions")),
                      int(_require(r, "pop_female", "regions")))
               for r in _require(raw, "regions", str(path))]
    groups = [RiskGroup(str(_require(g, "id", "groups")),
                        tuple(_require(g, "genders", "groups")),
                        bool(g.get("sti_clinic", False)),
                        int(g.get("rank", 0)))
              for g in _require(raw, "groups", str(path))]
    structure = ModelStructure(regions, groups,
                               str(_require(raw, "reference_group", str(path))))

    hier = raw.get("hierarchy", {}) or {}
    cons = raw.get("constraints", {}) or {}
    orderings = []
    for pair in cons.get("delta_orderings", []) or []:
        if len(pair) != 2:
            raise ConfigurationError("delta_orderings entries must be pairs")
        lo, hi = (str(x) for x in pair)
        orderings.append((_known_group(structure, lo, "delta_orderings"),
                          _known_group(structure, hi, "delta_orderings")))

    bias = raw.get("bias", {}) or {}
    legal = []
    for entry in bias.get("legal_migrant_fraction", []) or []:
        legal.append(LegalMigrantSpec(
            region=str(_require(entry, "region", "legal_migrant_fraction")),
            ethnicity=str(_require(entry, "ethnicity", "legal_migrant_fraction")),
            low=float(_require(entry, "low", "legal_migrant_fraction")),
            high=float(_require(entry, "high", "legal_migrant_fraction")),
            sti_group=_known_group(
                structure, str(_require(entry, "sti_group",
                                        "legal_migrant_fraction")),
                "legal_migrant_fraction"),
            nonsti_group=_known_group(
                structure, str(_require(entry, "nonsti_group",
                                        "legal_migrant_fraction")),
                "legal_migrant_fraction"),
        ))
    channels = []
    for entry in bias.get("reporting", []) or []:
        channels.append(ReportingChannel(
            id=str(_require(entry, "channel", "reporting")),
            groups=tuple(_known_group(structure, str(g), "reporting")
                         for g in _require(entry, "groups", "reporting")),
            genders=tuple(str(g) for g in _require(entry, "genders", "reporting")),
            regions=tuple(str(r) for r in _require(entry, "regions", "reporting")),
            prior_low=float(entry.get("prior_low", 0.0)),
            prior_high=float(entry.get("prior_high", 1.0)),
        ))
    if len({c.id for c in channels}) != len(channels):
        raise ConfigurationError("duplicate reporting channel id")

    blocks = []
    for entry in raw.get("opt_out", []) or []:
        where = "opt_out"
        opt = _require(entry, "opt_outs", where)
        attendees = int(_require(entry, "attendees", where))
        if opt == "estimate":
            opt_outs = None
        else:
            opt_outs = int(opt)
            if not 0 <= opt_outs <= attendees:
                raise ConfigurationError(
                    f"opt_out {entry.get('id')!r}: count outside 0..attendees")
        blocks.append(OptOutBlock(
            id=str(_require(entry, "id", where)),
            region=str(_require(entry, "region", where)),
            group=_known_group(structure, str(_require(entry, "group", where)), where),
            gender=str(_require(entry, "gender", where)),
            attendees=attendees,
            opt_outs=opt_outs,
        ))
    if len({b.id for b in blocks}) != len(blocks):
        raise ConfigurationError("duplicate opt-out block id")

    aggregates = raw.get("aggregates", {}) or {}
    sti_groups = [
        _known_group(structure, str(g), "aggregates.sti_clinic")
        for g in (aggregates.get("sti_clinic", {}) or {}).get("groups", [])]
    antenatal = {}
    for label, grs in (aggregates.get("antenatal", {}) or {}).items():
        antenatal[str(label)] = [
            _known_group(structure, str(g), "aggregates.antenatal") for g in grs]

    registry = raw.get("registry", {}) or {}
    categories = {}
    for label, grs in (registry.get("categories", {}) or {}).items():
        categories[str(label)] = [
            _known_group(structure, str(g), "registry.categories") for g in grs]

    deviance = raw.get("deviance", {}) or {}

    cfg = ModelConfig(
        structure=structure,
        hierarchy_enabled=bool(hier.get("enabled", True)),
        hierarchy_mean_prior_sd=float(hier.get("mean_prior_sd", 10.0)),
        hierarchy_scale_prior_sd=float(hier.get("scale_prior_sd", 5.0)),
        reference_is_minimum=bool(cons.get("reference_is_minimum", True)),
        global_prevalence_floor=bool(cons.get("global_prevalence_floor", True)),
        sti_delta_floor=(None if cons.get("sti_delta_floor") is None
                         else float(cons["sti_delta_floor"])),
        delta_orderings=orderings,
        boxes=list(cons.get("boxes", []) or []),
        legal_migrant=legal,
        reporting_channels=channels,
        optout_blocks=blocks,
        sti_aggregate_groups=sti_groups,
        antenatal_classes=antenatal,
        registry_categories=categories,
        registry_unknown_category=str(registry.get("unknown_category", "Unknown")),
        flag_threshold=float(deviance.get("flag_threshold", 4.0)),
    )
    for b in cfg.optout_blocks:
        if not structure.has_stratum(b.region, b.group, b.gender):
            raise ConfigurationError(
                f"opt_out {b.id!r}: stratum {b.region}:{b.group}:{b.gender} "
                "does not exist")
    for box in cfg.boxes:
        for key in ("quantity", "region", "group", "gender", "lower", "upper"):
            _require(box, key, "constraints.boxes")
        _known_group(structure, str(box["group"]), "constraints.boxes")
    return cfg


# ---------------------------------------------------------------------------
# bundled Amsterdam study inputs


def _data_dir() -> Path:
    return Path(str(resources.files("mpes").joinpath("data", "amsterdam")))


def bundled_config_path() -> Path:
    return _data_dir() / "config.yaml"


def bundled_evidence_paths() -> list[Path]:
    return [_data_dir() / "evidence.csv", _data_dir() / "registry.csv"]
