"""Population stratification for the synthesis model.

A model instance is defined over a set of regions and a catalog of risk
groups. Each group carries a gender rule (some groups exist for one gender
only), and every admissible (region, group, gender) combination is a
stratum. The basic parameters of the model (relative subgroup size,
prevalence, proportion diagnosed) live on strata; everything else in the
package is derived from them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

GENDERS = ("m", "f")


class ConfigurationError(ValueError):
    """Raised when a model structure or configuration is internally invalid."""


@dataclass(frozen=True)
class Region:
    id: str
    pop_male: int
    pop_female: int

    def __post_init__(self):
        if self.pop_male <= 0 or self.pop_female <= 0:
            raise ConfigurationError(
                f"region {self.id!r}: populations must be positive"
            )

    def population(self, gender: str) -> int:
        return self.pop_male if gender == "m" else self.pop_female


@dataclass(frozen=True)
class RiskGroup:
    """One behavioural risk group.

    genders restricts which gender strata exist for the group; sti_clinic
    marks groups recruited through STI clinics (they receive the diagnosed
    floor and enter clinic-level aggregate targets). rank orders groups by
    decreasing assumed risk and fixes the display order everywhere.
    """

    id: str
    genders: tuple[str, ...]
    sti_clinic: bool = False
    rank: int = 0

    def __post_init__(self):
        if not self.genders or any(g not in GENDERS for g in self.genders):
            raise ConfigurationError(
                f"group {self.id!r}: genders must be a non-empty subset of (m, f)"
            )


@dataclass(frozen=True)
class Stratum:
    region: str
    group: str
    gender: str

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.region, self.group, self.gender)

    def __str__(self) -> str:
        return f"{self.region}:{self.group}:{self.gender}"


@dataclass
class ModelStructure:
    """Regions x risk groups x gender rules, with a fixed stratum ordering.

    reference_group names the group used as the additive-log-ratio reference
    in every region x gender size simplex; it must exist for every gender
    that occurs in the catalog.
    """

    regions: list[Region]
    groups: list[RiskGroup]
    reference_group: str
    strata: list[Stratum] = field(init=False)
    _index: dict[tuple[str, str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        if len({r.id for r in self.regions}) != len(self.regions):
            raise ConfigurationError("duplicate region id")
        if len({g.id for g in self.groups}) != len(self.groups):
            raise ConfigurationError("duplicate group id")
        self.groups = sorted(self.groups, key=lambda g: (g.rank, g.id))
        by_id = {g.id: g for g in self.groups}
        if self.reference_group not in by_id:
            raise ConfigurationError(
                f"reference group {self.reference_group!r} not in catalog"
            )
        ref = by_id[self.reference_group]
        for gender in self.genders_present():
            if gender not in ref.genders:
                raise ConfigurationError(
                    f"reference group {self.reference_group!r} missing gender {gender!r}"
                )
        # Stratum order: region-major, then gender (m before f), then rank.
        self.strata = [
            Stratum(r.id, g.id, gender)
            for r in self.regions
            for gender in GENDERS
            for g in self.groups
            if gender in g.genders
        ]
        self._index = {s.key: i for i, s in enumerate(self.strata)}

    # -- lookups ---------------------------------------------------------

    def genders_present(self) -> tuple[str, ...]:
        present = [g for g in GENDERS if any(g in grp.genders for grp in self.groups)]
        return tuple(present)

    def region(self, region_id: str) -> Region:
        for r in self.regions:
            if r.id == region_id:
                return r
        raise ConfigurationError(f"unknown region {region_id!r}")

    def group(self, group_id: str) -> RiskGroup:
        for g in self.groups:
            if g.id == group_id:
                return g
        raise ConfigurationError(f"unknown group {group_id!r}")

    def stratum_index(self, region: str, group: str, gender: str) -> int:
        try:
            return self._index[(region, group, gender)]
        except KeyError:
            raise ConfigurationError(
                f"no stratum {region}:{group}:{gender} (check group gender rules)"
            ) from None

    def has_stratum(self, region: str, group: str, gender: str) -> bool:
        return (region, group, gender) in self._index

    def population(self, region: str, gender: str) -> int:
        return self.region(region).population(gender)

    # -- block structure --------------------------------------------------

    def groups_for_gender(self, gender: str) -> list[RiskGroup]:
        """Groups present for a gender, reference last (simplex order)."""
        gs = [g for g in self.groups if gender in g.genders]
        gs.sort(key=lambda g: (g.id == self.reference_group, g.rank, g.id))
        return gs

    def simplex_block(self, region: str, gender: str) -> list[int]:
        """Stratum indices of one region x gender size simplex, reference last."""
        return [
            self.stratum_index(region, g.id, gender)
            for g in self.groups_for_gender(gender)
        ]

    def simplex_blocks(self) -> list[tuple[str, str, list[int]]]:
        out = []
        for r in self.regions:
            for gender in self.genders_present():
                out.append((r.id, gender, self.simplex_block(r.id, gender)))
        return out

    def two_gender_groups(self) -> list[RiskGroup]:
        return [g for g in self.groups if len(g.genders) == 2]

    def strata_of_region(self, region: str, gender: str | None = None) -> list[int]:
        return [
            i
            for i, s in enumerate(self.strata)
            if s.region == region and (gender is None or s.gender == gender)
        ]

    @property
    def n_strata(self) -> int:
        return len(self.strata)
