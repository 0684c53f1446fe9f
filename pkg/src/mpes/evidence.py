"""Evidence items: every datum is one independent likelihood factor.

An item couples a sampling kind (binomial, Poisson, multinomial) with a
target expression that maps the current state to the rate the kind needs.
Bound-informing items (bias "lower"/"upper") do not apply their likelihood
to the target itself but to an auxiliary slack value that is constrained to
sit on the informative side of the target.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .space import (BasicState, eval_mu_index, mixture_delta, mixture_pi)
from .strata import ConfigurationError

NEG_INF = -math.inf


class EvidenceError(ValueError):
    """Raised for malformed evidence files, naming file/row/column."""


# ---------------------------------------------------------------------------
# sampling kinds


@dataclass(frozen=True)
class BinomialCount:
    x: int
    n: int

    def __post_init__(self):
        if not (0 <= self.x <= self.n):
            raise EvidenceError(f"binomial needs 0 <= x <= n, got {self.x}/{self.n}")


@dataclass(frozen=True)
class PoissonTotal:
    m: int

    def __post_init__(self):
        if self.m < 0:
            raise EvidenceError(f"poisson count must be nonnegative, got {self.m}")


@dataclass(frozen=True)
class MultinomialSplit:
    counts: tuple[int, ...]
    total: int

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise EvidenceError("multinomial counts must be nonnegative")
        if sum(self.counts) != self.total:
            raise EvidenceError(
                f"multinomial counts sum to {sum(self.counts)}, stated total {self.total}"
            )


# ---------------------------------------------------------------------------
# target expressions
#
# Each target knows how to read its value off a BasicState. Registry targets
# additionally carry (stratum, channel) pairs so reporting fractions scale
# the expected counts they are built from.


def _biased_mu_sum(state: BasicState, pairs) -> float:
    total = 0.0
    for s, ch in pairs:
        mu = eval_mu_index(state, s)
        total += mu * state.underreport[ch] if ch is not None else mu
    return total


@dataclass(frozen=True)
class SizeShare:
    strata: tuple[int, ...]

    def value(self, state: BasicState) -> float:
        return float(state.rho[list(self.strata)].sum())


@dataclass(frozen=True)
class Prevalence:
    stratum: int

    def value(self, state: BasicState) -> float:
        return float(state.pi[self.stratum])


@dataclass(frozen=True)
class DiagnosedFraction:
    stratum: int

    def value(self, state: BasicState) -> float:
        return float(state.delta[self.stratum])


@dataclass(frozen=True)
class DiagnosedPrevalence:
    """pi * delta: prevalence of diagnosed infection in the stratum."""

    stratum: int

    def value(self, state: BasicState) -> float:
        return float(state.pi[self.stratum] * state.delta[self.stratum])


@dataclass(frozen=True)
class OptInPrevalence:
    """Prevalence component attributable to attendees who accepted a test."""

    block_id: str
    stratum: int

    def value(self, state: BasicState) -> float:
        return float(state.pi[self.stratum]) - state.pi_out[self.block_id]


@dataclass(frozen=True)
class DiagnosedShare:
    """Share of a region-gender's reported diagnoses in one category."""

    region: str
    gender: str
    category: str
    members: tuple[tuple[int, str | None], ...]
    scope: tuple[tuple[int, str | None], ...]

    def value(self, state: BasicState) -> float:
        denom = _biased_mu_sum(state, self.scope)
        if denom <= 0.0:
            return math.nan if denom < 0.0 else 0.0
        return _biased_mu_sum(state, self.members) / denom


@dataclass(frozen=True)
class DiagnosedTotal:
    """Expected reported diagnoses in a region-gender, reporting-adjusted."""

    region: str
    gender: str
    scope: tuple[tuple[int, str | None], ...]

    def value(self, state: BasicState) -> float:
        return _biased_mu_sum(state, self.scope)


@dataclass(frozen=True)
class LegalMigrantSize:
    region: str
    ethnicity: str
    gender: str
    sti_stratum: int
    nonsti_stratum: int

    def value(self, state: BasicState) -> float:
        g = state.gamma[(self.region, self.ethnicity)]
        return g * (float(state.rho[self.sti_stratum])
                    + float(state.rho[self.nonsti_stratum]))


@dataclass(frozen=True)
class ClinicAggregatePrevalence:
    region: str
    gender: str
    strata: tuple[int, ...]

    def value(self, state: BasicState) -> float:
        return mixture_pi(state, list(self.strata))


@dataclass(frozen=True)
class ClinicAggregateDiagnosed:
    region: str
    gender: str
    strata: tuple[int, ...]

    def value(self, state: BasicState) -> float:
        return mixture_delta(state, list(self.strata))


@dataclass(frozen=True)
class MixturePrevalence:
    """Prevalence in a size-weighted union of female strata (screening)."""

    region: str
    class_label: str
    strata: tuple[int, ...]

    def value(self, state: BasicState) -> float:
        return mixture_pi(state, list(self.strata))


@dataclass(frozen=True)
class MixtureDiagnosed:
    region: str
    class_label: str
    strata: tuple[int, ...]

    def value(self, state: BasicState) -> float:
        return mixture_delta(state, list(self.strata))


@dataclass(frozen=True)
class ReportingFraction:
    channel: str

    def value(self, state: BasicState) -> float:
        return state.underreport[self.channel]


@dataclass(frozen=True)
class OptOutFraction:
    block_id: str

    def value(self, state: BasicState) -> float:
        return state.optout_frac[self.block_id]


@dataclass(frozen=True)
class MultinomialShares:
    """Share vector over categories for a multinomial item."""

    region: str
    gender: str
    categories: tuple[DiagnosedShare, ...]

    def value(self, state: BasicState) -> np.ndarray:
        return np.array([c.value(state) for c in self.categories])


# ---------------------------------------------------------------------------
# items


@dataclass(frozen=True)
class EvidenceItem:
    id: str
    region: str
    gender: str | None
    kind: BinomialCount | PoissonTotal | MultinomialSplit
    target: object
    target_label: str
    bias: str = "exact"  # exact | lower | upper
    direct: bool = True
    deviance_eligible: bool = True

    def __post_init__(self):
        if self.bias not in ("exact", "lower", "upper"):
            raise EvidenceError(f"item {self.id!r}: bad bias {self.bias!r}")
        if self.deviance_eligible != eligible_by_rule(self.kind):
            raise EvidenceError(
                f"item {self.id!r}: deviance_eligible must be "
                f"{eligible_by_rule(self.kind)} for these counts"
            )


def eligible_by_rule(kind) -> bool:
    """Binomial items whose empirical rate sits on the boundary are out."""
    if isinstance(kind, BinomialCount):
        return 0 < kind.x < kind.n
    return True


def resolve_target(item: EvidenceItem, state: BasicState):
    """Rate the item's likelihood is evaluated at.

    Exact items resolve their target expression; bound-informing items
    resolve their auxiliary slack value instead (the constraint tying the
    slack to the target lives in the prior layer).
    """
    if item.bias != "exact":
        return state.theta_aux[item.id]
    return item.target.value(state)


def target_expression_value(item: EvidenceItem, state: BasicState):
    """Value of the underlying target expression, ignoring bound slack."""
    return item.target.value(state)


def loglik_item(item: EvidenceItem, state: BasicState) -> float:
    lam = resolve_target(item, state)
    k = item.kind
    if isinstance(k, BinomialCount):
        lam = float(lam)
        if not (0.0 < lam < 1.0):
            return NEG_INF
        return (_log_choose(k.n, k.x)
                + k.x * math.log(lam) + (k.n - k.x) * math.log1p(-lam))
    if isinstance(k, PoissonTotal):
        lam = float(lam)
        if lam <= 0.0 or not math.isfinite(lam):
            return NEG_INF
        return k.m * math.log(lam) - lam - math.lgamma(k.m + 1)
    if isinstance(k, MultinomialSplit):
        shares = np.asarray(lam, dtype=float)
        out = math.lgamma(k.total + 1)
        for count, xi in zip(k.counts, shares):
            out -= math.lgamma(count + 1)
            if count > 0:
                if xi <= 0.0:
                    return NEG_INF
                out += count * math.log(xi)
        return out
    raise TypeError(f"unknown kind {type(k).__name__}")


def total_loglik(items, state: BasicState) -> float:
    total = 0.0
    for it in items:
        ll = loglik_item(it, state)
        if ll == NEG_INF:
            return NEG_INF
        total += ll
    return total


def _log_choose(n: int, x: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(x + 1) - math.lgamma(n - x + 1)


# ---------------------------------------------------------------------------
# registry preprocessing


def redistribute_unknown(counts: np.ndarray, unknown: int) -> np.ndarray:
    """Spread an unclassified count proportionally, keeping integers.

    Largest-remainder rounding: proportional quotas are floored and the
    shortfall goes to the largest fractional parts, ties resolved by
    category order.
    """
    counts = np.asarray(counts, dtype=int)
    if unknown == 0:
        return counts.copy()
    if counts.sum() <= 0:
        raise EvidenceError("cannot redistribute onto all-zero categories")
    quota = unknown * counts / counts.sum()
    base = np.floor(quota).astype(int)
    rem = quota - base
    short = unknown - int(base.sum())
    order = np.argsort(-rem, kind="stable")
    base[order[:short]] += 1
    return counts + base


def preprocess_registry(rows: list[dict], config) -> list[EvidenceItem]:
    """Turn raw registry rows into share and total items.

    rows carry region, gender, category, count. Unknown-exposure counts are
    redistributed across the classified categories; each classified
    category becomes one binomial share item against the matching stratum
    union, and the region-gender total becomes one Poisson item.
    """
    st = config.structure
    unknown_label = config.registry_unknown_category
    chan = channel_for_stratum(config)
    grouped: dict[tuple[str, str], dict[str, int]] = {}
    for row in rows:
        key = (row["region"], row["gender"])
        cat = row["category"]
        if cat in grouped.setdefault(key, {}):
            raise EvidenceError(
                f"registry: duplicate category {cat!r} for {key[0]}:{key[1]}")
        grouped[key][cat] = int(row["count"])

    items: list[EvidenceItem] = []
    for (region, gender), cats in sorted(grouped.items()):
        unknown = cats.pop(unknown_label, 0)
        labels = [lbl for lbl in config.registry_category_order(gender)
                  if lbl in cats]
        leftovers = set(cats) - set(labels)
        if leftovers:
            raise EvidenceError(
                f"registry: unknown category {sorted(leftovers)[0]!r} "
                f"for {region}:{gender}")
        counts = redistribute_unknown(
            np.array([cats[lbl] for lbl in labels]), unknown)
        total = int(counts.sum())
        scope = tuple((s, chan[s]) for s in st.strata_of_region(region, gender))
        for lbl, x in zip(labels, counts):
            members = tuple(
                (st.stratum_index(region, g, gender), chan[st.stratum_index(region, g, gender)])
                for g in config.registry_category_groups(lbl)
                if st.has_stratum(region, g, gender))
            if not members:
                raise EvidenceError(
                    f"registry: category {lbl!r} has no strata for {region}:{gender}")
            kind = BinomialCount(int(x), total)
            items.append(EvidenceItem(
                id=f"registry_share[{region},{gender},{lbl}]",
                region=region, gender=gender, kind=kind,
                target=DiagnosedShare(region, gender, lbl, members, scope),
                target_label="diagnosed_share",
                bias="exact", direct=False,
                deviance_eligible=eligible_by_rule(kind)))
        items.append(EvidenceItem(
            id=f"registry_total[{region},{gender}]",
            region=region, gender=gender, kind=PoissonTotal(total),
            target=DiagnosedTotal(region, gender, scope),
            target_label="diagnosed_total",
            bias="exact", direct=False, deviance_eligible=True))
    return items


def channel_for_stratum(config) -> list[str | None]:
    """Reporting channel covering each stratum (at most one allowed)."""
    st = config.structure
    out: list[str | None] = [None] * st.n_strata
    for ch in config.reporting_channels:
        for i, s in enumerate(st.strata):
            if (s.group in ch.groups and s.gender in ch.genders
                    and s.region in ch.regions):
                if out[i] is not None:
                    raise ConfigurationError(
                        f"stratum {s}: covered by two reporting channels "
                        f"({out[i]!r}, {ch.id!r})")
                out[i] = ch.id
    return out


# ---------------------------------------------------------------------------
# CSV ingestion

ITEM_HEADER = ["id", "region", "gender", "kind", "x", "n", "target_type",
               "target_params", "bias", "direct", "deviance_eligible"]
REGISTRY_HEADER = ["region", "gender", "category", "count"]


def load_evidence(paths, config) -> list[EvidenceItem]:
    """Load evidence files of either schema, in the order given.

    Item-schema files contribute rows one-to-one; registry-schema files are
    preprocessed into share/total items. The two schemas are told apart by
    their header line.
    """
    items: list[EvidenceItem] = []
    registry_rows: list[dict] = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise EvidenceError(f"{path}: empty file") from None
            header = [h.strip() for h in header]
            if header == ITEM_HEADER:
                items.extend(_parse_item_rows(reader, path, config))
            elif header == REGISTRY_HEADER:
                for lineno, row in enumerate(reader, start=2):
                    if not row or all(not c.strip() for c in row):
                        continue
                    registry_rows.append(_parse_registry_row(row, path, lineno))
            else:
                raise EvidenceError(
                    f"{path}: unrecognized header {header!r}")
    if registry_rows:
        items.extend(preprocess_registry(registry_rows, config))
    if not items:
        raise EvidenceError("no evidence items loaded")
    return items


def _parse_registry_row(row, path, lineno) -> dict:
    if len(row) != 4:
        raise EvidenceError(f"{path}:{lineno}: expected 4 columns")
    region, gender, category, count = (c.strip() for c in row)
    if gender not in ("m", "f"):
        raise EvidenceError(f"{path}:{lineno}: bad gender {gender!r}")
    try:
        n = int(count)
    except ValueError:
        raise EvidenceError(f"{path}:{lineno}: count must be an integer") from None
    if n < 0:
        raise EvidenceError(f"{path}:{lineno}: negative count")
    return {"region": region, "gender": gender, "category": category, "count": n}


def _parse_item_rows(reader, path, config):
    items = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(ITEM_HEADER):
            raise EvidenceError(
                f"{path}:{lineno}: expected {len(ITEM_HEADER)} columns, got {len(row)}")
        rec = dict(zip(ITEM_HEADER, (c.strip() for c in row)))
        try:
            items.append(_build_item(rec, config))
        except (EvidenceError, ConfigurationError, ValueError) as exc:
            raise EvidenceError(f"{path}:{lineno} (id={rec['id']!r}): {exc}") from None
    return items


def _parse_params(text: str) -> dict[str, str]:
    params = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise EvidenceError(f"bad target_params token {part!r}")
        k, v = part.split("=", 1)
        params[k.strip()] = v.strip()
    return params


def _parse_bool(text: str, column: str) -> bool:
    t = text.lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise EvidenceError(f"column {column}: expected true/false, got {text!r}")


def _build_item(rec: dict, config) -> EvidenceItem:
    st = config.structure
    region = rec["region"]
    st.region(region)  # existence check
    gender = rec["gender"] or None
    if gender is not None and gender not in ("m", "f"):
        raise EvidenceError(f"bad gender {gender!r}")

    kind_name = rec["kind"].lower()
    if kind_name == "binomial":
        kind = BinomialCount(int(rec["x"]), int(rec["n"]))
    elif kind_name == "poisson":
        kind = PoissonTotal(int(rec["x"]))
    elif kind_name == "multinomial":
        counts = tuple(int(c) for c in rec["x"].split(";"))
        kind = MultinomialSplit(counts, int(rec["n"]))
    else:
        raise EvidenceError(f"unknown kind {rec['kind']!r}")

    params = _parse_params(rec["target_params"])
    ttype = rec["target_type"]
    target = _build_target(ttype, params, region, gender, config)

    bias = rec["bias"].lower() or "exact"
    return EvidenceItem(
        id=rec["id"], region=region, gender=gender, kind=kind,
        target=target, target_label=ttype, bias=bias,
        direct=_parse_bool(rec["direct"], "direct"),
        deviance_eligible=_parse_bool(rec["deviance_eligible"], "deviance_eligible"),
    )


def _build_target(ttype, params, region, gender, config):
    st = config.structure
    chan = channel_for_stratum(config)

    def stratum(group):
        if gender is None:
            raise EvidenceError(f"target {ttype!r} needs a gender")
        return st.stratum_index(region, group, gender)

    if ttype == "rho":
        names = params.get("groups", params.get("group"))
        if not names:
            raise EvidenceError("rho target needs group= or groups=")
        return SizeShare(tuple(stratum(g) for g in names.split("+")))
    if ttype == "pi":
        return Prevalence(stratum(params["group"]))
    if ttype == "delta":
        return DiagnosedFraction(stratum(params["group"]))
    if ttype == "pi_delta":
        return DiagnosedPrevalence(stratum(params["group"]))
    if ttype == "opt_in_pi":
        block = config.optout_block(params["block"])
        return OptInPrevalence(block.id, st.stratum_index(
            block.region, block.group, block.gender))
    if ttype == "diagnosed_share":
        label = params["category"]
        scope = tuple((s, chan[s]) for s in st.strata_of_region(region, gender))
        members = tuple(
            (st.stratum_index(region, g, gender), chan[st.stratum_index(region, g, gender)])
            for g in config.registry_category_groups(label)
            if st.has_stratum(region, g, gender))
        return DiagnosedShare(region, gender, label, members, scope)
    if ttype == "diagnosed_total":
        scope = tuple((s, chan[s]) for s in st.strata_of_region(region, gender))
        return DiagnosedTotal(region, gender, scope)
    if ttype == "legal_migrant_size":
        eth = params["ethnicity"]
        spec = config.legal_migrant_spec(region, eth)
        return LegalMigrantSize(region, eth, gender,
                                stratum(spec.sti_group), stratum(spec.nonsti_group))
    if ttype in ("sti_aggregate_pi", "sti_aggregate_delta"):
        groups = config.sti_aggregate_groups
        idx = tuple(st.stratum_index(region, g, gender) for g in groups
                    if st.has_stratum(region, g, gender))
        if not idx:
            raise EvidenceError("no clinic aggregate strata for this gender")
        cls = (ClinicAggregatePrevalence if ttype.endswith("pi")
               else ClinicAggregateDiagnosed)
        return cls(region, gender, idx)
    if ttype in ("female_mixture_pi", "female_mixture_delta"):
        label = params["class"]
        groups = config.antenatal_class_groups(label)
        idx = tuple(st.stratum_index(region, g, "f") for g in groups
                    if st.has_stratum(region, g, "f"))
        if not idx:
            raise EvidenceError(f"screening class {label!r} has no female strata")
        cls = MixturePrevalence if ttype.endswith("pi") else MixtureDiagnosed
        return cls(region, label, idx)
    if ttype == "reporting_fraction":
        ch = params["channel"]
        if ch not in {c.id for c in config.reporting_channels}:
            raise EvidenceError(f"unknown reporting channel {ch!r}")
        return ReportingFraction(ch)
    if ttype == "opt_out_fraction":
        block = config.optout_block(params["block"])
        if block.opt_outs is not None:
            raise EvidenceError(
                f"block {block.id!r} has a fixed opt-out count; "
                "fraction items only apply to estimated blocks")
        return OptOutFraction(block.id)
    raise EvidenceError(f"unknown target_type {ttype!r}")
