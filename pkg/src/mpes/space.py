"""Free-parameter space: unconstrained coordinates and their transforms.

Every sampled quantity is one coordinate of an unconstrained real vector.
The mapping to the constrained scale is fixed per coordinate:

  logit          probabilities in (0,1)
  scaled_logit   probabilities confined to a (lo, hi) box
  alr            additive-log-ratio coordinates of a size simplex, one
                 coordinate per non-reference group of a region x gender
  identity       unbounded quantities (log-odds ratios and their means)
  log            positive scale parameters

Male prevalences of two-gender groups are not free: they are derived from
the female prevalence and the group's male/female log-odds ratio, so the
linkage holds exactly in every state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .strata import ConfigurationError, ModelStructure

LOGIT = "logit"
SCALED_LOGIT = "scaled_logit"
ALR = "alr"
IDENTITY = "identity"
LOG = "log"


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _expit_scalar(x: float) -> float:
    # tanh form is symmetric and never overflows
    return 0.5 * (1.0 + math.tanh(0.5 * x))


@dataclass(frozen=True)
class Coord:
    """One free coordinate.

    role is a structured tag consumed by the model compiler and the prior
    sampler; the first element names the kind of quantity, the rest bind it
    to strata / regions / channels. meta carries transform bounds or, for
    auxiliary slack coordinates, the bound construction.
    """

    name: str
    kind: str
    role: tuple
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OptOutBlock:
    """One opt-out testing block at an STI clinic stratum.

    attendees is the number of clinic attendees behind the size datum;
    opt_outs is the count who declined testing, or None when the declining
    fraction is itself estimated from an evidence item.
    """

    id: str
    region: str
    group: str
    gender: str
    attendees: int
    opt_outs: int | None  # None: fraction estimated (estimate_fraction coord)


@dataclass
class BasicState:
    """Constrained-scale snapshot of every modelled quantity.

    rho/pi/delta are aligned with structure.strata. pi_out carries the
    opt-out prevalence component per opt-out block; underreport the
    reporting fraction per registry channel; theta_aux the auxiliary value
    per bound-informing evidence item.
    """

    structure: ModelStructure
    rho: np.ndarray
    pi: np.ndarray
    delta: np.ndarray
    pi_out: dict[str, float] = field(default_factory=dict)
    optout_pos: dict[str, float] = field(default_factory=dict)
    optout_frac: dict[str, float] = field(default_factory=dict)
    gamma: dict[tuple[str, str], float] = field(default_factory=dict)
    pi_floor_wst: float | None = None
    underreport: dict[str, float] = field(default_factory=dict)
    eta: dict[tuple[str, str], float] = field(default_factory=dict)
    eta_bar: dict[str, float] = field(default_factory=dict)
    eta_bar_bar: float | None = None
    sigma: dict[str, float] = field(default_factory=dict)
    tau: float | None = None
    theta_aux: dict[str, float] = field(default_factory=dict)


class ParameterSpace:
    """Ordered list of free coordinates plus the bidirectional transform."""

    def __init__(self, structure: ModelStructure, coords: list[Coord],
                 optout_blocks: list[OptOutBlock]):
        self.structure = structure
        self.coords = coords
        self.optout_blocks = optout_blocks
        self.names = [c.name for c in coords]
        self._by_name = {c.name: i for i, c in enumerate(coords)}
        if len(self._by_name) != len(coords):
            raise ConfigurationError("duplicate coordinate name")
        # alr blocks: (region, gender) -> list of coord indices, simplex order
        self.alr_blocks: dict[tuple[str, str], list[int]] = {}
        for i, c in enumerate(coords):
            if c.kind == ALR:
                self.alr_blocks.setdefault((c.role[1], c.role[2]), []).append(i)
        self._blocks_by_id = {b.id: b for b in optout_blocks}

    @property
    def dim(self) -> int:
        return len(self.coords)

    def index(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise ConfigurationError(f"unknown coordinate {name!r}") from None

    def coords_with_role(self, *prefix) -> list[int]:
        return [i for i, c in enumerate(self.coords) if c.role[: len(prefix)] == prefix]

    def optout_block(self, block_id: str) -> OptOutBlock:
        return self._blocks_by_id[block_id]

    # -- forward transform -------------------------------------------------

    def to_constrained(self, u: np.ndarray) -> BasicState:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("non-finite unconstrained coordinates")
        st = self.structure
        S = st.n_strata
        state = BasicState(st, np.empty(S), np.empty(S), np.empty(S))

        # size simplexes
        for (region, gender), idxs in self.alr_blocks.items():
            block = st.simplex_block(region, gender)
            e = np.exp(u[idxs] - max(0.0, float(np.max(u[idxs]))))
            ref = math.exp(-max(0.0, float(np.max(u[idxs]))))
            tot = float(e.sum()) + ref
            state.rho[block[:-1]] = e / tot
            state.rho[block[-1]] = ref / tot
        # degenerate one-group simplexes have no alr coords
        for region, gender, block in st.simplex_blocks():
            if len(block) == 1:
                state.rho[block[0]] = 1.0

        eta_u: dict[tuple[str, str], float] = {}
        for i in self.coords_with_role("eta"):
            c = self.coords[i]
            key = (c.role[1], c.role[2])
            state.eta[key] = float(u[i])
            eta_u[key] = float(u[i])
        for i, c in enumerate(self.coords):
            role = c.role
            if role[0] == "pi_f":
                region, group = role[1], role[2]
                state.pi[st.stratum_index(region, group, "f")] = _expit_scalar(u[i])
                state.pi[st.stratum_index(region, group, "m")] = _expit_scalar(
                    u[i] + eta_u[(region, group)]
                )
            elif role[0] == "pi_single":
                state.pi[st.stratum_index(role[1], role[2], role[3])] = _expit_scalar(u[i])
            elif role[0] == "delta":
                state.delta[st.stratum_index(role[1], role[2], role[3])] = _expit_scalar(u[i])
            elif role[0] == "optout_pos":
                state.optout_pos[role[1]] = _expit_scalar(u[i])
            elif role[0] == "optout_frac":
                state.optout_frac[role[1]] = _expit_scalar(u[i])
            elif role[0] == "gamma":
                lo, hi = c.meta["lo"], c.meta["hi"]
                state.gamma[(role[1], role[2])] = lo + (hi - lo) * _expit_scalar(u[i])
            elif role[0] == "pi_floor":
                state.pi_floor_wst = _expit_scalar(u[i])
            elif role[0] == "underreport":
                lo, hi = c.meta.get("lo", 0.0), c.meta.get("hi", 1.0)
                state.underreport[role[1]] = lo + (hi - lo) * _expit_scalar(u[i])
            elif role[0] == "eta_bar":
                state.eta_bar[role[1]] = float(u[i])
            elif role[0] == "eta_bar_bar":
                state.eta_bar_bar = float(u[i])
            elif role[0] == "sigma":
                state.sigma[role[1]] = math.exp(u[i])
            elif role[0] == "tau":
                state.tau = math.exp(u[i])
            elif role[0] == "theta_aux":
                state.theta_aux[role[1]] = _expit_scalar(u[i])

        for b in self.optout_blocks:
            s = st.stratum_index(b.region, b.group, b.gender)
            pi = float(state.pi[s])
            pos = state.optout_pos[b.id]
            c_ratio = self.optout_count(b, state) / (
                st.population(b.region, b.gender) * float(state.rho[s])
            )
            pi_in = (pi - c_ratio * pos) / (1.0 + c_ratio * (1.0 - pos))
            state.pi_out[b.id] = pi - pi_in
        return state

    def optout_count(self, block: OptOutBlock, state: BasicState) -> float:
        """Effective number of attendees who declined testing in a block."""
        if block.opt_outs is not None:
            return float(block.opt_outs)
        return state.optout_frac[block.id] * block.attendees

    # -- inverse transform --------------------------------------------------

    def from_constrained(self, state: BasicState) -> np.ndarray:
        st = self.structure
        u = np.empty(self.dim)
        for (region, gender), idxs in self.alr_blocks.items():
            block = st.simplex_block(region, gender)
            ref = state.rho[block[-1]]
            u[idxs] = np.log(state.rho[block[:-1]]) - math.log(ref)
        for i, c in enumerate(self.coords):
            role = c.role
            if role[0] == "pi_f":
                u[i] = float(logit(state.pi[st.stratum_index(role[1], role[2], "f")]))
            elif role[0] == "pi_single":
                u[i] = float(logit(state.pi[st.stratum_index(role[1], role[2], role[3])]))
            elif role[0] == "delta":
                u[i] = float(logit(state.delta[st.stratum_index(role[1], role[2], role[3])]))
            elif role[0] == "eta":
                u[i] = state.eta[(role[1], role[2])]
            elif role[0] == "optout_pos":
                u[i] = float(logit(state.optout_pos[role[1]]))
            elif role[0] == "optout_frac":
                u[i] = float(logit(state.optout_frac[role[1]]))
            elif role[0] == "gamma":
                lo, hi = c.meta["lo"], c.meta["hi"]
                u[i] = float(logit((state.gamma[(role[1], role[2])] - lo) / (hi - lo)))
            elif role[0] == "pi_floor":
                u[i] = float(logit(state.pi_floor_wst))
            elif role[0] == "underreport":
                lo, hi = c.meta.get("lo", 0.0), c.meta.get("hi", 1.0)
                u[i] = float(logit((state.underreport[role[1]] - lo) / (hi - lo)))
            elif role[0] == "eta_bar":
                u[i] = state.eta_bar[role[1]]
            elif role[0] == "eta_bar_bar":
                u[i] = state.eta_bar_bar
            elif role[0] == "sigma":
                u[i] = math.log(state.sigma[role[1]])
            elif role[0] == "tau":
                u[i] = math.log(state.tau)
            elif role[0] == "theta_aux":
                u[i] = float(logit(state.theta_aux[role[1]]))
        return u

    # -- log-Jacobian --------------------------------------------------------

    def log_jacobian(self, u: np.ndarray, state: BasicState) -> float:
        """log |d constrained / d unconstrained| of the full transform.

        Simplex blocks contribute the sum of the logs of all component
        shares (reference included); logit-type coordinates contribute
        log p(1-p) plus the box width where applicable; log-scale
        coordinates contribute the coordinate itself.
        """
        total = 0.0
        st = self.structure
        for (region, gender), _idxs in self.alr_blocks.items():
            block = st.simplex_block(region, gender)
            shares = state.rho[block]
            if np.any(shares <= 0.0):
                return -math.inf
            total += float(np.sum(np.log(shares)))
        for i, c in enumerate(self.coords):
            k = c.kind
            if k == LOGIT or k == SCALED_LOGIT:
                p = _expit_scalar(u[i])
                if p <= 0.0 or p >= 1.0:
                    return -math.inf
                total += math.log(p) + math.log1p(-p)
                if k == SCALED_LOGIT:
                    total += math.log(c.meta["hi"] - c.meta["lo"])
            elif k == LOG:
                total += float(u[i])
        return total


# ---------------------------------------------------------------------------
# construction


def build_parameter_space(config, items=None) -> ParameterSpace:
    """Assemble the free-coordinate list for a model configuration.

    The basic block (sizes, prevalences, proportions diagnosed) is laid out
    region by region; auxiliary coordinates (opt-out positions, legal
    residence fractions, the national prevalence floor, reporting
    fractions, pooling hyperparameters) follow. When evidence items are
    supplied, every bound-informing item appends one auxiliary slack
    coordinate.
    """
    st: ModelStructure = config.structure
    coords: list[Coord] = []

    for r in st.regions:
        for gender in st.genders_present():
            groups = st.groups_for_gender(gender)
            for g in groups[:-1]:
                coords.append(Coord(
                    f"size_alr[{r.id},{gender},{g.id}]", ALR,
                    ("rho", r.id, gender, g.id)))
    for r in st.regions:
        for g in st.groups:
            if len(g.genders) == 2:
                coords.append(Coord(f"prev_f[{r.id},{g.id}]", LOGIT,
                                    ("pi_f", r.id, g.id)))
            else:
                gender = g.genders[0]
                coords.append(Coord(f"prev[{r.id},{g.id},{gender}]", LOGIT,
                                    ("pi_single", r.id, g.id, gender)))
        for g in st.two_gender_groups():
            coords.append(Coord(f"logodds_mf[{r.id},{g.id}]", IDENTITY,
                                ("eta", r.id, g.id)))
        for gender in st.genders_present():
            for g in st.groups_for_gender(gender):
                coords.append(Coord(f"diag[{r.id},{g.id},{gender}]", LOGIT,
                                    ("delta", r.id, g.id, gender)))

    blocks = list(config.optout_blocks)
    for b in blocks:
        if not st.has_stratum(b.region, b.group, b.gender):
            raise ConfigurationError(f"opt-out block {b.id!r}: no such stratum")
        coords.append(Coord(f"optout_pos[{b.id}]", LOGIT, ("optout_pos", b.id)))
    for b in blocks:
        if b.opt_outs is None:
            coords.append(Coord(f"optout_frac[{b.id}]", LOGIT, ("optout_frac", b.id)))
    for spec in config.legal_migrant:
        coords.append(Coord(
            f"legal_frac[{spec.region},{spec.ethnicity}]", SCALED_LOGIT,
            ("gamma", spec.region, spec.ethnicity),
            {"lo": spec.low, "hi": spec.high}))
    if config.global_prevalence_floor:
        coords.append(Coord("prev_floor", LOGIT, ("pi_floor",)))
    for ch in config.reporting_channels:
        meta = {"lo": ch.prior_low, "hi": ch.prior_high}
        kind = LOGIT if (ch.prior_low, ch.prior_high) == (0.0, 1.0) else SCALED_LOGIT
        coords.append(Coord(f"reported_frac[{ch.id}]", kind,
                            ("underreport", ch.id), meta))
    if config.hierarchy_enabled and st.two_gender_groups():
        for r in st.regions:
            coords.append(Coord(f"logodds_mean[{r.id}]", IDENTITY, ("eta_bar", r.id)))
        for r in st.regions:
            coords.append(Coord(f"logodds_sd[{r.id}]", LOG, ("sigma", r.id)))
        coords.append(Coord("logodds_mean_pooled", IDENTITY, ("eta_bar_bar",)))
        coords.append(Coord("logodds_sd_pooled", LOG, ("tau",)))

    if items is not None:
        for it in items:
            if it.bias != "exact":
                coords.append(Coord(f"bound_aux[{it.id}]", LOGIT,
                                    ("theta_aux", it.id),
                                    {"bound": it.bias}))
    return ParameterSpace(st, coords, blocks)


# ---------------------------------------------------------------------------
# functional evaluators


def eval_mu(state: BasicState, region: str, group: str, gender: str) -> float:
    """Expected diagnosed count N * rho * pi * delta for one stratum.

    Reporting-bias channels never enter here; they are applied by the
    evidence layer when a registry target is resolved.
    """
    st = state.structure
    s = st.stratum_index(region, group, gender)
    return (st.population(region, gender)
            * float(state.rho[s]) * float(state.pi[s]) * float(state.delta[s]))


def eval_mu_index(state: BasicState, s: int) -> float:
    t = state.structure.strata[s]
    return eval_mu(state, t.region, t.group, t.gender)


def eval_xi(state: BasicState, region: str, partition: list[list[int]],
            scope: list[int] | None = None) -> np.ndarray:
    """Diagnosed-count shares of stratum categories within a region.

    partition is a list of categories, each a list of stratum indices;
    scope is the denominator set (defaults to every stratum of the
    region). Shares sum to one exactly when the partition covers the
    scope.
    """
    if scope is None:
        scope = state.structure.strata_of_region(region)
    denom = sum(eval_mu_index(state, s) for s in scope)
    if denom <= 0.0:
        raise ZeroDivisionError(f"region {region!r}: total diagnosed count is zero")
    return np.array([
        sum(eval_mu_index(state, s) for s in cat) / denom for cat in partition
    ])


def mixture_pi(state: BasicState, strata: list[int]) -> float:
    """Prevalence of the size-weighted mixture of the given strata."""
    r = state.rho[strata]
    p = state.pi[strata]
    return float((r * p).sum() / r.sum())


def mixture_delta(state: BasicState, strata: list[int]) -> float:
    """Proportion diagnosed among prevalent cases of the mixture."""
    r = state.rho[strata]
    p = state.pi[strata]
    d = state.delta[strata]
    num = float((r * p * d).sum())
    den = float((r * p).sum())
    if den <= 0.0:
        raise ZeroDivisionError("mixture has zero prevalent mass")
    return num / den


def eval_sti_aggregates(state: BasicState, region: str, gender: str,
                        groups: list[str]) -> tuple[float, float]:
    """Clinic-level aggregate (prevalence, proportion diagnosed).

    groups lists the STI-clinic groups entering the aggregate; strata
    missing for the gender are skipped.
    """
    st = state.structure
    idx = [st.stratum_index(region, g, gender) for g in groups
           if st.has_stratum(region, g, gender)]
    if not idx:
        raise ConfigurationError(f"no aggregate strata for {region}:{gender}")
    return mixture_pi(state, idx), mixture_delta(state, idx)


def eval_legal_migrant_size(state: BasicState, region: str, ethnicity: str,
                            gender: str, sti_group: str, nonsti_group: str) -> float:
    """Registered population share: legal fraction times total ethnic share."""
    st = state.structure
    g = state.gamma[(region, ethnicity)]
    return g * (float(state.rho[st.stratum_index(region, sti_group, gender)])
                + float(state.rho[st.stratum_index(region, nonsti_group, gender)]))
