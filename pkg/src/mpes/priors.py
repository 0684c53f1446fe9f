"""Joint prior: vague densities, hard constraints, and two-stage pooling.

Probabilities carry flat priors on their (possibly boxed) constrained
scale. Order and floor restrictions are enforced by rejection: any state
violating one has log-prior -inf. Male/female prevalence log-odds ratios
of two-gender groups are pooled through a normal hierarchy with a regional
mean layer and a national mean layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .space import BasicState, OptOutBlock, ParameterSpace
from .strata import ConfigurationError

LOG_2PI = math.log(2.0 * math.pi)


class InitializationError(RuntimeError):
    """Prior sampler exceeded its rejection budget."""


# ---------------------------------------------------------------------------
# constraints
#
# margin(state) >= 0 means satisfied (> 0 for strict constraints). Each
# class keeps enough structure for the prior sampler to sample its block
# constructively instead of rejecting whole states.


@dataclass(frozen=True)
class RefMinimum:
    """Reference-group prevalence is the regional minimum within a gender."""

    region: str
    gender: str
    group: str
    stratum: int
    ref_stratum: int
    strict: bool = False

    @property
    def id(self) -> str:
        return f"ref_min[{self.region},{self.gender},{self.group}]"

    def margin(self, state: BasicState) -> float:
        return float(state.pi[self.stratum] - state.pi[self.ref_stratum])


@dataclass(frozen=True)
class GlobalFloor:
    """National floor sits below the reference prevalence everywhere."""

    region: str
    gender: str
    ref_stratum: int
    strict: bool = False

    @property
    def id(self) -> str:
        return f"floor[{self.region},{self.gender}]"

    def margin(self, state: BasicState) -> float:
        return float(state.pi[self.ref_stratum]) - state.pi_floor_wst


@dataclass(frozen=True)
class DiagFloor:
    """Minimum proportion diagnosed in clinic-recruited strata."""

    region: str
    group: str
    gender: str
    stratum: int
    floor: float
    strict: bool = False

    @property
    def id(self) -> str:
        return f"diag_floor[{self.region},{self.group},{self.gender}]"

    def margin(self, state: BasicState) -> float:
        return float(state.delta[self.stratum]) - self.floor


@dataclass(frozen=True)
class DiagOrder:
    """delta(hi_group) >= delta(lo_group) within a region and gender."""

    region: str
    gender: str
    lo_group: str
    hi_group: str
    lo_stratum: int
    hi_stratum: int
    strict: bool = False

    @property
    def id(self) -> str:
        return f"diag_order[{self.region},{self.gender},{self.lo_group}<={self.hi_group}]"

    def margin(self, state: BasicState) -> float:
        return float(state.delta[self.hi_stratum] - state.delta[self.lo_stratum])


@dataclass(frozen=True)
class BoundSlack:
    """Auxiliary slack of a bound-informing item sits on the right side.

    side "lower": the item's datum understates the target, slack <= target.
    side "upper": the datum overstates it, slack >= target.
    """

    item_id: str
    side: str
    target: object
    strict: bool = False

    @property
    def id(self) -> str:
        return f"bound[{self.item_id}]"

    def margin(self, state: BasicState) -> float:
        t = self.target.value(state)
        aux = state.theta_aux[self.item_id]
        return t - aux if self.side == "lower" else aux - t


@dataclass(frozen=True)
class OptInValidity:
    """Opt-out decomposition leaves a positive tested-side component."""

    block: OptOutBlock
    stratum: int
    population: int
    strict: bool = True

    @property
    def id(self) -> str:
        return f"optin_pos[{self.block.id}]"

    def margin(self, state: BasicState) -> float:
        b = self.block
        count = (b.opt_outs if b.opt_outs is not None
                 else state.optout_frac[b.id] * b.attendees)
        c = count / (self.population * float(state.rho[self.stratum]))
        return float(state.pi[self.stratum]) - c * state.optout_pos[b.id]


@dataclass(frozen=True)
class Box:
    """Explicit box on one basic parameter."""

    quantity: str  # pi | delta | rho
    region: str
    group: str
    gender: str
    stratum: int
    lower: float
    upper: float
    strict: bool = False

    @property
    def id(self) -> str:
        return f"box[{self.quantity},{self.region},{self.group},{self.gender}]"

    def margin(self, state: BasicState) -> float:
        v = float(getattr(state, self.quantity)[self.stratum])
        return min(v - self.lower, self.upper - v)


@dataclass
class ConstraintSet:
    constraints: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.constraints)

    def of_type(self, cls) -> list:
        return [c for c in self.constraints if isinstance(c, cls)]

    def satisfied(self, c, state: BasicState) -> bool:
        m = c.margin(state)
        return m > 0.0 if c.strict else m >= 0.0


def check_constraints(state: BasicState, constraints: ConstraintSet):
    """Violated constraint ids with their margins; empty list means valid."""
    out = []
    for c in constraints:
        m = c.margin(state)
        bad = (m <= 0.0) if c.strict else (m < 0.0)
        if bad:
            out.append((c.id, m))
    return out


# ---------------------------------------------------------------------------
# hierarchy


@dataclass
class HierarchyLayer:
    """Two-stage normal pooling of male/female prevalence log-odds ratios."""

    enabled: bool
    members: list[tuple[str, str]]  # (region, group) pairs with both genders
    regions: list[str]
    mean_prior_sd: float = 10.0
    scale_prior_sd: float = 5.0


def _norm_logpdf(x: float, mean: float, sd: float) -> float:
    z = (x - mean) / sd
    return -0.5 * (LOG_2PI + z * z) - math.log(sd)


def _half_norm_logpdf(x: float, sd: float) -> float:
    if x <= 0.0:
        return -math.inf
    return math.log(2.0) + _norm_logpdf(x, 0.0, sd)


def log_prior_parts(state: BasicState, hierarchy: HierarchyLayer,
                    space: ParameterSpace | None = None) -> dict[str, float]:
    """Density pieces of the prior, excluding constraint indicators."""
    parts = {"pooled_logodds": 0.0, "pooled_means": 0.0, "hyper": 0.0,
             "uniform_const": 0.0}
    if hierarchy.members:
        if hierarchy.enabled:
            for (r, g) in hierarchy.members:
                parts["pooled_logodds"] += _norm_logpdf(
                    state.eta[(r, g)], state.eta_bar[r], state.sigma[r])
            for r in hierarchy.regions:
                parts["pooled_means"] += _norm_logpdf(
                    state.eta_bar[r], state.eta_bar_bar, state.tau)
            parts["hyper"] += _norm_logpdf(state.eta_bar_bar, 0.0,
                                           hierarchy.mean_prior_sd)
            for r in hierarchy.regions:
                parts["hyper"] += _half_norm_logpdf(state.sigma[r],
                                                    hierarchy.scale_prior_sd)
            parts["hyper"] += _half_norm_logpdf(state.tau, hierarchy.scale_prior_sd)
        else:
            for (r, g) in hierarchy.members:
                parts["pooled_logodds"] += _norm_logpdf(
                    state.eta[(r, g)], 0.0, hierarchy.mean_prior_sd)
    # flat priors over boxes contribute their normalizing widths
    if space is not None:
        for c in space.coords:
            if c.kind == "scaled_logit":
                parts["uniform_const"] -= math.log(c.meta["hi"] - c.meta["lo"])
    return parts


def log_prior(state: BasicState, constraints: ConstraintSet,
              hierarchy: HierarchyLayer, space: ParameterSpace | None = None) -> float:
    """Joint log-prior on the constrained scale; -inf when any constraint fails."""
    if check_constraints(state, constraints):
        return -math.inf
    return sum(log_prior_parts(state, hierarchy, space).values())


# ---------------------------------------------------------------------------
# prior sampling
#
# Ancestral scheme: pooling layer first, then sizes, then prevalences and
# proportions diagnosed with per-block rejection against their local
# constraints, then the auxiliary coordinates conditionally on everything
# they are constrained by. Every returned state satisfies the full set.


REGION_ATTEMPT_CAP = 2000  # prevalence tries per region under one hyper draw
_OPEN_EPS = 1e-12


def _open_unit(v: float) -> float:
    # floating rounding can land uniform draws exactly on 0 or 1, whose
    # logits are infinite; keep every drawn probability strictly interior
    return min(max(v, _OPEN_EPS), 1.0 - _OPEN_EPS)


def sample_from_prior(space: ParameterSpace, constraints: ConstraintSet,
                      hierarchy: HierarchyLayer, seed,
                      max_tries: int = 10 ** 6) -> BasicState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    budget = max_tries
    while True:
        try:
            state, budget = _assemble_prior_draw(space, constraints, hierarchy,
                                                 rng, budget)
        except FloatingPointError:
            # a derived quantity saturated under float rounding (e.g. a male
            # prevalence at an extreme offset), leaving a coordinate with an
            # infinite logit; such boundary states carry no mass, so redraw
            state, budget = None, budget - 1
        if state is not None:
            return state
        if budget <= 0:
            raise InitializationError(
                "rejection budget exhausted assembling a prior draw; "
                "review the constraints and prior scales")


def _assemble_prior_draw(space: ParameterSpace, constraints: ConstraintSet,
                         hierarchy: HierarchyLayer, rng,
                         budget: int) -> tuple[BasicState | None, int]:
    st = space.structure
    state = BasicState(st, np.empty(st.n_strata), np.full(st.n_strata, np.nan),
                       np.full(st.n_strata, np.nan))

    for region, gender, block in st.simplex_blocks():
        state.rho[block] = rng.dirichlet(np.ones(len(block)))

    ref_by_region: dict[str, list[RefMinimum]] = {}
    for c in constraints.of_type(RefMinimum):
        ref_by_region.setdefault(c.region, []).append(c)
    # A tail draw of the pooling scales can push the male/female offsets so
    # far out that no prevalence configuration satisfies the reference
    # minimum. Capping each region's rejection run and redrawing the hyper
    # layer on a cap keeps the initializer robust; the slight preference
    # this gives hyper draws with workable orderings is harmless here.
    while True:
        _draw_pooling_hypers(state, hierarchy, rng)
        stuck = False
        for r in st.regions:
            cap = min(budget, REGION_ATTEMPT_CAP)
            used = _sample_region_prevalence(
                state, space, r.id, ref_by_region.get(r.id, []), hierarchy,
                rng, cap)
            budget -= cap if used is None else used
            if used is None:
                stuck = True
                break
        if not stuck:
            break
        if budget <= 0:
            raise InitializationError(
                "rejection budget exhausted sampling prevalences; "
                "review the ordering constraints")

    floor_by_block: dict[tuple[str, str], list] = {}
    for c in constraints.of_type(DiagFloor):
        floor_by_block.setdefault((c.region, c.gender), []).append(c)
    order_by_block: dict[tuple[str, str], list] = {}
    for c in constraints.of_type(DiagOrder):
        order_by_block.setdefault((c.region, c.gender), []).append(c)
    for r in st.regions:
        for gender in st.genders_present():
            key = (r.id, gender)
            budget = _sample_delta_block(
                state, st, r.id, gender,
                floor_by_block.get(key, []), order_by_block.get(key, []),
                rng, budget)

    for i in space.coords_with_role("gamma"):
        c = space.coords[i]
        lo, hi = c.meta["lo"], c.meta["hi"]
        state.gamma[(c.role[1], c.role[2])] = lo + (hi - lo) * _open_unit(rng.uniform())
    for i in space.coords_with_role("underreport"):
        c = space.coords[i]
        lo, hi = c.meta.get("lo", 0.0), c.meta.get("hi", 1.0)
        state.underreport[c.role[1]] = lo + (hi - lo) * _open_unit(rng.uniform())

    floors = constraints.of_type(GlobalFloor)
    if space.coords_with_role("pi_floor"):
        cap = min((float(state.pi[c.ref_stratum]) for c in floors), default=1.0)
        state.pi_floor_wst = cap * _open_unit(rng.uniform())

    for b in space.optout_blocks:
        if b.opt_outs is None:
            state.optout_frac[b.id] = _open_unit(rng.uniform())
    for b in space.optout_blocks:
        s = st.stratum_index(b.region, b.group, b.gender)
        count = space.optout_count(b, state)
        c_ratio = count / (st.population(b.region, b.gender) * float(state.rho[s]))
        cap = min(1.0, float(state.pi[s]) / c_ratio) if c_ratio > 0 else 1.0
        state.optout_pos[b.id] = cap * _open_unit(rng.uniform())

    slack_by_item = {c.item_id: c for c in constraints.of_type(BoundSlack)}
    for i in space.coords_with_role("theta_aux"):
        item_id = space.coords[i].role[1]
        c = slack_by_item.get(item_id)
        if c is None:
            # slack coordinate without an active bound (filtered-out item)
            state.theta_aux[item_id] = _open_unit(rng.uniform())
            continue
        t = c.target.value(state)
        state.theta_aux[item_id] = (t * _open_unit(rng.uniform())
                                    if c.side == "lower"
                                    else t + (1.0 - t) * _open_unit(rng.uniform()))

    # recompute derived opt-out components through the forward transform and
    # confirm the draw encodes to finite coordinates both before and after:
    # an extreme draw can saturate a probability at exactly 0 or 1, whose
    # log-odds are infinite
    with np.errstate(divide="ignore", invalid="ignore"):
        u = space.from_constrained(state)
        if not np.all(np.isfinite(u)):
            return None, budget - 1
        state = space.to_constrained(u)
        if not np.all(np.isfinite(space.from_constrained(state))):
            return None, budget - 1
    if check_constraints(state, constraints):
        # a clamped auxiliary can land a whisker outside its bound after the
        # round trip; treat it like any other rejected draw
        return None, budget - 1
    return state, budget


def _draw_pooling_hypers(state, hierarchy: HierarchyLayer, rng) -> None:
    if hierarchy.members and hierarchy.enabled:
        state.eta_bar_bar = rng.normal(0.0, hierarchy.mean_prior_sd)
        state.tau = abs(rng.normal(0.0, hierarchy.scale_prior_sd))
        for r in hierarchy.regions:
            state.sigma[r] = abs(rng.normal(0.0, hierarchy.scale_prior_sd))
            state.eta_bar[r] = rng.normal(state.eta_bar_bar, state.tau)


def _sample_region_prevalence(state, space, region, ref_constraints, hierarchy,
                              rng, cap):
    """Draw the region's offsets and prevalences jointly until ordered.

    The male/female log-odds offsets are redrawn with the prevalences on
    every attempt; leaving them fixed can trap the rejection loop, since a
    heavy-tailed offset draw may make the reference-minimum ordering
    practically unsatisfiable for any prevalence configuration.

    Returns the number of attempts used, or None once cap is exhausted.
    """
    idxs = ([i for i in space.coords_with_role("pi_f")
             if space.coords[i].role[1] == region]
            + [i for i in space.coords_with_role("pi_single")
               if space.coords[i].role[1] == region])
    st = space.structure
    members = [(r, g) for (r, g) in hierarchy.members if r == region]
    for attempt in range(1, cap + 1):
        for (r, g) in members:
            if hierarchy.enabled:
                state.eta[(r, g)] = rng.normal(state.eta_bar[r], state.sigma[r])
            else:
                state.eta[(r, g)] = rng.normal(0.0, hierarchy.mean_prior_sd)
        for i in idxs:
            role = space.coords[i].role
            if role[0] == "pi_f":
                pf = _open_unit(rng.uniform())
                state.pi[st.stratum_index(region, role[2], "f")] = pf
                eta = state.eta[(region, role[2])]
                pm = 1.0 / (1.0 + math.exp(-(math.log(pf / (1.0 - pf)) + eta)))
                state.pi[st.stratum_index(region, role[2], "m")] = pm
            else:
                state.pi[st.stratum_index(region, role[2], role[3])] = _open_unit(
                    rng.uniform())
        if all(c.margin(state) >= 0.0 for c in ref_constraints):
            return attempt
    return None


def _sample_delta_block(state, st, region, gender, floors, orders, rng, budget):
    block = [st.stratum_index(region, g.id, gender)
             for g in st.groups_for_gender(gender)]
    while True:
        if budget <= 0:
            raise InitializationError(
                f"rejection budget exhausted sampling diagnosed fractions in "
                f"{region}:{gender}; review the ordering constraints")
        budget -= 1
        state.delta[block] = np.clip(rng.uniform(size=len(block)),
                                     _OPEN_EPS, 1.0 - _OPEN_EPS)
        ok = all(c.margin(state) >= 0.0 for c in floors)
        ok = ok and all(c.margin(state) >= 0.0 for c in orders)
        if ok:
            return budget


# ---------------------------------------------------------------------------
# constraint construction


def build_constraints(config, space: ParameterSpace, items=None) -> ConstraintSet:
    """Assemble the constraint list implied by a configuration and evidence."""
    st = config.structure
    cs: list = []
    ref = config.reference_group
    if config.reference_is_minimum:
        for r in st.regions:
            for gender in st.genders_present():
                ref_idx = st.stratum_index(r.id, ref, gender)
                for g in st.groups_for_gender(gender):
                    if g.id != ref:
                        cs.append(RefMinimum(r.id, gender, g.id,
                                             st.stratum_index(r.id, g.id, gender),
                                             ref_idx))
    if config.global_prevalence_floor:
        for r in st.regions:
            for gender in st.genders_present():
                cs.append(GlobalFloor(r.id, gender,
                                      st.stratum_index(r.id, ref, gender)))
    if config.sti_delta_floor is not None:
        for r in st.regions:
            for g in st.groups:
                if not g.sti_clinic:
                    continue
                for gender in g.genders:
                    cs.append(DiagFloor(r.id, g.id, gender,
                                        st.stratum_index(r.id, g.id, gender),
                                        config.sti_delta_floor))
    for lo, hi in config.delta_orderings:
        lo_g, hi_g = st.group(lo), st.group(hi)
        for r in st.regions:
            for gender in set(lo_g.genders) & set(hi_g.genders):
                cs.append(DiagOrder(r.id, gender, lo, hi,
                                    st.stratum_index(r.id, lo, gender),
                                    st.stratum_index(r.id, hi, gender)))
    for box in config.boxes:
        cs.append(Box(box["quantity"], box["region"], box["group"], box["gender"],
                      st.stratum_index(box["region"], box["group"], box["gender"]),
                      float(box["lower"]), float(box["upper"])))
    for b in space.optout_blocks:
        cs.append(OptInValidity(b, st.stratum_index(b.region, b.group, b.gender),
                                st.population(b.region, b.gender)))
    if items is not None:
        for it in items:
            if it.bias == "lower":
                cs.append(BoundSlack(it.id, "lower", it.target))
            elif it.bias == "upper":
                cs.append(BoundSlack(it.id, "upper", it.target))
    # the ordering graph must stay a partial order
    _check_acyclic(config.delta_orderings)
    return ConstraintSet(cs)


def _check_acyclic(orderings):
    edges = {}
    for lo, hi in orderings:
        edges.setdefault(lo, set()).add(hi)
    seen_global = set()
    for start in list(edges):
        stack, path = [(start, iter(edges.get(start, ())))], {start}
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                path.discard(node)
                seen_global.add(node)
                stack.pop()
            elif nxt in path:
                raise ConfigurationError(
                    f"delta orderings contain a cycle through {nxt!r}")
            elif nxt not in seen_global:
                path.add(nxt)
                stack.append((nxt, iter(edges.get(nxt, ()))))


def build_hierarchy(config) -> HierarchyLayer:
    st = config.structure
    members = [(r.id, g.id) for r in st.regions for g in st.two_gender_groups()]
    return HierarchyLayer(
        enabled=config.hierarchy_enabled and bool(members),
        members=members,
        regions=[r.id for r in st.regions],
        mean_prior_sd=config.hierarchy_mean_prior_sd,
        scale_prior_sd=config.hierarchy_scale_prior_sd,
    )
