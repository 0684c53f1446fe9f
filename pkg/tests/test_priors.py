import math

import numpy as np
import pytest
from scipy import stats

from mpes.priors import (
    BoundSlack,
    Box,
    ConstraintSet,
    DiagFloor,
    DiagOrder,
    GlobalFloor,
    HierarchyLayer,
    InitializationError,
    OptInValidity,
    RefMinimum,
    build_constraints,
    build_hierarchy,
    check_constraints,
    log_prior,
    log_prior_parts,
    sample_from_prior,
)
from mpes.space import BasicState, OptOutBlock, build_parameter_space
from mpes.strata import ConfigurationError, ModelStructure, Region, RiskGroup

from conftest import make_tiny_config, make_tiny_items


def small_state(pi=(0.3, 0.05, 0.2, 0.02), delta=(0.8, 0.5, 0.7, 0.4)):
    st = ModelStructure(
        regions=[Region("R", 10000, 12000)],
        groups=[
            RiskGroup("HR", genders=("m", "f"), rank=1),
            RiskGroup("GP", genders=("m", "f"), rank=2),
        ],
        reference_group="GP",
    )
    # strata: HR:m, GP:m, HR:f, GP:f
    return st, BasicState(
        st,
        rho=np.array([0.1, 0.9, 0.2, 0.8]),
        pi=np.array(pi, dtype=float),
        delta=np.array(delta, dtype=float),
    )


# -- constraint margins ------------------------------------------------------


def test_ref_minimum_margin():
    st, state = small_state()
    c = RefMinimum("R", "m", "HR", stratum=0, ref_stratum=1)
    assert math.isclose(c.margin(state), 0.3 - 0.05, rel_tol=1e-12)
    state.pi[0] = 0.01
    assert c.margin(state) < 0.0


def test_global_floor_margin():
    st, state = small_state()
    state.pi_floor_wst = 0.01
    c = GlobalFloor("R", "m", ref_stratum=1)
    assert math.isclose(c.margin(state), 0.05 - 0.01, rel_tol=1e-12)


def test_diag_floor_and_order_margins():
    st, state = small_state()
    f = DiagFloor("R", "HR", "m", stratum=0, floor=0.2)
    assert math.isclose(f.margin(state), 0.8 - 0.2, rel_tol=1e-12)
    o = DiagOrder("R", "m", "GP", "HR", lo_stratum=1, hi_stratum=0)
    assert math.isclose(o.margin(state), 0.8 - 0.5, rel_tol=1e-12)


def test_bound_slack_margin_sides():
    st, state = small_state()

    class T:
        def value(self, s):
            return 0.4

    state.theta_aux["it"] = 0.25
    lower = BoundSlack("it", "lower", T())
    upper = BoundSlack("it", "upper", T())
    # lower bias: datum understates, slack must sit at or below the target
    assert math.isclose(lower.margin(state), 0.4 - 0.25, rel_tol=1e-12)
    assert math.isclose(upper.margin(state), 0.25 - 0.4, rel_tol=1e-12)


def test_optin_validity_margin():
    st, state = small_state()
    b = OptOutBlock("blk", "R", "HR", "m", attendees=100, opt_outs=20)
    state.optout_pos["blk"] = 0.5
    c = OptInValidity(b, stratum=0, population=10000)
    ratio = 20 / (10000 * 0.1)
    assert math.isclose(c.margin(state), 0.3 - ratio * 0.5, rel_tol=1e-12)
    assert c.strict


def test_box_margin():
    st, state = small_state()
    c = Box("pi", "R", "HR", "m", stratum=0, lower=0.1, upper=0.35)
    assert math.isclose(c.margin(state), min(0.3 - 0.1, 0.35 - 0.3), rel_tol=1e-12)


def test_strictness_at_zero_margin():
    st, state = small_state(pi=(0.05, 0.05, 0.2, 0.02))
    cs = ConstraintSet([RefMinimum("R", "m", "HR", 0, 1)])
    assert not check_constraints(state, cs)  # ties allowed when not strict
    strict = ConstraintSet([RefMinimum("R", "m", "HR", 0, 1, strict=True)])
    bad = check_constraints(state, strict)
    assert bad and bad[0][0] == "ref_min[R,m,HR]"


# -- log prior ----------------------------------------------------------------


def test_log_prior_minus_inf_iff_violated():
    st, state = small_state()
    hierarchy = HierarchyLayer(enabled=False, members=[], regions=["R"])
    cs = ConstraintSet([RefMinimum("R", "m", "HR", 0, 1)])
    assert math.isfinite(log_prior(state, cs, hierarchy))
    state.pi[0] = 0.001
    assert log_prior(state, cs, hierarchy) == -math.inf


def test_log_prior_parts_pooling_disabled():
    st, state = small_state()
    hierarchy = HierarchyLayer(
        enabled=False, members=[("R", "HR"), ("R", "GP")], regions=["R"],
        mean_prior_sd=10.0,
    )
    state.eta[("R", "HR")] = 0.7
    state.eta[("R", "GP")] = -0.3
    parts = log_prior_parts(state, hierarchy)
    expect = stats.norm.logpdf(0.7, 0, 10) + stats.norm.logpdf(-0.3, 0, 10)
    assert math.isclose(parts["pooled_logodds"], expect, rel_tol=1e-12)
    assert parts["pooled_means"] == 0.0
    assert parts["hyper"] == 0.0


def test_log_prior_parts_pooling_enabled():
    st, state = small_state()
    hierarchy = HierarchyLayer(
        enabled=True, members=[("R", "HR")], regions=["R"],
        mean_prior_sd=10.0, scale_prior_sd=5.0,
    )
    state.eta[("R", "HR")] = 0.7
    state.eta_bar["R"] = 0.2
    state.sigma["R"] = 1.5
    state.eta_bar_bar = -0.1
    state.tau = 2.0
    parts = log_prior_parts(state, hierarchy)
    assert math.isclose(
        parts["pooled_logodds"], stats.norm.logpdf(0.7, 0.2, 1.5), rel_tol=1e-12
    )
    assert math.isclose(
        parts["pooled_means"], stats.norm.logpdf(0.2, -0.1, 2.0), rel_tol=1e-12
    )
    halfnorm = stats.halfnorm(scale=5.0)
    expect_hyper = (
        stats.norm.logpdf(-0.1, 0, 10)
        + halfnorm.logpdf(1.5)
        + halfnorm.logpdf(2.0)
    )
    assert math.isclose(parts["hyper"], expect_hyper, rel_tol=1e-12)


def test_uniform_const_counts_box_widths():
    cfg = make_tiny_config()
    items = make_tiny_items(cfg)
    sp = build_parameter_space(cfg, items)
    st, state = small_state()
    hierarchy = HierarchyLayer(enabled=False, members=[], regions=["R"])
    parts = log_prior_parts(state, hierarchy, sp)
    # tiny space has no scaled-logit coordinates
    assert parts["uniform_const"] == 0.0


def test_uniform_const_bundled(bundled_model):
    st, state = small_state()
    hierarchy = HierarchyLayer(enabled=False, members=[], regions=["R"])
    parts = log_prior_parts(state, hierarchy, bundled_model.space)
    width_sum = 0.0
    for c in bundled_model.space.coords:
        if c.kind == "scaled_logit":
            width_sum -= math.log(c.meta["hi"] - c.meta["lo"])
    assert math.isclose(parts["uniform_const"], width_sum, rel_tol=1e-12)
    assert parts["uniform_const"] != 0.0


# -- constraint construction -----------------------------------------------------


def test_bundled_constraint_census(bundled_model):
    cs = bundled_model.constraints
    counts = {
        RefMinimum: 15, GlobalFloor: 2, DiagFloor: 7, DiagOrder: 9,
        OptInValidity: 7, BoundSlack: 10,
    }
    for cls, n in counts.items():
        assert len(cs.of_type(cls)) == n, cls.__name__
    assert sum(counts.values()) == 50
    assert len(list(cs)) == 50


def test_tiny_constraints(tiny_config, tiny_items, tiny_model):
    cs = tiny_model.constraints
    # one non-reference group per gender, plus the one bound item
    assert len(cs.of_type(RefMinimum)) == 2
    assert len(cs.of_type(BoundSlack)) == 1
    assert len(cs.of_type(GlobalFloor)) == 0
    assert len(list(cs)) == 3


def test_ordering_cycle_rejected():
    cfg = make_tiny_config()
    cfg.delta_orderings = [("HR", "GP"), ("GP", "HR")]
    sp = build_parameter_space(cfg, None)
    with pytest.raises(ConfigurationError, match="cycle"):
        build_constraints(cfg, sp)


def test_build_hierarchy_flags():
    cfg = make_tiny_config()
    h = build_hierarchy(cfg)
    assert not h.enabled  # disabled in the tiny config
    assert h.members == [("R", "HR"), ("R", "GP")]
    cfg2 = make_tiny_config()
    cfg2.hierarchy_enabled = True
    assert build_hierarchy(cfg2).enabled


# -- prior sampling ----------------------------------------------------------------


def test_prior_draws_satisfy_constraints_tiny(tiny_model):
    sp, cs, h = tiny_model.space, tiny_model.constraints, tiny_model.hierarchy
    rng = np.random.default_rng(7)
    for _ in range(300):
        state = sample_from_prior(sp, cs, h, rng)
        assert not check_constraints(state, cs)


def test_prior_draws_satisfy_constraints_bundled(bundled_model):
    sp = bundled_model.space
    cs = bundled_model.constraints
    h = bundled_model.hierarchy
    rng = np.random.default_rng(11)
    for _ in range(60):
        state = sample_from_prior(sp, cs, h, rng)
        assert not check_constraints(state, cs)
        # opt-out decomposition produced valid components
        for bid, pout in state.pi_out.items():
            assert pout >= 0.0


def test_prior_draw_deterministic(bundled_model):
    sp = bundled_model.space
    a = sample_from_prior(sp, bundled_model.constraints, bundled_model.hierarchy, 123)
    b = sample_from_prior(sp, bundled_model.constraints, bundled_model.hierarchy, 123)
    assert np.array_equal(sp.from_constrained(a), sp.from_constrained(b))


def test_prior_rejection_budget_exhausts():
    cfg = make_tiny_config()
    cfg.sti_delta_floor = 1.0  # unattainable: delta < 1 almost surely
    items = make_tiny_items(cfg)
    # mark a group as clinic-recruited so the floor applies
    object.__setattr__(cfg.structure.groups[0], "sti_clinic", True)
    sp = build_parameter_space(cfg, items)
    cs = build_constraints(cfg, sp, items)
    h = build_hierarchy(cfg)
    with pytest.raises(InitializationError, match="budget exhausted"):
        sample_from_prior(sp, cs, h, 5, max_tries=500)
