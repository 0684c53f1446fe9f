import math

import numpy as np
import pytest

from mpes.model import CompiledModel, alr_shares
from mpes.priors import check_constraints
from mpes.strata import ConfigurationError

from conftest import make_tiny_config, make_tiny_items


def test_alr_shares_basics():
    u = np.array([0.3, -1.2])
    s = alr_shares(u)
    assert s.shape == (3,)  # reference appended last
    assert math.isclose(float(s.sum()), 1.0, rel_tol=1e-12)
    expect0 = math.exp(0.3) / (math.exp(0.3) + math.exp(-1.2) + 1.0)
    assert math.isclose(float(s[0]), expect0, rel_tol=1e-12)
    # invariance under large shifts (no overflow)
    big = alr_shares(np.array([700.0, 600.0]))
    assert math.isclose(float(big.sum()), 1.0, rel_tol=1e-12)
    assert big[2] >= 0.0


def test_compiled_model_shapes(bundled_model):
    m = bundled_model
    assert m.space.dim == 77
    assert len(m.units) == 79
    assert len(m.items) == 65
    names = [u.name for u in m.units]
    assert len(set(names)) == len(names)
    # every coordinate has a scalar update; simplex coordinates also share
    # a joint block move, so they appear twice
    covered = [i for u in m.units for i in u.coord_idx]
    assert sorted(set(covered)) == list(range(77))
    from collections import Counter
    counts = Counter(covered)
    assert set(counts.values()) == {1, 2}
    doubled = {i for i, c in counts.items() if c == 2}
    assert doubled == {i for u in m.units if u.role[0] == "rho_block"
                       for i in u.coord_idx}


def test_full_eval_consistency(bundled_model):
    rng = np.random.default_rng(5)
    u = bundled_model.initial_u(rng)
    fe = bundled_model.full_eval(u)
    assert fe.margins_bad == 0
    assert math.isfinite(fe.logpost)
    assert fe.ll.shape == (65,)
    assert math.isclose(
        bundled_model.logpost(u), float(fe.ll.sum()) + fe.prior + fe.jac,
        rel_tol=1e-12,
    )


def test_initial_u_satisfies_constraints(bundled_model):
    rng = np.random.default_rng(17)
    for _ in range(5):
        u = bundled_model.initial_u(rng)
        state = bundled_model.space.to_constrained(u)
        assert not check_constraints(state, bundled_model.constraints)


def test_incremental_matches_full_recompute(tiny_model):
    rng = np.random.default_rng(2)
    u0 = tiny_model.initial_u(rng)
    runner = tiny_model.new_runner(u0, rng)
    for _ in range(400):
        runner.sweep(adapt=True)
    fe = tiny_model.full_eval(runner.u)
    assert math.isclose(runner.logpost, fe.logpost, rel_tol=1e-9, abs_tol=1e-9)
    runner.resync()  # must not raise


def test_incremental_matches_full_recompute_bundled(bundled_model):
    rng = np.random.default_rng(3)
    u0 = bundled_model.initial_u(rng)
    runner = bundled_model.new_runner(u0, rng)
    for _ in range(60):
        runner.sweep(adapt=True)
    fe = bundled_model.full_eval(runner.u)
    assert math.isclose(runner.logpost, fe.logpost, rel_tol=1e-8, abs_tol=1e-8)
    runner.resync()


def test_try_unit_undo_restores_state(bundled_model):
    rng = np.random.default_rng(9)
    u0 = bundled_model.initial_u(rng)
    runner = bundled_model.new_runner(u0, rng)
    lp0 = runner.logpost
    u_before = runner.u.copy()
    for j in range(len(bundled_model.units)):
        vals = runner.propose(j, scale=0.3)
        delta, trail = runner.try_unit(j, vals)
        runner.undo(trail)
        assert np.array_equal(runner.u, u_before), j
    assert runner.logpost == lp0
    runner.resync()


def test_accepted_move_changes_logpost(tiny_model):
    rng = np.random.default_rng(21)
    u0 = tiny_model.initial_u(rng)
    runner = tiny_model.new_runner(u0, rng)
    lp0 = runner.logpost
    moved = False
    for j in range(len(tiny_model.units)):
        vals = runner.propose(j, scale=0.1)
        delta, trail = runner.try_unit(j, vals)
        if math.isfinite(delta):
            moved = True
            assert math.isclose(
                runner.logpost, lp0 + delta, rel_tol=1e-9, abs_tol=1e-9
            )
            runner.undo(trail)
        else:
            runner.undo(trail)
    assert moved


def test_decode_draws(bundled_model):
    rng = np.random.default_rng(33)
    draws = np.vstack([bundled_model.initial_u(rng) for _ in range(4)])
    out = bundled_model.decode_draws(draws)
    S = bundled_model.config.structure.n_strata
    for key in ("rho", "pi", "delta", "mu"):
        assert out[key].shape == (4, S)
    # agrees with the scalar transform row by row
    state = bundled_model.space.to_constrained(draws[2])
    assert np.allclose(out["rho"][2], state.rho, rtol=1e-12)
    assert np.allclose(out["pi"][2], state.pi, rtol=1e-12)
    assert np.allclose(out["delta"][2], state.delta, rtol=1e-12)
    pops = np.array([
        bundled_model.config.structure.population(s.region, s.gender)
        for s in bundled_model.config.structure.strata
    ])
    assert np.allclose(
        out["mu"][2], pops * state.rho * state.pi * state.delta, rtol=1e-12
    )


def test_items_filter_partition(bundled_model):
    direct = bundled_model.with_items_filter("direct")
    indirect = bundled_model.with_items_filter("indirect")
    every = bundled_model.with_items_filter("all")
    assert len(direct.items) == 32
    assert len(indirect.items) == 33
    assert len(every.items) == 65
    # "all" is a pass-through, not a copy
    assert every is bundled_model
    # filtered models share the full coordinate space
    assert direct.space is bundled_model.space
    assert direct.space.dim == 77
    # bound-slack constraints of filtered-out items drop away
    assert len(list(direct.constraints)) < len(list(bundled_model.constraints))


def test_items_filter_validation(bundled_model):
    with pytest.raises(ConfigurationError):
        bundled_model.with_items_filter("sideways")


def test_filtered_model_evaluates(bundled_model):
    rng = np.random.default_rng(8)
    direct = bundled_model.with_items_filter("direct")
    u = direct.initial_u(rng)
    fe = direct.full_eval(u)
    assert math.isfinite(fe.logpost)
    assert fe.ll.shape == (32,)


def test_margin_vector_flags_violations(tiny_model):
    rng = np.random.default_rng(4)
    u = tiny_model.initial_u(rng)
    sp = tiny_model.space
    # push the reference prevalence above the high-risk group's
    u2 = u.copy()
    u2[sp.index("prev_f[R,GP]")] = 6.0
    u2[sp.index("prev_f[R,HR]")] = -6.0
    fe = tiny_model.full_eval(u2)
    assert fe.margins_bad > 0
    assert fe.logpost == -math.inf
