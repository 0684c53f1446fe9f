"""Compiled posterior: fast incremental evaluation for the sampler.

The reference evaluation path (full_eval) rebuilds everything from the
unconstrained vector. The chain runner keeps per-item log-likelihoods,
constraint margins, prior terms and Jacobian pieces cached, and on each
proposal refreshes only the pieces that the updated coordinate can touch.
Dependencies are discovered by probing: each update unit is perturbed at a
few valid points and anything whose value moves is registered as dependent.
Chains periodically resynchronize against full_eval, which both removes
floating-point drift and asserts that the incremental bookkeeping agrees
with the reference path.
"""

from __future__ import annotations

import math

import numpy as np

from . import evidence as ev
from .priors import (BoundSlack, Box, ConstraintSet, DiagFloor, DiagOrder,
                     GlobalFloor, HierarchyLayer, OptInValidity, RefMinimum,
                     check_constraints, log_prior_parts, sample_from_prior)
from .sampler import AdaptiveWalker, UpdateUnit
from .space import BasicState, ParameterSpace, _expit_scalar
from .strata import ConfigurationError

NEG_INF = -math.inf
RESYNC_EVERY = 1000  # sweeps between full-recompute consistency checks
RESYNC_TOL = 1e-6


def alr_shares(u_block: np.ndarray) -> np.ndarray:
    """Simplex shares from additive-log-ratio coordinates, reference last."""
    m = max(0.0, float(np.max(u_block))) if len(u_block) else 0.0
    e = np.exp(u_block - m)
    ref = math.exp(-m)
    tot = float(e.sum()) + ref
    out = np.empty(len(u_block) + 1)
    out[:-1] = e / tot
    out[-1] = ref / tot
    return out


class FullEval:
    __slots__ = ("state", "ll", "margins_bad", "prior", "jac", "logpost")

    def __init__(self, state, ll, margins_bad, prior, jac):
        self.state = state
        self.ll = ll
        self.margins_bad = margins_bad
        self.prior = prior
        self.jac = jac
        ll_tot = float(ll.sum())
        if margins_bad > 0 or not math.isfinite(ll_tot) or not math.isfinite(jac):
            self.logpost = NEG_INF
        else:
            self.logpost = ll_tot + prior + jac


class CompiledModel:
    """Posterior over a parameter space, a set of items and constraints."""

    def __init__(self, config, items, space: ParameterSpace | None = None,
                 constraints: ConstraintSet | None = None,
                 hierarchy: HierarchyLayer | None = None):
        from .priors import build_constraints, build_hierarchy

        self.config = config
        self.items = list(items)
        self.space = space if space is not None else _space_for(config, items)
        self.constraints = (constraints if constraints is not None
                            else build_constraints(config, self.space, self.items))
        self.hierarchy = (hierarchy if hierarchy is not None
                          else build_hierarchy(config))
        self.structure = self.space.structure
        self.dim = self.space.dim
        self.coord_names = list(self.space.names)

        st = self.structure
        self.pop = np.array([st.population(s.region, s.gender)
                             for s in st.strata], dtype=float)
        # registry scopes: one per region x gender
        self.scopes = [(r.id, g) for r in st.regions for g in st.genders_present()]
        scope_of = {}
        for k, (rid, g) in enumerate(self.scopes):
            for s in st.strata_of_region(rid, g):
                scope_of[s] = k
        self.scope_of = np.array([scope_of[i] for i in range(st.n_strata)])
        self._channel_strata = self._channels_by_stratum()
        # per opt-out block: (block, stratum index, gender population)
        self.block_info = {
            b.id: (b, st.stratum_index(b.region, b.group, b.gender),
                   float(st.population(b.region, b.gender)))
            for b in self.space.optout_blocks}
        self.blocks_by_stratum: dict[int, list] = {}
        for b in self.space.optout_blocks:
            s = st.stratum_index(b.region, b.group, b.gender)
            self.blocks_by_stratum.setdefault(s, []).append(b)
        self._prior_terms = self._build_prior_terms()
        self._units = self._build_units()
        self._probe_dependencies()
        self._anchors = self._crude_anchors()
        self._anchor_bracketed_params()

    # -- construction -------------------------------------------------------

    def _channels_by_stratum(self):
        chan = ev.channel_for_stratum(self.config)
        by_channel: dict[str, list[int]] = {}
        for s, ch in enumerate(chan):
            if ch is not None:
                by_channel.setdefault(ch, []).append(s)
        return chan, by_channel

    def _build_prior_terms(self):
        """Closures over BasicState, one per non-constant prior density piece."""
        h = self.hierarchy
        terms = []
        if h.members:
            if h.enabled:
                for (r, g) in h.members:
                    terms.append((f"pool_eta[{r},{g}]",
                                  lambda st, r=r, g=g: _norm_lp(
                                      st.eta[(r, g)], st.eta_bar[r], st.sigma[r])))
                for r in h.regions:
                    terms.append((f"pool_mean[{r}]",
                                  lambda st, r=r: _norm_lp(
                                      st.eta_bar[r], st.eta_bar_bar, st.tau)))
                terms.append(("pool_grand_mean",
                              lambda st: _norm_lp(st.eta_bar_bar, 0.0,
                                                  h.mean_prior_sd)))
                for r in h.regions:
                    terms.append((f"pool_scale[{r}]",
                                  lambda st, r=r: _half_norm_lp(
                                      st.sigma[r], h.scale_prior_sd)))
                terms.append(("pool_scale_grand",
                              lambda st: _half_norm_lp(st.tau, h.scale_prior_sd)))
            else:
                for (r, g) in h.members:
                    terms.append((f"vague_eta[{r},{g}]",
                                  lambda st, r=r, g=g: _norm_lp(
                                      st.eta[(r, g)], 0.0, h.mean_prior_sd)))
        return terms

    def _build_units(self):
        """Update units: one per free coordinate, simplex blocks merged."""
        space = self.space
        units: list[UpdateUnit] = []
        seen_blocks = set()
        for i, c in enumerate(space.coords):
            if c.kind == "alr":
                key = (c.role[1], c.role[2])
                if key in seen_blocks:
                    continue
                seen_blocks.add(key)
                idxs = tuple(space.alr_blocks[key])
                units.append(UpdateUnit(
                    name=f"size_block[{key[0]},{key[1]}]",
                    coord_idx=idxs, role=("rho_block",) + key,
                    target_accept=0.25, init_scale=0.25, aux=idxs))
                block_slot = len(units) - 1
                # scalar companions: the joint move handles correlated
                # directions, but one shared step size cannot serve shares
                # whose conditional widths differ by orders of magnitude,
                # and the loosest ones freeze without these
                for k in idxs:
                    units.append(UpdateUnit(
                        name=space.coords[k].name, coord_idx=(k,),
                        role=("rho_coord",) + key, target_accept=0.44,
                        init_scale=0.5, aux=idxs, jac_slot=block_slot))
            else:
                aux = None
                if c.role[0] == "eta":
                    aux = space.index(f"prev_f[{c.role[1]},{c.role[2]}]")
                units.append(UpdateUnit(
                    name=c.name, coord_idx=(i,), role=c.role,
                    target_accept=0.44, init_scale=0.5, aux=aux))
        return units

    @property
    def units(self):
        return self._units

    def _probe_dependencies(self):
        """Record, per unit, which items / margins / prior terms it can move."""
        n_items = len(self.items)
        n_marg = len(self.constraints.constraints)
        n_prior = len(self._prior_terms)
        dep_items = [set() for _ in self._units]
        dep_marg = [set() for _ in self._units]
        dep_prior = [set() for _ in self._units]

        for probe, eps in ((0, 0.31), (1, 0.05), (2, 1.13)):
            state0 = sample_from_prior(self.space, self.constraints,
                                       self.hierarchy, seed=9000 + probe)
            u0 = self.space.from_constrained(state0)
            base = self.full_eval(u0)
            base_marg = self._margin_vector(base.state)
            base_prior = self._prior_vector(base.state)
            for j, unit in enumerate(self._units):
                u1 = u0.copy()
                for k in unit.coord_idx:
                    u1[k] += eps
                trial = self.full_eval(u1)
                t_marg = self._margin_vector(trial.state)
                t_prior = self._prior_vector(trial.state)
                dep_items[j].update(np.nonzero(trial.ll != base.ll)[0].tolist())
                dep_marg[j].update(np.nonzero(t_marg != base_marg)[0].tolist())
                dep_prior[j].update(np.nonzero(t_prior != base_prior)[0].tolist())

        # registry items depend on every coordinate that can move any
        # expected count in their scope; make that structural, not probed
        registry_idx = [i for i, it in enumerate(self.items)
                        if isinstance(it.target, (ev.DiagnosedShare,
                                                  ev.DiagnosedTotal))]
        for j, unit in enumerate(self._units):
            if unit.role[0] in ("rho_block", "rho_coord", "pi_f", "pi_single",
                                "eta", "delta", "underreport"):
                dep_items[j].update(registry_idx)
        for j, unit in enumerate(self._units):
            unit.items = tuple(sorted(dep_items[j]))
            unit.margins = tuple(sorted(dep_marg[j]))
            unit.priors = tuple(sorted(dep_prior[j]))
        assert all(len(u.items) <= n_items and len(u.margins) <= n_marg
                   and len(u.priors) <= n_prior for u in self._units)

    # -- reference evaluation -----------------------------------------------

    def full_eval(self, u: np.ndarray) -> FullEval:
        state = self.space.to_constrained(u)
        ll = np.array([ev.loglik_item(it, state) for it in self.items])
        bad = len(check_constraints(state, self.constraints))
        prior = float(sum(log_prior_parts(state, self.hierarchy,
                                          self.space).values()))
        jac = self.space.log_jacobian(u, state)
        return FullEval(state, ll, bad, prior, jac)

    def logpost(self, u: np.ndarray) -> float:
        return self.full_eval(u).logpost

    def _margin_vector(self, state):
        return np.array([c.margin(state) for c in self.constraints])

    def _prior_vector(self, state):
        return np.array([f(state) for _, f in self._prior_terms])

    # -- chain initialization ---------------------------------------------------

    def _crude_anchors(self):
        """Pooled x/n estimates from exact single-parameter count items.

        Registry totals and vague priors leave a random prior draw a very
        long burn-in away from the posterior bulk, so chains start from the
        evidence instead: any parameter observed by a plain count item is
        anchored at its pooled empirical fraction (half-count smoothed),
        and everything else keeps its prior draw.
        """
        xn: dict[str, dict] = {"rho": {}, "pi": {}, "delta": {}, "aux": {},
                               "legal": {}, "optfrac": {}}
        for it in self.items:
            k = it.kind
            if not isinstance(k, ev.BinomialCount):
                continue
            if it.bias != "exact":
                xn["aux"].setdefault(it.id, []).append((k.x, k.n))
                continue
            t = it.target
            if isinstance(t, ev.SizeShare) and len(t.strata) == 1:
                xn["rho"].setdefault(t.strata[0], []).append((k.x, k.n))
            elif isinstance(t, (ev.Prevalence, ev.OptInPrevalence)):
                xn["pi"].setdefault(t.stratum, []).append((k.x, k.n))
            elif isinstance(t, ev.DiagnosedFraction):
                xn["delta"].setdefault(t.stratum, []).append((k.x, k.n))
            elif isinstance(t, ev.LegalMigrantSize):
                key = (t.region, t.ethnicity, t.sti_stratum, t.nonsti_stratum)
                xn["legal"].setdefault(key, []).append((k.x, k.n))
            elif isinstance(t, ev.OptOutFraction):
                xn["optfrac"].setdefault(t.block_id, []).append((k.x, k.n))

        def pool(pairs):
            x = sum(p[0] for p in pairs)
            n = sum(p[1] for p in pairs)
            return (x + 0.5) / (n + 1.0)

        return {kind: {key: pool(v) for key, v in d.items()}
                for kind, d in xn.items()}

    def _anchor_bracketed_params(self) -> None:
        """Anchor parameters observed only through bracketing items.

        Such a parameter has no exact count of its own, so it is placed
        inside the bracket its slack variables imply.
        """
        table = self._anchors
        aux_a = table["aux"]
        by_param: dict[tuple, dict] = {}
        for c in self.constraints.constraints:
            if not isinstance(c, BoundSlack) or c.item_id not in aux_a:
                continue
            t = c.target
            if isinstance(t, ev.Prevalence):
                key = ("pi", t.stratum)
            elif isinstance(t, ev.DiagnosedFraction):
                key = ("delta", t.stratum)
            elif isinstance(t, ev.SizeShare) and len(t.strata) == 1:
                key = ("rho", t.strata[0])
            else:
                continue
            d = by_param.setdefault(key, {"lower": [], "upper": []})
            d[c.side].append(c.item_id)
        for (kind, s), d in by_param.items():
            if table[kind].get(s) is not None:
                continue
            lows = [aux_a[i] for i in d["lower"]]
            highs = [aux_a[i] for i in d["upper"]]
            if lows and highs:
                p = 0.5 * (max(lows) + min(highs))
            elif highs:
                p = 0.7 * min(highs)
            else:
                p = max(lows) + 0.3 * (1.0 - max(lows))
            table[kind][s] = p
        # a legal-count item observes gamma * (sti + non-sti size) with
        # gamma confined to a narrow box, so it brackets the pair sum;
        # anchor the unobserved non-sti share through the box midpoint
        gamma_mid = {}
        for c in self.space.coords:
            if c.role[0] == "gamma":
                gamma_mid[(c.role[1], c.role[2])] = \
                    0.5 * (c.meta["lo"] + c.meta["hi"])
        for (region, eth, s_sti, s_non), frac in table["legal"].items():
            mid = gamma_mid.get((region, eth))
            if mid is None or s_non in table["rho"] or s_sti not in table["rho"]:
                continue
            table["rho"][s_non] = max(frac / mid - table["rho"][s_sti], 1e-5)

    def _anchored_u(self, u: np.ndarray, state, rng=None,
                    jitter_sd: float = 0.0) -> np.ndarray:
        """Unconstrained start point with anchored coordinates written in.

        Dispersion is injected here, at the anchor level, not on the
        finished vector: every quantity that must sit on a given side of
        another (reference prevalences, the shared floor, opt-out
        positivity rates, diagnosis orderings, the slacks of bracketing
        items) is derived from the already-jittered values it is compared
        with, so the start stays inside the support at any jitter size.
        """
        from .space import logit

        A = self._anchors
        st = self.structure
        space = self.space
        out = u.copy()

        def jit(scale: float = 1.0) -> float:
            if jitter_sd <= 0.0 or rng is None:
                return 0.0
            return float(rng.normal(0.0, scale * jitter_sd))

        z_pi = {s: float(logit(p)) + jit() for s, p in A["pi"].items()}
        z_de = {s: float(logit(p)) + jit() for s, p in A["delta"].items()}

        def pi_of(s: int) -> float:
            return _expit_scalar(z_pi[s]) if s in z_pi else float(state.pi[s])

        # clinic floors and diagnosis orderings push anchored fractions up
        for c in self.constraints.of_type(DiagFloor):
            if c.stratum in z_de:
                z_de[c.stratum] = max(z_de[c.stratum],
                                      float(logit(c.floor)) + 0.1)
        orders = self.constraints.of_type(DiagOrder)
        for _ in range(2):
            for c in orders:
                if c.lo_stratum not in z_de and c.hi_stratum not in z_de:
                    continue
                lo_z = z_de.get(c.lo_stratum, float(
                    logit(float(state.delta[c.lo_stratum]))))
                hi_z = z_de.get(c.hi_stratum, float(
                    logit(float(state.delta[c.hi_stratum]))))
                if hi_z < lo_z + 0.05:
                    z_de[c.hi_stratum] = lo_z + 0.05
        for c in self.constraints.of_type(Box):
            tbl = {"pi": z_pi, "delta": z_de}.get(c.quantity)
            if tbl is None or c.stratum not in tbl:
                continue
            pad = 0.02 * (c.upper - c.lower)
            v = min(max(_expit_scalar(tbl[c.stratum]), c.lower + pad),
                    c.upper - pad)
            tbl[c.stratum] = float(logit(v))

        # references below the groups ranked above them, floor below that
        ref_groups: dict[int, list[float]] = {}
        for c in self.constraints.of_type(RefMinimum):
            ref_groups.setdefault(c.ref_stratum, []).append(pi_of(c.stratum))
        for rs, vals in ref_groups.items():
            cap = min(0.9 * min(vals), pi_of(rs))
            v = 0.8 * min(vals) * math.exp(jit(0.5))
            z_pi[rs] = float(logit(min(v, cap)))
        floor_caps = [pi_of(c.ref_stratum)
                      for c in self.constraints.of_type(GlobalFloor)]
        floor_val = (min(0.5 * min(floor_caps), float(state.pi_floor_wst))
                     if floor_caps else None)
        pos_a = {}
        for c in self.constraints.of_type(OptInValidity):
            if c.stratum in z_pi:
                pos_a[c.block.id] = 0.5 * _expit_scalar(z_pi[c.stratum])

        # simplex blocks: pin anchored shares, rescale the rest to fit
        rho_final = {s: float(state.rho[s]) for s in range(st.n_strata)}
        for (region, gender), idxs in space.alr_blocks.items():
            block = st.simplex_block(region, gender)
            hit = {s: A["rho"][s] * math.exp(jit()) for s in block
                   if s in A["rho"]}
            if not hit:
                continue
            fixed = sum(hit.values())
            if fixed >= 0.9:
                continue
            shares = np.array([state.rho[s] for s in block])
            free = [i for i, s in enumerate(block) if s not in hit]
            scale = (1.0 - fixed) / sum(shares[i] for i in free)
            for i, s in enumerate(block):
                shares[i] = hit[s] if s in hit else shares[i] * scale
                rho_final[s] = float(shares[i])
            out[list(idxs)] = np.log(shares[:-1] / shares[-1])
        # legal-count items pin the product gamma * (sti + non-sti size)
        gamma_a: dict[tuple, list] = {}
        for (region, eth, s_sti, s_non), frac in A["legal"].items():
            pair = max(rho_final[s_sti] + rho_final[s_non], 1e-12)
            gamma_a.setdefault((region, eth), []).append(frac / pair)
        gamma_v = {k: float(np.mean(v)) for k, v in gamma_a.items()}

        for i, c in enumerate(space.coords):
            role = c.role
            if role[0] == "gamma":
                key = (role[1], role[2])
                if key in gamma_v:
                    lo, hi = c.meta["lo"], c.meta["hi"]
                    pad = 0.02 * (hi - lo)
                    g = min(max(gamma_v[key], lo + pad), hi - pad)
                    out[i] = float(logit((g - lo) / (hi - lo)))
            elif role[0] == "pi_f":
                s = st.stratum_index(role[1], role[2], "f")
                if s in z_pi:
                    out[i] = z_pi[s]
            elif role[0] == "pi_single":
                s = st.stratum_index(role[1], role[2], role[3])
                if s in z_pi:
                    out[i] = z_pi[s]
            elif role[0] == "delta":
                s = st.stratum_index(role[1], role[2], role[3])
                if s in z_de:
                    out[i] = z_de[s]
            elif role[0] == "optout_pos":
                if role[1] in pos_a:
                    out[i] = float(logit(pos_a[role[1]]))
            elif role[0] == "optout_frac":
                if role[1] in A["optfrac"]:
                    out[i] = float(logit(A["optfrac"][role[1]])) + jit()
            elif role[0] == "pi_floor":
                if floor_val is not None:
                    out[i] = float(logit(floor_val))
        # offsets after the female coordinates they are relative to
        for i in space.coords_with_role("eta"):
            c = space.coords[i]
            sm = st.stratum_index(c.role[1], c.role[2], "m")
            if sm in z_pi:
                fi = space.index(f"prev_f[{c.role[1]},{c.role[2]}]")
                out[i] = z_pi[sm] - out[fi]
        # pooling hypers centered on the offsets they pool; a prior-drawn
        # near-zero scale against anchored offsets is a quadratic cliff
        if self.hierarchy.enabled:
            reg_etas: dict[str, list[float]] = {}
            for i in space.coords_with_role("eta"):
                reg = space.coords[i].role[1]
                reg_etas.setdefault(reg, []).append(float(out[i]))
            if reg_etas:
                bar = {r: float(np.mean(v)) for r, v in reg_etas.items()}
                for i, c in enumerate(space.coords):
                    role = c.role
                    if role[0] == "eta_bar" and role[1] in bar:
                        out[i] = bar[role[1]]
                    elif role[0] == "sigma" and role[1] in reg_etas:
                        out[i] = math.log(
                            max(0.3, float(np.std(reg_etas[role[1]]))))
                    elif role[0] == "eta_bar_bar":
                        out[i] = float(np.mean(list(bar.values())))
                    elif role[0] == "tau":
                        out[i] = math.log(0.5)
        # slacks of bracketing items go clear of their targets last; a
        # target can be an aggregate over strata, so evaluate it on the
        # provisionally decoded start rather than from single anchors
        z_aux = {i: float(logit(a)) + jit() for i, a in A["aux"].items()}
        if z_aux:
            try:
                prov = space.to_constrained(out)
            except FloatingPointError:
                prov = None
            if prov is not None:
                for c in self.constraints.of_type(BoundSlack):
                    if c.item_id not in z_aux:
                        continue
                    t = float(c.target.value(prov))
                    zt = float(logit(min(max(t, 1e-9), 1.0 - 1e-9)))
                    if c.side == "lower":
                        z_aux[c.item_id] = min(z_aux[c.item_id], zt - 0.15)
                    else:
                        z_aux[c.item_id] = max(z_aux[c.item_id], zt + 0.15)
            for i in space.coords_with_role("theta_aux"):
                iid = space.coords[i].role[1]
                if iid in z_aux:
                    out[i] = z_aux[iid]
        return out

    # -- chain protocol -------------------------------------------------------

    def initial_u(self, rng) -> np.ndarray:
        """Evidence-anchored start, falling back to the pure prior draw.

        Candidates are built at decreasing jitter levels. Any constraint a
        candidate still violates is repaired locally, reverting the
        coordinates that constraint can see to the prior draw, whose
        margins all hold. The most dispersed candidate whose log posterior
        is not far below the best one wins, so a repair that sacrificed
        anchored structure never displaces a cleaner start.
        """
        state = sample_from_prior(self.space, self.constraints, self.hierarchy,
                                  seed=rng)
        u = self.space.from_constrained(state)
        if not any(self._anchors[k] for k in ("rho", "pi", "delta", "aux")):
            return u
        involved: dict[str, set[int]] = {}
        for unit in self._units:
            for ci in unit.margins:
                cid = self.constraints.constraints[ci].id
                involved.setdefault(cid, set()).update(unit.coord_idx)

        def repair(cand: np.ndarray) -> float | None:
            for _ in range(6):
                try:
                    cand_state = self.space.to_constrained(cand)
                except FloatingPointError:
                    return None
                viols = check_constraints(cand_state, self.constraints)
                if not viols:
                    lp = self.full_eval(cand).logpost
                    return lp if math.isfinite(lp) else None
                coords: set[int] = set()
                for cid, _margin in viols:
                    coords.update(involved.get(cid, ()))
                if not coords:
                    return None
                for k in coords:
                    cand[k] = u[k]
            return None

        found = []
        for jitter_sd in (0.25, 0.1, 0.0):
            cand = self._anchored_u(u, state, rng, jitter_sd)
            lp = repair(cand)
            if lp is not None:
                found.append((lp, cand))
        if not found:
            return u
        best = max(lp for lp, _ in found)
        for lp, cand in found:
            if lp >= best - 5000.0:
                return cand
        return u

    def new_runner(self, u0: np.ndarray, rng) -> "_ModelChain":
        return _ModelChain(self, u0, rng)

    def decode_draws(self, draws: np.ndarray) -> dict[str, np.ndarray]:
        """Vectorized basic-parameter arrays for a [draws, dim] matrix."""
        space = self.space
        st = self.structure
        T = draws.shape[0]
        S = st.n_strata
        rho = np.empty((T, S))
        pi = np.empty((T, S))
        delta = np.empty((T, S))
        for (region, gender), idxs in space.alr_blocks.items():
            block = st.simplex_block(region, gender)
            e = np.exp(draws[:, idxs])
            tot = 1.0 + e.sum(axis=1)
            rho[:, block[:-1]] = e / tot[:, None]
            rho[:, block[-1]] = 1.0 / tot
        for region, gender, block in st.simplex_blocks():
            if len(block) == 1:
                rho[:, block[0]] = 1.0
        eta_u = {}
        for i in space.coords_with_role("eta"):
            c = space.coords[i]
            eta_u[(c.role[1], c.role[2])] = draws[:, i]
        from .space import expit
        for i, c in enumerate(space.coords):
            role = c.role
            if role[0] == "pi_f":
                pi[:, st.stratum_index(role[1], role[2], "f")] = expit(draws[:, i])
                pi[:, st.stratum_index(role[1], role[2], "m")] = expit(
                    draws[:, i] + eta_u[(role[1], role[2])])
            elif role[0] == "pi_single":
                pi[:, st.stratum_index(role[1], role[2], role[3])] = expit(draws[:, i])
            elif role[0] == "delta":
                delta[:, st.stratum_index(role[1], role[2], role[3])] = expit(draws[:, i])
        return {"rho": rho, "pi": pi, "delta": delta,
                "mu": rho * pi * delta * self.pop[None, :]}

    def with_items_filter(self, which: str) -> "CompiledModel":
        """Same space and priors, restricted to direct or indirect items."""
        if which == "all":
            return self
        if which not in ("direct", "indirect"):
            raise ConfigurationError(f"unknown evidence filter {which!r}")
        subset = [it for it in self.items if it.direct == (which == "direct")]
        if not subset:
            raise ConfigurationError(f"evidence filter {which!r} leaves no items")
        return CompiledModel(self.config, subset, space=self.space,
                             hierarchy=self.hierarchy)


def _space_for(config, items):
    from .space import build_parameter_space
    return build_parameter_space(config, items)


def _norm_lp(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * (math.log(2.0 * math.pi) + z * z) - math.log(sd)


def _half_norm_lp(x, sd):
    if x <= 0.0:
        return NEG_INF
    return math.log(2.0) + _norm_lp(x, 0.0, sd)


# ---------------------------------------------------------------------------
# incremental chain


class _ModelChain(AdaptiveWalker):
    """One MCMC chain over a CompiledModel with cached partial evaluations."""

    def __init__(self, model: CompiledModel, u0: np.ndarray, rng):
        super().__init__(model.units, rng)
        self.model = model
        self.space = model.space
        self.u = np.array(u0, dtype=float)
        self._fast_eval = [self._make_item_eval(it) for it in model.items]
        self._sweeps_since_resync = 0
        self._load(model.full_eval(self.u))
        if self.logpost == NEG_INF:
            raise RuntimeError("chain initialized at a zero-density state")

    def _load(self, fe: FullEval):
        m = self.model
        self.state = fe.state
        st = self.state
        self.mu = m.pop * st.rho * st.pi * st.delta
        chan, _ = m._channel_strata
        self.beta = np.array([st.underreport[c] if c is not None else 1.0
                              for c in chan])
        self.bmu = self.beta * self.mu
        self.reg_tot = np.zeros(len(m.scopes))
        np.add.at(self.reg_tot, m.scope_of, self.bmu)
        self.ll = fe.ll.copy()
        self.ll_tot = float(self.ll.sum())
        self.margins = m._margin_vector(st)
        self.n_bad = fe.margins_bad
        self.prior_vec = m._prior_vector(st)
        self.prior_tot = float(self.prior_vec.sum()) + self._const_prior()
        self.jac = self._jac_vector()
        self.jac_tot = float(self.jac.sum())

    def _const_prior(self):
        # box widths of scaled-logit coordinates (flat priors over boxes)
        tot = 0.0
        for c in self.space.coords:
            if c.kind == "scaled_logit":
                tot -= math.log(c.meta["hi"] - c.meta["lo"])
        return tot

    @property
    def logpost(self) -> float:
        if self.n_bad > 0:
            return NEG_INF
        return self.ll_tot + self.prior_tot + self.jac_tot

    # -- per-unit Jacobian slots ---------------------------------------------

    def _jac_unit(self, j: int) -> float:
        unit = self.units[j]
        if unit.role[0] == "rho_coord":
            return 0.0  # accounted in the owning block's slot
        if unit.role[0] == "rho_block":
            region, gender = unit.role[1], unit.role[2]
            block = self.model.structure.simplex_block(region, gender)
            shares = self.state.rho[block]
            if np.any(shares <= 0.0):
                return NEG_INF
            return float(np.sum(np.log(shares)))
        total = 0.0
        for k in unit.coord_idx:
            c = self.space.coords[k]
            if c.kind in ("logit", "scaled_logit"):
                p = _expit_scalar(self.u[k])
                if p <= 0.0 or p >= 1.0:
                    return NEG_INF
                total += math.log(p) + math.log1p(-p)
                if c.kind == "scaled_logit":
                    total += math.log(c.meta["hi"] - c.meta["lo"])
            elif c.kind == "log":
                total += float(self.u[k])
        return total

    def _jac_vector(self):
        return np.array([self._jac_unit(j) for j in range(len(self.units))])

    # -- fast item evaluation --------------------------------------------------

    def _make_item_eval(self, item):
        """Item log-likelihood closure over the mutable caches.

        Registry targets read the maintained biased-count sums; everything
        else evaluates its target expression on the live state.
        """
        kind = item.kind
        if isinstance(kind, ev.BinomialCount):
            const = math.lgamma(kind.n + 1) - math.lgamma(kind.x + 1) \
                - math.lgamma(kind.n - kind.x + 1)
            x, nx = kind.x, kind.n - kind.x

            lam_fn = self._make_rate_fn(item)

            def f():
                lam = lam_fn()
                if not 0.0 < lam < 1.0:
                    return NEG_INF
                return const + x * math.log(lam) + nx * math.log1p(-lam)
            return f
        if isinstance(kind, ev.PoissonTotal):
            const = -math.lgamma(kind.m + 1)
            mm = kind.m
            lam_fn = self._make_rate_fn(item)

            def f():
                lam = lam_fn()
                if lam <= 0.0 or not math.isfinite(lam):
                    return NEG_INF
                return mm * math.log(lam) - lam + const
            return f

        def f_generic():
            return ev.loglik_item(item, self.state)
        return f_generic

    def _make_rate_fn(self, item):
        """Scalar closure for the item's expected rate or count.

        These mirror the target expressions but read the chain caches with
        plain indexing; resync asserts they agree with the generic path.
        """
        target = item.target
        if item.bias != "exact":
            key = item.id
            return lambda: self.state.theta_aux[key]
        if isinstance(target, ev.DiagnosedShare):
            members = tuple(s for s, _ in target.members)
            k = int(self.model.scope_of[members[0]])

            def rate():
                tot = self.reg_tot[k]
                if tot <= 0.0:
                    return 0.0
                num = 0.0
                for s in members:
                    num += self.bmu[s]
                return num / tot
            return rate
        if isinstance(target, ev.DiagnosedTotal):
            k = int(self.model.scope_of[target.scope[0][0]])
            return lambda: float(self.reg_tot[k])
        if isinstance(target, ev.SizeShare):
            idx = target.strata
            if len(idx) == 1:
                s0 = idx[0]
                return lambda: self.state.rho[s0]

            def size():
                tot = 0.0
                for s in idx:
                    tot += self.state.rho[s]
                return tot
            return size
        if isinstance(target, ev.Prevalence):
            s0 = target.stratum
            return lambda: self.state.pi[s0]
        if isinstance(target, ev.DiagnosedFraction):
            s0 = target.stratum
            return lambda: self.state.delta[s0]
        if isinstance(target, ev.DiagnosedPrevalence):
            s0 = target.stratum
            return lambda: self.state.pi[s0] * self.state.delta[s0]
        if isinstance(target, ev.OptInPrevalence):
            s0, bid = target.stratum, target.block_id
            return lambda: self.state.pi[s0] - self.state.pi_out[bid]
        if isinstance(target, ev.LegalMigrantSize):
            key = (target.region, target.ethnicity)
            a, b = target.sti_stratum, target.nonsti_stratum
            return lambda: self.state.gamma[key] * (
                self.state.rho[a] + self.state.rho[b])
        if isinstance(target, (ev.ClinicAggregatePrevalence,
                               ev.MixturePrevalence)):
            idx = target.strata

            def agg_pi():
                st = self.state
                mass, inf = 0.0, 0.0
                for s in idx:
                    r = st.rho[s]
                    mass += r
                    inf += r * st.pi[s]
                return inf / mass
            return agg_pi
        if isinstance(target, (ev.ClinicAggregateDiagnosed,
                               ev.MixtureDiagnosed)):
            idx = target.strata

            def agg_delta():
                st = self.state
                inf, diag = 0.0, 0.0
                for s in idx:
                    rp = st.rho[s] * st.pi[s]
                    inf += rp
                    diag += rp * st.delta[s]
                return diag / inf
            return agg_delta
        if isinstance(target, ev.ReportingFraction):
            ch = target.channel
            return lambda: self.state.underreport[ch]
        if isinstance(target, ev.OptOutFraction):
            bid = target.block_id
            return lambda: self.state.optout_frac[bid]
        return lambda: target.value(self.state)

    # -- refresh ------------------------------------------------------------------

    def _set_stratum_mu(self, s: int, trail):
        new_mu = self.model.pop[s] * self.state.rho[s] * self.state.pi[s] \
            * self.state.delta[s]
        new_bmu = self.beta[s] * new_mu
        k = self.model.scope_of[s]
        trail.append((self.mu, s, self.mu[s]))
        trail.append((self.bmu, s, self.bmu[s]))
        trail.append((self.reg_tot, k, self.reg_tot[k]))
        self.reg_tot[k] += new_bmu - self.bmu[s]
        self.mu[s] = new_mu
        self.bmu[s] = new_bmu

    def _refresh_pi_out(self, block, trail):
        b, s, pop = self.model.block_info[block.id]
        state = self.state
        count = (float(b.opt_outs) if b.opt_outs is not None
                 else state.optout_frac[b.id] * b.attendees)
        c_ratio = count / (pop * state.rho[s])
        pos = state.optout_pos[b.id]
        pi = state.pi[s]
        pi_in = (pi - c_ratio * pos) / (1.0 + c_ratio * (1.0 - pos))
        trail.append((state.pi_out, b.id, state.pi_out[b.id]))
        state.pi_out[b.id] = pi - pi_in

    def _blocks_touching(self, strata: set[int]):
        by_stratum = self.model.blocks_by_stratum
        out = []
        for s in strata:
            out.extend(by_stratum.get(s, ()))
        return out

    def _apply_unit(self, j: int, new_vals, trail) -> None:
        """Write new coordinate values and refresh every derived cache."""
        unit = self.units[j]
        state = self.state
        st = self.model.structure
        space = self.space
        idx = unit.coord_idx
        if len(idx) == 1:
            k = idx[0]
            trail.append((self.u, k, self.u[k]))
            self.u[k] = new_vals
        else:
            for pos_i, k in enumerate(idx):
                trail.append((self.u, k, self.u[k]))
                self.u[k] = new_vals[pos_i]
        role = unit.role
        touched: set[int] = set()

        if role[0] in ("rho_block", "rho_coord"):
            region, gender = role[1], role[2]
            block = st.simplex_block(region, gender)
            shares = alr_shares(self.u[list(unit.aux)])
            for s, v in zip(block, shares):
                trail.append((state.rho, s, state.rho[s]))
                state.rho[s] = v
            touched.update(block)
        elif role[0] == "pi_f":
            region, group = role[1], role[2]
            sf = st.stratum_index(region, group, "f")
            sm = st.stratum_index(region, group, "m")
            uf = self.u[unit.coord_idx[0]]
            trail.append((state.pi, sf, state.pi[sf]))
            trail.append((state.pi, sm, state.pi[sm]))
            state.pi[sf] = _expit_scalar(uf)
            state.pi[sm] = _expit_scalar(uf + state.eta[(region, group)])
            touched.update((sf, sm))
        elif role[0] == "pi_single":
            s = st.stratum_index(role[1], role[2], role[3])
            trail.append((state.pi, s, state.pi[s]))
            state.pi[s] = _expit_scalar(self.u[unit.coord_idx[0]])
            touched.add(s)
        elif role[0] == "eta":
            region, group = role[1], role[2]
            sm = st.stratum_index(region, group, "m")
            val = float(self.u[idx[0]])
            trail.append((state.eta, (region, group), state.eta[(region, group)]))
            state.eta[(region, group)] = val
            uf = self.u[unit.aux]
            trail.append((state.pi, sm, state.pi[sm]))
            state.pi[sm] = _expit_scalar(uf + val)
            touched.add(sm)
        elif role[0] == "delta":
            s = st.stratum_index(role[1], role[2], role[3])
            trail.append((state.delta, s, state.delta[s]))
            state.delta[s] = _expit_scalar(self.u[unit.coord_idx[0]])
            touched.add(s)
        elif role[0] == "optout_pos":
            bid = role[1]
            trail.append((state.optout_pos, bid, state.optout_pos[bid]))
            state.optout_pos[bid] = _expit_scalar(self.u[unit.coord_idx[0]])
            self._refresh_pi_out(space.optout_block(bid), trail)
        elif role[0] == "optout_frac":
            bid = role[1]
            trail.append((state.optout_frac, bid, state.optout_frac[bid]))
            state.optout_frac[bid] = _expit_scalar(self.u[unit.coord_idx[0]])
            self._refresh_pi_out(space.optout_block(bid), trail)
        elif role[0] == "gamma":
            c = space.coords[unit.coord_idx[0]]
            key = (role[1], role[2])
            trail.append((state.gamma, key, state.gamma[key]))
            state.gamma[key] = c.meta["lo"] + (c.meta["hi"] - c.meta["lo"]) \
                * _expit_scalar(self.u[unit.coord_idx[0]])
        elif role[0] == "pi_floor":
            trail.append(("attr", "pi_floor_wst", state.pi_floor_wst))
            state.pi_floor_wst = _expit_scalar(self.u[unit.coord_idx[0]])
        elif role[0] == "underreport":
            ch = role[1]
            c = space.coords[unit.coord_idx[0]]
            lo, hi = c.meta.get("lo", 0.0), c.meta.get("hi", 1.0)
            trail.append((state.underreport, ch, state.underreport[ch]))
            state.underreport[ch] = lo + (hi - lo) * _expit_scalar(
                self.u[unit.coord_idx[0]])
            for s in self.model._channel_strata[1].get(ch, ()):
                trail.append((self.beta, s, self.beta[s]))
                self.beta[s] = state.underreport[ch]
                touched.add(s)
        elif role[0] == "eta_bar":
            trail.append((state.eta_bar, role[1], state.eta_bar[role[1]]))
            state.eta_bar[role[1]] = float(self.u[unit.coord_idx[0]])
        elif role[0] == "eta_bar_bar":
            trail.append(("attr", "eta_bar_bar", state.eta_bar_bar))
            state.eta_bar_bar = float(self.u[unit.coord_idx[0]])
        elif role[0] == "sigma":
            trail.append((state.sigma, role[1], state.sigma[role[1]]))
            state.sigma[role[1]] = math.exp(self.u[unit.coord_idx[0]])
        elif role[0] == "tau":
            trail.append(("attr", "tau", state.tau))
            state.tau = math.exp(self.u[unit.coord_idx[0]])
        elif role[0] == "theta_aux":
            trail.append((state.theta_aux, role[1], state.theta_aux[role[1]]))
            state.theta_aux[role[1]] = _expit_scalar(self.u[unit.coord_idx[0]])
        else:
            raise AssertionError(f"unhandled role {role!r}")

        if touched:
            for s in touched:
                self._set_stratum_mu(s, trail)
            for b in self._blocks_touching(touched):
                self._refresh_pi_out(b, trail)

    # -- proposal evaluation (AdaptiveWalker hooks) -----------------------------

    def propose(self, j: int, scale: float):
        idx = self.unit_idx[j]
        if len(idx) == 1:
            return self.u[idx[0]] + self.rng.standard_normal() * scale
        return self.u[idx] + self.rng.standard_normal(len(idx)) * scale

    def try_unit(self, j: int, new_vals) -> tuple[float, list]:
        """Apply the proposal, return (delta logpost, undo trail)."""
        unit = self.units[j]
        trail: list = []
        saved = (self.ll_tot, self.prior_tot, self.jac_tot, self.n_bad)
        trail.append(("totals", None, saved))
        self._apply_unit(j, new_vals, trail)

        d_ll = 0.0
        finite = True
        for i in unit.items:
            old = self.ll[i]
            new = self._fast_eval[i]()
            trail.append((self.ll, i, old))
            self.ll[i] = new
            if new == NEG_INF:
                finite = False
            d_ll += new - old if finite else 0.0
        d_bad = 0
        for ci in unit.margins:
            c = self.model.constraints.constraints[ci]
            old = self.margins[ci]
            new = c.margin(self.state)
            trail.append((self.margins, ci, old))
            self.margins[ci] = new
            old_bad = (old <= 0.0) if c.strict else (old < 0.0)
            new_bad = (new <= 0.0) if c.strict else (new < 0.0)
            d_bad += int(new_bad) - int(old_bad)
        d_prior = 0.0
        for pi_ in unit.priors:
            old = self.prior_vec[pi_]
            new = self.model._prior_terms[pi_][1](self.state)
            trail.append((self.prior_vec, pi_, old))
            self.prior_vec[pi_] = new
            d_prior += new - old
        slot = unit.jac_slot if unit.jac_slot is not None else j
        old_jac = self.jac[slot]
        new_jac = self._jac_unit(slot)
        trail.append((self.jac, slot, old_jac))
        self.jac[slot] = new_jac

        old_logpost = self.ll_tot + self.prior_tot + self.jac_tot \
            if self.n_bad == 0 else NEG_INF
        self.ll_tot += d_ll
        self.prior_tot += d_prior
        self.jac_tot += new_jac - old_jac
        self.n_bad += d_bad
        if (not finite or self.n_bad > 0 or new_jac == NEG_INF
                or not math.isfinite(self.ll_tot)):
            return NEG_INF, trail
        return self.logpost - old_logpost, trail

    def undo(self, trail: list) -> None:
        for container, key, old in reversed(trail):
            if type(container) is str:
                if container == "totals":
                    self.ll_tot, self.prior_tot, self.jac_tot, self.n_bad = old
                else:  # "attr"
                    setattr(self.state, key, old)
            else:
                container[key] = old

    def after_sweep(self) -> None:
        self._sweeps_since_resync += 1
        if self._sweeps_since_resync >= RESYNC_EVERY:
            self.resync()

    def resync(self) -> None:
        """Full recompute; assert the incremental caches kept up."""
        fe = self.model.full_eval(self.u)
        ll_tot = float(fe.ll.sum())
        for name, a, b in (("loglik", self.ll_tot, ll_tot),
                           ("prior", self.prior_tot, fe.prior),
                           ("jacobian", self.jac_tot, fe.jac)):
            if abs(a - b) > RESYNC_TOL * max(1.0, abs(a), abs(b)):
                raise AssertionError(
                    f"incremental {name} drifted: cached {a!r} vs full {b!r}")
        if self.n_bad != fe.margins_bad:
            raise AssertionError("incremental constraint count out of sync")
        self._load(fe)
        self._sweeps_since_resync = 0
