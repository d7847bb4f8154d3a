import itertools
import math

import numpy as np
import pytest
from conftest import make_collection, planted
from hypothesis import given
from hypothesis import strategies as st
from oracles import exact_loglik, naive_col_update, naive_row_update

from colbisbm.emission import EmissionKind
from colbisbm.network import ModelKind
from colbisbm.simulate import ari
from colbisbm.vem import (
    TAU_FLOOR,
    FitError,
    FitOptions,
    ModelParams,
    SupportPair,
    VariationalState,
    canonicalize,
    check_identifiability,
    e_step,
    elbo,
    fit,
    hard_tau,
    init_spectral,
    m_step,
    map_memberships,
    run_vem,
)

B = EmissionKind.BERNOULLI
KINDS = [ModelKind.IID, ModelKind.PI, ModelKind.RHO, ModelKind.PIRHO, ModelKind.SEP]


def random_state(rng, coll, q1, q2):
    t1 = tuple(rng.dirichlet(np.ones(q1), size=net.n1) for net in coll)
    t2 = tuple(rng.dirichlet(np.ones(q2), size=net.n2) for net in coll)
    return VariationalState(t1, t2)


# --- support pairs --------------------------------------------------------


def test_support_admissibility():
    assert SupportPair.full(2, 3, 2).is_admissible()
    assert not SupportPair(np.array([[1, 0], [1, 0]]), np.ones((2, 2))).is_admissible()
    assert not SupportPair(np.array([[0, 0], [1, 1]]), np.ones((2, 2))).is_admissible()
    with pytest.raises(ValueError):
        SupportPair(np.array([[1, 0], [0, 1]]), np.ones((2, 2))).validate(ModelKind.IID)
    SupportPair(np.array([[1, 0], [0, 1]]), np.ones((2, 2))).validate(ModelKind.PI)
    with pytest.raises(ValueError):
        SupportPair(np.ones((2, 2)), np.array([[1, 0], [0, 1]])).validate(ModelKind.PI)


# --- E-step ------------------------------------------------------------------


@pytest.mark.parametrize("masked", [False, True])
def test_e_step_matches_scalar_loop(masked):
    x = np.array([[1, 0, 1], [0, 0, 1], [1, 1, 0]])
    mask = np.array([[1, 1, 0], [1, 1, 1], [1, 0, 1]], bool) if masked else None
    coll = make_collection([x], masks=[mask])
    alpha = np.array([[0.8, 0.3], [0.2, 0.6]])
    params = ModelParams(np.array([[0.4, 0.6]]), np.array([[0.7, 0.3]]), alpha, ModelKind.IID, B)
    t1 = np.array([[0.6, 0.4], [0.3, 0.7], [0.5, 0.5]])
    t2 = np.array([[0.9, 0.1], [0.2, 0.8], [0.4, 0.6]])
    out = e_step(coll, params, VariationalState((t1,), (t2,)), max_inner=1)

    obs = coll[0].observed.tolist()
    ref1 = naive_row_update(x.tolist(), obs, np.log(params.pi[0]).tolist(), alpha.tolist(), t2.tolist())
    ref2 = naive_col_update(x.tolist(), obs, np.log(params.rho[0]).tolist(), alpha.tolist(), ref1)
    assert np.abs(out.tau1[0] - np.array(ref1)).max() < 1e-12
    assert np.abs(out.tau2[0] - np.array(ref2)).max() < 1e-12


def test_e_step_trivial_and_excluded_blocks(rng):
    coll = make_collection([rng.integers(0, 2, (5, 4))])
    p1 = ModelParams(np.ones((1, 1)), np.ones((1, 1)), np.array([[0.4]]), ModelKind.IID, B)
    s = VariationalState((np.ones((5, 1)),), (np.ones((4, 1)),))
    out = e_step(coll, p1, s)
    assert np.all(out.tau1[0] == 1) and np.all(out.tau2[0] == 1)

    p2 = ModelParams(np.array([[0.5, 0.5, 0.0]]), np.array([[0.5, 0.5]]), rng.uniform(0.1, 0.9, (3, 2)), ModelKind.PI, B)
    out = e_step(coll, p2, random_state(rng, coll, 3, 2))
    assert np.all(out.tau1[0][:, 2] == 0)
    assert np.allclose(out.tau1[0].sum(axis=1), 1)
    assert np.all(out.tau1[0][:, :2] >= TAU_FLOOR)


def test_e_step_rejects_unclamped_alpha(rng):
    coll = make_collection([rng.integers(0, 2, (3, 3))])
    p = ModelParams(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]]), np.array([[1.0, 0.5], [0.5, 0.5]]), ModelKind.IID, B)
    with pytest.raises(FitError), np.errstate(divide="ignore"):
        e_step(coll, p, random_state(rng, coll, 2, 2))


# --- M-step ------------------------------------------------------------------


def test_m_step_hard_memberships_give_block_means(rng):
    x, z, w = planted(rng, 12, 9, [[0.8, 0.2], [0.3, 0.6]])
    coll = make_collection([x])
    state = VariationalState((hard_tau(z, 2, smooth=False),), (hard_tau(w, 2, smooth=False),))
    p = m_step(coll, state, ModelKind.IID)
    for q in range(2):
        for r in range(2):
            block = x[np.ix_(z == q, w == r)]
            if block.size:
                assert p.alpha[q, r] == pytest.approx(np.clip(block.mean(), 1e-6, 1 - 1e-6), abs=1e-12)


def test_m_step_single_block(rng):
    x = rng.integers(0, 2, (6, 7))
    coll = make_collection([x])
    p = m_step(coll, VariationalState((np.ones((6, 1)),), (np.ones((7, 1)),)), ModelKind.IID)
    assert p.alpha[0, 0] == pytest.approx(x.mean(), abs=1e-12)
    assert p.pi[0, 0] == 1 and p.rho[0, 0] == 1


def test_m_step_pooled_proportion():
    z1 = np.array([0] * 10 + [1] * 30)
    z2 = np.array([0] * 20 + [1] * 40)
    coll = make_collection([np.zeros((40, 2), int), np.zeros((60, 2), int)])
    state = VariationalState(
        (hard_tau(z1, 2, smooth=False), hard_tau(z2, 2, smooth=False)),
        (np.ones((2, 1)), np.ones((2, 1))),
    )
    assert m_step(coll, state, ModelKind.IID).pi[0, 0] == pytest.approx(0.3)
    p = m_step(coll, state, ModelKind.PI)
    assert p.pi[0, 0] == pytest.approx(0.25) and p.pi[1, 0] == pytest.approx(1 / 3)


def test_m_step_flags_degenerate_pair():
    coll = make_collection([np.ones((3, 3), int)])
    t1 = np.array([[1.0, 0.0]] * 3)
    state = VariationalState((t1,), (np.ones((3, 1)),))
    p = m_step(coll, state, ModelKind.IID)
    assert p.degenerate[1, 0]
    assert p.alpha[1, 0] == 0.5


# --- ELBO --------------------------------------------------------------------


def test_elbo_worked_value():
    coll = make_collection([np.eye(2, dtype=int)])
    p = ModelParams(np.ones((1, 1)), np.ones((1, 1)), np.array([[0.5]]), ModelKind.IID, B)
    s = VariationalState((np.ones((2, 1)),), (np.ones((2, 1)),))
    assert elbo(coll, p, s) == pytest.approx(4 * math.log(0.5), abs=1e-12)
    assert round(elbo(coll, p, s), 4) == -2.7726


def test_hard_tau_elbo_is_complete_loglik(rng):
    x, z, w = planted(rng, 5, 4, [[0.7, 0.2], [0.4, 0.9]])
    coll = make_collection([x])
    alpha = np.array([[0.7, 0.2], [0.4, 0.9]])
    pi, rho = np.array([0.3, 0.7]), np.array([0.6, 0.4])
    p = ModelParams(pi[None], rho[None], alpha, ModelKind.IID, B)
    s = VariationalState((hard_tau(z, 2, smooth=False),), (hard_tau(w, 2, smooth=False),))
    ref = sum(math.log(pi[q]) for q in z) + sum(math.log(rho[r]) for r in w)
    ref += sum(math.log(alpha[z[i], w[j]] if x[i, j] else 1 - alpha[z[i], w[j]]) for i in range(5) for j in range(4))
    assert elbo(coll, p, s) == pytest.approx(ref, abs=1e-10)


@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(2, 4), st.integers(1, 2), st.integers(1, 2), st.booleans())
def test_elbo_below_exact_loglik(seed, n1, n2, q1, q2, masked):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, (n1, n2))
    mask = rng.random((n1, n2)) > 0.2 if masked else np.ones((n1, n2), bool)
    coll = make_collection([x], masks=[mask])
    state = random_state(rng, coll, q1, q2)
    p = m_step(coll, state, ModelKind.IID)
    state = e_step(coll, p, state)
    j = elbo(coll, p, state)
    ll = exact_loglik(coll[0].values.tolist(), mask.tolist(), p.pi[0], p.rho[0], p.alpha, "bernoulli")
    assert j <= ll + 1e-9


# --- spectral initialization ---------------------------------------------------


def test_spectral_single_block_and_determinism(rng):
    x, z, w = planted(rng, 60, 60, [[0.9, 0.05], [0.05, 0.9]])
    coll = make_collection([x])
    one = init_spectral(coll, 1, 1, seed=0)
    assert np.all(one.tau1[0] == 1) and np.all(one.tau2[0] == 1)
    s = init_spectral(coll, 2, 2, seed=3)
    assert ari(s.tau1[0].argmax(1), z) == 1 and ari(s.tau2[0].argmax(1), w) == 1
    assert np.allclose(s.tau1[0].max(axis=1), 1 - 0.05)
    again = init_spectral(coll, 2, 2, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(s.tau1 + s.tau2, again.tau1 + again.tau2))


def test_spectral_rejects_too_many_blocks():
    coll = make_collection([np.ones((3, 5), int)])
    with pytest.raises(ValueError):
        init_spectral(coll, 4, 2)


# --- fitting -----------------------------------------------------------------


def test_fit_erdos_renyi_single_block(rng):
    x = (rng.random((50, 40)) < 0.25).astype(int)
    coll = make_collection([x])
    res = fit(coll, "iid", 1, 1)
    assert res.params.alpha[0, 0] == pytest.approx(x.mean(), abs=1e-12)
    assert res.converged and res.n_iterations <= 3


def test_fit_recovers_planted_iid_collection():
    from colbisbm.simulate import Design, SimDesign, build_alpha, sample_collection

    even = np.full(4, 0.25)
    spec = [(build_alpha(Design.EPS_ALPHA, 0.24), even, even, 240, 240)] * 2
    sim = sample_collection(SimDesign(Design.CUSTOM, custom=tuple(spec)), seed=5)
    res = fit(sim.collection, "iid", 4, 4)
    z, w = map_memberships(res)
    for got, truth in zip(z + w, sim.row_labels + sim.col_labels):
        assert ari(got, truth) >= 0.9


def test_fit_tiny_instance_matches_exhaustive_hard_starts():
    rng = np.random.default_rng(7)
    x, _, _ = planted(rng, 4, 4, [[0.9, 0.2], [0.1, 0.7]])
    coll = make_collection([x])
    sup = SupportPair.full(1, 2, 2)
    best = -np.inf
    for z in itertools.product(range(2), repeat=4):
        for w in itertools.product(range(2), repeat=4):
            st0 = VariationalState((hard_tau(np.array(z), 2),), (hard_tau(np.array(w), 2),))
            best = max(best, run_vem(coll, "iid", sup, st0).elbo)
    res = fit(coll, "iid", 2, 2, opts=FitOptions(n_init=20))
    assert res.elbo >= best - 1e-6


def test_fit_rejects_bad_support():
    coll = make_collection([np.ones((4, 4), int)])
    with pytest.raises(ValueError):
        fit(coll, "iid", 2, 2, SupportPair(np.array([[1, 0]]), np.ones((1, 2))))
    with pytest.raises(ValueError):
        fit(coll, "iid", 2, 2, SupportPair.full(1, 3, 2))


def test_fit_is_deterministic(rng):
    x, _, _ = planted(rng, 20, 15, [[0.8, 0.1], [0.2, 0.6]])
    coll = make_collection([x, x[::-1]])
    a = fit(coll, "pirho", 2, 2, opts=FitOptions(seed=4, n_init=3))
    b = fit(coll, "pirho", 2, 2, opts=FitOptions(seed=4, n_init=3))
    assert a.elbo == b.elbo and np.array_equal(a.params.alpha, b.params.alpha)


def test_map_memberships_tie_rule():
    coll = make_collection([np.zeros((2, 1), int)])
    res = fit(coll, "iid", 1, 1)
    s = VariationalState((np.array([[0.2, 0.8], [0.5, 0.5]]),), (np.ones((1, 1)),))
    from dataclasses import replace

    z, _ = map_memberships(replace(res, state=s))
    assert z[0].tolist() == [1, 0]


def test_canonical_order_sorts_marginal_connectivity(rng):
    x, _, _ = planted(rng, 40, 40, [[0.1, 0.2], [0.9, 0.6]])
    res = fit(make_collection([x]), "iid", 2, 2)
    p = res.params
    assert np.all(np.diff(p.alpha @ p.rho[0]) <= 0)
    assert np.all(np.diff(p.pi[0] @ p.alpha) <= 0)
    assert canonicalize(res).elbo == res.elbo


# --- identifiability -----------------------------------------------------------


def test_identifiability_examples():
    coll = make_collection([np.zeros((10, 10), int)])
    p = ModelParams(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]]), np.array([[0.9, 0.1], [0.1, 0.8]]), ModelKind.IID, B)
    rep = check_identifiability(p, coll)
    assert rep.conditions["distinct_alpha_rho"] and rep.passed
    flat = ModelParams(p.pi, p.rho, np.full((2, 2), 0.3), ModelKind.IID, B)
    assert not check_identifiability(flat, coll).conditions["distinct_alpha_rho"]
    small = make_collection([np.zeros((3, 3), int)] * 2)
    p4 = ModelParams(np.full((2, 1), 1.0), np.full((2, 4), 0.25), np.array([[0.1, 0.2, 0.3, 0.4]]), ModelKind.IID, B)
    assert not check_identifiability(p4, small).conditions["size"]


# --- invariants --------------------------------------------------------------------


def _random_problem(seed, kind):
    rng = np.random.default_rng(seed)
    M = 1 if kind is ModelKind.SEP and seed % 2 else int(rng.integers(1, 4))
    q1, q2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    alpha = rng.uniform(0.05, 0.95, (q1, q2))
    mats, masks = [], []
    for _ in range(M):
        x, _, _ = planted(rng, int(rng.integers(6, 15)), int(rng.integers(6, 15)), alpha)
        mats.append(x)
        masks.append(rng.random(x.shape) > 0.1)
    coll = make_collection(mats, masks=masks)
    s1 = np.ones((M, q1), bool)
    s2 = np.ones((M, q2), bool)
    if kind.free_rows and q1 > 1 and M > 1:
        s1[0, rng.integers(q1)] = False
    if kind.free_cols and q2 > 1 and M > 1:
        s2[-1, rng.integers(q2)] = False
    return coll, SupportPair(s1, s2), random_state(rng, coll, q1, q2)


@given(st.integers(0, 100_000), st.sampled_from(KINDS), st.sampled_from(["sequential", "batch"]))
def test_elbo_monotone(seed, kind, mode):
    coll, sup, s0 = _random_problem(seed, kind)
    res = run_vem(coll, kind, sup, s0, FitOptions(mode=mode, max_iter=30, seed=seed))
    assert np.all(np.diff(res.elbo_trace) >= -1e-8)


@given(st.integers(0, 100_000), st.sampled_from(KINDS))
def test_support_respected(seed, kind):
    coll, sup, s0 = _random_problem(seed, kind)
    res = run_vem(coll, kind, sup, s0, FitOptions(max_iter=15))
    for m in range(coll.M):
        assert np.all(res.state.tau1[m][:, ~sup.s1[m]] == 0)
        assert np.all(res.state.tau2[m][:, ~sup.s2[m]] == 0)
        assert np.all(res.params.pi[m][~sup.s1[m]] == 0)
        assert np.all(res.params.rho[m][~sup.s2[m]] == 0)


@given(st.integers(0, 100_000), st.sampled_from(KINDS))
def test_permutation_equivariance(seed, kind):
    coll, sup, s0 = _random_problem(seed, kind)
    rng = np.random.default_rng(seed + 1)
    ro, co = rng.permutation(sup.q1), rng.permutation(sup.q2)
    opts = FitOptions(max_iter=10, seed=seed)
    a = run_vem(coll, kind, sup, s0, opts)
    b = run_vem(coll, kind, sup.permuted(ro, co), s0.permuted(ro, co), opts)
    assert abs(a.elbo - b.elbo) <= 1e-10 * max(1.0, abs(a.elbo))
    if a.params.alpha.ndim == 3:
        assert np.allclose(a.params.alpha[:, ro][:, :, co], b.params.alpha, atol=1e-10)
    else:
        assert np.allclose(a.params.alpha[ro][:, co], b.params.alpha, atol=1e-10)
    assert np.allclose(a.params.pi[:, ro], b.params.pi, atol=1e-10)
    assert np.allclose(a.params.rho[:, co], b.params.rho, atol=1e-10)
    for m in range(coll.M):
        assert np.allclose(a.state.tau1[m][:, ro], b.state.tau1[m], atol=1e-10)
        assert np.allclose(a.state.tau2[m][:, co], b.state.tau2[m], atol=1e-10)


@given(st.integers(0, 100_000))
def test_masked_values_do_not_matter(seed):
    rng = np.random.default_rng(seed)
    x, _, _ = planted(rng, 12, 10, [[0.8, 0.2], [0.3, 0.6]])
    mask = rng.random(x.shape) > 0.3
    y = x.copy()
    y[~mask] = 1 - y[~mask]
    a = fit(make_collection([x], masks=[mask]), "iid", 2, 2, opts=FitOptions(n_init=2))
    b = fit(make_collection([y], masks=[mask]), "iid", 2, 2, opts=FitOptions(n_init=2))
    assert a.elbo == b.elbo
    assert np.array_equal(a.params.alpha, b.params.alpha)


def test_poisson_fit_runs(rng):
    z = rng.integers(0, 2, 30)
    w = rng.integers(0, 2, 25)
    lam = np.array([[4.0, 0.5], [1.0, 6.0]])
    x = rng.poisson(lam[z][:, w])
    res = fit(make_collection([x], emission="poisson"), "iid", 2, 2)
    assert np.all(np.diff(res.elbo_trace) >= -1e-8)
    zz, ww = map_memberships(res)
    assert ari(zz[0], z) > 0.9 and ari(ww[0], w) > 0.9
