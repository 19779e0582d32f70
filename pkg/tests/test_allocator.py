import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parbcc.allocator import (BracketError, DualState, SolverConfig, allocate, helper_terms, search_lambda,
                              search_mu, solve_p1_at_lambda, solve_p3_at_lambda_mu)
from parbcc.channel import GainBounds, partition
from parbcc.oracle import common_marginal, confidential_marginal, kkt_residuals
from parbcc.rates import PowerAllocation, Weights, common_rate_user, weighted_sum_rate

LN2 = math.log(2.0)


def _random_instance(rng, L=2, perfect=None):
    lo = rng.exponential(3.0, (2, L)) + 1e-2
    if perfect is None:
        perfect = rng.random() < 0.5
    b = GainBounds.perfect(lo) if perfect else GainBounds(lo, lo * (1 + rng.random((2, L))))
    return b, partition(b), Weights(*rng.uniform(0.2, 3.0, 3)), float(rng.uniform(0.5, 10.0))


def _grid_max_2d(f, hi=20.0, step=1e-4):
    """Maximise f(p0, x) over [0, hi]^2: coarse scan then local boxes down to ``step``."""
    h = 0.05
    g = np.arange(0, hi + h / 2, h)
    P0, X = np.meshgrid(g, g, indexing="ij")
    v = f(P0, X)
    k = np.unravel_index(np.argmax(v), v.shape)
    c0, cx = P0[k], X[k]
    while h > step * 1.01:
        h_new = h / 10
        off = np.arange(-20, 21) * h_new
        P0, X = np.meshgrid(np.clip(c0 + off, 0, hi), np.clip(cx + off, 0, hi), indexing="ij")
        v = f(P0, X)
        k = np.unravel_index(np.argmax(v), v.shape)
        c0, cx, h = P0[k], X[k], h_new
    return c0, cx, float(v[k])


def _secrecy(a, b, x):
    return 0.5 * (np.log2(1 + a * x) - np.log2(1 + b * x))


def _common(a, p0, x):
    return 0.5 * (np.log2(1 + a * (p0 + x)) - np.log2(1 + a * x))


# ---------------------------------------------------------------- helper terms


def test_beta_root_example():
    # alpha-_1 = 1, alpha+_2 = 0.5, w1 / (lam ln2) = 4 with lam = 1
    b = GainBounds([[1.0], [0.1]], [[1.0], [0.5]])
    w = Weights(1.0, 4 * LN2, 1.0)
    t = helper_terms(b, w, DualState(1.0), 1)
    assert t.delta[0] == pytest.approx(1.0, abs=1e-12)
    assert t.beta[0] == pytest.approx(0.0, abs=1e-12)
    assert confidential_marginal(b, w, 1.0, 1, np.array([0.0]))[0] == pytest.approx(0.0, abs=1e-12)


def test_gamma_root_example():
    b = GainBounds.perfect([[1.0], [0.5]])
    w = Weights(4 * LN2, 1.0, 1.0)
    t = helper_terms(b, w, DualState(1.0), 1)
    assert t.gamma[0] == pytest.approx(1.0, abs=1e-12)
    assert common_marginal(b, w, 1.0, (1.0, 0.0), np.array([1.0]))[0] == pytest.approx(0.0, abs=1e-12)


def test_zeta_intersection_example():
    b = GainBounds([[1.0], [0.1]], [[1.0], [0.5]])
    w = Weights(1.0, 3.0, 1.0)
    t = helper_terms(b, w, DualState(0.7), 1)
    assert t.zeta[0] == pytest.approx(1.0, abs=1e-12)
    x = np.array([1.0])
    # same lambda on both sides, so the intersection is between the raw utilities
    assert common_marginal(b, w, 0.7, (1, 0), x)[0] == pytest.approx(
        confidential_marginal(b, w, 0.7, 1, x)[0], abs=1e-12)


def test_helper_terms_reject_bad_duals():
    b = GainBounds.perfect([[1.0], [0.5]])
    with pytest.raises(ValueError):
        helper_terms(b, Weights(1, 1, 1), DualState(0.0), 1)
    with pytest.raises(ValueError):
        DualState(1.0, mu=1.5)
    with pytest.raises(ValueError):
        helper_terms(GainBounds.perfect([[0.0], [0.5]]), Weights(1, 1, 1), DualState(1.0), 1)


@pytest.mark.parametrize("seed", range(10))
def test_theta_is_follower_intersection(seed):
    rng = np.random.default_rng(seed)
    a1 = rng.uniform(0.2, 2.0)
    ap1 = a1 * rng.uniform(1.0, 1.5)
    a2 = ap1 * rng.uniform(1.5, 4.0)
    b = GainBounds([[a1], [a2]], [[ap1], [a2 * 1.2]])
    w = Weights(1.0, 1.0, rng.uniform(2.0, 10.0))
    th = helper_terms(b, w, DualState(1.0), 2).theta[0]
    assert th > 0
    # under P1 the follower's common utility uses user 1's gain
    u0 = w.w0 / (2 * LN2) * a1 / (1 + a1 * th)
    u2 = w.w2 / (2 * LN2) * (a2 / (1 + a2 * th) - ap1 / (1 + ap1 * th))
    assert u0 == pytest.approx(u2, rel=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_derived_big_lambda_gives_intersection(seed):
    rng = np.random.default_rng(100 + seed)
    b, _, w, _ = _random_instance(rng, L=4, perfect=False)
    mu = rng.uniform(0.05, 0.95)
    for user in (1, 2):
        t = helper_terms(b, w, DualState(1.0, mu), user)
        i, j = user - 1, 2 - user
        am, ap = b.alpha_minus, b.alpha_plus
        ok = am[i] > ap[j]
        # positive wherever the user has a secrecy advantage
        assert np.all(t.big_lambda[ok] > 0)
        mi = mu if user == 1 else 1 - mu
        wi = (w.w1, w.w2)[i]
        x = t.xi[ok]
        u0 = w.w0 * (mi * am[i, ok] / (1 + am[i, ok] * x) + (1 - mi) * am[j, ok] / (1 + am[j, ok] * x))
        ui = wi * (am[i, ok] / (1 + am[i, ok] * x) - ap[j, ok] / (1 + ap[j, ok] * x))
        np.testing.assert_allclose(u0, ui, rtol=1e-9, atol=1e-12)


def test_printed_big_lambda_differs_from_discriminant():
    b = GainBounds([[2.0], [0.5]], [[2.5], [1.0]])
    t = helper_terms(b, Weights(1.0, 2.0, 1.0), DualState(1.0, 0.3), 1)
    assert abs(t.big_lambda_printed[0] - t.big_lambda[0]) > 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_nu_is_mixed_stationarity_root(seed):
    rng = np.random.default_rng(200 + seed)
    b, _, w, _ = _random_instance(rng, L=5)
    mu, lam = rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.5)
    nu = helper_terms(b, w, DualState(lam, mu), 1).nu
    am = b.alpha_minus
    pos = nu > 0
    u = common_marginal(b, w, lam, (mu, 1 - mu), nu)
    np.testing.assert_allclose(u[pos], 0.0, atol=1e-10)
    # nonpositive nu means the utility is already below lambda at zero power
    assert np.all(common_marginal(b, w, lam, (mu, 1 - mu), np.zeros_like(nu))[~pos] <= 1e-12)
    assert am.shape[1] == nu.size


# ---------------------------------------------------------------- closed forms vs Lagrangian grid


def test_large_lambda_gives_zero():
    rng = np.random.default_rng(3)
    b, part, w, _ = _random_instance(rng, L=4)
    for order in ((1, 2), (2, 1)):
        assert all(np.all(x == 0) for x in solve_p1_at_lambda(b, part, w, 1e6, order))
    assert all(np.all(x == 0) for x in solve_p3_at_lambda_mu(b, part, w, 1e6, 0.4))


def test_s3_only_inversion():
    b = GainBounds.perfect([[1.0], [1.0]])
    part = partition(b)
    p0, p1, p2 = solve_p1_at_lambda(b, part, Weights(1, 1, 1), 1 / (4 * LN2))
    assert p0[0] == pytest.approx(1.0, abs=1e-12) and p1[0] == 0 and p2[0] == 0
    lam, a = search_lambda("P1", b, part, Weights(1, 1, 1), 1.0)
    assert lam == pytest.approx(1 / (4 * LN2), abs=1e-12)
    assert a.p0[0] == pytest.approx(1.0, abs=1e-12)


P1_S1_CASES = [
    # (alpha-_1, alpha+_1, alpha-_2, alpha+_2, w0, w1, lam); threshold a1/(a1 - a2+) = 4/3
    (4.0, 4.5, 0.5, 1.0, 1.0, 2.0, 0.3),
    (4.0, 4.5, 0.5, 1.0, 1.0, 1.0, 0.3),
    (4.0, 4.5, 0.5, 1.0, 1.0, 1.4, 0.2),
    (2.0, 2.0, 0.3, 0.3, 1.0, 5.0, 0.9),
    (2.0, 2.0, 0.3, 0.3, 1.0, 5.0, 0.05),
]


@pytest.mark.parametrize("a1,ap1,a2,ap2,w0,w1,lam", P1_S1_CASES)
def test_p1_leader_set_maximises_lagrangian(a1, ap1, a2, ap2, w0, w1, lam):
    b = GainBounds([[a1], [a2]], [[ap1], [ap2]])
    part = partition(b)
    assert part.s1.tolist() == [0]
    p0, p1, _ = solve_p1_at_lambda(b, part, Weights(w0, w1, 1.0), lam)

    def lag(P0, X):
        return w0 * _common(a1, P0, X) + w1 * _secrecy(a1, ap2, X) - lam * (P0 + X)

    g0, gx, gv = _grid_max_2d(lag)
    assert lag(p0[0], p1[0]) >= gv - 1e-8
    assert p0[0] == pytest.approx(g0, abs=2e-3) and p1[0] == pytest.approx(gx, abs=2e-3)


P1_S2_CASES = [
    # follower set; threshold a1-/(a2- - a1+)
    (1.0, 1.0, 3.0, 3.5, 1.0, 2.0, 0.3),
    (1.0, 1.0, 3.0, 3.5, 1.0, 0.3, 0.3),
    (0.5, 0.7, 4.0, 4.0, 1.0, 1.5, 0.1),
    (1.0, 1.0, 2.0, 3.0, 1.0, 0.75, 0.2),
]


@pytest.mark.parametrize("a1,ap1,a2,ap2,w0,w2,lam", P1_S2_CASES)
def test_p1_follower_set_maximises_lagrangian(a1, ap1, a2, ap2, w0, w2, lam):
    b = GainBounds([[a1], [a2]], [[ap1], [ap2]])
    part = partition(b)
    assert part.s2.tolist() == [0]
    p0, _, p2 = solve_p1_at_lambda(b, part, Weights(w0, 1.0, w2), lam)

    def lag(P0, X):
        return w0 * _common(a1, P0, X) + w2 * _secrecy(a2, ap1, X) - lam * (P0 + X)

    g0, gx, gv = _grid_max_2d(lag)
    assert lag(p0[0], p2[0]) >= gv - 1e-8
    assert p0[0] == pytest.approx(g0, abs=2e-3) and p2[0] == pytest.approx(gx, abs=2e-3)


def test_upper_bound_follower_threshold_breaks_optimality():
    # w2/w0 = 0.75 sits between the two candidate thresholds (0.5 and 1)
    b = GainBounds([[1.0], [2.0]], [[1.0], [3.0]])
    part = partition(b)
    w = Weights(1.0, 1.0, 0.75)
    lam_t, a_t = search_lambda("P1", b, part, w, 2.0)
    lam_a, a_a = search_lambda("P1", b, part, w, 2.0, cfg=SolverConfig(s2_threshold="upper"))
    assert kkt_residuals(b, part, w, a_t, lam_t, leader=1).passed(1e-6)
    assert not kkt_residuals(b, part, w, a_a, lam_a, leader=1).passed(1e-6)


P3_CASES = [
    # (alpha-_1, alpha+_1, alpha-_2, alpha+_2, w0, w1, lam, mu)
    (4.0, 4.5, 0.5, 1.0, 1.0, 2.0, 0.3, 0.5),
    (4.0, 4.5, 0.5, 1.0, 1.0, 0.5, 0.3, 0.2),
    (2.0, 2.0, 1.0, 1.0, 1.0, 3.0, 0.2, 0.8),
    (3.0, 3.2, 2.0, 2.5, 2.0, 1.0, 0.1, 0.6),
]


@pytest.mark.parametrize("a1,ap1,a2,ap2,w0,w1,lam,mu", P3_CASES)
def test_p3_maximises_mixed_lagrangian(a1, ap1, a2, ap2, w0, w1, lam, mu):
    b = GainBounds([[a1], [a2]], [[ap1], [ap2]])
    part = partition(b)
    assert part.s1.tolist() == [0]
    p0, p1, _ = solve_p3_at_lambda_mu(b, part, Weights(w0, w1, 1.0), lam, mu)

    def lag(P0, X):
        r0 = mu * _common(a1, P0, X) + (1 - mu) * _common(a2, P0, X)
        return w0 * r0 + w1 * _secrecy(a1, ap2, X) - lam * (P0 + X)

    g0, gx, gv = _grid_max_2d(lag)
    assert lag(p0[0], p1[0]) >= gv - 1e-8
    assert p0[0] == pytest.approx(g0, abs=2e-3) and p1[0] == pytest.approx(gx, abs=2e-3)


def test_p3_s3_matches_scalar_maximiser():
    b = GainBounds.perfect([[1.0, 2.0], [3.0, 2.0]])
    part = partition(b)
    w, lam, mu = Weights(1.5, 1, 1), 0.2, 0.3
    p0, _, _ = solve_p3_at_lambda_mu(b, part, w, lam, mu)
    grid = np.linspace(0, 20, 2_000_001)
    for l in range(2):
        v = w.w0 * (mu * _common(1.0 if l == 0 else 2.0, grid, 0) + (1 - mu) * _common(3.0 if l == 0 else 2.0, grid, 0)) - lam * grid
        assert p0[l] == pytest.approx(grid[np.argmax(v)], abs=2e-5)


def test_p3_endpoints_reduce_to_p1_p2():
    rng = np.random.default_rng(9)
    for _ in range(10):
        b, part, w, _ = _random_instance(rng, L=3)
        for mu, order in ((1.0, (1, 2)), (0.0, (2, 1))):
            a = solve_p3_at_lambda_mu(b, part, w, 0.3, mu)
            c = solve_p1_at_lambda(b, part, w, 0.3, order)
            for x, y in zip(a, c):
                np.testing.assert_allclose(x, y, atol=1e-9)


def test_p3_continuous_in_mu():
    b = GainBounds([[2.0, 1.0], [1.0, 2.0]], [[2.2, 1.0], [1.0, 2.2]])
    part = partition(b)
    w = Weights(1, 1.5, 1.5)
    mus = np.linspace(0, 1, 401)
    tot = np.array([np.concatenate(solve_p3_at_lambda_mu(b, part, w, 0.2, m)) for m in mus])
    assert np.max(np.abs(np.diff(tot, axis=0))) < 0.05


# ---------------------------------------------------------------- searches


@pytest.mark.parametrize("seed", range(8))
def test_power_nonincreasing_in_lambda(seed):
    rng = np.random.default_rng(300 + seed)
    b, part, w, _ = _random_instance(rng, L=4)
    lams = np.geomspace(1e-3, 10, 300)
    for fn in (lambda l: solve_p1_at_lambda(b, part, w, l), lambda l: solve_p1_at_lambda(b, part, w, l, (2, 1)),
               lambda l: solve_p3_at_lambda_mu(b, part, w, l, 0.37)):
        tot = np.array([sum(np.sum(x) for x in fn(l)) for l in lams])
        assert np.all(np.diff(tot) <= 1e-12 * np.maximum(1, tot[:-1]))


@pytest.mark.parametrize("seed", range(6))
def test_common_gap_monotone_in_mu(seed):
    rng = np.random.default_rng(400 + seed)
    b, part, w, P = _random_instance(rng, L=3)
    g = []
    for mu in np.linspace(0, 1, 21):
        _, a = search_lambda("P3", b, part, w, P, mu=mu)
        g.append(common_rate_user(b, a, 1) - common_rate_user(b, a, 2))
    assert np.all(np.diff(g) >= -1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["P1", "P2", "P3"]))
def test_search_lambda_meets_budget(seed, problem):
    rng = np.random.default_rng(seed)
    b, part, w, P = _random_instance(rng, L=3)
    _, a = search_lambda(problem, b, part, w, P, mu=0.5 if problem == "P3" else None)
    assert abs(a.total - P) <= 1e-10 * P


def test_symmetric_users_balance_at_half():
    b = GainBounds([[2.0, 1.0], [1.0, 2.0]], [[2.3, 1.0], [1.0, 2.3]])
    part = partition(b)
    mu, lam, a = search_mu(b, part, Weights(1, 1.5, 1.5), 4.0)
    assert mu == pytest.approx(0.5, abs=1e-6)
    assert abs(common_rate_user(b, a, 1) - common_rate_user(b, a, 2)) <= 1e-6


def test_search_mu_rejects_no_sign_change():
    # user 2 far weaker: R01 > R02 at every mu
    b = GainBounds.perfect([[5.0], [0.1]])
    with pytest.raises(BracketError):
        search_mu(b, partition(b), Weights(1, 0.1, 1), 2.0)


# ---------------------------------------------------------------- allocate


def test_zero_budget():
    b = GainBounds.perfect([[1.0, 2.0], [2.0, 1.0]])
    r = allocate(b, partition(b), Weights(1, 1, 1), 0.0)
    assert r.allocation.total == 0 and (r.rates.r0, r.rates.r1, r.rates.r2) == (0, 0, 0)


def test_s3_only_allocation_all_common():
    b = GainBounds.perfect([[1.0], [1.0]])
    r = allocate(b, partition(b), Weights(1, 1, 1), 1.0)
    assert r.allocation.p0[0] == pytest.approx(1.0, abs=1e-12)
    assert r.rates.r1 == 0 and r.rates.r2 == 0
    assert r.diagnostics.lam == pytest.approx(1 / (4 * LN2), abs=1e-12)
    assert r.diagnostics.mu == 0.5


def test_step_one_when_user_one_bottleneck():
    # user 1 weaker everywhere: common rate limited by user 1 under P1
    b = GainBounds.perfect([[0.5, 0.4], [3.0, 2.0]])
    r = allocate(b, partition(b), Weights(1, 1, 1), 4.0)
    assert r.diagnostics.step == 1


def test_step_two_when_user_two_bottleneck():
    b = GainBounds.perfect([[3.0, 2.0], [0.5, 0.4]])
    r = allocate(b, partition(b), Weights(1, 1, 1), 4.0)
    assert r.diagnostics.step == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_feasibility_and_set_discipline(seed):
    rng = np.random.default_rng(seed)
    b, part, w, P = _random_instance(rng, L=int(rng.integers(1, 7)))
    r = allocate(b, part, w, P)
    a = r.allocation
    m1, m2, m3 = part.masks()
    assert np.all(a.p0 >= 0) and np.all(a.p1 >= 0) and np.all(a.p2 >= 0)
    assert np.all(a.p1[~m1] == 0) and np.all(a.p2[~m2] == 0)
    assert abs(a.total - P) <= 1e-6 * P
    assert r.diagnostics.theta_fallbacks == 0 and r.diagnostics.nu_overrides == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_user_swap_equivariance(seed):
    rng = np.random.default_rng(seed)
    b, part, w, P = _random_instance(rng, L=3)
    r = allocate(b, part, w, P)
    s = allocate(b.swapped(), part.swapped(), w.swapped(), P)
    for x, y in ((r.allocation.p0, s.allocation.p0), (r.allocation.p1, s.allocation.p2),
                 (r.allocation.p2, s.allocation.p1)):
        np.testing.assert_allclose(x, y, atol=1e-6 * P)
    assert r.rates.r1 == pytest.approx(s.rates.r2, abs=1e-6)
    assert r.rates.r2 == pytest.approx(s.rates.r1, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 10.0))
def test_weight_scaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    b, part, w, P = _random_instance(rng, L=3)
    r = allocate(b, part, w, P)
    s = allocate(b, part, w.scaled(c), P)
    for x, y in zip((r.allocation.p0, r.allocation.p1, r.allocation.p2),
                    (s.allocation.p0, s.allocation.p1, s.allocation.p2)):
        np.testing.assert_allclose(x, y, atol=1e-5 * P)
    assert s.diagnostics.lam == pytest.approx(c * r.diagnostics.lam, rel=1e-6)


def test_solver_config_validation():
    for kw in ({"lambda_tol": 0}, {"mu_tol": -1}, {"max_iters": 0}, {"bracket_growth": 1.0},
               {"s2_threshold": "other"}):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


def test_allocate_rejects_negative_budget():
    b = GainBounds.perfect([[1.0], [2.0]])
    with pytest.raises(ValueError):
        allocate(b, partition(b), Weights(1, 1, 1), -1.0)


def test_weighted_sum_not_below_any_subproblem():
    rng = np.random.default_rng(77)
    for _ in range(10):
        b, part, w, P = _random_instance(rng, L=2)
        best = weighted_sum_rate(b, part, w, allocate(b, part, w, P).allocation)
        for prob in ("P1", "P2"):
            _, a = search_lambda(prob, b, part, w, P)
            assert best >= weighted_sum_rate(b, part, w, a) - 1e-6
