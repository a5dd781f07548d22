import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcsa.core import (CoreError, RateConstants, Scenario,
                       SimState, StepSchedule, admissible_step_check,
                       consensus_error, dcsa_step, fit_c_tau, lemma3_residual,
                       lemma4_residual, lyapunov, make_state,
                       optimality_error, run, step_size, tau_k, td_error)
from dcsa.graphs import lazy_metropolis, line_graph
from dcsa.operators import (LocalOperator, TabularFeatures,
                            qlearning_operator, quadratic_grad_operator)
from dcsa.sources import ARSource


def decay_op(dim=1):
    return LocalOperator(dim=dim, eval=lambda x, t: -np.asarray(t, dtype=float))


def zero_op(dim=1):
    return LocalOperator(dim=dim, eval=lambda x, t: np.zeros(dim))


class NullSource:
    def sample(self, rng):
        return None


def consensus_scenario(n, d, ops, horizon, step, theta0=None, theta_star=None,
                       sources=None, **kw):
    w = lazy_metropolis(line_graph(n))
    return Scenario(sources=sources or [NullSource() for _ in range(n)],
                    ops=ops, step=step, horizon=horizon, seed=0,
                    weights=w, theta0=theta0, theta_star=theta_star, **kw)


# ---------------------------------------------------------------------------
# schedules and tau


def test_step_sizes():
    dim = StepSchedule(kind="diminishing", eps=3e-2)
    assert step_size(dim, 0) == pytest.approx(0.03)
    assert step_size(dim, 2) == pytest.approx(0.01)
    const = StepSchedule(kind="constant", eps=5e-4)
    for k in (0, 1, 10_000):
        assert step_size(const, k) == 5e-4


def test_diminishing_schedule_enforces_eps_floor():
    StepSchedule(kind="diminishing", eps=2.0, alpha=4.0)  # 8/4 = 2, boundary ok
    with pytest.raises(CoreError):
        StepSchedule(kind="diminishing", eps=1.9, alpha=4.0)


def test_schedule_rejects_bad_kind_or_eps():
    with pytest.raises(CoreError):
        StepSchedule(kind="geometric", eps=0.1)
    with pytest.raises(CoreError):
        StepSchedule(kind="constant", eps=0.0)


def test_tau_k_values():
    assert tau_k(1.0, math.exp(-3), 0.1) == 3
    assert tau_k(1.0, math.exp(-1), 0.9) == 9
    with pytest.warns(UserWarning):
        assert tau_k(1.0, 1.0, 0.5) == 1


def test_tau_k_slow_growth_diminishing():
    sched = StepSchedule(kind="diminishing", eps=0.5)
    prev = tau_k(1.0, sched.value(0), 0.3)
    for k in range(1, 2000):
        t = tau_k(1.0, sched.value(k), 0.3)
        assert t <= prev + 1
        prev = t


# ---------------------------------------------------------------------------
# rate constants and admissibility


def test_rate_constants_formulas():
    B, L, alpha, sigma2, n, ts, c_tau = 2.0, 1.5, 0.8, 0.75, 4, 1.0, 0.5
    rc = RateConstants.from_problem(B, L, alpha, sigma2, n, ts, c_tau)
    tsq1 = ts**2 + 1
    assert rc.C0 == pytest.approx(16 * B**2 * tsq1)
    assert rc.C1 == pytest.approx((60 * B**2 + 45 / 2 + 90 * B * L + 6 * B**2) * tsq1)
    c2 = 21 * B / 2 + 5 / 6 + 8 * L**2 / alpha + 10 * L
    assert rc.C2 == pytest.approx(c2)
    assert rc.C_eps1 == pytest.approx(
        max(6 * B, (45 * B + 132 * B**2 + 192 * B * L) / alpha))
    assert rc.C_eps2 == pytest.approx(max(
        16 * B, 768 * B**2 / (c_tau * alpha),
        alpha / 4 + 128 * B**2 / (c_tau * (1 - sigma2**2)) + 2 * c2,
        32 * B**2 / c2))


def test_fit_c_tau_in_unit_interval():
    sched = StepSchedule(kind="diminishing", eps=0.5)
    c = fit_c_tau(sched, beta=1.0, rho=0.3, horizon=5000)
    assert 0.0 < c < 1.0
    # definition: tau_k + 1 <= (1 - c)(k + 1) whenever k > tau_k
    for k in range(1, 5000):
        t = tau_k(1.0, sched.value(k), 0.3)
        if k > t:
            assert t + 1 <= (1 - c) * (k + 1) + 1e-9


def sample_constants(sigma2=0.75, c_tau=0.5):
    return RateConstants.from_problem(B=2.0, L=1.5, alpha=0.8, sigma2=sigma2,
                                      n_agents=4, theta_star_norm=1.0,
                                      c_tau=c_tau)


def test_admissibility_gross_violation_fails():
    rc = sample_constants()
    rep = admissible_step_check(rc, StepSchedule(kind="constant", eps=1.0),
                                n_agents=4, sigma2=0.75, beta=1.0, rho=0.3)
    assert not rep.passed
    assert rep.margins["constant_eps_tau"] < 0


def test_admissibility_tiny_constant_step_passes():
    rc = sample_constants()
    rep = admissible_step_check(rc, StepSchedule(kind="constant", eps=1e-9),
                                n_agents=4, sigma2=0.75, beta=1.0, rho=0.3)
    assert rep.passed


def test_admissibility_diminishing_boundary_alpha():
    rc = sample_constants()
    sched = StepSchedule(kind="diminishing", eps=8.0 / 0.8, alpha=0.8)
    rep = admissible_step_check(rc, sched, n_agents=4, sigma2=0.75, beta=1.0,
                                rho=0.3, horizon=100)
    assert rep.margins["diminishing_eps_vs_8_over_alpha"] == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# the step


def test_dcsa_step_consensus_fixed_point():
    w = lazy_metropolis(line_graph(3))
    state = make_state(np.full((3, 2), 4.2), tau_max=2)
    dcsa_step(state, w, [None] * 3, 0.7, [zero_op(2)] * 3)
    np.testing.assert_allclose(state.Theta, np.full((3, 2), 4.2), atol=1e-14)


def test_dcsa_step_pure_consensus():
    w = lazy_metropolis(line_graph(3))
    theta0 = np.array([[1.0], [2.0], [3.0]])
    state = make_state(theta0, tau_max=2)
    dcsa_step(state, w, [None] * 3, 0.0, [decay_op(1)] * 3)
    np.testing.assert_allclose(state.Theta, w.entries @ theta0, atol=1e-15)
    assert state.k == 1


def test_dcsa_step_single_agent_derived():
    state = make_state(np.array([[1.0]]), tau_max=1)
    dcsa_step(state, np.array([[1.0]]), [None], 0.5, [decay_op(1)])
    assert state.Theta[0, 0] == pytest.approx(0.5)


def test_dcsa_step_dimension_check():
    state = make_state(np.zeros((3, 1)), tau_max=1)
    with pytest.raises(CoreError):
        dcsa_step(state, np.eye(2), [None] * 3, 0.1, [zero_op(1)] * 3)


# ---------------------------------------------------------------------------
# metrics


def test_consensus_error_values():
    assert consensus_error(SimState(Theta=np.array([[2.0], [2.0]]))) == 0.0
    assert consensus_error(SimState(Theta=np.array([[1.0], [-1.0]]))) \
        == pytest.approx(2.0)
    assert consensus_error(SimState(Theta=np.full((3, 2), -7.3))) \
        == pytest.approx(0.0, abs=1e-24)


def test_optimality_error_values():
    st_ = SimState(Theta=np.array([[3.0]]))
    assert optimality_error(st_, np.array([1.0])) == pytest.approx(4.0)
    assert optimality_error(st_, np.array([3.0])) == 0.0
    assert math.isnan(optimality_error(st_, None))


def test_lyapunov_values():
    assert lyapunov(0.0, 0.0, 0.0) == 0.0
    assert lyapunov(4.0, 2.0, 2.0) == 8.0
    assert math.isnan(lyapunov(math.nan, 1.0, 1.0))


def test_lemma3_residual_identity():
    rc = sample_constants()
    sigma2, n, eps = 0.75, 4, 0.01
    gap = 1 - sigma2**2
    bound = ((1 + sigma2**2) / 2 * 2.0
             + 32 * eps**2 * rc.B**2 * n / gap * 1.5
             + n * rc.C0 / gap * eps**2)
    slack = lemma3_residual(S_k=0.5, S_prev=2.0, R_prev=1.5, eps_prev=eps,
                            rc=rc, n_agents=n, sigma2=sigma2)
    assert slack == pytest.approx(bound - 0.5)


def test_lemma3_pure_consensus_contraction():
    """eps = 0 on the 3-node path from S = 2: the recursion bound
    (1 + sigma2^2)/2 * S dominates the contracted S."""
    w = lazy_metropolis(line_graph(3))
    theta0 = np.array([[1.0], [0.0], [-1.0]])  # S = 2
    state = make_state(theta0, tau_max=1)
    dcsa_step(state, w, [None] * 3, 0.0, [zero_op(1)] * 3)
    s_next = consensus_error(state)
    assert s_next <= (1 + 0.75**2) / 2 * 2.0 + 1e-12


def test_lemma3_consensus_point_slack():
    rc = sample_constants()
    slack = lemma3_residual(S_k=0.0, S_prev=0.0, R_prev=0.0, eps_prev=0.01,
                            rc=rc, n_agents=4, sigma2=0.75)
    assert slack == pytest.approx(4 * rc.C0 / (1 - 0.75**2) * 1e-4)
    assert slack >= 0


def test_lemma4_residual_identity_and_zero_noise():
    rc = sample_constants()
    n_seeds, horizon = 30, 6
    R = np.zeros((n_seeds, horizon + 1))
    S = np.zeros((n_seeds, horizon + 1))
    eps_fn = lambda k: 0.01
    tau_fn = lambda k: 2
    ks, slack, stderr = lemma4_residual(R, S, eps_fn, tau_fn, rc, n_agents=4)
    # all-zero metrics: slack = N C1 eps_k eps_{k-tau} tau >= 0, stderr = 0
    np.testing.assert_array_equal(ks, np.arange(2, horizon))
    np.testing.assert_allclose(slack, 4 * rc.C1 * 0.01 * 0.01 * 2)
    assert np.max(stderr) <= 1e-12


def test_lemma4_requires_30_seeds():
    rc = sample_constants()
    with pytest.raises(CoreError):
        lemma4_residual(np.zeros((5, 4)), np.zeros((5, 4)),
                        lambda k: 0.01, lambda k: 1, rc, n_agents=4)


def test_td_error_values():
    feats = TabularFeatures(n_states=1, n_actions=1)
    op = qlearning_operator(feats, gamma=0.5)
    batch = [(0, 0, 1.0, 0)]
    assert td_error([np.zeros(1)], [batch], [op]) == pytest.approx(1.0)
    assert td_error([np.array([2.0])], [batch], [op]) == pytest.approx(0.0)
    with pytest.raises(CoreError):
        td_error([np.zeros(1)], [[]], [op])
    with pytest.raises(CoreError):
        td_error([np.zeros(1)], [batch], [quadratic_grad_operator(1)])


# ---------------------------------------------------------------------------
# the outer loop


def test_run_horizon_zero():
    sc = consensus_scenario(3, 1, [zero_op(1)] * 3, horizon=0,
                            step=StepSchedule(kind="constant", eps=0.1))
    traj = run(sc)
    assert len(traj.records) == 1
    assert traj.records[0].k == 0


def test_run_single_agent_geometric():
    """N=1, F = -theta, eps = 0.5: theta_k = 0.5^k, R_k = 0.25^k exactly."""
    sc = Scenario(sources=[NullSource()], ops=[decay_op(1)],
                  step=StepSchedule(kind="constant", eps=0.5), horizon=20,
                  seed=0, weights=lazy_metropolis(line_graph(1)),
                  theta0=np.array([[1.0]]), theta_star=np.array([0.0]))
    traj = run(sc)
    expected = 0.25 ** np.arange(21)
    np.testing.assert_allclose(traj.R_hist, expected, rtol=1e-12)


def test_run_fixed_point_stays_put():
    theta_star = np.array([1.5, -0.5])
    u = theta_star

    def noise_free_eval(x, t):
        x1 = np.array([1.0, 2.0])
        x2 = float(u @ x1)
        return -2.0 * (float(x1 @ t) - x2) * x1

    ops = [LocalOperator(dim=2, eval=noise_free_eval) for _ in range(3)]
    theta0 = np.tile(theta_star, (3, 1))
    sc = consensus_scenario(3, 2, ops, horizon=50,
                            step=StepSchedule(kind="constant", eps=0.05),
                            theta0=theta0, theta_star=theta_star)
    traj = run(sc)
    np.testing.assert_allclose(traj.R_hist, np.zeros(51), atol=1e-24)
    np.testing.assert_allclose(traj.S_hist, np.zeros(51), atol=1e-24)


def test_run_consensus_preservation_eps_zero():
    """Double stochasticity: theta_bar is invariant under pure consensus."""
    rng = np.random.default_rng(0)
    theta0 = rng.standard_normal((5, 3))
    sc = consensus_scenario(5, 3, [zero_op(3)] * 5, horizon=200,
                            step=StepSchedule(kind="constant", eps=1e-9),
                            theta0=theta0)
    # eps is effectively zero because the operator is identically zero
    traj = run(sc, collect_theta_bar=True)
    bar0 = theta0.mean(axis=0)
    for k in range(201):
        np.testing.assert_allclose(traj.theta_bar_hist[k], bar0, atol=1e-12)


def test_run_s_contraction_eps_zero():
    rng = np.random.default_rng(1)
    theta0 = rng.standard_normal((5, 2))
    w = lazy_metropolis(line_graph(5))
    sc = consensus_scenario(5, 2, [zero_op(2)] * 5, horizon=100,
                            step=StepSchedule(kind="constant", eps=1e-300),
                            theta0=theta0)
    traj = run(sc)
    for k in range(1, 101):
        assert traj.S_hist[k] <= w.sigma2**2 * traj.S_hist[k - 1] + 1e-12


def test_run_average_dynamics_identity():
    """theta_bar^{k+1} = theta_bar^k + (eps_k / N) sum_i F_i exactly."""
    rng = np.random.default_rng(2)
    n, d = 4, 3

    class SeqSource:
        def sample(self, rng_):
            return rng_.standard_normal(d)

    def drift_eval(x, t):
        return np.asarray(x) - 0.5 * np.asarray(t)

    ops = [LocalOperator(dim=d, eval=drift_eval) for _ in range(n)]
    theta0 = rng.standard_normal((n, d))
    sched = StepSchedule(kind="diminishing", eps=0.3)
    w = lazy_metropolis(line_graph(n))
    sc = Scenario(sources=[SeqSource() for _ in range(n)], ops=ops, step=sched,
                  horizon=50, seed=7, weights=w, theta0=theta0)
    traj = run(sc, collect_theta_bar=True)

    # replay the identical sample streams and verify the average recursion
    from dcsa.rng import derive_stream
    rngs = [derive_stream(7, i, "sample") for i in range(n)]
    Theta = theta0.copy()
    for k in range(50):
        eps = sched.value(k)
        drift = np.array([drift_eval(rngs[i].standard_normal(d), Theta[i])
                          for i in range(n)])
        bar_next_expected = Theta.mean(axis=0) + eps / n * drift.sum(axis=0)
        Theta = w.entries @ Theta + eps * drift
        np.testing.assert_allclose(traj.theta_bar_hist[k + 1],
                                   bar_next_expected, atol=1e-12)


def test_run_permutation_equivariance():
    n, d = 4, 2
    perm = np.array([2, 0, 3, 1])
    rng = np.random.default_rng(3)
    theta0 = rng.standard_normal((n, d))
    w = lazy_metropolis(line_graph(n)).entries

    class OffsetOp:
        """Deterministic drift that depends on the agent through theta only."""

        def __init__(self):
            self.dim = d
            self.eval = lambda x, t: -np.asarray(t) + 1.0

    def simulate(weights, init):
        Theta = init.copy()
        for _ in range(30):
            drift = -Theta + 1.0
            Theta = weights @ Theta + 0.1 * drift
        return Theta

    base = simulate(w, theta0)
    permuted = simulate(w[np.ix_(perm, perm)], theta0[perm])
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


@pytest.mark.filterwarnings("ignore:overflow")
def test_run_aborts_on_divergence():
    blowup = LocalOperator(dim=1, eval=lambda x, t: np.asarray(t) * 1e10 + 1e300)
    sc = consensus_scenario(2, 1, [blowup] * 2, horizon=100,
                            step=StepSchedule(kind="constant", eps=1e3))
    traj = run(sc)
    assert traj.aborted
    assert "non-finite" in traj.abort_reason


def test_run_stride_logging():
    sc = consensus_scenario(3, 1, [zero_op(1)] * 3, horizon=25,
                            step=StepSchedule(kind="constant", eps=0.1),
                            stride=10)
    traj = run(sc)
    assert [r.k for r in traj.records] == [0, 10, 20, 25]


def test_run_lemma2_drift_bound():
    """||bar^k - bar^{k-tau}|| <= 3 eps_{k-tau} B tau (||bar^k||
    + sqrt(S^{k-tau})/N + 1) along a small admissible run."""
    n, d = 3, 2
    rng = np.random.default_rng(4)
    u = rng.standard_normal(d) * 0.3
    srcs = [ARSource(A=np.zeros((d, d)), u=u, noise_clip=3.0) for _ in range(n)]
    ops = [quadratic_grad_operator(d, u) for _ in range(n)]
    sc = consensus_scenario(n, d, ops, horizon=2000,
                            step=StepSchedule(kind="constant", eps=1e-3),
                            sources=srcs, theta_star=u, beta=1.0)
    traj = run(sc, collect_theta_bar=True)
    # B bound for this instance: ||x1|| <= 3, |x2| <= |u| . 3 + 3
    from dcsa.sources import ar_state_bound
    xb = ar_state_bound(np.zeros((d, d)), 3.0)
    x1n = float(np.linalg.norm(xb))
    B = max(2 * x1n**2, 2 * (float(np.abs(u) @ xb) + 3.0) * x1n)
    t = tau_k(1.0, 1e-3, 0.0)
    for k in range(t, 2001):
        drift = np.linalg.norm(traj.theta_bar_hist[k] - traj.theta_bar_hist[k - t])
        bound = 3 * 1e-3 * B * t * (np.linalg.norm(traj.theta_bar_hist[k])
                                    + math.sqrt(traj.S_hist[k - t]) / n + 1)
        assert drift <= bound + 1e-12


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_run_is_deterministic(n, d, seed):
    ops = [decay_op(d) for _ in range(n)]

    class NoiseSource:
        def sample(self, rng_):
            return rng_.standard_normal(d)

    def build():
        return Scenario(sources=[NoiseSource() for _ in range(n)],
                        ops=[LocalOperator(dim=d,
                                           eval=lambda x, t: np.asarray(x) - t)
                             for _ in range(n)],
                        step=StepSchedule(kind="constant", eps=0.05),
                        horizon=40, seed=seed,
                        weights=lazy_metropolis(line_graph(n)))
    a, b = run(build()), run(build())
    np.testing.assert_array_equal(a.theta_final, b.theta_final)
    np.testing.assert_array_equal(a.S_hist, b.S_hist)
