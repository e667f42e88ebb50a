import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from prefgap.bandit import (
    Distribution,
    FeatureMap,
    FiniteBandit,
    RewardVector,
    center_reward,
    optimal_policy,
    regularized_value,
)
from prefgap.classes import (
    AugmentedClass,
    FullTabular,
    LinearClass,
    LinearReward,
    LogLinear,
    LogLinearPolicy,
    SingletonClass,
    TabularMinusPoint,
    policy_distribution,
    surrogate_reward,
)
from prefgap.errors import ConvergenceFailure, DomainError, NumericFailure
from prefgap.exact import (
    GradientIdentityReport,
    OptimizerConfig,
    PairSampler,
    fit_dpo,
    fit_reward_mle,
    minimize_projected,
    new_objective_loss,
    online_dpo,
    online_ipo_loss,
    pilaf_gradient_identity_check,
    pilaf_mixture_stats,
    pilaf_pair_distribution,
    policy_stage,
    population_bt_loss,
    population_bt_grad_linear,
)


def identity_env(r=(0.5, -0.5, 0.0), beta=1.0):
    n = len(r)
    return FiniteBandit(
        responses=tuple(f"y{i}" for i in range(n)),
        features=FeatureMap(np.eye(n)),
        r_star=RewardVector(np.array(r, dtype=float)),
        pi_ref=Distribution.uniform(n),
        beta=beta,
    )


def random_env(rng, n=4, d=3, beta=0.5):
    vecs = rng.normal(size=(n, d))
    vecs /= np.maximum(1.0, np.linalg.norm(vecs, axis=1, keepdims=True))
    ref = rng.uniform(0.2, 1.0, size=n)
    return FiniteBandit(
        responses=tuple(f"y{i}" for i in range(n)),
        features=FeatureMap(vecs),
        r_star=RewardVector(rng.normal(size=n)),
        pi_ref=Distribution(ref / ref.sum()),
        beta=beta,
    )


def uniform_offdiag(n):
    mu = (np.ones((n, n)) - np.eye(n)) / (n * (n - 1))
    return mu


# --- population_bt_loss ------------------------------------------------------


def test_loss_at_truth_is_preference_entropy():
    env = identity_env()
    mu = uniform_offdiag(3)
    loss = population_bt_loss(env.r_star, env, mu)
    d = env.r_star.values[:, None] - env.r_star.values[None, :]
    p = expit(d)
    m = (mu + mu.T) / 2.0
    entropy = float(-(m * (p * np.log(p) + (1 - p) * np.log(1 - p))).sum())
    assert loss == pytest.approx(entropy, abs=1e-12)


def test_zero_differences_give_log_two():
    env = identity_env()
    loss = population_bt_loss(RewardVector(np.zeros(3)), env, uniform_offdiag(3))
    assert loss == pytest.approx(math.log(2.0), abs=1e-14)


def test_truth_is_the_population_minimum():
    rng = np.random.default_rng(3)
    env = identity_env(r=(1.2, -0.3, 0.4))
    mu = uniform_offdiag(3)
    best = population_bt_loss(env.r_star, env, mu)
    for _ in range(200):
        cand = RewardVector(env.r_star.values + rng.normal(scale=0.5, size=3))
        assert population_bt_loss(cand, env, mu) >= best - 1e-12


def test_loss_invariant_under_mu_transpose():
    env = identity_env(r=(1.0, 0.2, -0.7))
    rng = np.random.default_rng(4)
    mu = rng.uniform(size=(3, 3))
    np.fill_diagonal(mu, 0.0)
    mu /= mu.sum()
    r = RewardVector(np.array([0.3, -0.2, 0.9]))
    assert population_bt_loss(r, env, mu) == pytest.approx(
        population_bt_loss(r, env, mu.T), abs=1e-14
    )


def test_malformed_mu_rejected():
    env = identity_env()
    with pytest.raises(DomainError):
        population_bt_loss(env.r_star, env, np.ones((3, 3)))


# --- fit_reward_mle ----------------------------------------------------------


def test_realizable_linear_recovers_differences():
    env = identity_env(r=(0.8, -0.4, 0.1))
    fit = fit_reward_mle(LinearClass(dim=3), env, uniform_offdiag(3))
    got = fit.reward.values[:, None] - fit.reward.values[None, :]
    want = env.r_star.values[:, None] - env.r_star.values[None, :]
    assert np.max(np.abs(got - want)) < 1e-6
    assert fit.grad_residual <= 1e-8


def test_budget_exhaustion_raises_with_residual():
    env = identity_env(r=(2.0, -2.0, 0.0))
    cfg = OptimizerConfig(max_iters=2, grad_tol=1e-12)
    with pytest.raises(ConvergenceFailure) as exc:
        fit_reward_mle(LinearClass(dim=3), env, uniform_offdiag(3), cfg)
    assert exc.value.residual > 0


def test_singleton_class_returns_its_member():
    env = identity_env()
    r_bar = RewardVector(np.array([5.0, 1.0, 2.0]))
    fit = fit_reward_mle(SingletonClass(r_bar=r_bar), env, uniform_offdiag(3))
    assert np.array_equal(fit.reward.values, r_bar.values)


def test_augmented_class_picks_strictly_better_member():
    # extra equals the truth, base family cannot represent it
    feats = FeatureMap(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
    env = FiniteBandit(
        responses=("a1", "a2", "a3"),
        features=feats,
        r_star=RewardVector(np.array([2.0, 2.0, 0.0])),
        pi_ref=Distribution.uniform(3),
        beta=1.0,
    )
    mu = uniform_offdiag(3)
    base = LinearClass(dim=2)
    aug = AugmentedClass(base=base, extra=env.r_star)
    fit = fit_reward_mle(aug, env, mu)
    assert np.array_equal(fit.reward.values, env.r_star.values)
    base_fit = fit_reward_mle(base, env, mu)
    assert fit.loss < base_fit.loss


def test_augmented_class_keeps_base_when_extra_worse():
    env = identity_env(r=(0.5, -0.5, 0.0))
    aug = AugmentedClass(
        base=LinearClass(dim=3), extra=RewardVector(np.array([-3.0, 3.0, 0.0]))
    )
    fit = fit_reward_mle(aug, env, uniform_offdiag(3))
    assert fit.linear is not None  # the fitted family won


# --- policy_stage ------------------------------------------------------------


def test_full_tabular_matches_closed_form():
    env = identity_env(r=(1.0, 0.5, -0.2), beta=0.4)
    res = policy_stage(env.r_star, FullTabular(), env)
    assert np.allclose(res.policy.probs, optimal_policy(env.r_star, env).probs)


def test_log_linear_in_span_matches_closed_form():
    env = identity_env(r=(0.9, -0.1, 0.3), beta=0.25)
    res = policy_stage(env.r_star, LogLinear(), env)
    closed = optimal_policy(env.r_star, env)
    assert np.abs(res.policy.probs - closed.probs).sum() / 2.0 < 1e-10
    assert res.theta is not None


def test_policy_stage_dominates_random_feasible_policies():
    rng = np.random.default_rng(11)
    env = identity_env(r=(1.5, 0.0, -0.5), beta=0.5)
    res = policy_stage(env.r_star, FullTabular(), env)
    for _ in range(1000):
        probs = rng.dirichlet(np.ones(3))
        assert res.value >= regularized_value(Distribution(probs), env.r_star, env) - 1e-12


def test_minus_point_blends_away_from_excluded_optimum():
    env = identity_env(r=(1.0, 0.0, -1.0), beta=0.7)
    star = optimal_policy(env.r_star, env)
    res = policy_stage(env.r_star, TabularMinusPoint(excluded=star), env)
    gap = np.abs(res.policy.probs - star.probs).sum() / 2.0
    assert 0.0 < gap <= 1e-6
    assert res.approached_excluded


def test_minus_point_unconstrained_when_optimum_differs():
    env = identity_env(r=(1.0, 0.0, -1.0), beta=0.7)
    res = policy_stage(
        env.r_star, TabularMinusPoint(excluded=Distribution.uniform(3)), env
    )
    assert np.allclose(res.policy.probs, optimal_policy(env.r_star, env).probs)
    assert not res.approached_excluded


# --- fit_dpo -----------------------------------------------------------------


def test_tabular_dpo_recovers_optimal_policy():
    env = identity_env(r=(0.6, -0.6, 0.0), beta=0.2)
    res = fit_dpo(FullTabular(), env, uniform_offdiag(3))
    tv = np.abs(res.policy.probs - optimal_policy(env.r_star, env).probs).sum() / 2.0
    assert tv < 1e-6


def test_log_linear_dpo_recovers_realizable_optimum():
    env = identity_env(r=(0.6, -0.6, 0.0))
    res = fit_dpo(LogLinear(), env, uniform_offdiag(3))
    tv = np.abs(res.policy.probs - optimal_policy(env.r_star, env).probs).sum() / 2.0
    assert tv < 1e-6


# --- pilaf_pair_distribution -------------------------------------------------


def test_constant_surrogate_collapses_to_product():
    env = identity_env(r=(0.4, -0.4, 0.0))
    alpha2, z_theta, p1, p2 = pilaf_mixture_stats(env.pi_ref, env)
    assert alpha2 == pytest.approx(1.0, abs=1e-12)
    assert z_theta == pytest.approx(4.0, abs=1e-12)
    mix = pilaf_pair_distribution(env.pi_ref, env)
    assert np.allclose(mix, np.outer(env.pi_ref.probs, env.pi_ref.probs), atol=1e-12)


def test_mixture_equals_inverse_slope_form_pointwise():
    rng = np.random.default_rng(17)
    for _ in range(10):
        env = random_env(rng, n=4)
        pol = policy_distribution(LogLinearPolicy(theta=rng.normal(size=3)), env)
        mix = pilaf_pair_distribution(pol, env)
        r_hat = surrogate_reward(pol, env).values.values
        d = r_hat[:, None] - r_hat[None, :]
        slope = expit(d) * (1.0 - expit(d))
        direct = np.outer(pol.probs, pol.probs) / slope
        direct /= direct.sum()
        assert np.max(np.abs(mix - direct)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(
    t1=st.floats(-3, 3, allow_nan=False),
    t2=st.floats(-3, 3, allow_nan=False),
    t3=st.floats(-3, 3, allow_nan=False),
)
def test_mixture_weight_and_normalizer_bounds(t1, t2, t3):
    env = identity_env(r=(0.3, -0.3, 0.1))
    pol = policy_distribution(LogLinearPolicy(theta=np.array([t1, t2, t3])), env)
    alpha2, z_theta, _, _ = pilaf_mixture_stats(pol, env)
    # the slope of the sigmoid never exceeds 1/4, so the normalizer is >= 4;
    # the tilt weight itself is >= 1 by Jensen
    assert alpha2 >= 1.0 - 1e-12
    assert z_theta >= 4.0 - 1e-12


def test_pair_distribution_rows_sum_to_one():
    env = identity_env()
    mix = pilaf_pair_distribution(env.pi_ref, env)
    assert mix.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(mix >= 0)


# --- online_dpo --------------------------------------------------------------


def test_online_realizable_converges_for_all_samplers():
    env = identity_env(r=(0.5, -0.5, 0.0))
    star = optimal_policy(env.r_star, env)
    for kind in ("fixed_ref", "on_policy", "pilaf"):
        res = online_dpo(LogLinear(), env, PairSampler(kind), OptimizerConfig())
        tv = np.abs(res.policy.probs - star.probs).sum() / 2.0
        assert tv < 1e-4, kind
        assert res.converged


def test_online_trajectory_starts_at_reference():
    env = identity_env(r=(0.5, -0.5, 0.0))
    res = online_dpo(LogLinear(), env, PairSampler("pilaf"), OptimizerConfig())
    first = res.trajectory[0]
    assert first.iteration == 0
    assert np.allclose(first.theta, 0.0)
    # all margins vanish at theta = 0, so the first loss is exactly ln 2
    assert first.loss == pytest.approx(math.log(2.0), abs=1e-14)
    iters = [t.iteration for t in res.trajectory]
    assert iters == list(range(len(iters)))


def test_online_divergence_detector_fires_on_unstable_step():
    env = identity_env(r=(1e-6, -1e-6, 0.0))
    with pytest.raises(NumericFailure, match="consecutive"):
        online_dpo(
            LogLinear(),
            env,
            PairSampler("fixed_ref"),
            OptimizerConfig(step_size=12.5, max_iters=5000),
        )


def test_online_budget_exhaustion_raises():
    env = identity_env(r=(0.5, -0.5, 0.0))
    with pytest.raises(ConvergenceFailure):
        online_dpo(LogLinear(), env, PairSampler("pilaf"), OptimizerConfig(max_iters=3))


# --- gradient identity -------------------------------------------------------


def test_identity_exact_at_zero_gap():
    env = identity_env(r=(0.5, -0.5, 0.0))
    theta = env.r_star.values / env.beta  # realizes the surrogate exactly
    report = pilaf_gradient_identity_check(theta, env)
    assert report.delta_bound == pytest.approx(0.0, abs=1e-12)
    assert report.max_abs_diff < 1e-8
    assert report.z_theta >= 4.0


def test_online_pilaf_stationary_at_zero_gap():
    env = identity_env(r=(0.5, -0.5, 0.0))
    theta = env.r_star.values / env.beta
    report = pilaf_gradient_identity_check(theta, env)
    assert np.linalg.norm(report.lhs_grad) < 1e-8


def test_identity_lhs_matches_finite_differences():
    rng = np.random.default_rng(29)
    env = random_env(rng, n=5, d=4, beta=0.8)
    theta = rng.normal(size=4)
    report = pilaf_gradient_identity_check(theta, env)
    pol = policy_distribution(LogLinearPolicy(theta=theta), env)
    frozen = pilaf_pair_distribution(pol, env)
    m = (frozen + frozen.T) / 2.0
    h = 1e-5
    fd = np.zeros(4)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        lp, _ = population_bt_grad_linear(theta + e, env.features.vectors, env.beta, env, m)
        lm, _ = population_bt_grad_linear(theta - e, env.features.vectors, env.beta, env, m)
        fd[k] = (lp - lm) / (2 * h)
    rel = np.max(np.abs(fd - report.lhs_grad)) / max(np.max(np.abs(fd)), 1e-12)
    assert rel < 1e-4


def test_identity_residual_within_envelope_for_small_gap():
    env = identity_env(r=(0.5, -0.5, 0.0))
    base = env.r_star.values / env.beta
    theta = base + np.array([0.01, -0.006, 0.004])
    report = pilaf_gradient_identity_check(theta, env)
    assert 0.0 < report.delta_bound < 0.05
    resid = np.abs(report.lhs_grad - report.rhs_grad)
    assert np.all(resid <= report.envelope + 1e-15)
    assert report.within_envelope


def test_identity_report_fields_consistent():
    env = identity_env(r=(0.7, 0.1, -0.3))
    report = pilaf_gradient_identity_check(np.array([0.2, -0.1, 0.05]), env)
    assert report.max_abs_diff == pytest.approx(
        float(np.max(np.abs(report.lhs_grad - report.rhs_grad))), abs=1e-15
    )
    assert report.rmax == pytest.approx(
        float(np.max(np.abs(env.r_star.values[:, None] - env.r_star.values[None, :]))),
        abs=1e-12,
    )


# --- auxiliary objectives ----------------------------------------------------


def test_new_objective_zero_at_matching_differences():
    env = identity_env(r=(0.5, -0.5, 0.0))
    reward = LinearReward(phi=env.r_star.values.copy())
    loss, grad = new_objective_loss(reward, env)
    assert loss == pytest.approx(0.0, abs=1e-14)
    assert np.max(np.abs(grad)) < 1e-12


def test_new_objective_gradient_matches_frozen_finite_differences():
    env = identity_env(r=(0.9, -0.2, 0.1))
    phi = np.array([0.3, -0.4, 0.1])
    loss, grad = new_objective_loss(LinearReward(phi=phi), env)
    pol = optimal_policy(LinearReward(phi=phi).reward(env), env)
    w = np.outer(pol.probs, pol.probs)
    dt = env.r_star.values[:, None] - env.r_star.values[None, :]

    def frozen_loss(p):
        rv = env.features.vectors @ p
        df = rv[:, None] - rv[None, :]
        return 0.25 * float((w * (dt - df) ** 2).sum())

    h = 1e-6
    fd = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd[k] = (frozen_loss(phi + e) - frozen_loss(phi - e)) / (2 * h)
    assert np.max(np.abs(fd - grad)) < 1e-6
    assert loss == pytest.approx(frozen_loss(phi), abs=1e-14)


def test_ipo_loss_minimized_at_zero_margin_on_symmetric_env():
    env = identity_env(r=(0.0, 0.0, 0.0))
    sampler = PairSampler("on_policy")
    l0, g0 = online_ipo_loss(env.pi_ref, env, sampler)
    assert l0 == pytest.approx(0.0, abs=1e-14)
    assert np.max(np.abs(g0)) < 1e-12
    # any nonzero margin does worse
    pol = policy_distribution(LogLinearPolicy(theta=np.array([0.5, -0.5, 0.0])), env)
    l1, _ = online_ipo_loss(pol, env, sampler)
    assert l1 > l0


def test_ipo_gradient_matches_frozen_finite_differences():
    env = identity_env(r=(0.8, -0.3, 0.2))
    sampler = PairSampler("pilaf")
    theta = np.array([0.2, -0.3, 0.1])
    pol = policy_distribution(LogLinearPolicy(theta=theta), env)
    loss, grad = online_ipo_loss(pol, env, sampler)
    frozen = sampler.pair_distribution(pol, env)
    w = (frozen + frozen.T) / 2.0
    dt = env.r_star.values[:, None] - env.r_star.values[None, :]
    target = (expit(dt) - expit(-dt)) / 2.0

    def frozen_loss(t):
        p2 = policy_distribution(LogLinearPolicy(theta=t), env)
        rh = surrogate_reward(p2, env).values.values
        dh = rh[:, None] - rh[None, :]
        return float((w * (dh - target) ** 2).sum())

    h = 1e-6
    fd = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd[k] = (frozen_loss(theta + e) - frozen_loss(theta - e)) / (2 * h)
    assert np.max(np.abs(fd - grad)) < 1e-5


# --- solver core -------------------------------------------------------------


def test_minimize_projected_quadratic_with_constraint():
    target = np.array([3.0, -1.0])

    def lg(x):
        return float(((x - target) ** 2).sum()), 2.0 * (x - target)

    def project(x):
        return np.minimum(x, 1.0)  # box x <= 1 per coordinate

    x, loss, resid, _ = minimize_projected(
        lg, np.zeros(2), project, OptimizerConfig(step_size=0.4)
    )
    assert np.allclose(x, np.array([1.0, -1.0]), atol=1e-7)
    assert resid <= 1e-8


def test_optimizer_config_validation():
    with pytest.raises(DomainError):
        OptimizerConfig(step_size=0.0)
    with pytest.raises(DomainError):
        OptimizerConfig(max_iters=0)
