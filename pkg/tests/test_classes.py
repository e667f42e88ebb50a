import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefgap.bandit import (
    Distribution,
    FeatureMap,
    FiniteBandit,
    RewardVector,
    center_reward,
    optimal_policy,
)
from prefgap.classes import (
    AugmentedClass,
    ClassRelation,
    FullTabular,
    LinearBounded,
    LinearClass,
    LinearReward,
    LogLinear,
    LogLinearHalfspace,
    LogLinearLogRatioBox,
    LogLinearPolicy,
    SingletonClass,
    SurrogateClass,
    TabularMinusPoint,
    class_relation,
    policy_distribution,
    project_into_class,
    surrogate_reward,
)
from prefgap.errors import DomainError, UnsupportedQuery


def midpoint_env(r=(0.0, 0.0, 0.0), beta=1.0):
    """Three responses with features e1, e2 and their midpoint, uniform ref."""
    feats = FeatureMap(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
    return FiniteBandit(
        responses=("a1", "a2", "a3"),
        features=feats,
        r_star=RewardVector(np.array(r, dtype=float)),
        pi_ref=Distribution.uniform(3),
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


# --- policy_distribution -----------------------------------------------------


def test_zero_theta_is_reference():
    env = midpoint_env()
    pol = policy_distribution(LogLinearPolicy(theta=np.zeros(2)), env)
    assert np.allclose(pol.probs, env.pi_ref.probs, atol=1e-15)


def test_midpoint_features_give_e_inverse_e_one():
    env = midpoint_env()
    pol = policy_distribution(LogLinearPolicy(theta=np.array([1.0, -1.0])), env)
    expected = np.array([np.e, 1.0 / np.e, 1.0])
    assert np.allclose(pol.probs, expected / expected.sum(), atol=1e-12)


def test_log_odds_scale_linearly_in_theta():
    env = midpoint_env()
    base = np.array([0.7, -0.3])
    for t in (1.0, 2.0, 4.0):
        pol = policy_distribution(LogLinearPolicy(theta=t * base), env)
        lo = np.log(pol.probs[0] / pol.probs[1])
        lo1 = np.log(
            policy_distribution(LogLinearPolicy(theta=base), env).probs[0]
            / policy_distribution(LogLinearPolicy(theta=base), env).probs[1]
        )
        assert lo == pytest.approx(t * lo1, rel=1e-10)


def test_dimension_mismatch_rejected():
    env = midpoint_env()
    with pytest.raises(DomainError):
        policy_distribution(LogLinearPolicy(theta=np.zeros(3)), env)


# --- surrogate_reward --------------------------------------------------------


def test_reference_policy_has_zero_surrogate():
    env = midpoint_env(beta=0.3)
    s = surrogate_reward(env.pi_ref, env)
    assert np.allclose(s.values.values, 0.0, atol=1e-14)


def test_surrogate_margin_identity():
    env = midpoint_env(beta=0.7)
    theta = np.array([1.3, -0.4])
    pol = policy_distribution(LogLinearPolicy(theta=theta), env)
    s = surrogate_reward(pol, env).values.values
    psi = env.features.vectors
    for i in range(3):
        for j in range(3):
            expected = env.beta * (psi[i] - psi[j]) @ theta
            assert s[i] - s[j] == pytest.approx(expected, abs=1e-12)


def test_surrogate_of_optimal_policy_recovers_reward():
    rng = np.random.default_rng(7)
    for _ in range(20):
        env = random_env(rng)
        pol = optimal_policy(env.r_star, env)
        s = surrogate_reward(pol, env).values
        diff = center_reward(s, env).values - center_reward(env.r_star, env).values
        assert np.max(np.abs(diff)) < 1e-9


def test_surrogate_round_trip_through_optimal_policy():
    rng = np.random.default_rng(8)
    for _ in range(20):
        env = random_env(rng)
        pol = policy_distribution(LogLinearPolicy(theta=rng.normal(size=3)), env)
        back = optimal_policy(surrogate_reward(pol, env).values, env)
        assert np.abs(back.probs - pol.probs).sum() / 2.0 < 1e-10


def test_surrogate_rejects_zero_probability():
    env = midpoint_env()
    dead = Distribution(np.array([0.5, 0.5, 0.0]))
    with pytest.raises(DomainError):
        surrogate_reward(dead, env)


# --- class_relation ----------------------------------------------------------


def test_linear_vs_loglinear_isomorphic():
    env = midpoint_env()
    assert class_relation(LinearClass(dim=2), LogLinear(), env) is ClassRelation.ISOMORPHIC


def test_singleton_inside_span_is_policy_stronger():
    env = midpoint_env()
    pol = policy_distribution(LogLinearPolicy(theta=np.array([1.0, -1.0])), env)
    r_theta = surrogate_reward(pol, env).values
    rel = class_relation(SingletonClass(r_bar=r_theta), LogLinear(), env)
    assert rel is ClassRelation.POLICY_STRONGER


def test_augmented_surrogate_plus_outside_reward_is_reward_stronger():
    env = midpoint_env()
    half = LogLinearHalfspace(a=np.array([1.0, -1.0]), b=20.0)
    extra = RewardVector(np.array([2.0, 2.0, 0.0]))
    spec = AugmentedClass(base=SurrogateClass(policy_spec=half), extra=extra)
    assert class_relation(spec, half, env) is ClassRelation.REWARD_STRONGER


def test_augmented_with_representable_extra_is_isomorphic():
    env = midpoint_env()
    pol = policy_distribution(LogLinearPolicy(theta=np.array([0.5, -0.5])), env)
    extra = surrogate_reward(pol, env).values
    spec = AugmentedClass(base=SurrogateClass(policy_spec=LogLinear()), extra=extra)
    assert class_relation(spec, LogLinear(), env) is ClassRelation.ISOMORPHIC


def test_bounded_linear_vs_loglinear_policy_stronger():
    env = midpoint_env()
    rel = class_relation(LinearBounded(dim=2, bound=1.0), LogLinear(), env)
    assert rel is ClassRelation.POLICY_STRONGER


def test_unsupported_combination_refuses_to_guess():
    env = midpoint_env()
    half = LogLinearHalfspace(a=np.array([1.0, -1.0]), b=20.0)
    with pytest.raises(UnsupportedQuery):
        class_relation(SingletonClass(r_bar=env.r_star), half, env)


def test_isomorphic_implies_randomized_round_trips():
    rng = np.random.default_rng(21)
    env = midpoint_env()
    assert class_relation(LinearClass(dim=2), LogLinear(), env) is ClassRelation.ISOMORPHIC
    for _ in range(100):
        phi = rng.normal(size=2)
        member = LinearReward(phi=phi).reward(env)
        # the matching policy is the optimal policy of the member itself
        pol = optimal_policy(member, env)
        back = surrogate_reward(pol, env).values
        gap = center_reward(back, env).values - center_reward(member, env).values
        assert np.max(np.abs(gap)) < 1e-9


# --- project_into_class ------------------------------------------------------


def test_projection_feasible_point_unchanged():
    half = LogLinearHalfspace(a=np.array([1.0, -1.0]), b=20.0)
    theta = np.array([30.0, -10.0])
    assert np.allclose(project_into_class(theta, half), theta)


def test_halfspace_projection_from_origin():
    half = LogLinearHalfspace(a=np.array([1.0, -1.0]), b=20.0)
    proj = project_into_class(np.zeros(2), half)
    assert np.allclose(proj, np.array([10.0, -10.0]), atol=1e-12)


def test_log_ratio_box_projection_clips_exactly():
    env = midpoint_env()
    box = LogLinearLogRatioBox.for_env(env, pair=(0, 1), bound=4.0)
    theta = np.array([5.0, 0.0])  # x(theta) = 5
    proj = project_into_class(theta, box)
    x = float(proj @ box.normal)
    assert x == pytest.approx(4.0, abs=1e-12)


def test_projection_idempotent():
    env = midpoint_env()
    box = LogLinearLogRatioBox.for_env(env, pair=(0, 1), bound=4.0)
    half = LogLinearHalfspace(a=np.array([1.0, -1.0]), b=20.0)
    for spec in (box, half):
        p1 = project_into_class(np.array([9.0, -3.0]), spec)
        p2 = project_into_class(p1, spec)
        assert np.allclose(p1, p2, atol=1e-12)


def test_infeasible_halfspace_rejected():
    with pytest.raises(DomainError):
        LogLinearHalfspace(a=np.zeros(2), b=1.0)


@settings(max_examples=60, deadline=None)
@given(
    t1=st.floats(-50, 50, allow_nan=False),
    t2=st.floats(-50, 50, allow_nan=False),
    b=st.floats(-10, 10, allow_nan=False),
)
def test_projection_output_always_feasible(t1, t2, b):
    half = LogLinearHalfspace(a=np.array([1.0, -1.0]), b=b)
    proj = project_into_class(np.array([t1, t2]), half)
    assert half.contains(proj)
    env = midpoint_env()
    box = LogLinearLogRatioBox.for_env(env, pair=(0, 1), bound=4.0)
    projb = project_into_class(np.array([t1, t2]), box)
    assert box.contains(projb)


# --- LinearReward ------------------------------------------------------------


def test_linear_reward_beta_scaling():
    env = midpoint_env(beta=0.25)
    phi = np.array([2.0, -1.0])
    unscaled = LinearReward(phi=phi).reward(env).values
    scaled = LinearReward(phi=phi, scale_by_beta=True).reward(env).values
    assert np.allclose(scaled, 0.25 * unscaled, atol=1e-14)


def test_linear_reward_bound_enforced():
    with pytest.raises(DomainError):
        LinearReward(phi=np.array([3.0, 4.0]), bound=4.0)
