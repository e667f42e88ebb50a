import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prefgap.bandit import (
    Distribution,
    FeatureMap,
    FiniteBandit,
    RewardVector,
    center_reward,
    regularized_value,
)
from prefgap.classes import LogLinearPolicy, policy_distribution
from prefgap.constructions import (
    CONDITION_IDS,
    ScenarioArtifacts,
    ScenarioResult,
    env_three_arm_midpoint,
    grid_oracle_1d,
    log_ratio_coordinate,
    run_condition,
)
from prefgap.errors import ClaimViolation, DomainError
from prefgap.exact import PairSampler, population_bt_loss

# Frozen desk-check values, derived independently of the solvers: closed-form
# optima (beta·log Z), direct evaluation of the 1-D value curve, and
# brute-force minimization of the preference loss along the same coordinate.
V_UNIFORM = 2.0 / 3.0
V_TABULAR_STAR = 0.9594557591599078  # beta·logZ, (1,1,0), beta=0.1
V_LOGLINEAR_STAR = 0.8901433153513372  # value curve at its interior max x=2
V_SMALL_BETA_PLATEAU = 0.9890138771133189  # 1 − 0.01·log 3
V_PINNED_REWARD = 0.7286498582623853  # pi ∝ (e, 1/e, 1) under (1,1,0)
V_EXCLUDED_BLEND = 0.9594557589163802  # (1−1e-6)·pi* + 1e-6·uniform
V_BOX_EDGE_SYM = 9.934720021475671  # (12,12,0), beta=1: value at |x|=4
V_BOX_EDGE_SKEW = 20.336480007843686  # (24,12,0), beta=1: value at x=4
V_OFFLINE_SKEW = 15.601464752206665  # (24,12,0): value at the loss argmin
X_OFFLINE_SKEW = 1.512603277599271
V_REALIZABLE_STAR = 1.5221596699158946  # beta·logZ, identity features
PI_STAR_REALIZABLE = np.array([0.86681333, 0.11731043, 0.01587624])
MARGIN_RBAR = 0.012593923011992  # family-min loss − loss of (2,2,0)
MARGIN_RSTAR = 0.049308476298545  # family-min loss − loss of (1,1,0)


@pytest.fixture(scope="module")
def baseline():
    return run_condition("3.1")


@pytest.fixture(scope="module")
def reward_richer():
    return run_condition("3.2")


@pytest.fixture(scope="module")
def policy_richer():
    return run_condition("3.3")


@pytest.fixture(scope="module")
def online_pinned():
    return run_condition("3.4-online")


@pytest.fixture(scope="module")
def matched():
    return run_condition("3.5-iso")


@pytest.fixture(scope="module")
def either_order_policy():
    return run_condition("3.6-two-envs")


@pytest.fixture(scope="module")
def either_order_reward():
    return run_condition("3.7-two-envs")


@pytest.fixture(scope="module")
def online_escapes():
    return run_condition("3.8-online")


def nearest_side(x, x_opt):
    # symmetric curves carry twin optima at ±x_opt and argmax ties break
    # toward the first grid index, so agreement is to the nearer twin
    return min(abs(x - x_opt), abs(x + x_opt))


# --- environment factory ------------------------------------------------------


def test_midpoint_env_geometry():
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    psi = env.features.vectors
    assert env.n == 3
    assert not np.array_equal(psi[0], psi[1])
    assert np.array_equal(psi[2], (psi[0] + psi[1]) / 2.0)
    assert np.array_equal(env.pi_ref.probs, np.full(3, 1.0 / 3.0))
    assert env.beta == 0.1
    assert np.array_equal(env.r_star.values, [1.0, 1.0, 0.0])


@pytest.mark.parametrize(
    "r,beta",
    [((1.0, 1.0, 0.0), 0.1), ((12.0, 12.0, 0.0), 1.0), ((24.0, 12.0, 0.0), 1.0)],
)
def test_midpoint_env_named_instances(r, beta):
    env = env_three_arm_midpoint(r, beta)
    assert env.beta == beta
    assert tuple(env.r_star.values) == r


# --- log-ratio coordinate -----------------------------------------------------


@given(
    st.tuples(
        st.floats(-5.0, 5.0, allow_nan=False), st.floats(-5.0, 5.0, allow_nan=False)
    )
)
def test_log_ratio_coordinate_theta_policy_consistency(theta):
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    arr = np.asarray(theta)
    pol = policy_distribution(LogLinearPolicy(arr), env)
    from_theta = log_ratio_coordinate(arr, env).x
    from_policy = log_ratio_coordinate(pol, env).x
    assert from_policy == pytest.approx(from_theta, abs=1e-9)


def test_log_ratio_coordinate_rejects_zero_probability():
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    degenerate = Distribution(np.array([0.5, 0.0, 0.5]))
    with pytest.raises(DomainError):
        log_ratio_coordinate(degenerate, env)


# --- grid oracle --------------------------------------------------------------


def test_grid_rejects_non_midpoint_env():
    env = FiniteBandit(
        responses=("y0", "y1", "y2"),
        features=FeatureMap(np.eye(3)),
        r_star=RewardVector(np.array([1.0, 0.0, 0.0])),
        pi_ref=Distribution.uniform(3),
        beta=1.0,
    )
    with pytest.raises(DomainError):
        grid_oracle_1d(env, "rl_value", (-4.0, 4.0))


def test_grid_rejects_bad_arguments():
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    with pytest.raises(DomainError):
        grid_oracle_1d(env, "nonsense", (-4.0, 4.0))
    with pytest.raises(DomainError):
        grid_oracle_1d(env, "rl_value", (2.0, 2.0))
    with pytest.raises(DomainError):
        grid_oracle_1d(env, "rl_value", (-4.0, 4.0), resolution=1)


def test_grid_rl_value_frozen_curve():
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    curve = grid_oracle_1d(env, "rl_value", (-4.0, 4.0))
    assert abs(curve.x_opt) == pytest.approx(2.0, abs=1e-12)
    assert curve.value_opt == pytest.approx(V_LOGLINEAR_STAR, abs=1e-12)
    k0 = int(np.argmin(np.abs(curve.xs)))
    assert curve.xs[k0] == 0.0
    assert curve.values[k0] == V_UNIFORM


def test_grid_rl_value_symmetric_for_symmetric_reward():
    for r, beta in [((1.0, 1.0, 0.0), 0.1), ((12.0, 12.0, 0.0), 1.0)]:
        curve = grid_oracle_1d(env_three_arm_midpoint(r, beta), "rl_value", (-4.0, 4.0))
        np.testing.assert_allclose(curve.values, curve.values[::-1], atol=1e-12)


def test_grid_refinement_stability():
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    coarse = grid_oracle_1d(env, "rl_value", (-4.0, 4.0), 4001)
    fine = grid_oracle_1d(env, "rl_value", (-4.0, 4.0), 8001)
    assert abs(fine.value_opt - coarse.value_opt) <= 1e-10
    assert nearest_side(fine.x_opt, coarse.x_opt) <= coarse.cell + 1e-12


def test_grid_dpo_loss_minimized_at_reference_for_symmetric_reward():
    env = env_three_arm_midpoint((12.0, 12.0, 0.0), 1.0)
    curve = grid_oracle_1d(env, "dpo_loss", (-4.0, 4.0))
    assert curve.x_opt == 0.0
    np.testing.assert_allclose(curve.values, curve.values[::-1], atol=1e-12)
    k = {x: int(np.argmin(np.abs(curve.xs - x))) for x in (0.0, 1.0, 2.0, 4.0)}
    assert curve.values[k[0.0]] < curve.values[k[1.0]] < curve.values[k[2.0]]
    assert curve.values[k[2.0]] < curve.values[k[4.0]]


def test_grid_dpo_loss_interior_min_for_skewed_reward():
    env = env_three_arm_midpoint((24.0, 12.0, 0.0), 1.0)
    curve = grid_oracle_1d(env, "dpo_loss", (-4.0, 4.0))
    assert abs(curve.x_opt - X_OFFLINE_SKEW) <= curve.cell


def test_grid_residual_fixed_point_at_reference_under_mixture_sampler():
    env = env_three_arm_midpoint((12.0, 12.0, 0.0), 1.0)
    curve = grid_oracle_1d(env, "online_dpo_fixed_point_residual", (-4.0, 4.0))
    assert curve.x_opt == 0.0
    assert curve.value_opt == 0.0
    for probe in (-4.0, -2.0, 2.0, 4.0):
        k = int(np.argmin(np.abs(curve.xs - probe)))
        assert curve.values[k] > 1e-3


def test_grid_residual_fixed_point_at_edge_under_on_policy_sampler():
    env = env_three_arm_midpoint((24.0, 12.0, 0.0), 1.0)
    curve = grid_oracle_1d(
        env,
        "online_dpo_fixed_point_residual",
        (-4.0, 4.0),
        sampler=PairSampler("on_policy"),
    )
    assert curve.x_opt == 4.0
    assert curve.value_opt == 0.0
    k0 = int(np.argmin(np.abs(curve.xs)))
    assert curve.values[k0] > 1e-3


# --- scenario values against frozen numbers -----------------------------------


def test_baseline_all_routes_reach_oracle(baseline):
    res = baseline
    assert res.condition_label == "3.1"
    assert res.v_star_class == pytest.approx(V_REALIZABLE_STAR, abs=1e-12)
    for v in (res.v_rlhf, res.v_dpo, res.v_online_dpo):
        assert v == pytest.approx(V_REALIZABLE_STAR, abs=1e-9)
    for pol in (
        res.artifacts.rlhf_policy,
        res.artifacts.dpo_policy,
        res.artifacts.online_policy,
    ):
        np.testing.assert_allclose(pol.probs, PI_STAR_REALIZABLE, atol=1e-6)
    # identity features are 3-D, so there is no scalar reduction to report
    assert res.artifacts.x_rlhf is None


def test_reward_richer_strict_separation(reward_richer):
    res = reward_richer
    assert res.v_rlhf == pytest.approx(V_LOGLINEAR_STAR, abs=1e-8)
    assert res.v_dpo == V_UNIFORM
    assert res.v_online_dpo is None
    assert res.v_star_class == pytest.approx(V_LOGLINEAR_STAR, abs=1e-12)
    # the direct fit never leaves the reference policy on symmetric data
    assert float(np.max(np.abs(res.artifacts.dpo_policy.probs - 1.0 / 3.0))) <= 1e-15
    # the selected reward is the augmented member, not a surrogate
    assert np.array_equal(res.artifacts.reward.values, [1.0, 1.0, 0.0])


def test_policy_richer_strict_separation(policy_richer):
    res = policy_richer
    assert res.v_rlhf == V_UNIFORM
    assert res.v_dpo == pytest.approx(V_TABULAR_STAR, abs=1e-12)
    assert abs(res.v_dpo - res.v_star_class) <= 1e-12
    # the weak reward stage can only produce a constant
    centered = center_reward(
        res.artifacts.reward, env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    )
    assert float(np.max(np.abs(centered.values))) <= 1e-9


def test_online_sampler_pinned_at_offline_fixed_point(online_pinned):
    res = online_pinned
    assert res.v_rlhf == pytest.approx(V_BOX_EDGE_SYM, abs=1e-9)
    assert res.v_dpo == 8.0
    assert res.v_online_dpo == 8.0
    assert res.artifacts.x_dpo == 0.0
    assert res.artifacts.x_online == 0.0
    assert abs(res.artifacts.x_rlhf) == pytest.approx(4.0, abs=1e-9)


def test_matched_classes_tie_exactly(matched):
    res = matched
    assert res.v_rlhf == V_UNIFORM
    assert res.v_dpo == V_UNIFORM
    assert res.v_star_class == pytest.approx(V_LOGLINEAR_STAR, abs=1e-12)
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    # both routes estimate the same (constant) canonical reward
    assert float(np.max(np.abs(center_reward(res.artifacts.reward, env).values))) <= 1e-9
    assert float(np.max(np.abs(res.artifacts.dpo_policy.probs - 1.0 / 3.0))) <= 1e-15


def test_policy_richer_pair_has_both_orders(either_order_policy):
    res_a, res_b = either_order_policy
    assert res_a.condition_label == "3.6-two-envs/A"
    assert res_b.condition_label == "3.6-two-envs/B"
    # A: direct fit nearly attains the (excluded-point) tabular supremum
    assert res_a.v_rlhf == V_UNIFORM
    assert res_a.v_dpo == pytest.approx(V_EXCLUDED_BLEND, abs=1e-9)
    assert res_a.v_star_class == pytest.approx(V_TABULAR_STAR, abs=1e-12)
    assert res_a.v_dpo < res_a.v_star_class
    # B: acting on the pinned slightly-wrong reward beats staying put
    assert res_b.v_rlhf == pytest.approx(V_PINNED_REWARD, abs=1e-9)
    assert res_b.v_dpo == V_UNIFORM
    assert res_b.v_rlhf - res_b.v_dpo > 0.06


def test_reward_richer_pair_has_both_orders(either_order_reward):
    res_a, res_b = either_order_reward
    # A: near-vanishing regularization, two-stage suppresses the bad response
    assert res_a.v_rlhf == pytest.approx(V_SMALL_BETA_PLATEAU, abs=1e-9)
    assert res_a.v_dpo == V_UNIFORM
    assert float(res_a.artifacts.rlhf_policy.probs[2]) < 1e-3
    # B: halfspace-pinned class, the proxy overshoots the boundary optimum
    assert res_b.v_dpo == pytest.approx(V_LOGLINEAR_STAR, abs=1e-12)
    v_asymptote = 1.0 - 0.1 * np.log(3.0)
    assert v_asymptote < res_b.v_rlhf < V_LOGLINEAR_STAR
    gap = res_b.v_dpo - res_b.v_rlhf
    assert 4.4e-6 < gap < 4.6e-6


def test_online_sampler_escapes_to_edge(online_escapes):
    res = online_escapes
    assert res.v_online_dpo == pytest.approx(V_BOX_EDGE_SKEW, abs=1e-9)
    assert abs(res.v_online_dpo - res.v_star_class) <= 1e-9
    assert res.v_dpo == pytest.approx(V_OFFLINE_SKEW, abs=1e-6)
    assert abs(res.v_rlhf - res.v_dpo) <= 5e-7
    assert res.artifacts.x_dpo == pytest.approx(X_OFFLINE_SKEW, abs=1e-6)
    assert res.artifacts.x_online == 4.0


# --- grid/solver agreement ----------------------------------------------------


def test_solver_matches_grid_reward_richer(reward_richer):
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    curve = grid_oracle_1d(env, "rl_value", (-4.0, 4.0))
    assert nearest_side(reward_richer.artifacts.x_rlhf, curve.x_opt) <= curve.cell
    assert abs(reward_richer.v_rlhf - curve.value_opt) <= 1e-8


def test_solver_matches_grid_box_scenarios(online_pinned, online_escapes):
    sym = env_three_arm_midpoint((12.0, 12.0, 0.0), 1.0)
    curve = grid_oracle_1d(sym, "rl_value", (-4.0, 4.0))
    assert nearest_side(online_pinned.artifacts.x_rlhf, curve.x_opt) <= curve.cell
    residual = grid_oracle_1d(sym, "online_dpo_fixed_point_residual", (-4.0, 4.0))
    assert online_pinned.artifacts.x_online == residual.x_opt

    skew = env_three_arm_midpoint((24.0, 12.0, 0.0), 1.0)
    loss = grid_oracle_1d(skew, "dpo_loss", (-4.0, 4.0))
    assert abs(online_escapes.artifacts.x_dpo - loss.x_opt) <= loss.cell
    value = grid_oracle_1d(skew, "rl_value", (-4.0, 4.0))
    assert online_escapes.artifacts.x_online == value.x_opt


def test_solver_matches_grid_on_flat_stretches(either_order_reward):
    res_a, res_b = either_order_reward
    # A's value curve is float-flat at the top, so positions are
    # ill-conditioned and the landing is compared by value
    assert abs(res_a.v_rlhf - res_a.v_star_class) <= 1e-12
    # B's proxy-reward curve: same flatness, same value-form comparison
    env_b = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    proxy_env = dataclasses.replace(env_b, r_star=res_b.artifacts.reward)
    proxy = grid_oracle_1d(proxy_env, "rl_value", (2.0, 6.0))
    attained = regularized_value(
        res_b.artifacts.rlhf_policy, res_b.artifacts.reward, env_b
    )
    assert abs(attained - proxy.value_opt) <= 1e-8


def test_dpo_solver_sits_on_grid_minimum(matched):
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    curve = grid_oracle_1d(env, "dpo_loss", (-4.0, 4.0))
    assert curve.x_opt == 0.0
    assert matched.artifacts.x_dpo == curve.x_opt


# --- augmented-member likelihood ----------------------------------------------


def test_pinned_members_beat_surrogate_family_likelihood():
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    mu = np.outer(env.pi_ref.probs, env.pi_ref.probs)
    family_min = grid_oracle_1d(env, "dpo_loss", (-4.0, 4.0)).value_opt
    margin_rbar = family_min - population_bt_loss(
        RewardVector(np.array([2.0, 2.0, 0.0])), env, mu
    )
    margin_rstar = family_min - population_bt_loss(env.r_star, env, mu)
    assert margin_rbar == pytest.approx(MARGIN_RBAR, abs=1e-9)
    assert margin_rstar == pytest.approx(MARGIN_RSTAR, abs=1e-9)


# --- dispatch and result plumbing ----------------------------------------------


def test_condition_ids_are_the_published_interface():
    assert CONDITION_IDS == (
        "3.1",
        "3.2",
        "3.3",
        "3.4-online",
        "3.5-iso",
        "3.6-two-envs",
        "3.7-two-envs",
        "3.8-online",
    )


def test_run_condition_rejects_unknown_id():
    with pytest.raises(DomainError, match="3.5-iso"):
        run_condition("3.9")


def test_result_construction_caps_values_at_oracle():
    artifacts = ScenarioArtifacts(
        reward=RewardVector(np.zeros(3)),
        rlhf_policy=Distribution.uniform(3),
        dpo_policy=Distribution.uniform(3),
    )
    with pytest.raises(ClaimViolation):
        ScenarioResult(
            condition_label="3.1",
            v_rlhf=1.0 + 1e-6,
            v_dpo=0.5,
            v_star_class=1.0,
            artifacts=artifacts,
        )


def test_as_dict_is_json_ready(matched, online_pinned):
    for res in (matched, online_pinned):
        payload = json.loads(json.dumps(res.as_dict()))
        assert payload["condition"] == res.condition_label
        assert payload["v_rlhf"] == res.v_rlhf
        assert payload["rlhf_minus_dpo"] == res.v_rlhf - res.v_dpo
    assert json.loads(json.dumps(matched.as_dict()))["v_online_dpo"] is None


def test_margins_deterministic_across_runs(matched):
    again = run_condition("3.5-iso")
    assert again.v_rlhf == matched.v_rlhf
    assert again.v_dpo == matched.v_dpo
    assert again.v_star_class == matched.v_star_class
