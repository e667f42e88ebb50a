"""Exact solvers for the KL-regularized preference pipeline.

Everything here works on finite response sets by exact enumeration: population
losses are weighted sums over ordered pairs, gradients are closed-form, and
there is no Monte Carlo anywhere.  The two routes under study share this
module:

* reward route: ``fit_reward_mle`` (population Bradley-Terry MLE over a reward
  class) followed by ``policy_stage`` (KL-regularized value maximization over
  a policy class);
* direct route: ``fit_dpo`` (the same BT objective expressed through the
  policy's implied surrogate reward), plus its online variant ``online_dpo``
  driven by a ``PairSampler``.

``pilaf_gradient_identity_check`` verifies, per parameter coordinate, that the
gradient of the sampled online objective equals a scaled value gradient up to
a curvature envelope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.special import expit

from .bandit import (
    Distribution,
    FiniteBandit,
    RewardVector,
    center_reward,
    kl_divergence,
    optimal_policy,
    regularized_value,
)
from .classes import (
    AugmentedClass,
    _linear_rep,
    FullTabular,
    LinearBounded,
    LinearClass,
    LinearReward,
    LogLinear,
    LogLinearHalfspace,
    LogLinearLogRatioBox,
    LogLinearPolicy,
    PolicyClassSpec,
    RewardClassSpec,
    SingletonClass,
    SurrogateClass,
    TabularMinusPoint,
    EPS_OPEN,
    policy_distribution,
    project_into_class,
    surrogate_reward,
)
from .errors import ConvergenceFailure, DomainError, NumericFailure

__all__ = [
    "OptimizerConfig",
    "PairSampler",
    "FittedReward",
    "PolicyStageResult",
    "DirectFitResult",
    "TrajectoryPoint",
    "OnlineResult",
    "GradientIdentityReport",
    "population_bt_loss",
    "population_bt_grad_linear",
    "fit_reward_mle",
    "policy_stage",
    "fit_dpo",
    "pilaf_pair_distribution",
    "pilaf_mixture_stats",
    "online_dpo",
    "pilaf_gradient_identity_check",
    "new_objective_loss",
    "online_ipo_loss",
    "minimize_projected",
]

_DIVERGENCE_PATIENCE = 50


def _policy_of(theta: np.ndarray, env: FiniteBandit) -> Distribution:
    return policy_distribution(LogLinearPolicy(theta=np.asarray(theta, dtype=float)), env)



# ---------------------------------------------------------------------------
# configuration and result records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs for the projected-gradient solver.

    ``step_size`` is the largest step the backtracking line search will try;
    ``grad_tol`` bounds the projected-gradient residual at termination.
    """

    step_size: float = 1.0
    max_iters: int = 200_000
    grad_tol: float = 1e-8
    armijo_slope: float = 1e-4

    def __post_init__(self) -> None:
        if self.step_size <= 0 or self.grad_tol <= 0:
            raise DomainError("step_size and grad_tol must be positive")
        if self.max_iters < 1:
            raise DomainError("max_iters must be at least 1")


@dataclass(frozen=True)
class PairSampler:
    """Distribution over ordered response pairs used by the online loop.

    * ``fixed_ref``: both responses from the reference policy, every step.
    * ``on_policy``: both responses from the current policy.
    * ``pilaf``: the variance-matched mixture whose ordered-pair law is
      proportional to pi(y) pi(y') / sigma'(surrogate margin).
    """

    kind: Literal["fixed_ref", "on_policy", "pilaf"]

    def pair_distribution(self, policy: Distribution, env: FiniteBandit) -> np.ndarray:
        if self.kind == "fixed_ref":
            ref = env.pi_ref.probs
            return np.outer(ref, ref)
        if self.kind == "on_policy":
            return np.outer(policy.probs, policy.probs)
        if self.kind == "pilaf":
            return pilaf_pair_distribution(policy, env)
        raise DomainError(f"unknown sampler kind {self.kind!r}")


@dataclass(frozen=True)
class FittedReward:
    """Outcome of the reward-estimation stage.

    ``reward`` is authoritative (tabular, one value per response); ``linear``
    is attached when the selected reward has a feature-linear representation.
    """

    reward: RewardVector
    linear: LinearReward | None
    loss: float
    grad_residual: float
    picked_fixed_point: bool = False


@dataclass(frozen=True)
class PolicyStageResult:
    policy: Distribution
    value: float
    theta: np.ndarray | None
    approached_excluded: bool = False


@dataclass(frozen=True)
class DirectFitResult:
    policy: Distribution
    loss: float
    theta: np.ndarray | None
    approached_excluded: bool = False


@dataclass(frozen=True)
class TrajectoryPoint:
    iteration: int
    loss: float
    value: float
    theta: tuple[float, ...]


@dataclass(frozen=True)
class OnlineResult:
    policy: Distribution
    theta: np.ndarray
    trajectory: tuple[TrajectoryPoint, ...]
    converged: bool


@dataclass(frozen=True)
class GradientIdentityReport:
    """Coordinatewise comparison of the sampled-objective gradient against
    the scaled value gradient, with the curvature envelope that must absorb
    the difference."""

    lhs_grad: np.ndarray
    rhs_grad: np.ndarray
    z_theta: float
    max_abs_diff: float
    delta_bound: float
    rmax: float
    envelope: np.ndarray

    def __post_init__(self) -> None:
        if not self.z_theta > 0:
            raise NumericFailure(f"pair-mixture normalizer must be positive, got {self.z_theta}")

    @property
    def within_envelope(self) -> bool:
        return bool(np.all(np.abs(self.lhs_grad - self.rhs_grad) <= self.envelope + 1e-15))


# ---------------------------------------------------------------------------
# population Bradley-Terry objective
# ---------------------------------------------------------------------------


def _symmetrize(mu: np.ndarray, n: int) -> np.ndarray:
    m = np.asarray(mu, dtype=float)
    if m.shape != (n, n):
        raise DomainError(f"pair distribution must be {n}x{n}, got {m.shape}")
    if np.any(m < -1e-15):
        raise DomainError("pair distribution has negative mass")
    total = float(m.sum())
    if not np.isclose(total, 1.0, rtol=0.0, atol=1e-9):
        raise DomainError(f"pair distribution sums to {total}, expected 1")
    return (m + m.T) / 2.0


def population_bt_loss(
    reward: RewardVector, env: FiniteBandit, mu: np.ndarray
) -> float:
    """Exact expected Bradley-Terry negative log-likelihood.

    ``mu`` is a matrix of ordered-pair weights; it is symmetrized internally,
    which matches labeling each drawn pair in both directions with the true
    preference probabilities.  At the true reward the loss equals the
    expected binary entropy of the preference probabilities, which is the
    population minimum.
    """

    m = _symmetrize(mu, env.n)
    diffs_true = env.r_star.values[:, None] - env.r_star.values[None, :]
    diffs_model = reward.values[:, None] - reward.values[None, :]
    p_true = expit(diffs_true)
    # log sigma computed stably: log sigma(x) = -log(1 + exp(-x)).  The factor
    # 2 makes each drawn pair carry the full expected label cross-entropy
    # (the symmetrized matrix splits its mass over both orders).
    log_sigma = -np.logaddexp(0.0, -diffs_model)
    return float(-2.0 * (m * p_true * log_sigma).sum())


def population_bt_grad_linear(
    phi: np.ndarray,
    features: np.ndarray,
    scale: float,
    env: FiniteBandit,
    mu_sym: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Loss and gradient of the BT objective for ``r = scale * features @ phi``."""

    values = scale * features @ phi
    diffs_true = env.r_star.values[:, None] - env.r_star.values[None, :]
    diffs_model = values[:, None] - values[None, :]
    p_true = expit(diffs_true)
    log_sigma = -np.logaddexp(0.0, -diffs_model)
    loss = float(-2.0 * (mu_sym * p_true * log_sigma).sum())
    # d loss / d diffs_model[i, j] = -mu[i, j] * (p_true - sigma(diff)),
    # folded over both orders below via the antisymmetry of w
    w = -mu_sym * (p_true - expit(diffs_model))
    # diffs depend on phi through scale * (psi_i - psi_j) phi
    row = w.sum(axis=1)
    col = w.sum(axis=0)
    grad = scale * features.T @ (row - col)
    return loss, grad


# ---------------------------------------------------------------------------
# projected-gradient core
# ---------------------------------------------------------------------------


def _projected_residual(
    theta: np.ndarray, grad: np.ndarray, project: Callable[[np.ndarray], np.ndarray]
) -> float:
    """Norm of theta - P(theta - grad): reduces to ||grad|| without constraints."""

    return float(np.linalg.norm(theta - project(theta - grad)))


def minimize_projected(
    loss_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta0: np.ndarray,
    project: Callable[[np.ndarray], np.ndarray],
    cfg: OptimizerConfig,
) -> tuple[np.ndarray, float, float, int]:
    """Projected gradient descent with backtracking (Armijo) line search.

    Returns ``(theta, loss, residual, iterations)`` where ``residual`` is the
    unit-step projected-gradient residual.  Raises ConvergenceFailure if the
    iteration budget runs out with the residual above tolerance.
    """

    theta = project(np.asarray(theta0, dtype=float))
    loss, grad = loss_grad(theta)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericFailure("objective not finite at the initial point")
    step = cfg.step_size
    for it in range(cfg.max_iters):
        residual = _projected_residual(theta, grad, project)
        if residual <= cfg.grad_tol:
            return theta, loss, residual, it
        step = min(cfg.step_size, step * 2.0)
        while True:
            candidate = project(theta - step * grad)
            cand_loss, cand_grad = loss_grad(candidate)
            # sufficient decrease along the projected direction
            decrease = float(grad @ (theta - candidate))
            if np.isfinite(cand_loss) and cand_loss <= loss - cfg.armijo_slope * decrease:
                break
            step *= 0.5
            if step < 1e-20:
                # no descent possible: either at a constrained stationary
                # point (small residual caught next loop) or numerically stuck
                candidate, cand_loss, cand_grad = theta, loss, grad
                break
        theta, loss, grad = candidate, cand_loss, cand_grad
        if step < 1e-20:
            residual = _projected_residual(theta, grad, project)
            if residual <= cfg.grad_tol:
                return theta, loss, residual, it + 1
            raise ConvergenceFailure(
                f"line search stalled with residual {residual:.3e}", residual=residual
            )
    residual = _projected_residual(theta, grad, project)
    if residual <= cfg.grad_tol:
        return theta, loss, residual, cfg.max_iters
    raise ConvergenceFailure(
        f"no convergence in {cfg.max_iters} iterations (residual {residual:.3e})",
        residual=residual,
    )


def _identity_projection(theta: np.ndarray) -> np.ndarray:
    return theta


def _projection_for(spec: PolicyClassSpec) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(spec, LogLinear):
        return _identity_projection
    return lambda theta: project_into_class(theta, spec)


# ---------------------------------------------------------------------------
# reward stage
# ---------------------------------------------------------------------------


def _fit_linear_reward(
    dim: int,
    scale: float,
    bound: float | None,
    env: FiniteBandit,
    mu_sym: np.ndarray,
    cfg: OptimizerConfig,
) -> tuple[np.ndarray, float, float]:
    features = env.features.vectors
    if features.shape[1] != dim:
        raise DomainError(f"reward class dimension {dim} != feature dimension {features.shape[1]}")

    def lg(phi: np.ndarray) -> tuple[float, np.ndarray]:
        return population_bt_grad_linear(phi, features, scale, env, mu_sym)

    if bound is None:
        project = _identity_projection
    else:
        def project(phi: np.ndarray, _b: float = bound) -> np.ndarray:
            nrm = float(np.linalg.norm(phi))
            return phi if nrm <= _b else phi * (_b / nrm)

    phi, loss, residual, _ = minimize_projected(lg, np.zeros(dim), project, cfg)
    return phi, loss, residual


def fit_reward_mle(
    spec: RewardClassSpec,
    env: FiniteBandit,
    mu: np.ndarray,
    cfg: OptimizerConfig | None = None,
) -> FittedReward:
    """Population Bradley-Terry maximum-likelihood fit over a reward class.

    Finite class members (singletons, the fixed alternative of an augmented
    class) are compared by exact loss evaluation; continuous families are
    optimized to the configured gradient tolerance.  Ties between a finite
    member and a fitted family resolve toward the fitted family only when it
    is strictly better, so a strictly-higher-likelihood fixed reward always
    wins.
    """

    cfg = cfg or OptimizerConfig()
    mu_sym = _symmetrize(mu, env.n)

    if isinstance(spec, SingletonClass):
        loss = population_bt_loss(spec.r_bar, env, mu_sym)
        return FittedReward(reward=spec.r_bar, linear=None, loss=loss, grad_residual=0.0)

    if isinstance(spec, AugmentedClass):
        base_fit = fit_reward_mle(spec.base, env, mu_sym, cfg)
        extra_loss = population_bt_loss(spec.extra, env, mu_sym)
        if extra_loss < base_fit.loss:
            return FittedReward(
                reward=spec.extra, linear=None, loss=extra_loss, grad_residual=0.0
            )
        return base_fit

    if isinstance(spec, (LinearClass, LinearBounded)):
        scale = env.beta if spec.scale_by_beta else 1.0
        bound = spec.bound if isinstance(spec, LinearBounded) else None
        phi, loss, residual = _fit_linear_reward(spec.dim, scale, bound, env, mu_sym, cfg)
        linear = LinearReward(phi=phi, scale_by_beta=spec.scale_by_beta, bound=bound)
        return FittedReward(
            reward=linear.reward(env), linear=linear, loss=loss, grad_residual=residual
        )

    if isinstance(spec, SurrogateClass):
        direct = fit_dpo(spec.policy_spec, env, mu_sym, cfg)
        values = surrogate_reward(direct.policy, env).values
        linear = None
        if direct.theta is not None and isinstance(
            spec.policy_spec, (LogLinear, LogLinearHalfspace, LogLinearLogRatioBox)
        ):
            linear = LinearReward(phi=direct.theta.copy(), scale_by_beta=True)
        return FittedReward(
            reward=values,
            linear=linear,
            loss=direct.loss,
            grad_residual=0.0,
            picked_fixed_point=direct.approached_excluded,
        )

    raise DomainError(f"unsupported reward class {type(spec).__name__}")


# ---------------------------------------------------------------------------
# policy stage
# ---------------------------------------------------------------------------


def _value_of_theta(theta: np.ndarray, reward: RewardVector, env: FiniteBandit) -> float:
    return regularized_value(_policy_of(theta, env), reward, env)


def _value_grad(theta: np.ndarray, reward: RewardVector, env: FiniteBandit) -> np.ndarray:
    """Exact gradient of the KL-regularized value of a log-linear policy.

    d/d theta V = beta * Cov_pi(psi, (r - r_hat)/beta) with the surrogate
    r_hat = beta (log pi - log pi_ref); constants vanish inside the covariance.
    """

    pi = _policy_of(theta, env).probs
    psi = env.features.vectors
    r_hat_lin = env.beta * (psi @ theta)
    gap = reward.values - r_hat_lin
    psi_bar = pi @ psi
    return ((psi - psi_bar) * (pi * gap)[:, None]).sum(axis=0)


def _ascent_start(dim: int) -> np.ndarray:
    """Deterministic, slightly asymmetric start for value ascent.

    theta = 0 sits on a stationary ray of every response-symmetric value
    curve (the gradient cancels exactly there even when far better policies
    exist on both sides), so the ascent seeds each coordinate with a tiny
    distinct offset instead.  Constant rewards still land on the reference
    policy: the KL term's only stationary points have pi = pi_ref, so the
    offset is ironed out rather than preserved.
    """

    return 1e-4 / np.arange(1.0, dim + 1.0)


def policy_stage(
    reward: RewardVector,
    spec: PolicyClassSpec,
    env: FiniteBandit,
    cfg: OptimizerConfig | None = None,
) -> PolicyStageResult:
    """Maximize the KL-regularized value of ``reward`` over a policy class.

    Tabular classes use the closed-form optimum, as does an unconstrained
    log-linear class when the reward lies in the centered feature span.
    Everything else runs projected ascent from a deterministic near-reference
    start (see ``_ascent_start``).
    """

    cfg = cfg or OptimizerConfig()

    if isinstance(spec, FullTabular):
        pol = optimal_policy(reward, env)
        return PolicyStageResult(policy=pol, value=regularized_value(pol, reward, env), theta=None)

    if isinstance(spec, TabularMinusPoint):
        pol = optimal_policy(reward, env)
        gap = float(np.abs(pol.probs - spec.excluded.probs).sum()) / 2.0
        if gap > EPS_OPEN:
            return PolicyStageResult(
                policy=pol, value=regularized_value(pol, reward, env), theta=None
            )
        # the unconstrained optimum is the excluded point: return a feasible
        # policy within EPS_OPEN of it (the class is open at that point)
        blended = Distribution(
            probs=(1.0 - EPS_OPEN) * pol.probs + EPS_OPEN * env.pi_ref.probs
        )
        return PolicyStageResult(
            policy=blended,
            value=regularized_value(blended, reward, env),
            theta=None,
            approached_excluded=True,
        )

    if isinstance(spec, (LogLinear, LogLinearHalfspace, LogLinearLogRatioBox)):
        d = env.features.dim
        if isinstance(spec, LogLinear):
            # closed form when the reward lies in the centered feature span:
            # pi* itself is log-linear with theta = representation / beta
            rep = _linear_rep(env, reward)
            if rep is not None:
                # rep satisfies beta * psi @ rep = reward mod shift, so the
                # log-linear policy at rep is exactly optimal_policy(reward)
                theta = rep
                pol = _policy_of(theta, env)
                return PolicyStageResult(
                    policy=pol, value=regularized_value(pol, reward, env), theta=theta
                )
        project = _projection_for(spec)

        def neg_vg(theta: np.ndarray) -> tuple[float, np.ndarray]:
            return -_value_of_theta(theta, reward, env), -_value_grad(theta, reward, env)

        theta, neg_value, _, _ = minimize_projected(neg_vg, _ascent_start(d), project, cfg)
        pol = _policy_of(theta, env)
        return PolicyStageResult(policy=pol, value=-neg_value, theta=theta)

    raise DomainError(f"unsupported policy class {type(spec).__name__}")


# ---------------------------------------------------------------------------
# direct (surrogate-reward) route
# ---------------------------------------------------------------------------


def _bt_loss_grad_theta(
    theta: np.ndarray, env: FiniteBandit, mu_sym: np.ndarray
) -> tuple[float, np.ndarray]:
    """BT loss/gradient when the reward is the policy surrogate beta psi theta."""

    return population_bt_grad_linear(theta, env.features.vectors, env.beta, env, mu_sym)


def fit_dpo(
    spec: PolicyClassSpec,
    env: FiniteBandit,
    mu: np.ndarray,
    cfg: OptimizerConfig | None = None,
) -> DirectFitResult:
    """Minimize the population BT loss of a policy's implied surrogate reward.

    For tabular classes the unconstrained population minimizer matches the
    true reward differences exactly, so the fit is the closed-form optimal
    policy of the true reward; no iteration is involved.
    """

    cfg = cfg or OptimizerConfig()
    mu_sym = _symmetrize(mu, env.n)

    if isinstance(spec, (FullTabular, TabularMinusPoint)):
        pol = optimal_policy(env.r_star, env)
        loss = population_bt_loss(surrogate_reward(pol, env).values, env, mu_sym)
        if isinstance(spec, TabularMinusPoint):
            gap = float(np.abs(pol.probs - spec.excluded.probs).sum()) / 2.0
            if gap <= EPS_OPEN:
                blended = Distribution(
                    probs=(1.0 - EPS_OPEN) * pol.probs + EPS_OPEN * env.pi_ref.probs
                )
                return DirectFitResult(
                    policy=blended,
                    loss=population_bt_loss(surrogate_reward(blended, env).values, env, mu_sym),
                    theta=None,
                    approached_excluded=True,
                )
        return DirectFitResult(policy=pol, loss=loss, theta=None)

    if isinstance(spec, (LogLinear, LogLinearHalfspace, LogLinearLogRatioBox)):
        d = env.features.dim
        project = _projection_for(spec)

        def lg(theta: np.ndarray) -> tuple[float, np.ndarray]:
            return _bt_loss_grad_theta(theta, env, mu_sym)

        theta, loss, _, _ = minimize_projected(lg, np.zeros(d), project, cfg)
        return DirectFitResult(policy=_policy_of(theta, env), loss=loss, theta=theta)

    raise DomainError(f"unsupported policy class {type(spec).__name__}")


# ---------------------------------------------------------------------------
# PILAF sampling
# ---------------------------------------------------------------------------


def pilaf_mixture_stats(
    policy: Distribution, env: FiniteBandit
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Mixture weight and normalizer for the variance-matched pair sampler.

    Returns ``(alpha2, z_theta, p1, p2)`` where p1 and p2 tilt the policy by
    exp(+-surrogate reward), alpha2 = E exp(surrogate margin) >= 1 over
    independent policy draws, and z_theta = 2 + 2 alpha2 >= 4.
    """

    if np.any(policy.probs <= 0.0):
        raise DomainError("sampler policy must have full support")
    r_hat = surrogate_reward(policy, env).values.values
    log_pi = np.log(policy.probs)
    # p1 ∝ pi * exp(r_hat), p2 ∝ pi * exp(-r_hat); normalizers via logsumexp
    from scipy.special import logsumexp

    log_z1 = float(logsumexp(log_pi + r_hat))
    log_z2 = float(logsumexp(log_pi - r_hat))
    p1 = np.exp(log_pi + r_hat - log_z1)
    p2 = np.exp(log_pi - r_hat - log_z2)
    alpha2 = float(np.exp(log_z1 + log_z2))
    if not np.isfinite(alpha2):
        raise NumericFailure("pair-mixture weight overflowed")
    return alpha2, 2.0 + 2.0 * alpha2, p1, p2


def pilaf_pair_distribution(policy: Distribution, env: FiniteBandit) -> np.ndarray:
    """Ordered-pair law of the variance-matched sampler.

    Mixture of the on-policy product (weight 1) and the symmetrized tilted
    product (weight alpha2), normalized; identical (up to normalization) to
    pi(y) pi(y') / sigma'(surrogate margin).
    """

    alpha2, _, p1, p2 = pilaf_mixture_stats(policy, env)
    pi = policy.probs
    mix = np.outer(pi, pi) + alpha2 * (np.outer(p1, p2) + np.outer(p2, p1)) / 2.0
    return mix / (1.0 + alpha2)


# ---------------------------------------------------------------------------
# online loop
# ---------------------------------------------------------------------------


def online_dpo(
    spec: PolicyClassSpec,
    env: FiniteBandit,
    sampler: PairSampler,
    cfg: OptimizerConfig | None = None,
) -> OnlineResult:
    """Freeze-then-step online fitting of a log-linear policy.

    Each iteration freezes the sampler's pair distribution at the current
    policy, takes one backtracked gradient step on the induced BT loss, and
    re-freezes.  Terminates when the projected residual of the frozen loss
    meets tolerance; raises a numeric failure after fifty consecutive
    iterations of increasing frozen loss.
    """

    cfg = cfg or OptimizerConfig()
    if not isinstance(spec, (LogLinear, LogLinearHalfspace, LogLinearLogRatioBox)):
        raise DomainError("online fitting requires a log-linear policy class")
    project = _projection_for(spec)
    d = env.features.dim
    theta = project(np.zeros(d))

    trajectory: list[TrajectoryPoint] = []
    rising = 0
    converged = False

    for it in range(cfg.max_iters):
        policy = _policy_of(theta, env)
        frozen = sampler.pair_distribution(policy, env)
        mu_sym = _symmetrize(frozen, env.n)
        loss, grad = _bt_loss_grad_theta(theta, env, mu_sym)
        value = regularized_value(policy, env.r_star, env)
        trajectory.append(
            TrajectoryPoint(iteration=it, loss=loss, value=value, theta=tuple(theta))
        )

        residual = _projected_residual(theta, grad, project)
        if residual <= cfg.grad_tol:
            converged = True
            break

        # one fixed-size projected step on the frozen objective; the loss of
        # consecutive iterates is comparable only within a freeze, so the
        # divergence detector watches whether the step descended the
        # objective it was taken on.  Refreeze drift (the sampler sharpening
        # under the new policy) is expected and not divergence.
        candidate = project(theta - cfg.step_size * grad)
        cand_loss, _ = _bt_loss_grad_theta(candidate, env, mu_sym)
        if not np.isfinite(cand_loss):
            raise NumericFailure("online objective became non-finite")
        if cand_loss > loss + 1e-15:
            rising += 1
            if rising >= _DIVERGENCE_PATIENCE:
                raise NumericFailure(
                    f"online steps increased their frozen loss for "
                    f"{rising} consecutive iterations"
                )
        else:
            rising = 0
        theta = candidate

    if not converged:
        residual = _projected_residual(theta, grad, project)
        raise ConvergenceFailure(
            f"online loop hit the iteration budget (residual {residual:.3e})",
            residual=residual,
        )

    return OnlineResult(
        policy=_policy_of(theta, env),
        theta=theta,
        trajectory=tuple(trajectory),
        converged=True,
    )


# ---------------------------------------------------------------------------
# gradient identity
# ---------------------------------------------------------------------------


def pilaf_gradient_identity_check(theta: np.ndarray, env: FiniteBandit) -> GradientIdentityReport:
    """Compare the frozen sampled-objective gradient with the scaled value
    gradient at ``theta``.

    With the variance-matched sampler frozen at the current policy, the BT
    gradient decomposes into (2 beta / z_theta) times the negative value
    gradient plus a second-order remainder.  The remainder's coordinatewise
    envelope uses the global bound 1/(6 sqrt 3) on the sigmoid's second
    derivative and the worst-case slope over the reachable margin range.
    """

    theta = np.asarray(theta, dtype=float)
    policy = _policy_of(theta, env)
    alpha2, z_theta, _, _ = pilaf_mixture_stats(policy, env)
    frozen = pilaf_pair_distribution(policy, env)
    mu_sym = _symmetrize(frozen, env.n)

    _, lhs = _bt_loss_grad_theta(theta, env, mu_sym)
    rhs = -(2.0 * env.beta / z_theta) * _value_grad(theta, env.r_star, env)

    r_star_c = center_reward(env.r_star, env).values
    r_hat_c = center_reward(surrogate_reward(policy, env).values, env).values
    diffs_true = r_star_c[:, None] - r_star_c[None, :]
    diffs_hat = r_hat_c[:, None] - r_hat_c[None, :]
    gap = diffs_true - diffs_hat
    delta = float(np.max(np.abs(gap)))
    rmax = float(np.max(np.abs(diffs_true)))
    sigma_floor = float(expit(rmax + delta) * (1.0 - expit(rmax + delta)))
    eps_bound = delta / (6.0 * np.sqrt(3.0) * sigma_floor)

    pi = policy.probs
    psi = env.features.vectors
    abs_dpsi = np.abs(psi[:, None, :] - psi[None, :, :])
    weight = np.outer(pi, pi) * np.abs(gap)
    envelope = eps_bound * (env.beta / z_theta) * np.einsum("ij,ijk->k", weight, abs_dpsi)

    return GradientIdentityReport(
        lhs_grad=lhs,
        rhs_grad=rhs,
        z_theta=z_theta,
        max_abs_diff=float(np.max(np.abs(lhs - rhs))),
        delta_bound=delta,
        rmax=rmax,
        envelope=envelope,
    )


# ---------------------------------------------------------------------------
# auxiliary objectives
# ---------------------------------------------------------------------------


def new_objective_loss(
    reward: LinearReward, env: FiniteBandit
) -> tuple[float, np.ndarray]:
    """Quarter mean-squared margin error under the fitted reward's own optimum.

    Pairs are drawn (frozen) from the optimal policy of the fitted reward;
    the loss is (1/4) E (true margin - fitted margin)^2 and the gradient
    treats the pair distribution as constant.
    """

    r_fit = reward.reward(env)
    pol = optimal_policy(r_fit, env)
    pi = pol.probs
    dt = env.r_star.values[:, None] - env.r_star.values[None, :]
    df = r_fit.values[:, None] - r_fit.values[None, :]
    gap = dt - df
    w = np.outer(pi, pi)
    loss = 0.25 * float((w * gap**2).sum())
    scale = env.beta if reward.scale_by_beta else 1.0
    psi = env.features.vectors
    dpsi = psi[:, None, :] - psi[None, :, :]
    grad = -0.5 * scale * np.einsum("ij,ijk->k", w * gap, dpsi)
    return loss, grad


def online_ipo_loss(
    policy: Distribution, env: FiniteBandit, sampler: PairSampler
) -> tuple[float, np.ndarray]:
    """Squared-regression online objective against half the preference margin.

    The target for a pair is (p(y beats y') - p(y' beats y)) / 2; the loss is
    the exact expectation of the squared difference between the surrogate
    margin and that target, pairs frozen from the sampler at ``policy``.
    The gradient is with respect to the log-linear parameters of ``policy``
    (frozen sampler), valid when the policy is log-linear in the features.
    """

    frozen = sampler.pair_distribution(policy, env)
    w = _symmetrize(frozen, env.n)
    r_hat = surrogate_reward(policy, env).values.values
    dh = r_hat[:, None] - r_hat[None, :]
    dt = env.r_star.values[:, None] - env.r_star.values[None, :]
    target = (expit(dt) - expit(-dt)) / 2.0
    resid = dh - target
    loss = float((w * resid**2).sum())
    psi = env.features.vectors
    dpsi = psi[:, None, :] - psi[None, :, :]
    grad = 2.0 * env.beta * np.einsum("ij,ijk->k", w * resid, dpsi)
    return loss, grad
