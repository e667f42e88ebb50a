"""Reward and policy families with the constraint structures the scenario
catalog needs, plus surrogate-reward extraction and structural class
comparison.

Reward classes and policy classes are compared *modulo constant shift*;
the canonical representative of a reward is its pi_ref-mean-centered
tabular vector (see bandit.center_reward).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .bandit import (
    Distribution,
    FiniteBandit,
    RewardVector,
    center_reward,
    optimal_policy,
)
from .errors import DomainError, UnsupportedQuery

__all__ = [
    "LinearReward",
    "LogLinearPolicy",
    "SurrogateReward",
    "FullTabular",
    "TabularMinusPoint",
    "LogLinear",
    "LogLinearHalfspace",
    "LogLinearLogRatioBox",
    "LinearClass",
    "LinearBounded",
    "SingletonClass",
    "AugmentedClass",
    "SurrogateClass",
    "ClassRelation",
    "policy_distribution",
    "surrogate_reward",
    "class_relation",
    "project_into_class",
]

EPS_OPEN = 1e-6  # how close an open-set optimizer may stop to an excluded point


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LinearReward:
    """r(y) = phi·psi(y), or beta·phi·psi(y) when scale_by_beta is set.

    The two conventions coexist because both appear in the constructions:
    reward-model classes are usually unscaled, surrogate classes carry the
    beta factor.
    """

    phi: np.ndarray
    scale_by_beta: bool = False
    bound: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "phi", _frozen(self.phi))
        if not np.all(np.isfinite(self.phi)):
            raise DomainError("linear reward coefficients must be finite")
        if self.bound is not None and np.linalg.norm(self.phi) > self.bound * (1 + 1e-9):
            raise DomainError("coefficient norm exceeds the attached bound")

    def reward(self, env: FiniteBandit) -> RewardVector:
        scale = env.beta if self.scale_by_beta else 1.0
        return RewardVector.linear(self.phi, env.features, scale=scale)


@dataclass(frozen=True)
class LogLinearPolicy:
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", _frozen(self.theta))
        if not np.all(np.isfinite(self.theta)):
            raise DomainError("policy parameters must be finite")


@dataclass(frozen=True)
class SurrogateReward:
    """beta·log(pi/pi_ref), tabulated."""

    values: RewardVector


# --- policy class specs -------------------------------------------------------


@dataclass(frozen=True)
class FullTabular:
    """All distributions over the response set."""

    def contains(self, theta: np.ndarray) -> bool:
        return True


@dataclass(frozen=True)
class TabularMinusPoint:
    """All distributions except one excluded point (an open set).

    Optimizers whose unconstrained argmax is the excluded point stop at a
    policy within EPS_OPEN total variation of it and flag the value as
    approached, not attained.
    """

    excluded: Distribution

    def contains(self, theta: np.ndarray) -> bool:
        return True


@dataclass(frozen=True)
class LogLinear:
    """pi_theta(y) proportional to pi_ref(y)·exp(theta·psi(y)), theta free."""

    def contains(self, theta: np.ndarray) -> bool:
        return True


@dataclass(frozen=True)
class LogLinearHalfspace:
    """Log-linear policies with theta·a ≥ b."""

    a: np.ndarray
    b: float

    def __post_init__(self):
        object.__setattr__(self, "a", _frozen(self.a))
        if not np.all(np.isfinite(self.a)) or not np.isfinite(self.b):
            raise DomainError("halfspace parameters must be finite")
        if np.allclose(self.a, 0) and self.b > 0:
            raise DomainError("halfspace constraint is infeasible (empty set)")

    def contains(self, theta: np.ndarray) -> bool:
        return float(self.a @ theta) >= self.b - 1e-12


@dataclass(frozen=True)
class LogLinearLogRatioBox:
    """Log-linear policies with |beta·log-ratio gap of one response pair| ≤ bound.

    The constraint is linear in theta: |normal·theta| ≤ bound where
    normal = beta·(psi(y) − psi(y')), precomputed when the spec is built so
    projection needs no environment argument.
    """

    pair: tuple[int, int]
    bound: float
    normal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "normal", _frozen(self.normal))
        if self.bound < 0:
            raise DomainError("log-ratio box bound must be nonnegative")

    @staticmethod
    def for_env(env: FiniteBandit, pair: tuple[int, int], bound: float) -> "LogLinearLogRatioBox":
        i, j = pair
        normal = env.beta * (env.features.vectors[i] - env.features.vectors[j])
        return LogLinearLogRatioBox(pair=pair, bound=bound, normal=normal)

    def contains(self, theta: np.ndarray) -> bool:
        return abs(float(self.normal @ theta)) <= self.bound + 1e-12


PolicyClassSpec = (
    FullTabular | TabularMinusPoint | LogLinear | LogLinearHalfspace | LogLinearLogRatioBox
)


# --- reward class specs ---------------------------------------------------------


@dataclass(frozen=True)
class LinearClass:
    """{phi·psi : phi free} (beta-scaled when scale_by_beta)."""

    dim: int
    scale_by_beta: bool = False


@dataclass(frozen=True)
class LinearBounded:
    """{phi·psi : ‖phi‖₂ ≤ B}."""

    dim: int
    bound: float
    scale_by_beta: bool = False


@dataclass(frozen=True)
class SingletonClass:
    r_bar: RewardVector


@dataclass(frozen=True)
class AugmentedClass:
    base: "RewardClassSpec"
    extra: RewardVector


@dataclass(frozen=True)
class SurrogateClass:
    """The reward class induced by a policy class: {beta·log(pi/pi_ref)}.

    Lets Augmented(SurrogateClass(Pi), r_bar) express "the surrogate class
    plus one extra reward", which the enumerated kinds cannot.
    """

    policy_spec: PolicyClassSpec


RewardClassSpec = LinearClass | LinearBounded | SingletonClass | AugmentedClass | SurrogateClass


class ClassRelation(enum.Enum):
    ISOMORPHIC = "Isomorphic"
    POLICY_STRONGER = "PolicyStronger"
    REWARD_STRONGER = "RewardStronger"
    INCOMPARABLE = "Incomparable"


# --- operations -----------------------------------------------------------------


def policy_distribution(p: LogLinearPolicy, env: FiniteBandit) -> Distribution:
    """pi(y) proportional to pi_ref(y)·exp(theta·psi(y)), in log space."""
    if len(p.theta) != env.features.dim:
        raise DomainError("policy parameter dim does not match features")
    logits = np.log(env.pi_ref.probs) + env.features.vectors @ p.theta
    logits -= logits.max()
    w = np.exp(logits)
    return Distribution(w / w.sum())


def surrogate_reward(p: LogLinearPolicy | Distribution, env: FiniteBandit) -> SurrogateReward:
    """beta·log(pi/pi_ref). DomainError if the policy drops a response."""
    pi = policy_distribution(p, env) if isinstance(p, LogLinearPolicy) else p
    if len(pi) != env.n:
        raise DomainError("policy indexes a different response set")
    if np.any(pi.probs <= 0):
        raise DomainError("surrogate reward undefined for zero-probability responses")
    values = env.beta * (np.log(pi.probs) - np.log(env.pi_ref.probs))
    return SurrogateReward(values=RewardVector(values))


def _centered_span(env: FiniteBandit) -> np.ndarray:
    """Column span of the feature matrix in centered (mod-shift) coordinates."""
    psi = env.features.vectors
    centered = psi - env.pi_ref.probs @ psi
    return centered


def _centered(env: FiniteBandit, r: RewardVector) -> np.ndarray:
    return center_reward(r, env).values


def _in_span(v: np.ndarray, basis_cols: np.ndarray, tol: float = 1e-9) -> bool:
    if basis_cols.size == 0:
        return bool(np.max(np.abs(v)) <= tol)
    sol, *_ = np.linalg.lstsq(basis_cols, v, rcond=None)
    return bool(np.max(np.abs(basis_cols @ sol - v)) <= tol)


def _linear_rep(env: FiniteBandit, r: RewardVector) -> np.ndarray | None:
    """theta with centered(beta·theta·psi) = centered(r), or None."""
    cols = _centered_span(env)  # (n, d)
    target = _centered(env, r) / env.beta
    sol, *_ = np.linalg.lstsq(cols, target, rcond=None)
    if np.max(np.abs(cols @ sol - target)) > 1e-9:
        return None
    return sol


def _tabular_rank_full(env: FiniteBandit) -> bool:
    centered = _centered_span(env)
    return np.linalg.matrix_rank(centered, tol=1e-10) >= env.n - 1


def class_relation(F: RewardClassSpec, Pi: PolicyClassSpec, env: FiniteBandit) -> ClassRelation:
    """Relation of F versus the surrogate class of Pi, modulo constant shift.

    Decided by structural rules on the enumerated spec kinds only; any
    combination without a rule raises UnsupportedQuery rather than guessing.
    """
    if isinstance(F, SurrogateClass):
        if F.policy_spec == Pi:
            return ClassRelation.ISOMORPHIC
        raise UnsupportedQuery(
            f"no structural rule for SurrogateClass({type(F.policy_spec).__name__}) "
            f"vs {type(Pi).__name__}"
        )

    if isinstance(F, (LinearClass, LinearBounded)) and isinstance(Pi, LogLinear):
        # F_Pi is the full centered feature span (beta absorbs into theta).
        if isinstance(F, LinearClass):
            return ClassRelation.ISOMORPHIC
        return ClassRelation.POLICY_STRONGER

    if isinstance(F, (LinearClass, LinearBounded)) and isinstance(Pi, FullTabular):
        if isinstance(F, LinearClass) and _tabular_rank_full(env):
            return ClassRelation.ISOMORPHIC
        return ClassRelation.POLICY_STRONGER

    if isinstance(F, SingletonClass):
        if isinstance(Pi, FullTabular):
            return ClassRelation.POLICY_STRONGER
        if isinstance(Pi, LogLinear):
            if _linear_rep(env, F.r_bar) is not None:
                return ClassRelation.POLICY_STRONGER
            return ClassRelation.INCOMPARABLE
        if isinstance(Pi, TabularMinusPoint):
            excl_surrogate = surrogate_reward(Pi.excluded, env).values
            gap = _centered(env, F.r_bar) - _centered(env, excl_surrogate)
            if np.max(np.abs(gap)) < 1e-12:
                return ClassRelation.INCOMPARABLE
            return ClassRelation.POLICY_STRONGER

    if isinstance(F, AugmentedClass) and isinstance(F.base, SurrogateClass):
        if F.base.policy_spec != Pi:
            raise UnsupportedQuery("augmented base does not match the policy class")
        member = _surrogate_class_contains(Pi, F.extra, env)
        return ClassRelation.ISOMORPHIC if member else ClassRelation.REWARD_STRONGER

    raise UnsupportedQuery(
        f"no structural rule for {type(F).__name__} vs {type(Pi).__name__}"
    )


def _surrogate_class_contains(Pi: PolicyClassSpec, r: RewardVector, env: FiniteBandit) -> bool:
    """Is r (mod shift) the surrogate of some member of Pi?"""
    if isinstance(Pi, FullTabular):
        return True
    if isinstance(Pi, TabularMinusPoint):
        excl = surrogate_reward(Pi.excluded, env).values
        return bool(np.max(np.abs(_centered(env, r) - _centered(env, excl))) >= 1e-12)
    theta = _linear_rep(env, r)
    if theta is None:
        return False
    if isinstance(Pi, LogLinear):
        return True
    # Constrained log-linear: theta is free modulo the null space of the
    # centered feature map; membership holds iff some representative is
    # feasible. Both constraint kinds are linear, so check the affine family
    # theta + null-space directly.
    cols = _centered_span(env)
    _, s, vt = np.linalg.svd(cols, full_matrices=True)
    rank = int(np.sum(s > 1e-12))
    null = vt[rank:].T  # (d, d-rank)
    if isinstance(Pi, LogLinearHalfspace):
        if Pi.contains(theta):
            return True
        if null.size and np.max(np.abs(Pi.a @ null)) > 1e-12:
            return True  # can move along the null space to satisfy a·theta ≥ b
        return False
    if isinstance(Pi, LogLinearLogRatioBox):
        # minimize |normal·(theta + null·z)| over z
        if null.size:
            coef = Pi.normal @ null
            if np.max(np.abs(coef)) > 1e-12:
                return True  # can zero the constraint functional
        return abs(float(Pi.normal @ theta)) <= Pi.bound + 1e-12
    raise UnsupportedQuery(f"membership rule missing for {type(Pi).__name__}")


def project_into_class(theta: np.ndarray, spec: PolicyClassSpec) -> np.ndarray:
    """Euclidean projection of theta onto the spec's feasible parameter set."""
    theta = np.asarray(theta, dtype=float)
    if isinstance(spec, (FullTabular, TabularMinusPoint, LogLinear)):
        return theta
    if isinstance(spec, LogLinearHalfspace):
        nrm2 = float(spec.a @ spec.a)
        if nrm2 == 0.0:
            if spec.b > 0:
                raise DomainError("halfspace constraint is infeasible (empty set)")
            return theta
        slack = float(spec.a @ theta) - spec.b
        if slack >= 0:
            return theta
        return theta - slack * spec.a / nrm2
    if isinstance(spec, LogLinearLogRatioBox):
        nrm2 = float(spec.normal @ spec.normal)
        if nrm2 == 0.0:
            return theta
        x = float(spec.normal @ theta)
        if abs(x) <= spec.bound:
            return theta
        target = np.sign(x) * spec.bound
        return theta - (x - target) * spec.normal / nrm2
    raise UnsupportedQuery(f"projection rule missing for {type(spec).__name__}")
