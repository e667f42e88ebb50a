"""KL-regularized finite bandits with Bradley-Terry preference feedback.

Single-prompt semantics throughout: an environment is a finite response
set with a full-support reference policy, a ground-truth reward, and a
regularization strength beta. Values, optimal policies, and preference
probabilities are all evaluated exactly (no Monte Carlo).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .errors import DomainError, NumericFailure
from .rng import make_rng

_ATOL_SIMPLEX = 1e-12


def _frozen_array(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """One feature vector per response, all with norm ≤ bound."""

    vectors: np.ndarray  # shape (n_responses, dim)
    bound: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "vectors", _frozen_array(self.vectors))
        if self.vectors.ndim != 2:
            raise DomainError("feature map must be a 2-D array (responses x dim)")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms > self.bound * (1 + 1e-9)):
            raise DomainError(
                f"feature norm {norms.max():.6g} exceeds bound {self.bound:.6g}"
            )

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class Distribution:
    """Probability vector over response indices."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen_array(self.probs))
        p = self.probs
        if p.ndim != 1:
            raise DomainError("distribution must be a 1-D probability vector")
        if np.any(p < 0):
            raise DomainError(f"negative probability entry {p.min():.3e}")
        if abs(p.sum() - 1.0) > _ATOL_SIMPLEX * max(1, len(p)):
            raise DomainError(f"probabilities sum to {p.sum()!r}, not 1")

    @staticmethod
    def uniform(n: int) -> "Distribution":
        return Distribution(np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return len(self.probs)


@dataclass(frozen=True)
class RewardVector:
    """Tabular reward, optionally backed by linear coefficients.

    When built through :meth:`linear`, the tabular values are phi @ psi(y)
    and the coefficients are kept for provenance; the two representations
    must agree to 1e-12.
    """

    values: np.ndarray
    coeffs: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values))
        if not np.all(np.isfinite(self.values)):
            raise DomainError("reward values must be finite")
        if self.coeffs is not None:
            object.__setattr__(self, "coeffs", _frozen_array(self.coeffs))

    @staticmethod
    def linear(phi, features: FeatureMap, scale: float = 1.0) -> "RewardVector":
        phi = np.asarray(phi, dtype=float)
        values = scale * features.vectors @ phi
        return RewardVector(values=values, coeffs=phi)

    def check_linear_backing(self, features: FeatureMap, scale: float = 1.0) -> None:
        if self.coeffs is None:
            return
        recomputed = scale * features.vectors @ self.coeffs
        if np.max(np.abs(recomputed - self.values)) > 1e-12:
            raise DomainError("tabular values disagree with linear coefficients")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class FiniteBandit:
    """Finite response set + reference policy + true reward + beta."""

    responses: tuple[str, ...]
    features: FeatureMap
    r_star: RewardVector
    pi_ref: Distribution
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "responses", tuple(str(r) for r in self.responses))
        n = len(self.responses)
        if not (len(self.features) == len(self.r_star) == len(self.pi_ref) == n):
            raise DomainError("responses, features, reward, and pi_ref sizes differ")
        if self.beta <= 0:
            raise DomainError(f"beta must be > 0, got {self.beta}")
        if np.any(self.pi_ref.probs <= 0):
            raise DomainError("pi_ref must have full support")

    @property
    def n(self) -> int:
        return len(self.responses)


@dataclass(frozen=True)
class PreferencePair:
    winner: int
    loser: int

    def __post_init__(self):
        if self.winner == self.loser:
            raise DomainError("preference pair must compare distinct responses")


def kl_divergence(p: Distribution, q: Distribution) -> float:
    """Sum p log(p/q) with the 0·log 0 = 0 convention.

    Raises DomainError if p puts mass where q has none.
    """
    if len(p) != len(q):
        raise DomainError("KL arguments index different response sets")
    pp, qq = p.probs, q.probs
    bad = (pp > 0) & (qq == 0)
    if np.any(bad):
        raise DomainError(f"support violation at index {int(np.argmax(bad))}")
    mask = pp > 0
    return float(np.sum(pp[mask] * (np.log(pp[mask]) - np.log(qq[mask]))))


def regularized_value(pi: Distribution, r: RewardVector, env: FiniteBandit) -> float:
    """E_pi[r] − beta·KL(pi || pi_ref)."""
    if len(pi) != env.n:
        raise DomainError("policy indexes a different response set")
    return float(pi.probs @ r.values) - env.beta * kl_divergence(pi, env.pi_ref)


def _optimal_logits(r: RewardVector, env: FiniteBandit) -> np.ndarray:
    # overflow here is detected and converted to a typed error, so the
    # numpy warning would be pure noise
    with np.errstate(over="ignore"):
        logits = np.log(env.pi_ref.probs) + np.asarray(r.values) / env.beta
    if not np.all(np.isfinite(logits)):
        raise NumericFailure("reward/beta overflowed the log-space computation")
    return logits


def optimal_policy(r: RewardVector, env: FiniteBandit) -> Distribution:
    """Closed-form argmax of the regularized value: pi_ref·exp(r/beta)/Z.

    Computed in log-space with max subtraction so reward magnitudes far
    beyond exp overflow are fine as long as r/beta itself is finite.
    """
    logits = _optimal_logits(r, env)
    shifted = logits - logits.max()
    w = np.exp(shifted)
    return Distribution(w / w.sum())


def log_partition(r: RewardVector, env: FiniteBandit) -> float:
    """log Z = log Σ pi_ref(y)·exp(r(y)/beta); beta·log Z is the optimal value."""
    return float(logsumexp(_optimal_logits(r, env)))


def bt_preference_prob(r: RewardVector, y1: int, y2: int) -> float:
    """sigma(r(y1) − r(y2)): Bradley-Terry win probability of y1 over y2."""
    n = len(r)
    if not (0 <= y1 < n and 0 <= y2 < n):
        raise DomainError("response index out of range")
    return float(expit(r.values[y1] - r.values[y2]))


def center_reward(r: RewardVector, env: FiniteBandit) -> RewardVector:
    """Canonical representative modulo constant shift: zero mean under pi_ref."""
    shift = float(env.pi_ref.probs @ r.values)
    return RewardVector(values=r.values - shift, coeffs=r.coeffs)


def pair_matrix_as_unordered(mu: np.ndarray, n: int) -> np.ndarray:
    """Validate a square pair-mass matrix; returns it as float array.

    Mass may sit in either triangle (entries are unordered-pair mass);
    the diagonal must be exactly zero and the total mass 1.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (n, n):
        raise DomainError(f"pair distribution must be {n}x{n}, got {mu.shape}")
    if np.any(mu < 0):
        raise DomainError("pair distribution has negative mass")
    if np.any(np.diagonal(mu) > 0):
        raise DomainError("pair distribution puts mass on identical pairs")
    if abs(mu.sum() - 1.0) > 1e-10:
        raise DomainError(f"pair mass sums to {mu.sum()!r}, not 1")
    return mu


def sample_preferences(
    env: FiniteBandit, mu: np.ndarray, n: int, seed: int
) -> list[PreferencePair]:
    """Draw n labeled pairs: (y, y') ~ mu, winner ~ BT(r_star).

    Deterministic given seed (Philox stream), so repeated calls reproduce
    the dataset byte for byte.
    """
    if n < 1:
        raise DomainError("need at least one sample")
    mu = pair_matrix_as_unordered(mu, env.n)
    rng = make_rng(seed, 0xBA9D17)
    flat = mu.ravel()
    idx = rng.choice(flat.size, size=n, p=flat / flat.sum())
    first, second = np.unravel_index(idx, mu.shape)
    p_first = expit(env.r_star.values[first] - env.r_star.values[second])
    first_wins = rng.random(n) < p_first
    return [
        PreferencePair(int(a if w else b), int(b if w else a))
        for a, b, w in zip(first, second, first_wins)
    ]


# ---------------------------------------------------------------------------
# Environment (de)serialization. Round-trips are lossless for doubles: json
# emits repr-style floats which parse back to the identical binary value.

def env_to_dict(env: FiniteBandit) -> dict:
    d = {
        "responses": list(env.responses),
        "beta": env.beta,
        "pi_ref": env.pi_ref.probs.tolist(),
        "r_star": env.r_star.values.tolist(),
        "features": {
            "bound": env.features.bound,
            "vectors": env.features.vectors.tolist(),
        },
    }
    if env.r_star.coeffs is not None:
        d["r_star_coeffs"] = env.r_star.coeffs.tolist()
    return d


def env_from_dict(d: dict) -> FiniteBandit:
    coeffs = d.get("r_star_coeffs")
    return FiniteBandit(
        responses=tuple(d["responses"]),
        features=FeatureMap(
            vectors=np.array(d["features"]["vectors"], dtype=float),
            bound=float(d["features"]["bound"]),
        ),
        r_star=RewardVector(
            values=np.array(d["r_star"], dtype=float),
            coeffs=None if coeffs is None else np.array(coeffs, dtype=float),
        ),
        pi_ref=Distribution(np.array(d["pi_ref"], dtype=float)),
        beta=float(d["beta"]),
    )


def save_env(env: FiniteBandit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(env_to_dict(env), indent=2) + "\n")


def load_env(path: str | Path) -> FiniteBandit:
    return env_from_dict(json.loads(Path(path).read_text()))
