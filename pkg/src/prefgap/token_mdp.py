"""Autoregressive token-level environments solved exactly.

A TokenMDP is a finite prefix tree: tokens are emitted until a terminal
rule fires (fixed horizon, or an absorbing stop token), and the ground
truth rewards complete sequences. The KL-regularized optimum factorizes
into per-token softmax conditionals driven by a soft action value that
backward induction computes exactly; this module provides those
recursions, the token-wise policy assembly, and the dual-token
sparse-prediction task whose first-token estimation target is sparse for
a reward head but dense for a policy head — the soft value folds a dense
direction back into the policy's target.
"""
from __future__ import annotations

import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field, replace
from functools import cached_property
from types import MappingProxyType

import numpy as np
from scipy.special import logsumexp

from .errors import (
    ConstructionFailure,
    DomainError,
    NumericFailure,
    ResourceLimit,
    SchemaError,
    UnsupportedQuery,
)
from .rng import make_rng

__all__ = [
    "TokenMDP",
    "QTable",
    "VTable",
    "TokenPolicy",
    "DTSPEnv",
    "GramCheck",
    "iter_prefixes",
    "terminal_sequences",
    "reference_log_prob",
    "cumulative_token_reward",
    "compute_q_star",
    "compute_v_star",
    "tokenwise_optimal_policy",
    "make_dtsp_env",
    "check_design_gram",
    "token_mdp_to_json",
    "token_mdp_from_json",
]

DEFAULT_TREE_CAP = 1_000_000
_SINGULAR_TOL = 1e-10  # relative eigenvalue floor below which a design counts as singular


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.flags.writeable = False
    return arr


def _as_prefix(key) -> tuple[int, ...]:
    return tuple(int(t) for t in key)


@dataclass(frozen=True)
class TokenMDP:
    """Finite prefix tree with reference conditionals and terminal rewards.

    ``ref_conditionals`` is keyed by non-terminal prefix (the empty tuple
    is the root) and gives the reference next-token distribution there;
    ``terminal_reward`` is keyed by terminal prefix. ``token_rewards``
    optionally decomposes the terminal reward additively along each path
    and is required by the soft state-value recursion. ``token_features``
    optionally attaches a feature vector to every non-empty prefix for
    linear parameterizations. Construction walks the whole tree once and
    validates every entry; trees larger than ``tree_cap`` nodes are
    refused because this module is exact enumeration only.
    """

    vocab: tuple[int, ...]
    horizon: int
    ref_conditionals: Mapping[tuple[int, ...], np.ndarray] = field(repr=False)
    terminal_reward: Mapping[tuple[int, ...], float] = field(repr=False)
    beta: float
    terminal_token: int | None = None
    token_rewards: Mapping[tuple[int, ...], float] | None = field(
        default=None, repr=False
    )
    token_features: Mapping[tuple[int, ...], np.ndarray] | None = field(
        default=None, repr=False
    )
    tree_cap: int = DEFAULT_TREE_CAP

    def __post_init__(self):
        vocab = _as_prefix(self.vocab)
        if not vocab:
            raise DomainError("vocabulary is empty")
        if len(set(vocab)) != len(vocab):
            raise DomainError("vocabulary has duplicate token ids")
        object.__setattr__(self, "vocab", vocab)
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise DomainError(f"horizon must be a positive integer, got {self.horizon!r}")
        object.__setattr__(self, "horizon", int(self.horizon))
        if self.beta <= 0:
            raise DomainError(f"beta must be > 0, got {self.beta}")
        if self.terminal_token is not None and self.terminal_token not in vocab:
            raise DomainError("terminal token is not in the vocabulary")
        if self.tree_cap < 1:
            raise DomainError("tree cap must be positive")

        conds = {_as_prefix(k): _frozen(c) for k, c in self.ref_conditionals.items()}
        rewards = {_as_prefix(k): float(r) for k, r in self.terminal_reward.items()}
        object.__setattr__(self, "ref_conditionals", MappingProxyType(conds))
        object.__setattr__(self, "terminal_reward", MappingProxyType(rewards))
        tok_r = None
        if self.token_rewards is not None:
            tok_r = {_as_prefix(k): float(r) for k, r in self.token_rewards.items()}
            object.__setattr__(self, "token_rewards", MappingProxyType(tok_r))
        feats = None
        if self.token_features is not None:
            feats = {_as_prefix(k): _frozen(f) for k, f in self.token_features.items()}
            object.__setattr__(self, "token_features", MappingProxyType(feats))

        m = len(vocab)
        n_interior = n_terminal = 0
        cum = {(): 0.0} if tok_r is not None else None
        feat_dim = None
        for prefix in iter_prefixes(self):
            if prefix:
                if tok_r is not None:
                    if prefix not in tok_r:
                        raise DomainError(f"token reward missing for prefix {prefix}")
                    if not math.isfinite(tok_r[prefix]):
                        raise DomainError(f"token reward at {prefix} is not finite")
                    cum[prefix] = cum[prefix[:-1]] + tok_r[prefix]
                if feats is not None:
                    f = feats.get(prefix)
                    if f is None:
                        raise DomainError(f"prefix feature missing for {prefix}")
                    if f.ndim != 1 or not np.all(np.isfinite(f)):
                        raise DomainError(
                            f"prefix feature at {prefix} must be a finite vector"
                        )
                    if feat_dim is None:
                        feat_dim = f.shape[0]
                    elif f.shape[0] != feat_dim:
                        raise DomainError("prefix features have inconsistent dimensions")
            if self.is_terminal(prefix):
                n_terminal += 1
                r = rewards.get(prefix)
                if r is None:
                    raise DomainError(f"terminal reward missing for prefix {prefix}")
                if not math.isfinite(r):
                    raise DomainError(f"terminal reward at {prefix} is not finite")
                if cum is not None and abs(cum[prefix] - r) > 1e-9 * max(1.0, abs(r)):
                    raise DomainError(
                        f"token rewards sum to {cum[prefix]!r} along {prefix}, "
                        f"but the terminal reward there is {r!r}"
                    )
            else:
                n_interior += 1
                c = conds.get(prefix)
                if c is None:
                    raise DomainError(f"reference conditional missing for prefix {prefix}")
                if c.shape != (m,):
                    raise DomainError(
                        f"conditional at {prefix} has shape {c.shape}, want ({m},)"
                    )
                if np.any(c <= 0):
                    raise DomainError(f"conditional at {prefix} is not strictly positive")
                if abs(float(c.sum()) - 1.0) > 1e-12 * max(1, m):
                    raise DomainError(f"conditional at {prefix} sums to {c.sum()!r}")
        if len(conds) != n_interior:
            raise DomainError("reference conditionals carry keys outside the tree")
        if len(rewards) != n_terminal:
            raise DomainError("terminal rewards carry keys outside the tree")
        n_nonempty = n_interior + n_terminal - 1
        if tok_r is not None and len(tok_r) != n_nonempty:
            raise DomainError("token rewards carry keys outside the tree")
        if feats is not None and len(feats) != n_nonempty:
            raise DomainError("prefix features carry keys outside the tree")

    def is_terminal(self, prefix: tuple[int, ...]) -> bool:
        if len(prefix) >= self.horizon:
            return True
        return (
            bool(prefix)
            and self.terminal_token is not None
            and prefix[-1] == self.terminal_token
        )

    @cached_property
    def token_index(self) -> Mapping[int, int]:
        return MappingProxyType({tok: i for i, tok in enumerate(self.vocab)})


def iter_prefixes(mdp: TokenMDP) -> Iterator[tuple[int, ...]]:
    """Every prefix in the tree, level by level, root first.

    Raises ResourceLimit before materializing a level that would push the
    node count past the tree cap.
    """
    level: list[tuple[int, ...]] = [()]
    seen = 1
    while level:
        yield from level
        nxt: list[tuple[int, ...]] = []
        for p in level:
            if not mdp.is_terminal(p):
                nxt.extend(p + (s,) for s in mdp.vocab)
        seen += len(nxt)
        if seen > mdp.tree_cap:
            raise ResourceLimit(
                f"prefix tree exceeds the {mdp.tree_cap}-node cap "
                f"at depth {len(nxt[0])}"
            )
        level = nxt


def terminal_sequences(mdp: TokenMDP) -> list[tuple[int, ...]]:
    return [p for p in iter_prefixes(mdp) if mdp.is_terminal(p)]


def reference_log_prob(mdp: TokenMDP, seq: Iterable[int]) -> float:
    """log π_ref of a complete sequence (sum of conditional logs)."""
    seq = _as_prefix(seq)
    if not seq or not mdp.is_terminal(seq):
        raise DomainError("sequence must end at a terminal prefix")
    total = 0.0
    for t, tok in enumerate(seq):
        prefix = seq[:t]
        if mdp.is_terminal(prefix):
            raise DomainError(f"sequence continues past terminal prefix {prefix}")
        j = mdp.token_index.get(tok)
        if j is None:
            raise DomainError(f"token {tok} is not in the vocabulary")
        total += math.log(float(mdp.ref_conditionals[prefix][j]))
    return total


def cumulative_token_reward(mdp: TokenMDP, prefix: Iterable[int]) -> float:
    """Sum of per-token rewards along the path to ``prefix``."""
    if mdp.token_rewards is None:
        raise UnsupportedQuery("this tree carries no per-token reward decomposition")
    p = _as_prefix(prefix)
    try:
        return sum(mdp.token_rewards[p[: t + 1]] for t in range(len(p)))
    except KeyError as exc:
        raise DomainError(f"prefix {exc.args[0]} is not in the tree") from None


@dataclass(frozen=True)
class QTable:
    """Soft action values, keyed by the prefix *including* the last token."""

    q: Mapping[tuple[int, ...], float] = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "q", MappingProxyType({_as_prefix(k): float(x) for k, x in self.q.items()})
        )

    def __getitem__(self, prefix) -> float:
        return self.q[_as_prefix(prefix)]

    def __len__(self) -> int:
        return len(self.q)


@dataclass(frozen=True)
class VTable:
    """Soft state values under a per-token reward decomposition; 0 at terminals."""

    v: Mapping[tuple[int, ...], float] = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "v", MappingProxyType({_as_prefix(k): float(x) for k, x in self.v.items()})
        )

    def __getitem__(self, prefix) -> float:
        return self.v[_as_prefix(prefix)]

    def __len__(self) -> int:
        return len(self.v)


def compute_q_star(mdp: TokenMDP) -> QTable:
    """Backward induction for the soft action value.

    Terminal prefixes carry the terminal reward verbatim; each interior
    value is beta · log E_{s~π_ref(·|prefix)} exp(q(prefix+s)/beta),
    evaluated max-shifted so only q/beta itself can overflow.
    """
    q: dict[tuple[int, ...], float] = {}
    for prefix in reversed(list(iter_prefixes(mdp))):
        if not prefix:
            continue
        if mdp.is_terminal(prefix):
            q[prefix] = mdp.terminal_reward[prefix]
            continue
        children = np.array([q[prefix + (s,)] for s in mdp.vocab])
        with np.errstate(over="ignore"):
            val = mdp.beta * logsumexp(
                children / mdp.beta, b=mdp.ref_conditionals[prefix]
            )
        if not np.isfinite(val):
            raise NumericFailure(f"soft action value overflowed at prefix {prefix}")
        q[prefix] = float(val)
    return QTable(q=q)


def compute_v_star(mdp: TokenMDP) -> VTable:
    """Soft state values; requires the per-token reward decomposition.

    v is 0 at terminal prefixes and otherwise aggregates next-token
    reward-plus-value under the reference conditional. Together with the
    cumulative token reward it reconstructs the soft action value:
    q = (reward so far) + v.
    """
    if mdp.token_rewards is None:
        raise UnsupportedQuery(
            "soft state values need a per-token reward decomposition; "
            "this tree only carries terminal rewards"
        )
    v: dict[tuple[int, ...], float] = {}
    for prefix in reversed(list(iter_prefixes(mdp))):
        if not prefix:
            continue
        if mdp.is_terminal(prefix):
            v[prefix] = 0.0
            continue
        future = np.array(
            [mdp.token_rewards[prefix + (s,)] + v[prefix + (s,)] for s in mdp.vocab]
        )
        with np.errstate(over="ignore"):
            val = mdp.beta * logsumexp(future / mdp.beta, b=mdp.ref_conditionals[prefix])
        if not np.isfinite(val):
            raise NumericFailure(f"soft state value overflowed at prefix {prefix}")
        v[prefix] = float(val)
    return VTable(v=v)


@dataclass(frozen=True)
class TokenPolicy:
    """Per-prefix next-token conditionals, one per non-terminal prefix."""

    vocab: tuple[int, ...]
    conditionals: Mapping[tuple[int, ...], np.ndarray] = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "vocab", _as_prefix(self.vocab))
        conds = {}
        m = len(self.vocab)
        for key, c in self.conditionals.items():
            arr = _frozen(c)
            if arr.shape != (m,):
                raise DomainError(f"conditional at {key} has shape {arr.shape}")
            if np.any(arr < 0) or abs(float(arr.sum()) - 1.0) > 1e-9:
                raise DomainError(f"conditional at {key} is not a distribution")
            conds[_as_prefix(key)] = arr
        object.__setattr__(self, "conditionals", MappingProxyType(conds))

    @cached_property
    def _index(self) -> Mapping[int, int]:
        return MappingProxyType({tok: i for i, tok in enumerate(self.vocab)})

    def conditional(self, prefix) -> np.ndarray:
        try:
            return self.conditionals[_as_prefix(prefix)]
        except KeyError:
            raise DomainError(f"no conditional stored for prefix {prefix}") from None

    def log_prob(self, seq: Iterable[int]) -> float:
        """Sum of conditional logs; −inf where a conditional underflowed to 0."""
        seq = _as_prefix(seq)
        total = 0.0
        for t, tok in enumerate(seq):
            c = self.conditional(seq[:t])
            j = self._index.get(tok)
            if j is None:
                raise DomainError(f"token {tok} is not in the vocabulary")
            p = float(c[j])
            if p == 0.0:
                return float("-inf")
            total += math.log(p)
        return total

    def prob(self, seq: Iterable[int]) -> float:
        return math.exp(self.log_prob(seq))


def tokenwise_optimal_policy(mdp: TokenMDP, q: QTable) -> TokenPolicy:
    """π(s|prefix) ∝ π_ref(s|prefix) · exp(q(prefix+s)/beta), per prefix."""
    conds: dict[tuple[int, ...], np.ndarray] = {}
    for prefix in iter_prefixes(mdp):
        if mdp.is_terminal(prefix):
            continue
        try:
            vals = np.array([q[prefix + (s,)] for s in mdp.vocab])
        except KeyError as exc:
            raise DomainError(
                f"action-value table is missing prefix {exc.args[0]}"
            ) from None
        with np.errstate(over="ignore"):
            logits = np.log(mdp.ref_conditionals[prefix]) + vals / mdp.beta
        if not np.all(np.isfinite(logits)):
            raise NumericFailure(f"policy logits overflowed at prefix {prefix}")
        w = np.exp(logits - logits.max())
        conds[prefix] = w / w.sum()
    return TokenPolicy(vocab=mdp.vocab, conditionals=conds)


# --- dual-token sparse-prediction task ------------------------------------------


@dataclass(frozen=True)
class GramCheck:
    """Eigenvalue report for the first-token pair-difference design.

    ``ok`` is False when the full design or any probed support submatrix
    is numerically singular; the factory attaches this record as a
    warning rather than refusing the environment.
    """

    lambda_min: float
    lambda_max: float
    support_lambda_min: float
    supports_checked: int
    ok: bool


@dataclass(frozen=True)
class DTSPEnv:
    """Two-token task whose first-token estimation targets split.

    The ground truth rewards the first token through a sparse direction
    and the second token through its first feature coordinate, while the
    second token's features fold a dense direction of the *first* token's
    features back in. A reward head for the first token therefore targets
    the sparse direction alone, but a policy head targets sparse + dense,
    because the soft value of the first token re-absorbs the folded-in
    term. Reference conditionals default to uniform; a non-uniform second
    conditional must be shared across first tokens, which is what keeps
    the folded-in term linear.
    """

    first_features: np.ndarray  # one row per token, norms ≤ feature_bound
    r_sparse: np.ndarray
    r_dense: np.ndarray
    sparsity: int
    feature_bound: float
    ball_radius: float
    beta: float = 1.0
    ref_first: np.ndarray | None = None
    ref_second: np.ndarray | None = None
    gram_check: GramCheck | None = None

    def __post_init__(self):
        psi = _frozen(self.first_features)
        object.__setattr__(self, "first_features", psi)
        object.__setattr__(self, "r_sparse", _frozen(self.r_sparse))
        object.__setattr__(self, "r_dense", _frozen(self.r_dense))
        if psi.ndim != 2 or psi.shape[0] < 2:
            raise DomainError("need a 2-D feature matrix with at least two tokens")
        m, d = psi.shape
        if self.r_sparse.shape != (d,) or self.r_dense.shape != (d,):
            raise DomainError("reward directions must match the feature dimension")
        if not (
            np.all(np.isfinite(psi))
            and np.all(np.isfinite(self.r_sparse))
            and np.all(np.isfinite(self.r_dense))
        ):
            raise DomainError("features and reward directions must be finite")
        if not 1 <= self.sparsity <= d:
            raise DomainError(f"sparsity must be in [1, {d}], got {self.sparsity}")
        if int(np.count_nonzero(self.r_sparse)) != self.sparsity:
            raise DomainError(
                f"sparse direction has {np.count_nonzero(self.r_sparse)} nonzeros, "
                f"declared {self.sparsity}"
            )
        if self.beta <= 0:
            raise DomainError(f"beta must be > 0, got {self.beta}")
        norms = np.linalg.norm(psi, axis=1)
        if np.any(norms > self.feature_bound * (1 + 1e-9)):
            raise DomainError(
                f"feature norm {norms.max():.6g} exceeds bound {self.feature_bound:.6g}"
            )
        e1 = np.zeros(d)
        e1[0] = 1.0
        for name, vec in (
            ("dense direction", self.r_dense),
            ("sparse direction", self.r_sparse),
            ("pinned-plus-both combination", e1 + self.r_dense + self.r_sparse),
        ):
            if np.linalg.norm(vec) > self.ball_radius * (1 + 1e-9):
                raise DomainError(
                    f"{name} norm {np.linalg.norm(vec):.6g} exceeds the "
                    f"parameter ball radius {self.ball_radius:.6g}"
                )
        for label, ref in (("ref_first", self.ref_first), ("ref_second", self.ref_second)):
            if ref is None:
                continue
            arr = _frozen(ref)
            if arr.shape != (m,) or np.any(arr <= 0) or abs(float(arr.sum()) - 1.0) > 1e-12 * m:
                raise DomainError(f"{label} must be a strictly positive distribution over tokens")
            object.__setattr__(self, label, arr)

    @property
    def vocab_size(self) -> int:
        return self.first_features.shape[0]

    @property
    def dim(self) -> int:
        return self.first_features.shape[1]

    @property
    def reward_target(self) -> np.ndarray:
        """Population optimum of the first-token reward head (sparse)."""
        return self.r_sparse

    @property
    def policy_target(self) -> np.ndarray:
        """Population optimum of the first-token policy head (dense)."""
        return _frozen(self.r_sparse + self.r_dense)

    @property
    def second_token_target(self) -> np.ndarray:
        """Shared optimum of the second-token head: the pinned coordinate."""
        e1 = np.zeros(self.dim)
        e1[0] = 1.0
        return _frozen(e1)

    @property
    def effective_parameter(self) -> np.ndarray:
        """Truth of the duplicated-pair reduction over first-token features.

        When a preference pair duplicates its first token, the reward
        difference collapses to this direction against ψ(winner) − ψ(loser).
        """
        e1 = np.zeros(self.dim)
        e1[0] = 1.0
        return _frozen(e1 + self.r_dense + self.r_sparse)

    def _check_token(self, a: int) -> int:
        a = int(a)
        if not 0 <= a < self.vocab_size:
            raise DomainError(f"token index {a} outside [0, {self.vocab_size})")
        return a

    def pair_feature(self, a: int, b: int) -> np.ndarray:
        """ψ(second token) with the dense response to the first token folded in."""
        a, b = self._check_token(a), self._check_token(b)
        f = self.first_features[b].copy()
        f[0] += float(self.r_dense @ self.first_features[a])
        return f

    def true_reward(self, a: int, b: int) -> float:
        psi_a = self.first_features[self._check_token(a)]
        return float(
            self.beta * (self.r_sparse @ psi_a)
            + self.beta * self.pair_feature(a, b)[0]
        )

    def to_token_mdp(self, tree_cap: int = DEFAULT_TREE_CAP) -> TokenMDP:
        """Materialize the two-token tree with its per-token reward split."""
        m = self.vocab_size
        uniform = np.full(m, 1.0 / m)
        first = uniform if self.ref_first is None else self.ref_first
        second = uniform if self.ref_second is None else self.ref_second
        conds: dict[tuple[int, ...], np.ndarray] = {(): first}
        rewards: dict[tuple[int, ...], float] = {}
        tok_r: dict[tuple[int, ...], float] = {}
        feats: dict[tuple[int, ...], np.ndarray] = {}
        for a in range(m):
            psi_a = self.first_features[a]
            conds[(a,)] = second
            feats[(a,)] = psi_a
            tok_r[(a,)] = float(self.beta * (self.r_sparse @ psi_a))
            shift = float(self.r_dense @ psi_a)
            for b in range(m):
                pair = self.first_features[b].copy()
                pair[0] += shift
                feats[(a, b)] = pair
                tok_r[(a, b)] = float(self.beta * pair[0])
                rewards[(a, b)] = tok_r[(a,)] + tok_r[(a, b)]
        return TokenMDP(
            vocab=tuple(range(m)),
            horizon=2,
            ref_conditionals=conds,
            terminal_reward=rewards,
            beta=self.beta,
            token_rewards=tok_r,
            token_features=feats,
            tree_cap=tree_cap,
        )


def check_design_gram(env: DTSPEnv, seed: int = 0, n_supports: int = 8) -> GramCheck:
    """Eigenvalue diagnostics for the first-token difference design.

    Uses the uniform distribution over distinct first-token pairs (the
    canonical collection scheme here) and probes index subsets of size
    min(2·sparsity, dim) — always including the sparse support — since
    sparse estimators lean on those restricted designs being invertible.
    """
    psi = env.first_features
    m, d = psi.shape
    ii, jj = np.triu_indices(m, k=1)
    diffs = psi[ii] - psi[jj]
    sigma = diffs.T @ diffs / len(diffs)
    spectrum = np.linalg.eigvalsh(sigma)
    lo, hi = float(spectrum[0]), float(spectrum[-1])

    size = min(2 * env.sparsity, d)
    rng = make_rng(seed, 0x6D4A)
    support = np.flatnonzero(env.r_sparse)
    sets = []
    rest = np.setdiff1d(np.arange(d), support)
    pad = rng.choice(rest, size - len(support), replace=False) if size > len(support) else []
    sets.append(np.sort(np.concatenate([support, np.asarray(pad, dtype=int)])))
    for _ in range(n_supports):
        sets.append(np.sort(rng.choice(d, size, replace=False)))
    sub_min = min(
        float(np.linalg.eigvalsh(sigma[np.ix_(s, s)])[0]) for s in sets
    )
    tol = _SINGULAR_TOL * max(hi, np.finfo(float).tiny)
    return GramCheck(
        lambda_min=lo,
        lambda_max=hi,
        support_lambda_min=sub_min,
        supports_checked=len(sets),
        ok=bool(lo > tol and sub_min > tol),
    )


def make_dtsp_env(
    d: int,
    k: int,
    seed: int,
    feature_bound: float = 1.0,
    ball_radius: float = 4.0,
    beta: float = 1.0,
    vocab_size: int | None = None,
) -> DTSPEnv:
    """Sample a task instance; deterministic in all arguments.

    Features are random directions with norms in [bound/2, bound]; the
    sparse direction picks its support uniformly. Both reward directions
    get norm (ball − 1)/2, so the triangle inequality keeps every bound
    the estimators rely on satisfiable — which is why a ball radius ≤ 1
    (no room beside the pinned unit coordinate) is a construction error.
    The attached gram_check reports whether the sampled design is
    non-singular; it is a warning record, not a guarantee.
    """
    if d < 1 or not 1 <= k <= d:
        raise DomainError(f"need 1 ≤ sparsity ≤ dim, got dim={d} sparsity={k}")
    m = 2 * d if vocab_size is None else int(vocab_size)
    if m < 2:
        raise DomainError(f"vocabulary size must be ≥ 2, got {m}")
    if feature_bound <= 0:
        raise DomainError("feature bound must be positive")
    if ball_radius <= 1 + 1e-9:
        raise ConstructionFailure(
            f"parameter ball of radius {ball_radius} cannot hold the pinned "
            "unit coordinate plus both reward directions"
        )
    rng = make_rng(seed, 0x7D79)

    raw = rng.standard_normal((m, d))
    unit = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    psi = (feature_bound * rng.uniform(0.5, 1.0, size=m))[:, None] * unit

    rho = (ball_radius - 1.0) / 2.0
    support = rng.choice(d, size=k, replace=False)
    vals = rng.standard_normal(k)
    while np.any(vals == 0.0):  # pragma: no cover - probability ~2^-53
        vals = rng.standard_normal(k)
    r_sparse = np.zeros(d)
    r_sparse[support] = vals
    r_sparse *= rho / np.linalg.norm(r_sparse)
    dense = rng.standard_normal(d)
    r_dense = dense * (rho / np.linalg.norm(dense))

    env = DTSPEnv(
        first_features=psi,
        r_sparse=r_sparse,
        r_dense=r_dense,
        sparsity=k,
        feature_bound=feature_bound,
        ball_radius=ball_radius,
        beta=beta,
    )
    return replace(env, gram_check=check_design_gram(env, seed=seed))


# ---------------------------------------------------------------------------
# Tree (de)serialization. Prefixes become comma-joined keys ("" is the
# root); doubles survive the round trip exactly via repr-style floats.

def _key(prefix: tuple[int, ...]) -> str:
    return ",".join(str(t) for t in prefix)


def _parse_key(s: str) -> tuple[int, ...]:
    return () if s == "" else tuple(int(t) for t in s.split(","))


def token_mdp_to_json(mdp: TokenMDP) -> dict:
    return {
        "vocab": list(mdp.vocab),
        "horizon": mdp.horizon,
        "terminal_token": mdp.terminal_token,
        "beta": mdp.beta,
        "tree_cap": mdp.tree_cap,
        "ref_conditionals": {
            _key(p): [float(x) for x in c] for p, c in mdp.ref_conditionals.items()
        },
        "terminal_reward": {_key(p): r for p, r in mdp.terminal_reward.items()},
        "token_rewards": (
            None
            if mdp.token_rewards is None
            else {_key(p): r for p, r in mdp.token_rewards.items()}
        ),
        "token_features": (
            None
            if mdp.token_features is None
            else {
                _key(p): [float(x) for x in f] for p, f in mdp.token_features.items()
            }
        ),
    }


def token_mdp_from_json(data: dict) -> TokenMDP:
    try:
        tok_r = data["token_rewards"]
        feats = data["token_features"]
        return TokenMDP(
            vocab=tuple(data["vocab"]),
            horizon=data["horizon"],
            ref_conditionals={
                _parse_key(k): np.asarray(c, dtype=float)
                for k, c in data["ref_conditionals"].items()
            },
            terminal_reward={
                _parse_key(k): r for k, r in data["terminal_reward"].items()
            },
            beta=data["beta"],
            terminal_token=data["terminal_token"],
            token_rewards=(
                None if tok_r is None else {_parse_key(k): r for k, r in tok_r.items()}
            ),
            token_features=(
                None
                if feats is None
                else {
                    _parse_key(k): np.asarray(f, dtype=float) for k, f in feats.items()
                }
            ),
            tree_cap=data["tree_cap"],
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise SchemaError(f"malformed token-tree payload: {exc!r}") from exc
