"""Experiment harness behind the ``prefgap`` command-line tool.

Named reproductions of the bandit separation scenarios, the duplicated-pair
estimation-error sweep on the dual-token task, the policy sub-optimality
sweep, and deterministic artifact emission: RFC-4180 CSV, hand-written SVG,
JSON summaries and manifests.  Every output is a pure function of its
configuration — no wall clock leaks into artifacts except the manifest's
timestamp field, and the worker pool never changes bytes because cells are
independent and merged in canonical order.

Exit-code contract: 0 every asserted claim holds; 2 a claimed inequality or
identity failed; 3 numeric failure inside a solver or a cross-check between
two evaluation routes; 4 bad input (arguments, config file, CSV schema,
filesystem).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .bandit import (
    Distribution,
    FeatureMap,
    FiniteBandit,
    RewardVector,
    regularized_value,
)
from .classes import AugmentedClass, LogLinear, LogLinearLogRatioBox, SurrogateClass
from .constructions import (
    ScenarioArtifacts,
    ScenarioResult,
    env_three_arm_midpoint,
    grid_oracle_1d,
    log_ratio_coordinate,
    run_condition,
)
from .errors import (
    ClaimViolation,
    ConstructionFailure,
    DomainError,
    NumericFailure,
    ResourceLimit,
    SchemaError,
)
from .estimators import (
    EstimatorSpec,
    PreferenceDesign,
    fit,
    gamma_schedule,
    semi_norm_sq,
)
from .exact import (
    OptimizerConfig,
    PairSampler,
    fit_dpo,
    fit_reward_mle,
    online_dpo,
    pilaf_gradient_identity_check,
    policy_stage,
    population_bt_grad_linear,
)
from .rng import make_rng
from .token_mdp import DTSPEnv, compute_v_star, make_dtsp_env

__all__ = [
    "ARTIFACT_VERSIONS",
    "DTSP_METHODS",
    "REPRODUCE_NAMES",
    "SUBOPT_METHODS",
    "DtspRun",
    "DtspSweep",
    "ExperimentManifest",
    "GapRun",
    "SeparationRow",
    "SeparationTable",
    "SuboptSweep",
    "dtsp_separation_sweep",
    "main",
    "plot_csv",
    "render_plot",
    "reproduce",
    "sample_duplicated_pairs",
    "suboptimality_sweep",
    "verify_all",
    "write_dtsp_artifacts",
    "write_subopt_artifacts",
]

#: Schema versions stamped into every manifest, bumped on format changes.
ARTIFACT_VERSIONS: Mapping[str, int] = MappingProxyType(
    {
        "summary-json": 1,
        "manifest-json": 1,
        "runs-csv": 1,
        "table-csv": 1,
        "trajectory-csv": 1,
        "gradient-curve-csv": 1,
        "value-curve-csv": 1,
        "gradient-identity-csv": 1,
        "plot-svg": 1,
    }
)

#: Estimation-error sweep methods.  The reward-model fits can exploit the
#: sparse residual structure left after subtracting the known shift; the
#: direct route's surrogate target is dense, so only plain likelihood applies.
DTSP_METHODS = ("RM-L0", "RM-L1", "RM-MLE", "DPO-MLE")

#: Sub-optimality sweep methods: the policies acted out from the same fits.
SUBOPT_METHODS = ("RLHF-L0", "RLHF-L1", "RLHF-MLE", "DPO-MLE")

REPRODUCE_NAMES = ("b3", "b4", "b5", "b6", "b7", "b8", "iso", "ss-thm32")

#: Reproduction names that delegate wholesale to a scenario condition.
_CONDITION_FOR = {
    "b4": "3.3",
    "b5": "3.7-two-envs",
    "b6": "3.6-two-envs",
    "b7": "3.4-online",
    "b8": "3.8-online",
    "iso": "3.5-iso",
}

_CLAIM_SLACK = 1e-6
_PDL_TOL = 1e-8
_ROOT_VALUE_TOL = 1e-9
_SINGULAR_TOL = 1e-10

_STREAM_DUPLICATED_PAIRS = 0xDA7A
_STREAM_IDENTITY_ENV = 0x1DE0

_RUNS_HEADER = ("n", "seed", "method", "gamma_c", "semi_norm_sq", "flagged")
_GAPS_HEADER = ("n", "seed", "method", "gamma_c", "gap", "condition_number", "flagged")
_TABLE_HEADER = ("n", "method", "mean_error", "std_error", "seeds")
_TRAJECTORY_HEADER = ("iteration", "x", "loss", "value")
_GRADIENT_HEADER = ("x", "grad_rl", "grad_dpo", "grad_online")
_VALUE_CURVE_HEADER = ("x", "rl_value", "dpo_loss")
_IDENTITY_HEADER = ("coordinate", "online_grad", "scaled_value_grad", "abs_diff")

_CURVE_RESOLUTION = 1001
_ORACLE_RESOLUTION = 4001


def _claim(label: str, ok: bool, statement: str, **observed: float) -> None:
    if ok:
        return
    dump = ", ".join(f"{k}={v!r}" for k, v in observed.items())
    raise ClaimViolation(f"{label}: expected {statement} ({dump})")


# ---------------------------------------------------------------------------
# manifests and tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentManifest:
    """Self-sufficient record of one run.

    Replaying ``config`` through the same command reproduces every CSV/SVG
    byte; the timestamp is metadata, not an input.
    """

    name: str
    config: Mapping[str, object]
    artifact_versions: Mapping[str, int]
    timestamp: str

    def __post_init__(self) -> None:
        if not self.name:
            raise DomainError("manifest needs a nonempty experiment name")
        if not self.timestamp:
            raise DomainError("manifest needs a timestamp")
        for key, version in dict(self.artifact_versions).items():
            if not isinstance(version, int) or version < 1:
                raise DomainError(f"artifact version {key}={version!r} must be a positive int")
        try:
            frozen = json.dumps(dict(self.config), sort_keys=True)
        except TypeError as exc:
            raise DomainError(f"manifest config is not JSON-serializable: {exc}") from exc
        object.__setattr__(self, "config", MappingProxyType(json.loads(frozen)))
        object.__setattr__(
            self, "artifact_versions", MappingProxyType(dict(self.artifact_versions))
        )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "config": dict(self.config),
            "artifact_versions": dict(self.artifact_versions),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, data: object) -> "ExperimentManifest":
        if not isinstance(data, dict):
            raise SchemaError("manifest JSON must be an object")
        missing = {"name", "config", "artifact_versions", "timestamp"} - set(data)
        if missing:
            raise SchemaError(f"manifest JSON missing keys {sorted(missing)}")
        config = data["config"]
        versions = data["artifact_versions"]
        if not isinstance(config, dict) or not isinstance(versions, dict):
            raise SchemaError("manifest config and artifact_versions must be objects")
        try:
            return cls(
                name=str(data["name"]),
                config=config,
                artifact_versions={str(k): v for k, v in versions.items()},
                timestamp=str(data["timestamp"]),
            )
        except DomainError as exc:
            raise SchemaError(f"bad manifest: {exc}") from exc


def _manifest(name: str, config: dict) -> ExperimentManifest:
    return ExperimentManifest(
        name=name,
        config=config,
        artifact_versions=ARTIFACT_VERSIONS,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


@dataclass(frozen=True)
class SeparationRow:
    """Aggregate of one (sample size, method) cell over seeds."""

    n: int
    method: str
    mean_error: float
    std_error: float
    seeds: int

    def __post_init__(self) -> None:
        if self.n < 1 or self.seeds < 1:
            raise DomainError("row needs n >= 1 and seeds >= 1")
        if not (math.isfinite(self.mean_error) and math.isfinite(self.std_error)):
            raise DomainError(f"non-finite aggregate at n={self.n} method={self.method}")
        if self.mean_error < 0 or self.std_error < 0:
            raise DomainError(
                f"errors must be nonnegative, got mean={self.mean_error} std={self.std_error}"
            )


@dataclass(frozen=True)
class SeparationTable:
    """Mean/std errors per (n, method), every cell over the same seed count."""

    rows: tuple[SeparationRow, ...]
    methods: tuple[str, ...] = DTSP_METHODS

    def __post_init__(self) -> None:
        if not self.rows:
            raise DomainError("separation table needs at least one row")
        counts = {row.seeds for row in self.rows}
        if len(counts) != 1:
            raise DomainError(f"rows aggregate different seed counts: {sorted(counts)}")
        for row in self.rows:
            if row.method not in self.methods:
                raise DomainError(f"unknown method {row.method!r}; expected one of {self.methods}")

    def mean(self, n: int, method: str) -> float:
        for row in self.rows:
            if row.n == n and row.method == method:
                return row.mean_error
        raise DomainError(f"no row for n={n}, method={method!r}")

    def grid(self) -> tuple[int, ...]:
        return tuple(sorted({row.n for row in self.rows}))

    def csv_rows(self) -> list[tuple]:
        return [(r.n, r.method, r.mean_error, r.std_error, r.seeds) for r in self.rows]


def _aggregate(
    values: Mapping[tuple[int, str], list[float]],
    methods: tuple[str, ...],
    expected_seeds: int,
) -> SeparationTable:
    rows = []
    ordered = sorted(values.items(), key=lambda kv: (kv[0][0], methods.index(kv[0][1])))
    for (n, method), errs in ordered:
        if len(errs) != expected_seeds:
            raise DomainError(
                f"cell n={n} method={method} has {len(errs)} runs, expected {expected_seeds}"
            )
        arr = np.asarray(errs, dtype=float)
        std = float(arr.std(ddof=1)) if len(errs) > 1 else 0.0
        rows.append(
            SeparationRow(
                n=n, method=method, mean_error=float(arr.mean()), std_error=std, seeds=len(errs)
            )
        )
    return SeparationTable(rows=tuple(rows), methods=methods)


# ---------------------------------------------------------------------------
# duplicated-pair datasets
# ---------------------------------------------------------------------------


def sample_duplicated_pairs(env: DTSPEnv, n: int, seed: int) -> PreferenceDesign:
    """Draw ``n`` labeled first-token pairs, each duplicated into a two-token
    response before labeling.

    A pair (a, a') of distinct first tokens — uniform over the unordered
    collection scheme — becomes the responses (a, a) and (a', a'), whose full
    two-token reward difference collapses onto ``env.effective_parameter``
    against psi(a) − psi(a').  Labels are Bradley-Terry flips of that margin;
    the returned design holds psi(winner) − psi(loser) rows.  Deterministic
    in (seed, n) through a dedicated counter-based stream.
    """

    if n < 1:
        raise DomainError(f"need at least one pair, got n={n}")
    rng = make_rng(seed, _STREAM_DUPLICATED_PAIRS, n)
    psi = env.first_features
    ii, jj = np.triu_indices(env.vocab_size, k=1)
    idx = rng.integers(0, len(ii), size=n)
    a, b = ii[idx], jj[idx]
    margins = env.beta * ((psi[a] - psi[b]) @ env.effective_parameter)
    keep = rng.random(n) < expit(margins)
    winners = np.where(keep, a, b)
    losers = np.where(keep, b, a)
    return PreferenceDesign(psi[winners] - psi[losers], feature_bound=env.feature_bound)


def _sampled_design_singular(design: PreferenceDesign) -> bool:
    sigma = design.diffs.T @ design.diffs / design.n_pairs
    spectrum = np.linalg.eigvalsh(sigma)
    return bool(spectrum[0] <= _SINGULAR_TOL * max(spectrum[-1], np.finfo(float).tiny))


def _env_condition_number(env: DTSPEnv) -> float:
    check = env.gram_check
    if check is None or check.lambda_min <= 0.0:
        return float("inf")
    return check.lambda_max / check.lambda_min


def _rm_shift(env: DTSPEnv) -> np.ndarray:
    """Known part of the pooled parameter once the second token is pinned:
    everything except the sparse reward direction."""

    return env.effective_parameter - env.r_sparse


# ---------------------------------------------------------------------------
# estimation-error sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DtspRun:
    n: int
    seed: int
    method: str
    gamma_c: float | None
    error: float
    flagged: bool


@dataclass(frozen=True)
class DtspSweep:
    """All per-run errors plus one aggregated table per penalty constant."""

    d: int
    k: int
    n_grid: tuple[int, ...]
    seed_list: tuple[int, ...]
    gamma_cs: tuple[float, ...]
    runs: tuple[DtspRun, ...]
    tables: Mapping[float, SeparationTable] = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tables", MappingProxyType(dict(self.tables)))

    def runs_csv_rows(self) -> list[tuple]:
        return [(r.n, r.seed, r.method, r.gamma_c, r.error, r.flagged) for r in self.runs]


def _dtsp_cell(task: tuple) -> tuple[DtspRun, ...]:
    """One (seed, n) cell: sample, fit every estimator, record design errors.

    On duplicated pairs the reward-model route and the direct route reduce to
    the same pooled Bradley-Terry problem — the dense fold-in cancels against
    the second-token partition function in the surrogate margin — so their
    unstructured fits coincide and only the structured penalties separate the
    methods.  ``RM-MLE`` and ``DPO-MLE`` therefore share one fit per cell.
    """

    d, k, seed, n, gamma_cs = task
    env = make_dtsp_env(d, k, seed=seed)
    phi_star = env.effective_parameter
    shift = _rm_shift(env)
    radius = env.ball_radius
    design = sample_duplicated_pairs(env, n, seed)
    flagged = _sampled_design_singular(design) or (
        env.gram_check is not None and not env.gram_check.ok
    )

    mle = fit(EstimatorSpec(kind="MLE", ball_radius=radius), design)
    l0 = fit(EstimatorSpec(kind="RelL0", sparsity=k, ball_radius=radius, shift=shift), design)
    err_mle = semi_norm_sq(mle, phi_star, design)
    rows = [
        DtspRun(n, seed, "RM-L0", None, semi_norm_sq(l0, phi_star, design), flagged),
        DtspRun(n, seed, "RM-MLE", None, err_mle, flagged),
        DtspRun(n, seed, "DPO-MLE", None, err_mle, flagged),
    ]
    for c in gamma_cs:
        spec = EstimatorSpec(
            kind="RelL1", gamma=gamma_schedule(n, d, c=c), ball_radius=radius, shift=shift
        )
        rows.append(
            DtspRun(n, seed, "RM-L1", c, semi_norm_sq(fit(spec, design), phi_star, design), flagged)
        )
    return tuple(rows)


def _run_cells(worker: Callable, tasks: list[tuple], jobs: int) -> list:
    if jobs <= 1:
        return [worker(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks))


def dtsp_separation_sweep(
    d: int = 60,
    k: int = 3,
    n_grid: Sequence[int] = (100, 200, 400, 800, 1600, 3200),
    seeds: int = 20,
    gamma_cs: Sequence[float] = (1.0,),
    *,
    base_seed: int = 0,
    jobs: int = 1,
) -> DtspSweep:
    """Estimation error of every method over (n x seed) cells.

    Each cell is deterministic and independent: a fresh task instance per
    seed, a fresh dataset per (seed, n).  The lasso column is refit per
    penalty constant in ``gamma_cs``; the enumeration and plain-likelihood
    columns do not depend on the constant, so they are fit once and shared
    across the per-constant tables.  ``jobs`` only partitions the work — the
    merged result is byte-identical at any parallelism.
    """

    grid = tuple(sorted({int(n) for n in n_grid}))
    if not grid:
        raise DomainError("n_grid must be nonempty")
    if seeds < 1:
        raise DomainError("need at least one seed")
    cs = tuple(float(c) for c in gamma_cs)
    if not cs:
        raise DomainError("gamma_cs must be nonempty")
    seed_list = tuple(base_seed + i for i in range(seeds))
    tasks = [(d, k, s, n, cs) for n in grid for s in seed_list]
    runs = tuple(row for cell in _run_cells(_dtsp_cell, tasks, jobs) for row in cell)

    tables = {}
    for c in cs:
        values: dict[tuple[int, str], list[float]] = {}
        for run in runs:
            if run.gamma_c is None or run.gamma_c == c:
                values.setdefault((run.n, run.method), []).append(run.error)
        tables[c] = _aggregate(values, DTSP_METHODS, seeds)
    return DtspSweep(
        d=d, k=k, n_grid=grid, seed_list=seed_list, gamma_cs=cs, runs=runs, tables=tables
    )


# ---------------------------------------------------------------------------
# sub-optimality sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GapRun:
    n: int
    seed: int
    method: str
    gamma_c: float | None
    gap: float
    condition_number: float
    flagged: bool


@dataclass(frozen=True)
class SuboptSweep:
    d: int
    k: int
    n_grid: tuple[int, ...]
    seed_list: tuple[int, ...]
    gamma_c: float
    runs: tuple[GapRun, ...]
    table: SeparationTable

    def runs_csv_rows(self) -> list[tuple]:
        return [
            (r.n, r.seed, r.method, r.gamma_c, r.gap, r.condition_number, r.flagged)
            for r in self.runs
        ]


class _GapEvaluator:
    """Exact policy evaluation on the two-token tree of one task instance.

    Built once per environment.  The optimal sequence policy factorizes, the
    second head is first-token independent, and every fitted route acts out
    the same head shapes, so candidates differ only in the pooled first-token
    parameter.  Values come from full tree enumeration; the performance-
    difference form beta * KL(pi, pi*) is recomputed for every candidate, and
    disagreement between the two routes is a numeric failure, never silently
    averaged away.
    """

    def __init__(self, env: DTSPEnv):
        psi = env.first_features
        m = env.vocab_size
        uniform = np.full(m, 1.0 / m)
        ref1 = uniform if env.ref_first is None else env.ref_first
        ref2 = uniform if env.ref_second is None else env.ref_second
        first_star = np.log(ref1) + psi @ env.policy_target
        second = np.log(ref2) + psi[:, 0]
        self.env = env
        self.beta = env.beta
        self.psi = psi
        self.log_ref1 = np.log(ref1)
        self.pi2 = softmax(second)
        self.ref_seq = np.outer(ref1, ref2)
        self.reward_seq = env.beta * ((psi @ env.policy_target)[:, None] + psi[:, 0][None, :])
        self.pi_star_seq = np.outer(softmax(first_star), self.pi2)
        self.v_star = env.beta * (logsumexp(first_star) + logsumexp(second))
        e1 = np.zeros(psi.shape[1])
        e1[0] = 1.0
        self.e1 = e1

    def gap(self, phi_hat: np.ndarray) -> float:
        pi1 = softmax(self.log_ref1 + self.psi @ (phi_hat - self.e1))
        pi_seq = np.outer(pi1, self.pi2)
        value = float(
            np.sum(pi_seq * self.reward_seq)
            - self.beta * np.sum(pi_seq * np.log(pi_seq / self.ref_seq))
        )
        gap = self.v_star - value
        pdl = self.beta * float(np.sum(pi_seq * np.log(pi_seq / self.pi_star_seq)))
        if abs(gap - pdl) > _PDL_TOL:
            raise NumericFailure(
                f"value-gap routes disagree: enumeration={gap!r}, divergence form={pdl!r}"
            )
        return gap

    def check_root_value(self) -> None:
        """Cross-check the closed-form optimum against the token-tree recursion."""

        mdp = self.env.to_token_mdp()
        v = compute_v_star(mdp)
        future = np.array([mdp.token_rewards[(a,)] + v[(a,)] for a in mdp.vocab])
        root = mdp.beta * logsumexp(future / mdp.beta, b=mdp.ref_conditionals[()])
        if abs(float(root) - self.v_star) > _ROOT_VALUE_TOL:
            raise NumericFailure(
                f"tree recursion value {float(root)!r} disagrees with the "
                f"closed form {self.v_star!r}"
            )


def _subopt_cell(task: tuple) -> tuple[GapRun, ...]:
    d, k, seed, n, gamma_c, check_tree = task
    env = make_dtsp_env(d, k, seed=seed)
    evaluator = _GapEvaluator(env)
    if check_tree:
        evaluator.check_root_value()
    design = sample_duplicated_pairs(env, n, seed)
    flagged = _sampled_design_singular(design) or (
        env.gram_check is not None and not env.gram_check.ok
    )
    cond = _env_condition_number(env)
    shift = _rm_shift(env)
    radius = env.ball_radius

    mle = fit(EstimatorSpec(kind="MLE", ball_radius=radius), design)
    l0 = fit(EstimatorSpec(kind="RelL0", sparsity=k, ball_radius=radius, shift=shift), design)
    l1 = fit(
        EstimatorSpec(
            kind="RelL1", gamma=gamma_schedule(n, d, c=gamma_c), ball_radius=radius, shift=shift
        ),
        design,
    )
    fits = (
        ("RLHF-L0", l0, None),
        ("RLHF-L1", l1, gamma_c),
        ("RLHF-MLE", mle, None),
        ("DPO-MLE", mle, None),
    )
    return tuple(
        GapRun(n, seed, name, c, evaluator.gap(phi), cond, flagged) for name, phi, c in fits
    )


def suboptimality_sweep(
    d: int = 60,
    k: int = 3,
    n_grid: Sequence[int] = (100, 200, 400, 800, 1600, 3200),
    seeds: int = 20,
    gamma_c: float = 1.0,
    *,
    base_seed: int = 0,
    jobs: int = 1,
) -> SuboptSweep:
    """Exact value gap of the policy each method acts out, per (n, seed).

    Reuses the estimation-sweep datasets and fits; the gap of a candidate is
    evaluated twice (tree enumeration and the divergence form) and the
    closed-form optimum is checked against the token-tree recursion once per
    task instance, at the smallest sample size.
    """

    grid = tuple(sorted({int(n) for n in n_grid}))
    if not grid:
        raise DomainError("n_grid must be nonempty")
    if seeds < 1:
        raise DomainError("need at least one seed")
    seed_list = tuple(base_seed + i for i in range(seeds))
    tasks = [(d, k, s, n, float(gamma_c), n == grid[0]) for n in grid for s in seed_list]
    runs = tuple(row for cell in _run_cells(_subopt_cell, tasks, jobs) for row in cell)

    values: dict[tuple[int, str], list[float]] = {}
    for run in runs:
        values.setdefault((run.n, run.method), []).append(run.gap)
    table = _aggregate(values, SUBOPT_METHODS, seeds)
    return SuboptSweep(
        d=d,
        k=k,
        n_grid=grid,
        seed_list=seed_list,
        gamma_c=float(gamma_c),
        runs=runs,
        table=table,
    )


# ---------------------------------------------------------------------------
# named reproductions
# ---------------------------------------------------------------------------


def _midpoint_policy(env: FiniteBandit, x: float) -> Distribution:
    """Policy at log-ratio coordinate x on a midpoint environment."""

    direction = env.features.vectors @ np.array([1.0, -1.0]) / (2.0 * env.beta)
    return Distribution(softmax(np.log(env.pi_ref.probs) + x * direction))


def _value_curve_rows(env: FiniteBandit, x_range: tuple[float, float]) -> list[tuple]:
    rl = grid_oracle_1d(env, "rl_value", x_range, _CURVE_RESOLUTION)
    dl = grid_oracle_1d(env, "dpo_loss", x_range, _CURVE_RESOLUTION)
    return [
        (float(x), float(v), float(loss)) for x, v, loss in zip(rl.xs, rl.values, dl.values)
    ]


def _gradient_curve_rows(
    env: FiniteBandit, online_kind: str, x_range: tuple[float, float]
) -> list[tuple]:
    """Slopes of the three objectives along the log-ratio coordinate.

    The value slope is exact (covariance form); the preference-loss slopes
    project the population gradient onto the coordinate direction, with the
    online sampler refrozen at each grid point.
    """

    xs = np.linspace(x_range[0], x_range[1], _CURVE_RESOLUTION)
    psi = env.features.vectors
    ref = env.pi_ref.probs
    reward = env.r_star.values
    direction = psi @ np.array([1.0, -1.0]) / (2.0 * env.beta)
    coord = np.array([1.0, -1.0]) / (2.0 * env.beta)
    mu_ref = np.outer(ref, ref)
    mu_dpo = (mu_ref + mu_ref.T) / 2.0
    sampler = PairSampler(online_kind)

    rows = []
    for x in xs:
        pi = softmax(np.log(ref) + x * direction)
        drift = direction - float(pi @ direction)
        grad_rl = float(np.sum(pi * drift * (reward - env.beta * np.log(pi / ref))))
        theta = np.array([x, -x]) / (2.0 * env.beta)
        _, g_dpo = population_bt_grad_linear(theta, psi, env.beta, env, mu_dpo)
        frozen = sampler.pair_distribution(Distribution(pi), env)
        _, g_on = population_bt_grad_linear(theta, psi, env.beta, env, (frozen + frozen.T) / 2.0)
        rows.append((float(x), grad_rl, float(g_dpo @ coord), float(g_on @ coord)))
    return rows


def _trajectory_rows(env: FiniteBandit, online) -> list[tuple]:
    return [
        (tp.iteration, log_ratio_coordinate(np.asarray(tp.theta), env).x, tp.loss, tp.value)
        for tp in online.trajectory
    ]


def _reproduce_b3(seed: int) -> tuple[dict, dict]:
    """Reward class rich enough to recover the truth, at a sharp temperature.

    The surrogate family cannot move the first two responses apart, so the
    direct fit stays on the reference while the two-stage route recovers the
    exact reward and concentrates away from the strictly worse midpoint
    response.
    """

    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.01)
    mu = np.outer(env.pi_ref.probs, env.pi_ref.probs)
    fitted = fit_reward_mle(AugmentedClass(SurrogateClass(LogLinear()), env.r_star), env, mu)
    # the value curve flattens exponentially toward its asymptote at this
    # temperature, so the ascent needs long steps to cross the plateau
    stage = policy_stage(fitted.reward, LogLinear(), env, OptimizerConfig(step_size=2e4))
    direct = fit_dpo(LogLinear(), env, mu)
    oracle = grid_oracle_1d(env, "rl_value", (-4.0, 4.0), _ORACLE_RESOLUTION)

    v_rlhf = regularized_value(stage.policy, env.r_star, env)
    v_dpo = regularized_value(direct.policy, env.r_star, env)
    res = ScenarioResult(
        condition_label="b3",
        v_rlhf=v_rlhf,
        v_dpo=v_dpo,
        v_star_class=oracle.value_opt,
        artifacts=ScenarioArtifacts(
            reward=fitted.reward,
            rlhf_policy=stage.policy,
            dpo_policy=direct.policy,
            x_rlhf=None if stage.theta is None else log_ratio_coordinate(stage.theta, env).x,
            x_dpo=None if direct.theta is None else log_ratio_coordinate(direct.theta, env).x,
        ),
    )
    tv = 0.5 * float(np.abs(direct.policy.probs - env.pi_ref.probs).sum())
    pi_mid = float(stage.policy.probs[2])
    _claim("b3", tv <= 1e-6, "direct fit lands on the reference policy", tv=tv)
    _claim("b3", pi_mid < 1e-3, "two-stage policy starves the midpoint response", pi_mid=pi_mid)
    _claim(
        "b3",
        res.rlhf_minus_dpo > _CLAIM_SLACK,
        "two-stage strictly beats the direct fit",
        v_rlhf=v_rlhf,
        v_dpo=v_dpo,
    )
    summary = dict(res.as_dict())
    summary.update({"name": "b3", "tv_dpo_vs_reference": tv, "pi_rlhf_midpoint": pi_mid})
    files = {"value_curve.csv": (_VALUE_CURVE_HEADER, _value_curve_rows(env, (-4.0, 4.0)))}
    return summary, files


def _reproduce_single(name: str, seed: int) -> tuple[dict, dict]:
    res = run_condition(_CONDITION_FOR[name])
    env = env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1)
    summary = dict(res.as_dict())
    summary["name"] = name
    files = {"value_curve.csv": (_VALUE_CURVE_HEADER, _value_curve_rows(env, (-4.0, 4.0)))}
    return summary, files


def _reproduce_pair(name: str, seed: int) -> tuple[dict, dict]:
    res_a, res_b = run_condition(_CONDITION_FOR[name])
    summary = {"name": name, "a": res_a.as_dict(), "b": res_b.as_dict()}
    if name == "b5":
        files = {
            "value_curve_a.csv": (
                _VALUE_CURVE_HEADER,
                _value_curve_rows(env_three_arm_midpoint((1.0, 1.0, 0.0), 0.01), (-4.0, 4.0)),
            ),
            "value_curve_b.csv": (
                _VALUE_CURVE_HEADER,
                _value_curve_rows(env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1), (2.0, 6.0)),
            ),
        }
    else:
        files = {
            "value_curve.csv": (
                _VALUE_CURVE_HEADER,
                _value_curve_rows(env_three_arm_midpoint((1.0, 1.0, 0.0), 0.1), (-4.0, 4.0)),
            )
        }
    return summary, files


def _cross_check_online(name: str, res: ScenarioResult, env: FiniteBandit) -> dict:
    """Grid-oracle agreement for an online scenario.

    Argopt comparisons use magnitudes (symmetric environments tie across the
    sign flip, and the oracle's argopt lands on either copy); value margins
    instead reconstruct the policy at the solver's exact coordinate, which
    avoids the grid-cell error entirely on sloped stretches.
    """

    a = res.artifacts
    rl = grid_oracle_1d(env, "rl_value", (-4.0, 4.0), _ORACLE_RESOLUTION)
    dl = grid_oracle_1d(env, "dpo_loss", (-4.0, 4.0), _ORACLE_RESOLUTION)
    residual = grid_oracle_1d(
        env, "online_dpo_fixed_point_residual", (-4.0, 4.0), _ORACLE_RESOLUTION
    )
    cell = rl.cell
    # which route attains the class oracle differs by scenario: the pinned
    # sampler keeps the online fit at the offline landing while the two-stage
    # route wins (b7); the on-policy sampler walks the online fit out to the
    # unrestricted optimum while both offline routes stay stuck (b8)
    if name == "b7":
        x_best, v_best, best = a.x_rlhf, res.v_rlhf, "two-stage"
    else:
        x_best, v_best, best = a.x_online, res.v_online_dpo, "online"
    _claim(
        name,
        abs(abs(rl.x_opt) - abs(x_best)) <= cell,
        f"the {best} route sits on the grid argmax",
        x_grid=rl.x_opt,
        x_best=x_best,
    )
    _claim(
        name,
        abs(rl.value_opt - v_best) <= 1e-6,
        f"the {best} route attains the grid optimum value",
        grid=rl.value_opt,
        solver=v_best,
    )
    _claim(
        name,
        abs(abs(dl.x_opt) - abs(a.x_dpo)) <= cell,
        "offline direct optimum sits on the grid argmin",
        x_grid=dl.x_opt,
        x_dpo=a.x_dpo,
    )
    # the residual curve has a zero at every fixed point (boundary ones
    # included), so check the residual *at* the solver's landing point rather
    # than hunting for a matching argmin
    near = int(np.argmin(np.abs(residual.xs - a.x_online)))
    res_at_online = float(residual.values[near])
    _claim(
        name,
        res_at_online <= cell,
        "online fixed point zeroes the projected-update residual",
        residual=res_at_online,
        x_online=a.x_online,
    )
    summary = {
        "x_grid_best": rl.x_opt,
        "x_grid_dpo": dl.x_opt,
        "v_grid_best": rl.value_opt,
        "residual_at_online": res_at_online,
        "grid_cell": cell,
    }
    if name == "b7":
        v_loser_grid = regularized_value(_midpoint_policy(env, a.x_online), env.r_star, env)
        margin = res.v_rlhf - res.v_online_dpo
        statement = "two-stage lead over the online fit agrees with the grid oracle"
        key = "rlhf_minus_online_grid"
    else:
        v_loser_grid = regularized_value(_midpoint_policy(env, a.x_dpo), env.r_star, env)
        margin = res.v_online_dpo - res.v_dpo
        statement = "online lead over the offline fit agrees with the grid oracle"
        key = "online_minus_offline_grid"
    margin_grid = rl.value_opt - v_loser_grid
    _claim(
        name,
        abs(margin - margin_grid) <= 1e-3 and margin_grid > 0,
        statement,
        margin=margin,
        margin_grid=margin_grid,
    )
    summary[key] = margin_grid
    return summary


def _reproduce_online(name: str, seed: int) -> tuple[dict, dict]:
    res = run_condition(_CONDITION_FOR[name])
    if name == "b7":
        env = env_three_arm_midpoint((12.0, 12.0, 0.0), 1.0)
        sampler_kind = "pilaf"
    else:
        env = env_three_arm_midpoint((24.0, 12.0, 0.0), 1.0)
        sampler_kind = "on_policy"
    checks = _cross_check_online(name, res, env)
    online = online_dpo(
        LogLinearLogRatioBox.for_env(env, (0, 1), 4.0), env, PairSampler(sampler_kind)
    )
    summary = dict(res.as_dict())
    summary["name"] = name
    summary["grid_checks"] = checks
    summary["online_iterations"] = len(online.trajectory)
    files = {
        "value_curve.csv": (_VALUE_CURVE_HEADER, _value_curve_rows(env, (-4.0, 4.0))),
        "gradient_curve.csv": (
            _GRADIENT_HEADER,
            _gradient_curve_rows(env, sampler_kind, (-4.0, 4.0)),
        ),
        "trajectory.csv": (_TRAJECTORY_HEADER, _trajectory_rows(env, online)),
    }
    return summary, files


def _identity_check_env(seed: int) -> tuple[FiniteBandit, np.ndarray]:
    """Random realizable log-linear task for the sampled-gradient identity."""

    rng = make_rng(seed, _STREAM_IDENTITY_ENV)
    psi = rng.standard_normal((5, 3))
    psi /= np.linalg.norm(psi, axis=1, keepdims=True)
    theta_star = rng.standard_normal(3)
    theta_star *= 2.0 / np.linalg.norm(theta_star)
    beta = 0.5
    env = FiniteBandit(
        responses=tuple(f"a{i}" for i in range(5)),
        features=FeatureMap(psi),
        r_star=RewardVector(beta * (psi @ theta_star)),
        pi_ref=Distribution(softmax(rng.uniform(-0.5, 0.5, 5))),
        beta=beta,
    )
    return env, theta_star


def _central_difference(
    f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    grad = np.empty(theta.size)
    for i in range(theta.size):
        step = np.zeros(theta.size)
        step[i] = h
        grad[i] = (f(theta + step) - f(theta - step)) / (2.0 * h)
    return grad


def _fd_close(analytic: np.ndarray, numeric: np.ndarray, tol: float = 1e-4) -> bool:
    # mixed floor: both gradients vanish exactly at the realizable optimum,
    # where a pure relative test divides noise by noise
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1.0)
    return float(np.max(np.abs(analytic - numeric))) <= tol * scale


def _reproduce_identity(seed: int) -> tuple[dict, dict]:
    """Gradient identity of the variance-matched sampler, plus an independent
    finite-difference audit of both sides at and off the optimum."""

    env, theta_star = _identity_check_env(seed)
    psi = env.features.vectors
    at_opt = pilaf_gradient_identity_check(theta_star, env)
    _claim(
        "ss-thm32",
        at_opt.max_abs_diff < 1e-8,
        "sampled-objective gradient equals the scaled value gradient at the realizable optimum",
        max_abs_diff=at_opt.max_abs_diff,
    )

    def policy_at(theta: np.ndarray) -> Distribution:
        return Distribution(softmax(np.log(env.pi_ref.probs) + psi @ theta))

    def value_at(theta: np.ndarray) -> float:
        return regularized_value(policy_at(theta), env.r_star, env)

    rng = make_rng(seed, _STREAM_IDENTITY_ENV, 1)
    push = rng.standard_normal(theta_star.size)
    push *= 0.3 / np.linalg.norm(push)
    off_opt = None
    for label, theta in (("optimum", theta_star), ("perturbed", theta_star + push)):
        report = pilaf_gradient_identity_check(theta, env)
        frozen = PairSampler("pilaf").pair_distribution(policy_at(theta), env)
        mu_sym = (frozen + frozen.T) / 2.0
        fd_loss = _central_difference(
            lambda t: population_bt_grad_linear(t, psi, env.beta, env, mu_sym)[0], theta
        )
        fd_value = _central_difference(value_at, theta)
        value_grad = -report.rhs_grad * report.z_theta / (2.0 * env.beta)
        _claim(
            "ss-thm32",
            _fd_close(report.lhs_grad, fd_loss),
            f"frozen-sampler gradient matches finite differences at the {label}",
            analytic=float(np.max(np.abs(report.lhs_grad))),
            numeric=float(np.max(np.abs(fd_loss))),
        )
        _claim(
            "ss-thm32",
            _fd_close(value_grad, fd_value),
            f"value gradient matches finite differences at the {label}",
            analytic=float(np.max(np.abs(value_grad))),
            numeric=float(np.max(np.abs(fd_value))),
        )
        if label == "perturbed":
            off_opt = report
    _claim(
        "ss-thm32",
        off_opt.within_envelope,
        "off the optimum the gradient gap stays inside the curvature envelope",
        max_abs_diff=off_opt.max_abs_diff,
        envelope=float(np.max(off_opt.envelope)),
    )

    rows = [
        (i, float(at_opt.lhs_grad[i]), float(at_opt.rhs_grad[i]), float(diff))
        for i, diff in enumerate(np.abs(at_opt.lhs_grad - at_opt.rhs_grad))
    ]
    summary = {
        "name": "ss-thm32",
        "max_abs_diff": at_opt.max_abs_diff,
        "z_theta": at_opt.z_theta,
        "delta_bound": at_opt.delta_bound,
        "perturbed_max_abs_diff": off_opt.max_abs_diff,
        "perturbed_within_envelope": off_opt.within_envelope,
    }
    files = {"gradient_identity.csv": (_IDENTITY_HEADER, rows)}
    return summary, files


_REPRODUCERS: dict[str, Callable[[int], tuple[dict, dict]]] = {
    "b3": _reproduce_b3,
    "b4": lambda seed: _reproduce_single("b4", seed),
    "b5": lambda seed: _reproduce_pair("b5", seed),
    "b6": lambda seed: _reproduce_pair("b6", seed),
    "b7": lambda seed: _reproduce_online("b7", seed),
    "b8": lambda seed: _reproduce_online("b8", seed),
    "iso": lambda seed: _reproduce_single("iso", seed),
    "ss-thm32": _reproduce_identity,
}


def reproduce(name: str, out_dir: str | Path, seed: int = 0) -> dict:
    """Run one named reproduction, write its artifact bundle, return the summary.

    The bundle is ``summary.json``, ``manifest.json``, the scenario's CSV
    files, and one SVG per CSV whose schema has a plot kind.  Only the
    identity check consumes the seed; the scenario reproductions are exact
    population computations and carry no randomness at all.
    """

    if name not in REPRODUCE_NAMES:
        known = ", ".join(REPRODUCE_NAMES)
        raise SchemaError(f"unknown reproduction {name!r}; expected one of: {known}")
    summary, files = _REPRODUCERS[name](seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fname, (header, rows) in files.items():
        _write_csv(out / fname, header, rows)
        kind = _KIND_FOR_HEADER.get(tuple(header))
        if kind is not None:
            (out / fname).with_suffix(".svg").write_text(render_plot(kind, header, rows))
    _write_json(out / "summary.json", summary)
    manifest = _manifest(
        f"reproduce-{name}",
        {
            "command": "reproduce",
            "name": name,
            "seed": seed,
            "curve_resolution": _CURVE_RESOLUTION,
            "oracle_resolution": _ORACLE_RESOLUTION,
        },
    )
    _write_json(out / "manifest.json", manifest.to_json())
    return summary


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])
    return path


def _read_csv(path: str | Path) -> tuple[tuple[str, ...], list[list[str]]]:
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError(f"{path}: empty CSV")
    return tuple(rows[0]), rows[1:]


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_SVG_W, _SVG_H = 720, 520
_PLOT = (72.0, 28.0, 696.0, 452.0)  # left, top, right, bottom in pixels
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_PLOT_KINDS = {
    "separation": _TABLE_HEADER,
    "trajectory": _TRAJECTORY_HEADER,
    "gradient-curve": _GRADIENT_HEADER,
    "value-curve": _VALUE_CURVE_HEADER,
}
_KIND_FOR_HEADER = {header: kind for kind, header in _PLOT_KINDS.items()}


def _linear_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    raw = (hi - lo) / max(target - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1.0, 2.0, 5.0, 10.0) if m * mag >= raw)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * (hi - lo):
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return ticks


def _log_ticks(lo: float, hi: float) -> list[float]:
    ticks = []
    for e in range(math.floor(math.log10(lo)), math.ceil(math.log10(hi)) + 1):
        for m in (1.0, 2.0, 5.0):
            v = m * 10.0**e
            if lo * (1 - 1e-12) <= v <= hi * (1 + 1e-12):
                ticks.append(v)
    return ticks or [lo, hi]


class _Axis:
    def __init__(self, values: np.ndarray, px_lo: float, px_hi: float, log: bool):
        if log and np.any(values <= 0.0):
            raise SchemaError("log-scale axis needs strictly positive values")
        t = np.log10(values) if log else values
        tlo, thi = float(t.min()), float(t.max())
        if thi - tlo < 1e-12:
            tlo, thi = tlo - 0.5, thi + 0.5
        pad = 0.05 * (thi - tlo)
        self.tlo, self.thi = tlo - pad, thi + pad
        self.px_lo, self.px_hi = px_lo, px_hi
        self.log = log

    def to_px(self, v: float) -> float:
        t = math.log10(v) if self.log else v
        frac = (t - self.tlo) / (self.thi - self.tlo)
        return self.px_lo + frac * (self.px_hi - self.px_lo)

    def ticks(self) -> list[float]:
        if self.log:
            return _log_ticks(10.0**self.tlo, 10.0**self.thi)
        return _linear_ticks(self.tlo, self.thi)

    def covers(self, v: float) -> bool:
        t = math.log10(v) if self.log else v
        return self.tlo <= t <= self.thi


def _svg_escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _svg_document(
    title: str,
    x_label: str,
    y_label: str,
    series: list[tuple[str, np.ndarray, np.ndarray]],
    *,
    x_log: bool = False,
    y_log: bool = False,
    zero_line: bool = False,
) -> str:
    left, top, right, bottom = _PLOT
    all_x = np.concatenate([s[1] for s in series])
    all_y = np.concatenate([s[2] for s in series])
    x_axis = _Axis(all_x, left, right, x_log)
    y_axis = _Axis(all_y, bottom, top, y_log)  # pixel y grows downward

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}" font-family="monospace" font-size="12">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="#ffffff"/>',
        f'<text x="{(left + right) / 2:.2f}" y="18" text-anchor="middle" '
        f'font-size="14">{_svg_escape(title)}</text>',
    ]
    for tick in x_axis.ticks():
        px = x_axis.to_px(tick)
        out.append(
            f'<line x1="{px:.2f}" y1="{top:.2f}" x2="{px:.2f}" y2="{bottom:.2f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{px:.2f}" y="{bottom + 18:.2f}" text-anchor="middle">{tick:g}</text>'
        )
    for tick in y_axis.ticks():
        py = y_axis.to_px(tick)
        out.append(
            f'<line x1="{left:.2f}" y1="{py:.2f}" x2="{right:.2f}" y2="{py:.2f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(f'<text x="{left - 6:.2f}" y="{py + 4:.2f}" text-anchor="end">{tick:g}</text>')
    if zero_line and not y_log and y_axis.covers(0.0):
        py = y_axis.to_px(0.0)
        out.append(
            f'<line x1="{left:.2f}" y1="{py:.2f}" x2="{right:.2f}" y2="{py:.2f}" '
            f'stroke="#888888" stroke-width="1" stroke-dasharray="4 3"/>'
        )
    out.append(
        f'<rect x="{left:.2f}" y="{top:.2f}" width="{right - left:.2f}" '
        f'height="{bottom - top:.2f}" fill="none" stroke="#333333" stroke-width="1"/>'
    )
    out.append(
        f'<text x="{(left + right) / 2:.2f}" y="{_SVG_H - 14}" '
        f'text-anchor="middle">{_svg_escape(x_label)}</text>'
    )
    out.append(
        f'<text x="16" y="{(top + bottom) / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(top + bottom) / 2:.2f})">{_svg_escape(y_label)}</text>'
    )

    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(x_axis.to_px(float(x)), y_axis.to_px(float(y))) for x, y in zip(xs, ys)]
        if len(pts) >= 2:
            path = " ".join(f"{px:.2f},{py:.2f}" for px, py in pts)
            out.append(
                f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        if len(pts) <= 24:
            for px, py in pts:
                out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{color}"/>')
        ly = top + 16 + 16 * i
        out.append(
            f'<line x1="{right - 150:.2f}" y1="{ly:.2f}" x2="{right - 126:.2f}" '
            f'y2="{ly:.2f}" stroke="{color}" stroke-width="2"/>'
        )
        out.append(f'<text x="{right - 120:.2f}" y="{ly + 4:.2f}">{_svg_escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _parse_float(cell: str, column: str) -> float:
    try:
        return float(cell)
    except ValueError as exc:
        raise SchemaError(f"column {column!r}: {cell!r} is not a number") from exc


def render_plot(kind: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Render one figure kind from tabular rows to a deterministic SVG string.

    Accepts the raw Python rows the writers produce or the string rows a CSV
    reader yields; all coordinates are formatted with fixed precision, so the
    same data always produces the same bytes.
    """

    expected = _PLOT_KINDS.get(kind)
    if expected is None:
        known = ", ".join(sorted(_PLOT_KINDS))
        raise SchemaError(f"unknown plot kind {kind!r}; expected one of: {known}")
    if tuple(header) != expected:
        raise SchemaError(f"kind {kind!r} expects header {expected}, got {tuple(header)}")
    if not rows:
        raise SchemaError("no data rows to plot")

    if kind == "separation":
        by_method: dict[str, list[tuple[float, float]]] = {}
        for row in rows:
            n = _parse_float(str(row[0]), "n")
            mean = _parse_float(str(row[2]), "mean_error")
            by_method.setdefault(str(row[1]), []).append((n, mean))
        series = [
            (method, np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
            for method, pts in by_method.items()
        ]
        return _svg_document(
            "mean error vs sample size",
            "preference pairs",
            "mean error",
            series,
            x_log=True,
            y_log=True,
        )

    cols = np.array(
        [[_parse_float(str(cell), expected[j]) for j, cell in enumerate(row)] for row in rows]
    )
    if cols.shape[1] != len(expected):
        raise SchemaError(f"rows carry {cols.shape[1]} columns, header has {len(expected)}")
    x = cols[:, 0]
    if kind == "trajectory":
        series = [(name, x, cols[:, j]) for j, name in enumerate(expected) if j > 0]
        return _svg_document(
            "online fit trajectory", "iteration", "coordinate / loss / value", series
        )
    if kind == "gradient-curve":
        series = []
        for j, name in enumerate(expected):
            if j == 0:
                continue
            ys = cols[:, j]
            peak = float(np.max(np.abs(ys)))
            series.append((f"{name} (scaled)", x, ys / peak if peak > 0 else ys))
        return _svg_document(
            "objective slopes along the policy coordinate",
            "log-ratio coordinate",
            "slope / max |slope|",
            series,
            zero_line=True,
        )
    series = [(name, x, cols[:, j]) for j, name in enumerate(expected) if j > 0]
    return _svg_document(
        "value and preference loss along the policy coordinate",
        "log-ratio coordinate",
        "objective",
        series,
    )


def plot_csv(kind: str, csv_in: str | Path, svg_out: str | Path) -> Path:
    """Read a CSV emitted by this module and write the corresponding SVG."""

    header, rows = _read_csv(csv_in)
    svg = render_plot(kind, header, rows)
    out = Path(svg_out)
    if str(out.parent) not in ("", "."):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    return out


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------


def write_dtsp_artifacts(sweep: DtspSweep, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [_write_csv(out / "runs.csv", _RUNS_HEADER, sweep.runs_csv_rows())]
    for c in sweep.gamma_cs:
        name = "table.csv" if len(sweep.gamma_cs) == 1 else f"table_c{c:g}.csv"
        written.append(_write_csv(out / name, _TABLE_HEADER, sweep.tables[c].csv_rows()))
    primary = sweep.tables[sweep.gamma_cs[0]]
    svg = out / "separation.svg"
    svg.write_text(render_plot("separation", _TABLE_HEADER, primary.csv_rows()))
    written.append(svg)
    manifest = _manifest(
        "dtsp-separation",
        {
            "command": "dtsp",
            "d": sweep.d,
            "k": sweep.k,
            "n_grid": list(sweep.n_grid),
            "seeds": len(sweep.seed_list),
            "seed": sweep.seed_list[0],
            "gamma_cs": list(sweep.gamma_cs),
        },
    )
    written.append(_write_json(out / "manifest.json", manifest.to_json()))
    return written


def write_subopt_artifacts(sweep: SuboptSweep, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        _write_csv(out / "gaps.csv", _GAPS_HEADER, sweep.runs_csv_rows()),
        _write_csv(out / "table.csv", _TABLE_HEADER, sweep.table.csv_rows()),
    ]
    svg = out / "gaps.svg"
    svg.write_text(render_plot("separation", _TABLE_HEADER, sweep.table.csv_rows()))
    written.append(svg)
    manifest = _manifest(
        "policy-suboptimality",
        {
            "command": "subopt",
            "d": sweep.d,
            "k": sweep.k,
            "n_grid": list(sweep.n_grid),
            "seeds": len(sweep.seed_list),
            "seed": sweep.seed_list[0],
            "gamma_c": sweep.gamma_c,
        },
    )
    written.append(_write_json(out / "manifest.json", manifest.to_json()))
    return written


# ---------------------------------------------------------------------------
# verify-all
# ---------------------------------------------------------------------------


def verify_all(out_dir: str | Path, seed: int = 0, jobs: int = 1) -> dict:
    """Every named reproduction plus small sampled sweeps, one directory each.

    The reproductions assert their separation and cross-check claims at full
    scale; the sweeps run at smoke scale, where only scale-free invariants
    (determinism, schema, nonnegativity) are enforced — mean orderings need
    the full grid and are left to the dedicated commands.
    """

    out = Path(out_dir)
    reproductions: dict[str, dict] = {}
    for name in REPRODUCE_NAMES:
        reproductions[name] = reproduce(name, out / name, seed=seed)
    dtsp = dtsp_separation_sweep(
        d=12, k=2, n_grid=(100, 200), seeds=4, gamma_cs=(1.0,), base_seed=seed, jobs=jobs
    )
    write_dtsp_artifacts(dtsp, out / "dtsp")
    sub = suboptimality_sweep(
        d=10, k=2, n_grid=(100, 200), seeds=3, gamma_c=1.0, base_seed=seed, jobs=jobs
    )
    write_subopt_artifacts(sub, out / "subopt")
    summary = {
        "seed": seed,
        "reproductions": reproductions,
        "dtsp_runs": len(dtsp.runs),
        "subopt_runs": len(sub.runs),
    }
    _write_json(out / "verify_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

_DEFAULTS: dict[str, dict] = {
    "reproduce": {"seed": 0, "jobs": 1, "name": None, "out": None},
    "dtsp": {
        "seed": 0,
        "jobs": 1,
        "out": None,
        "d": 60,
        "k": 3,
        "n_grid": (100, 200, 400, 800, 1600, 3200),
        "seeds": 20,
        "gamma_c": 1.0,
    },
    "subopt": {
        "seed": 0,
        "jobs": 1,
        "out": None,
        "d": 60,
        "k": 3,
        "n_grid": (100, 200, 400, 800, 1600, 3200),
        "seeds": 20,
        "gamma_c": 1.0,
    },
    "plot": {"seed": 0, "jobs": 1, "kind": None, "csv_in": None, "svg_out": None},
    "verify-all": {"seed": 0, "jobs": 1, "out": None},
}

#: Manifest bookkeeping keys a config replay may carry without being CLI knobs.
_INFORMATIONAL_KEYS = ("curve_resolution", "oracle_resolution")


class _Parser(argparse.ArgumentParser):
    # argparse exits the process on usage errors; route them through the
    # exit-code contract instead so main() stays the single policy point
    def error(self, message: str):
        raise SchemaError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="prefgap", description="desk-scale alignment-objective experiments")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base seed")
    common.add_argument(
        "--config", default=argparse.SUPPRESS, metavar="FILE", help="JSON config or manifest"
    )
    common.add_argument(
        "--jobs", type=int, default=argparse.SUPPRESS, metavar="N", help="worker processes"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reproduce", parents=[common], help="run one named reproduction")
    p.add_argument("name", nargs="?", default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS, metavar="DIR")

    for cmd, help_text in (
        ("dtsp", "estimation-error sweep on the dual-token task"),
        ("subopt", "policy sub-optimality sweep on the dual-token task"),
    ):
        p = sub.add_parser(cmd, parents=[common], help=help_text)
        p.add_argument("--d", type=int, default=argparse.SUPPRESS)
        p.add_argument("--k", type=int, default=argparse.SUPPRESS)
        p.add_argument("--n-grid", dest="n_grid", default=argparse.SUPPRESS, metavar="N1,N2,...")
        p.add_argument("--seeds", type=int, default=argparse.SUPPRESS)
        p.add_argument("--gamma-c", dest="gamma_c", type=float, default=argparse.SUPPRESS)
        p.add_argument("--out", default=argparse.SUPPRESS, metavar="DIR")

    p = sub.add_parser("plot", parents=[common], help="render a CSV artifact to SVG")
    p.add_argument("--kind", default=argparse.SUPPRESS)
    p.add_argument("--in", dest="csv_in", default=argparse.SUPPRESS, metavar="CSV")
    p.add_argument("--out", dest="svg_out", default=argparse.SUPPRESS, metavar="SVG")

    p = sub.add_parser("verify-all", parents=[common], help="run everything at checking scale")
    p.add_argument("--out", default=argparse.SUPPRESS, metavar="DIR")
    return parser


def _coerce_n_grid(value) -> tuple[int, ...]:
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
    elif isinstance(value, (list, tuple)):
        parts = list(value)
    elif isinstance(value, int):
        parts = [value]
    else:
        raise SchemaError(f"n_grid must be a comma list or JSON array, got {value!r}")
    try:
        grid = tuple(int(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"n_grid entries must be integers: {exc}") from exc
    if not grid or any(n < 1 for n in grid):
        raise SchemaError(f"n_grid needs positive sample sizes, got {grid}")
    return grid


def _load_config(path: str, command: str) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config {path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and {"name", "config", "artifact_versions"} <= set(data):
        data = dict(ExperimentManifest.from_json(data).config)
    if not isinstance(data, dict):
        raise SchemaError("config must be a JSON object")
    declared = data.pop("command", None)
    if declared is not None and declared != command:
        raise SchemaError(f"config is for command {declared!r}, not {command!r}")
    for key in _INFORMATIONAL_KEYS:
        data.pop(key, None)
    if "gamma_cs" in data:
        cs = data.pop("gamma_cs")
        if not isinstance(cs, list) or len(cs) != 1:
            raise SchemaError(
                "the command line replays a single gamma_c; got gamma_cs with != 1 entry"
            )
        data["gamma_c"] = cs[0]
    unknown = set(data) - set(_DEFAULTS[command])
    if unknown:
        raise SchemaError(f"config keys {sorted(unknown)} are not {command} options")
    return data


def _effective_config(ns: argparse.Namespace) -> dict:
    command = ns.command
    merged = dict(_DEFAULTS[command])
    explicit = {k: v for k, v in vars(ns).items() if k != "command"}
    config_path = explicit.pop("config", None)
    if config_path is not None:
        merged.update(_load_config(config_path, command))
    merged.update(explicit)
    merged["command"] = command
    if "n_grid" in merged:
        merged["n_grid"] = _coerce_n_grid(merged["n_grid"])
    for key in ("seed", "jobs", "d", "k", "seeds"):
        if key in merged and not isinstance(merged[key], int):
            raise SchemaError(f"{key} must be an integer, got {merged[key]!r}")
    if merged["jobs"] < 1:
        raise SchemaError(f"jobs must be >= 1, got {merged['jobs']}")
    return merged


def _resolve_out(explicit, leaf: str) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("PREFGAP_OUT", "prefgap-out")) / leaf


def _cmd_reproduce(cfg: dict) -> int:
    name = cfg["name"]
    if not name:
        raise SchemaError("reproduce needs a name (argument or config)")
    out = _resolve_out(cfg["out"], name)
    summary = reproduce(name, out, seed=cfg["seed"])
    print(f"reproduce {name}: ok -> {out}")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _print_table(table: SeparationTable) -> None:
    for row in table.rows:
        print(
            f"  n={row.n:>6} {row.method:<9} mean={row.mean_error:<12.6g} "
            f"std={row.std_error:<12.6g} seeds={row.seeds}"
        )


def _cmd_dtsp(cfg: dict) -> int:
    sweep = dtsp_separation_sweep(
        d=cfg["d"],
        k=cfg["k"],
        n_grid=cfg["n_grid"],
        seeds=cfg["seeds"],
        gamma_cs=(cfg["gamma_c"],),
        base_seed=cfg["seed"],
        jobs=cfg["jobs"],
    )
    out = _resolve_out(cfg["out"], "dtsp")
    write_dtsp_artifacts(sweep, out)
    print(f"dtsp: {len(sweep.runs)} runs -> {out}")
    _print_table(sweep.tables[cfg["gamma_c"]])
    return 0


def _cmd_subopt(cfg: dict) -> int:
    sweep = suboptimality_sweep(
        d=cfg["d"],
        k=cfg["k"],
        n_grid=cfg["n_grid"],
        seeds=cfg["seeds"],
        gamma_c=cfg["gamma_c"],
        base_seed=cfg["seed"],
        jobs=cfg["jobs"],
    )
    out = _resolve_out(cfg["out"], "subopt")
    write_subopt_artifacts(sweep, out)
    print(f"subopt: {len(sweep.runs)} runs -> {out}")
    _print_table(sweep.table)
    return 0


def _cmd_plot(cfg: dict) -> int:
    for key, flag in (("kind", "--kind"), ("csv_in", "--in"), ("svg_out", "--out")):
        if not cfg[key]:
            raise SchemaError(f"plot needs {flag}")
    out = plot_csv(cfg["kind"], cfg["csv_in"], cfg["svg_out"])
    print(f"plot {cfg['kind']}: {cfg['csv_in']} -> {out}")
    return 0


def _cmd_verify_all(cfg: dict) -> int:
    out = _resolve_out(cfg["out"], "verify")
    summary = verify_all(out, seed=cfg["seed"], jobs=cfg["jobs"])
    for name in REPRODUCE_NAMES:
        print(f"ok reproduce {name}")
    print(f"ok dtsp smoke ({summary['dtsp_runs']} runs)")
    print(f"ok subopt smoke ({summary['subopt_runs']} runs)")
    print(f"verify-all: ok -> {out}")
    return 0


_DISPATCH = {
    "reproduce": _cmd_reproduce,
    "dtsp": _cmd_dtsp,
    "subopt": _cmd_subopt,
    "plot": _cmd_plot,
    "verify-all": _cmd_verify_all,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = _build_parser().parse_args(argv)
        cfg = _effective_config(ns)
        return _DISPATCH[cfg["command"]](cfg)
    except ClaimViolation as exc:
        print(f"prefgap: claim failed: {exc}", file=sys.stderr)
        return 2
    except (NumericFailure, ConstructionFailure) as exc:
        print(f"prefgap: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (SchemaError, DomainError, ResourceLimit, OSError) as exc:
        print(f"prefgap: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
