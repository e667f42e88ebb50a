"""Finite-sample Bradley-Terry estimation over oriented comparison data.

A dataset here is just a matrix of feature differences, one row per
comparison, oriented winner-minus-loser.  On top of that this module
provides the empirical negative log-likelihood, five constrained fits
(norm-ball MLE, an l1-penalized variant, an exhaustively enumerated
l0-constrained variant, and "relative" versions of the last two that
penalize distance from a known reference point instead of from zero),
the empirical Gram matrix with its data-induced error semi-norm, and the
sample-size-driven penalty schedule.

The penalized fits run a proximal-gradient loop whose nonsmooth step is
exact: soft-thresholding composed with the norm-ball projection is the true
proximal map when the shrinkage center is the origin, and a one-dimensional
multiplier bisection recovers it when the center is shifted and the ball
binds.  The smooth fits (the plain MLE and every per-support subproblem of
the l0 kinds) go through a ball-constrained damped Newton engine instead --
near-separable data makes the likelihood exponentially flat, where
first-order steps crawl but Newton steps do not -- with a projected-gradient
fallback certifying the rare cases the Newton path cannot.  All solvers stop
on the same certificate, the unit-step prox-gradient residual.  The l0 fits
enumerate supports exhaustively, so the returned minimizer is exact rather
than the output of a thresholding heuristic.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import (
    ConvergenceFailure,
    DomainError,
    NumericFailure,
    ResourceLimit,
    SchemaError,
)
from .rng import make_rng

__all__ = [
    "PreferenceDesign",
    "GramMatrix",
    "EstimatorSpec",
    "SupportSpectrumReport",
    "ESTIMATOR_KINDS",
    "empirical_bt_loss",
    "fit",
    "gamma_schedule",
    "semi_norm_sq",
    "soft_threshold",
    "check_support_spectra",
    "design_to_csv",
    "design_from_csv",
    "estimator_spec_to_json",
    "estimator_spec_from_json",
]

ESTIMATOR_KINDS = ("MLE", "L1", "L0", "RelL1", "RelL0")

# supports of the largest checked size whose count triggers sampling instead
# of exhaustive enumeration, and the sample size used then
_ENUMERATION_LIMIT = 100_000
_SPECTRUM_SAMPLES = 200
_STREAM_SUPPORT_SPECTRUM = 0x51AC

_L0_CANDIDATE_CAP = 10_000_000
# losses from two support fits are solver outputs, never exactly equal;
# anything closer than this counts as a tie for the deterministic tie-break
_TIE_TOL = 1e-11
_SINGULAR_TOL = 1e-10


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreferenceDesign:
    """Oriented pairwise comparisons in feature-difference form.

    Row i of ``diffs`` is the winner's feature vector minus the loser's; the
    preference label is carried entirely by that orientation, so the dataset
    is the n x d matrix alone.  ``feature_bound`` is the optional per-response
    feature norm cap; when given, every row must satisfy
    ``||diff||_2 <= 2 * feature_bound``.
    """

    diffs: np.ndarray
    feature_bound: float | None = None

    def __post_init__(self) -> None:
        diffs = _frozen(self.diffs)
        if diffs.ndim != 2:
            raise DomainError(f"diffs must be 2-D, got shape {diffs.shape}")
        if diffs.shape[0] < 1 or diffs.shape[1] < 1:
            raise DomainError("a design needs at least one comparison and one feature")
        if not np.all(np.isfinite(diffs)):
            raise DomainError("diffs must be finite")
        object.__setattr__(self, "diffs", diffs)
        if self.feature_bound is not None:
            bound = float(self.feature_bound)
            if not bound > 0:
                raise DomainError("feature_bound must be positive")
            worst = float(np.linalg.norm(diffs, axis=1).max())
            if worst > 2.0 * bound * (1.0 + 1e-9):
                raise DomainError(
                    f"difference norm {worst:.6g} exceeds the cap {2.0 * bound:.6g}"
                )
            object.__setattr__(self, "feature_bound", bound)

    @property
    def n_pairs(self) -> int:
        return int(self.diffs.shape[0])

    @property
    def dim(self) -> int:
        return int(self.diffs.shape[1])


@dataclass(frozen=True)
class GramMatrix:
    """Empirical second-moment matrix of a design: (1/n) sum_i diff_i diff_i^T.

    Must be symmetric (to 1e-12, relative to its largest entry) and positive
    semi-definite up to a -1e-10 eigenvalue floor.  The quadratic form of
    this matrix is the squared data-induced semi-norm; see ``semi_norm_sq``.
    """

    sigma: np.ndarray

    def __post_init__(self) -> None:
        sigma = _frozen(self.sigma)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise DomainError(f"gram matrix must be square, got shape {sigma.shape}")
        if not np.all(np.isfinite(sigma)):
            raise DomainError("gram entries must be finite")
        scale = max(1.0, float(np.abs(sigma).max()))
        skew = float(np.abs(sigma - sigma.T).max())
        if skew > 1e-12 * scale:
            raise DomainError(f"gram matrix is asymmetric by {skew:.3e}")
        eigs = np.linalg.eigvalsh(sigma)
        if float(eigs[0]) < -1e-10:
            raise DomainError(
                f"gram matrix has eigenvalue {float(eigs[0]):.3e} below the psd floor"
            )
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_eigs", _frozen(eigs))

    @classmethod
    def from_design(cls, design: PreferenceDesign) -> "GramMatrix":
        x = design.diffs
        return cls(x.T @ x / design.n_pairs)

    @property
    def dim(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues in ascending order (computed once at construction)."""
        return self._eigs  # type: ignore[attr-defined]


@dataclass(frozen=True)
class EstimatorSpec:
    """Recipe for one constrained Bradley-Terry fit.

    ``kind`` selects the family:

    * ``"MLE"``   -- plain loss minimization over ``||theta||_2 <= ball_radius``;
    * ``"L1"``    -- adds the penalty ``gamma * ||theta||_1``;
    * ``"L0"``    -- adds the hard constraint ``||theta||_0 <= sparsity``,
      solved exactly by support enumeration;
    * ``"RelL1"`` / ``"RelL0"`` -- the same penalty/constraint applied to
      ``theta - shift``, for problems whose solution is known to sit near a
      reference point.

    ``grad_tol`` and ``max_iters`` bound the inner solver (unit-step
    prox-gradient residual and iteration budget).  Sparsity 0 is legal and
    pins the estimate to the shrinkage center (``shift``, or the origin).
    """

    kind: str
    ball_radius: float
    gamma: float | None = None
    sparsity: int | None = None
    shift: np.ndarray | None = None
    grad_tol: float = 1e-8
    max_iters: int = 200_000

    def __post_init__(self) -> None:
        if self.kind not in ESTIMATOR_KINDS:
            raise DomainError(
                f"unknown estimator kind {self.kind!r}; expected one of {ESTIMATOR_KINDS}"
            )
        if not (np.isfinite(self.ball_radius) and self.ball_radius > 0):
            raise DomainError("ball_radius must be positive and finite")
        if not self.grad_tol > 0:
            raise DomainError("grad_tol must be positive")
        if self.max_iters < 1:
            raise DomainError("max_iters must be at least 1")

        penalized = self.kind in ("L1", "RelL1")
        if penalized:
            if self.gamma is None:
                raise DomainError(f"{self.kind} requires gamma")
            if not (np.isfinite(self.gamma) and self.gamma >= 0):
                raise DomainError("gamma must be nonnegative and finite")
        elif self.gamma is not None:
            raise DomainError(f"gamma does not apply to {self.kind}")

        constrained = self.kind in ("L0", "RelL0")
        if constrained:
            if self.sparsity is None:
                raise DomainError(f"{self.kind} requires sparsity")
            if self.sparsity < 0:
                raise DomainError("sparsity must be nonnegative")
        elif self.sparsity is not None:
            raise DomainError(f"sparsity does not apply to {self.kind}")

        relative = self.kind in ("RelL1", "RelL0")
        if relative:
            if self.shift is None:
                raise DomainError(f"{self.kind} requires a shift vector")
            shift = _frozen(self.shift)
            if shift.ndim != 1:
                raise DomainError("shift must be a 1-D vector")
            if not np.all(np.isfinite(shift)):
                raise DomainError("shift must be finite")
            if float(np.linalg.norm(shift)) > self.ball_radius * (1.0 + 1e-9):
                raise DomainError("shift must lie inside the ball_radius ball")
            object.__setattr__(self, "shift", shift)
        elif self.shift is not None:
            raise DomainError(f"shift does not apply to {self.kind}")


# ---------------------------------------------------------------------------
# loss, schedule, semi-norm
# ---------------------------------------------------------------------------


def empirical_bt_loss(
    theta: np.ndarray, design: PreferenceDesign
) -> tuple[float, np.ndarray]:
    """Mean negative Bradley-Terry log-likelihood and its gradient.

    ``loss = (1/n) sum_i log(1 + exp(-theta . diff_i))`` with gradient
    ``-(1/n) sum_i sigmoid(-theta . diff_i) diff_i``.  Convex in theta.
    """

    th = np.asarray(theta, dtype=float)
    if th.shape != (design.dim,):
        raise DomainError(f"theta has shape {th.shape}, expected ({design.dim},)")
    margins = design.diffs @ th
    loss = float(np.mean(np.logaddexp(0.0, -margins)))
    grad = -(design.diffs.T @ expit(-margins)) / design.n_pairs
    return loss, grad


def gamma_schedule(n: int, d: int, delta: float = 0.05, c: float = 1.0) -> float:
    """Penalty scale c * sqrt((log d + log(1/delta)) / n).

    ``delta`` is the confidence parameter (default 0.05); ``c`` is the free
    constant swept by experiments (default 1.0).
    """

    if n < 1 or d < 1:
        raise DomainError("n and d must be at least 1")
    if not 0.0 < delta < 1.0:
        raise DomainError("delta must lie strictly between 0 and 1")
    if not c > 0:
        raise DomainError("c must be positive")
    return c * math.sqrt((math.log(d) + math.log(1.0 / delta)) / n)


def semi_norm_sq(
    theta_hat: np.ndarray, theta_star: np.ndarray, design: PreferenceDesign
) -> float:
    """Squared data-induced error (1/n) sum_i ((theta_hat - theta_star) . diff_i)^2.

    Equals the Gram quadratic form gap^T Sigma gap of the same design.
    """

    hat = np.asarray(theta_hat, dtype=float)
    star = np.asarray(theta_star, dtype=float)
    if hat.shape != (design.dim,) or star.shape != (design.dim,):
        raise DomainError(
            f"estimates must have shape ({design.dim},), got {hat.shape} and {star.shape}"
        )
    proj = design.diffs @ (hat - star)
    return float(proj @ proj) / design.n_pairs


# ---------------------------------------------------------------------------
# proximal machinery
# ---------------------------------------------------------------------------


def soft_threshold(v: np.ndarray, threshold: float, center=0.0) -> np.ndarray:
    """Elementwise shrinkage of ``v`` toward ``center`` by ``threshold``.

    This is the proximal map of ``threshold * ||. - center||_1``.
    """

    if threshold < 0:
        raise DomainError("threshold must be nonnegative")
    u = np.asarray(v, dtype=float) - center
    return center + np.sign(u) * np.maximum(np.abs(u) - threshold, 0.0)


def _prox_l1_ball(
    v: np.ndarray, threshold: float, center, radius: float
) -> np.ndarray:
    """Exact prox of ``threshold * ||x - center||_1`` plus the radius-ball indicator.

    When the soft-thresholded point already lies in the ball nothing else is
    needed.  With the center at the origin the binding-ball solution is a
    radial scaling of the thresholded point; with a shifted center the
    stationarity system gives x(mu) = center + soft(v - (1+mu) center) / (1+mu)
    whose norm decreases in the multiplier mu, so a bisection lands on the
    boundary.
    """

    s = soft_threshold(v, threshold, center)
    norm = float(np.linalg.norm(s))
    if norm <= radius:
        return s
    if threshold == 0.0 or not np.any(center):
        return s * (radius / norm)

    def point(mu: float) -> np.ndarray:
        return center + soft_threshold(v - (1.0 + mu) * center, threshold) / (1.0 + mu)

    lo, hi = 0.0, 1.0
    while float(np.linalg.norm(point(hi))) > radius:
        lo, hi = hi, hi * 2.0
        if hi > 1e18:
            raise NumericFailure("shifted shrinkage failed to bracket the ball multiplier")
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        if float(np.linalg.norm(point(mid))) > radius:
            lo = mid
        else:
            hi = mid
    x = point(hi)
    nx = float(np.linalg.norm(x))
    if nx > radius:
        x = x * (radius / nx)
    return x


def _minimize_proximal(
    loss_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    prox: Callable[[np.ndarray, float], np.ndarray],
    theta0: np.ndarray,
    *,
    step_cap: float,
    safe_step: float,
    grad_tol: float,
    max_iters: int,
) -> tuple[np.ndarray, float, float, int]:
    """Proximal gradient descent with backtracking on the smooth upper bound.

    ``safe_step`` must be a step size at which the quadratic upper bound is a
    theorem (1/L for an L-smooth loss): steps at or below it are accepted
    without the function test, because at convergence the test compares
    values that differ by less than one ulp and rounding would otherwise
    force spurious halving or admit zero-progress cycles.

    Returns ``(theta, smooth_loss, residual, iterations)`` where ``residual``
    is the unit-step prox-gradient residual ``||theta - prox(theta - grad, 1)||``.
    Raises ConvergenceFailure when the iteration budget runs out above
    tolerance.
    """

    theta = prox(np.asarray(theta0, dtype=float), 0.0)
    loss, grad = loss_grad(theta)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericFailure("objective not finite at the initial point")
    step = step_cap
    for it in range(max_iters):
        residual = float(np.linalg.norm(theta - prox(theta - grad, 1.0)))
        if residual <= grad_tol:
            return theta, loss, residual, it
        step = min(step_cap, step * 2.0)
        while True:
            candidate = prox(theta - step * grad, step)
            delta = candidate - theta
            cand_loss, cand_grad = loss_grad(candidate)
            if not np.isfinite(cand_loss):
                if step <= safe_step:
                    raise NumericFailure("objective not finite at a safe prox step")
                step *= 0.5
                continue
            if step <= safe_step:
                break
            bound = loss + float(grad @ delta) + float(delta @ delta) / (2.0 * step)
            if cand_loss <= bound:
                break
            step *= 0.5
        theta, loss, grad = candidate, cand_loss, cand_grad
    residual = float(np.linalg.norm(theta - prox(theta - grad, 1.0)))
    if residual <= grad_tol:
        return theta, loss, residual, max_iters
    raise ConvergenceFailure(
        f"no convergence in {max_iters} iterations (residual {residual:.3e})",
        residual=residual,
    )


def _step_sizes(diffs: np.ndarray) -> tuple[float, float]:
    """(cap, safe) trial steps for the BT loss on these difference rows.

    The loss Hessian is bounded by lambda_max(Sigma)/4, so 4/lambda_max is a
    provably safe step; the cap starts four times higher and backtracking
    adapts between the two.
    """

    n = diffs.shape[0]
    lam = max(float(np.linalg.eigvalsh(diffs.T @ diffs / n)[-1]), 1e-12)
    return 16.0 / lam, 4.0 / lam


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def fit(
    spec: EstimatorSpec,
    design: PreferenceDesign,
    theta0: np.ndarray | None = None,
) -> np.ndarray:
    """Solve the constrained Bradley-Terry fit described by ``spec``.

    The convex kinds (MLE, L1, RelL1) run proximal gradient descent to a
    unit-step residual of ``spec.grad_tol``; the enumerated kinds (L0, RelL0)
    solve every support of size up to ``spec.sparsity`` and return the
    loss-minimizing candidate, breaking ties by smaller Euclidean norm and
    then lexicographically smaller support.  ``theta0`` optionally seeds the
    solver (per-support solves start from its restriction); the default start
    is the shrinkage center.
    """

    d = design.dim
    if spec.shift is not None and spec.shift.shape != (d,):
        raise DomainError(
            f"shift has shape {spec.shift.shape}, expected ({d},)"
        )
    if theta0 is not None:
        theta0 = np.asarray(theta0, dtype=float)
        if theta0.shape != (d,):
            raise DomainError(f"theta0 has shape {theta0.shape}, expected ({d},)")
        if not np.all(np.isfinite(theta0)):
            raise DomainError("theta0 must be finite")
    if spec.kind in ("L0", "RelL0"):
        if spec.sparsity > d:
            raise DomainError(
                f"sparsity {spec.sparsity} exceeds the feature dimension {d}"
            )
        candidates = math.comb(d, spec.sparsity)
        if candidates > _L0_CANDIDATE_CAP:
            raise ResourceLimit(
                f"{candidates} supports of size {spec.sparsity} in dimension {d} "
                f"exceed the enumeration budget {_L0_CANDIDATE_CAP}; "
                "use a smaller dimension or sparsity"
            )
        return _fit_support_enumeration(spec, design, theta0)
    return _fit_proximal(spec, design, theta0)


def _fit_proximal(
    spec: EstimatorSpec, design: PreferenceDesign, theta0: np.ndarray | None
) -> np.ndarray:
    center = spec.shift if spec.shift is not None else np.zeros(design.dim)
    gamma = float(spec.gamma) if spec.gamma is not None else 0.0
    radius = float(spec.ball_radius)

    if spec.kind == "MLE":
        # the smooth problem goes through the Newton engine: near-separable
        # data makes the likelihood exponentially flat and first-order steps
        # crawl, while damped Newton is indifferent to that conditioning
        start = np.zeros(design.dim) if theta0 is None else theta0
        start = _prox_l1_ball(start, 0.0, 0.0, radius)
        w, _ = _ball_newton(
            design.diffs,
            np.zeros(design.n_pairs),
            radius,
            start,
            spec.grad_tol,
            spec.max_iters,
        )
        return w.copy()

    def loss_grad(theta: np.ndarray) -> tuple[float, np.ndarray]:
        return empirical_bt_loss(theta, design)

    def prox(v: np.ndarray, step: float) -> np.ndarray:
        return _prox_l1_ball(v, step * gamma, center, radius)

    start = center if theta0 is None else theta0
    cap, safe = _step_sizes(design.diffs)
    theta, _, _, _ = _minimize_proximal(
        loss_grad,
        prox,
        start,
        step_cap=cap,
        safe_step=safe,
        grad_tol=spec.grad_tol,
        max_iters=spec.max_iters,
    )
    return theta.copy()


# -- support enumeration ----------------------------------------------------


def _restricted_loss_grad(
    a: np.ndarray, offset: np.ndarray, w: np.ndarray
) -> tuple[float, np.ndarray]:
    margins = a @ w + offset
    loss = float(np.mean(np.logaddexp(0.0, -margins)))
    grad = -(a.T @ expit(-margins)) / a.shape[0]
    return loss, grad


def _ball_newton(
    a: np.ndarray,
    offset: np.ndarray,
    radius: float,
    w0: np.ndarray,
    grad_tol: float,
    max_iters: int,
) -> tuple[np.ndarray, float]:
    """Minimize mean log(1 + exp(-(a w + offset))) over ``||w|| <= radius``.

    Damped Newton handles the generic interior case in a handful of steps.
    If the unconstrained path exits the ball, the norm-penalized stationarity
    system is solved instead, bisecting the multiplier until the iterate
    lands on the boundary; a projected-gradient fallback covers anything the
    bisection cannot certify.
    """

    n = a.shape[0]

    def solve_penalized(mu: float, w_start: np.ndarray) -> np.ndarray:
        w = w_start.astype(float, copy=True)
        for _ in range(80):
            margins = a @ w + offset
            p = expit(-margins)
            grad = -(a.T @ p) / n + mu * w
            if float(np.linalg.norm(grad)) <= 0.25 * grad_tol:
                break
            weights = p * expit(margins)
            hess = (a.T * weights) @ a / n + mu * np.eye(a.shape[1])
            hess[np.diag_indices_from(hess)] += 1e-14 * max(1.0, float(np.trace(hess)))
            try:
                direction = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                direction = -grad
            if float(grad @ direction) >= 0.0:
                direction = -grad
            base = float(np.mean(np.logaddexp(0.0, -margins))) + 0.5 * mu * float(w @ w)
            slope = float(grad @ direction)
            t = 1.0
            while t >= 1e-14:
                trial = w + t * direction
                value = float(
                    np.mean(np.logaddexp(0.0, -(a @ trial + offset)))
                ) + 0.5 * mu * float(trial @ trial)
                if value <= base + 1e-4 * t * slope + 1e-14:
                    break
                t *= 0.5
            if t < 1e-14:
                break
            w = w + t * direction
        return w

    # unconstrained attempt first: interior solutions are the common case
    w = solve_penalized(0.0, w0)
    loss, grad = _restricted_loss_grad(a, offset, w)
    if float(np.linalg.norm(w)) <= radius and float(np.linalg.norm(grad)) <= grad_tol:
        return w, loss

    if float(np.linalg.norm(w)) > radius:
        lo, hi = 0.0, 1e-6
        while float(np.linalg.norm(solve_penalized(hi, w))) > radius:
            lo, hi = hi, hi * 4.0
            if hi > 1e18:
                raise NumericFailure("ball multiplier failed to bracket")
        for _ in range(90):
            if hi - lo <= 1e-13 * hi:
                break
            mid = 0.5 * (lo + hi)
            if float(np.linalg.norm(solve_penalized(mid, w))) > radius:
                lo = mid
            else:
                hi = mid
        w = solve_penalized(hi, w)
        norm = float(np.linalg.norm(w))
        if norm > radius:
            w = w * (radius / norm)
        loss, grad = _restricted_loss_grad(a, offset, w)
        residual = float(
            np.linalg.norm(w - _prox_l1_ball(w - grad, 0.0, 0.0, radius))
        )
        if residual <= grad_tol:
            return w, loss

    # rare: certify via the generic projected-gradient loop
    cap, safe = _step_sizes(a)
    w, loss, _, _ = _minimize_proximal(
        lambda v: _restricted_loss_grad(a, offset, v),
        lambda v, step: _prox_l1_ball(v, 0.0, 0.0, radius),
        w,
        step_cap=cap,
        safe_step=safe,
        grad_tol=grad_tol,
        max_iters=max_iters,
    )
    return w, loss


def _sigmoid_neg(margins: np.ndarray) -> np.ndarray:
    """expit(-margins), via the plain exp form (measurably faster here)."""
    return 1.0 / (1.0 + np.exp(np.minimum(margins, 700.0)))


def _softplus_neg_mean(margins: np.ndarray, axis: int) -> np.ndarray:
    """mean of logaddexp(0, -margins), fused to dodge the slow two-arg ufunc."""
    flipped = np.abs(margins)
    losses = np.log1p(np.exp(-flipped))
    losses += 0.5 * (flipped - margins)
    return np.mean(losses, axis=axis)


def _batched_interior_newton(
    at: np.ndarray,
    offsets: np.ndarray,
    rho: np.ndarray,
    w_start: np.ndarray,
    grad_tol: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run damped Newton on many restricted logistic problems at once.

    ``at`` stacks the transposed column slices as ``(lanes, size, n)``; each
    lane gets the same update rule as ``_ball_newton``'s unconstrained
    attempt.  Returns the iterates, their losses, and a mask of lanes that
    reached stationarity inside their ball.  Unsolved lanes (line-search
    stall, iteration cap, or a boundary-bound optimum) are left for the
    scalar path to certify.
    """

    lanes, _, n = at.shape
    w = w_start.astype(float, copy=True)
    loss = np.full(lanes, np.inf)
    solved = np.zeros(lanes, dtype=bool)
    active = np.ones(lanes, dtype=bool)
    jitter = 1e-14 * np.eye(at.shape[1])
    # margins and losses ride along with ``w``: every accepted step refreshes
    # all three, so retirement can reuse them instead of recomputing
    margins = np.matmul(w[:, None, :], at)[:, 0, :] + offsets
    base = _softplus_neg_mean(margins, axis=1)
    for _ in range(60):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        a_act = at[idx]
        p = _sigmoid_neg(margins[idx])
        grad = np.matmul(a_act, p[:, :, None])[..., 0] / -n
        gnorm = np.linalg.norm(grad, axis=1)
        stationary = gnorm <= grad_tol
        if stationary.any():
            hit = idx[stationary]
            loss[hit] = base[hit]
            solved[hit] = np.linalg.norm(w[hit], axis=1) <= rho[hit]
            active[hit] = False
            keep = ~stationary
            if not keep.any():
                continue
            idx = idx[keep]
            a_act = a_act[keep]
            p = p[keep]
            grad = grad[keep]
        weights = p * (1.0 - p)
        hess = np.matmul(a_act * weights[:, None, :], a_act.transpose(0, 2, 1))
        hess /= n
        trace = np.trace(hess, axis1=1, axis2=2)
        hess += np.maximum(1.0, trace)[:, None, None] * jitter
        try:
            direction = -np.linalg.solve(hess, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            direction = -grad
        slope = np.sum(grad * direction, axis=1)
        uphill = slope >= 0.0
        if uphill.any():
            direction[uphill] = -grad[uphill]
            slope[uphill] = -np.sum(grad[uphill] ** 2, axis=1)
        step = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        while pending.any():
            rows = np.flatnonzero(pending)
            lane = idx[rows]
            trial = w[lane] + step[rows, None] * direction[rows]
            trial_margins = (
                np.matmul(trial[:, None, :], a_act[rows])[:, 0, :] + offsets[lane]
            )
            value = _softplus_neg_mean(trial_margins, axis=1)
            ok = value <= base[lane] + 1e-4 * step[rows] * slope[rows] + 1e-14
            hit = lane[ok]
            w[hit] = trial[ok]
            margins[hit] = trial_margins[ok]
            base[hit] = value[ok]
            pending[rows[ok]] = False
            step[rows[~ok]] *= 0.5
            stalled = pending & (step < 1e-14)
            if stalled.any():
                # same bail-out as the scalar Armijo loop: hand the lane over
                active[idx[stalled]] = False
                pending[stalled] = False
    return w, loss, solved


def _fit_support_enumeration(
    spec: EstimatorSpec, design: PreferenceDesign, theta0: np.ndarray | None
) -> np.ndarray:
    x = design.diffs
    d = design.dim
    center = spec.shift if spec.shift is not None else np.zeros(d)
    radius = float(spec.ball_radius)
    center_margins = x @ center
    center_norm_sq = float(center @ center)
    chunk_size = int(min(1024, max(16, 2_000_000 // design.n_pairs)))

    xt = np.ascontiguousarray(x.T)

    best: tuple[float, float, tuple[int, ...], np.ndarray] | None = None
    parents: dict[tuple[int, ...], np.ndarray] = {}
    for size in range(int(spec.sparsity) + 1):
        if size == 0:
            loss = float(np.mean(np.logaddexp(0.0, -center_margins)))
            candidate = np.array(center, dtype=float)
            entry = (loss, float(np.linalg.norm(candidate)), (), candidate)
            if best is None or _beats(*entry[:3], best):
                best = entry
            parents[()] = np.zeros(0)
            continue
        children: dict[tuple[int, ...], np.ndarray] = {}
        stream = itertools.combinations(range(d), size)
        while True:
            block = list(itertools.islice(stream, chunk_size))
            if not block:
                break
            supports = np.array(block, dtype=np.intp)
            at = xt[supports]  # (lanes, size, n) slices of the design
            center_s = center[supports]
            offsets = center_margins[None, :] - np.matmul(
                center_s[:, None, :], at
            )[:, 0, :]
            # the full-vector norm splits into on- and off-support parts,
            # so each restricted constraint is a centered ball
            slack = radius * radius - (
                center_norm_sq - np.sum(center_s * center_s, axis=1)
            )
            rho = np.sqrt(np.maximum(slack, 0.0))
            if theta0 is not None:
                w0 = theta0[supports]
                w_norm = np.linalg.norm(w0, axis=1)
                shrink = np.minimum(1.0, rho / np.maximum(w_norm, 1e-300))
                w0 = w0 * shrink[:, None]
            else:
                # warm-start from the lexicographic parent: its restricted
                # ball nests inside this one, so the start stays feasible
                w0 = center_s.astype(float, copy=True)
                for lane, support in enumerate(block):
                    parent = parents.get(support[:-1])
                    if parent is not None:
                        w0[lane, : size - 1] = parent
            w, losses, solved = _batched_interior_newton(
                at, offsets, rho, w0, spec.grad_tol
            )
            empty = rho == 0.0
            if empty.any():
                # the whole ball budget is spent off-support, so the only
                # feasible point zeroes the on-support coordinates
                w[empty] = 0.0
                losses[empty] = np.mean(
                    np.logaddexp(0.0, -offsets[empty]), axis=1
                )
                solved[empty] = True
            for lane, support in enumerate(block):
                if not solved[lane]:
                    start = w[lane]
                    start_norm = float(np.linalg.norm(start))
                    if start_norm > rho[lane]:
                        start = start * (rho[lane] / start_norm)
                    w_lane, loss = _ball_newton(
                        np.ascontiguousarray(at[lane].T),
                        offsets[lane],
                        float(rho[lane]),
                        start,
                        spec.grad_tol,
                        spec.max_iters,
                    )
                else:
                    w_lane, loss = w[lane], float(losses[lane])
                if size < spec.sparsity:
                    children[support] = np.asarray(w_lane, dtype=float)
                theta = np.array(center, dtype=float)
                theta[supports[lane]] = w_lane
                norm = float(np.linalg.norm(theta))
                if best is None or _beats(loss, norm, support, best):
                    best = (loss, norm, support, theta)
        parents = children
    assert best is not None  # size-0 support always produces a candidate
    return best[3].copy()


def _beats(
    loss: float,
    norm: float,
    support: tuple[int, ...],
    best: tuple[float, float, tuple[int, ...], np.ndarray],
) -> bool:
    if loss < best[0] - _TIE_TOL:
        return True
    if loss > best[0] + _TIE_TOL:
        return False
    if norm < best[1] - _TIE_TOL:
        return True
    if norm > best[1] + _TIE_TOL:
        return False
    return support < best[2]


# ---------------------------------------------------------------------------
# per-support spectrum survey
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SupportSpectrumReport:
    """Smallest-eigenvalue survey of Gram principal submatrices.

    Shrinking a support can only raise the smallest eigenvalue (eigenvalue
    interlacing), so surveying supports of size ``min(2 * sparsity, dim)``
    covers every support between ``sparsity`` and twice that.  ``exhaustive``
    records whether all supports of that size were checked or a fixed random
    sample; ``violations`` lists the checked supports whose submatrix is
    numerically singular.
    """

    sparsity: int
    support_size: int
    exhaustive: bool
    supports_checked: int
    min_eigenvalue: float
    violations: tuple[tuple[int, ...], ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def check_support_spectra(
    gram: GramMatrix,
    sparsity: int,
    *,
    seed: int = 0,
    n_samples: int = _SPECTRUM_SAMPLES,
    enumeration_limit: int = _ENUMERATION_LIMIT,
) -> SupportSpectrumReport:
    """Survey smallest eigenvalues of Gram submatrices on sparse supports.

    Enumerates every support of size ``min(2 * sparsity, dim)`` when their
    count is at most ``enumeration_limit``; otherwise draws ``n_samples``
    supports from a seeded counter-based stream.  A support is a violation
    when its smallest eigenvalue falls at or below 1e-10 of the full
    matrix's largest eigenvalue.
    """

    d = gram.dim
    if not 1 <= sparsity <= d:
        raise DomainError(f"sparsity must be in [1, {d}], got {sparsity}")
    if n_samples < 1:
        raise DomainError("n_samples must be at least 1")
    size = min(2 * sparsity, d)
    tol = _SINGULAR_TOL * max(float(gram.eigenvalues[-1]), np.finfo(float).tiny)

    exhaustive = math.comb(d, size) <= enumeration_limit
    if exhaustive:
        supports = itertools.combinations(range(d), size)
    else:
        rng = make_rng(seed, _STREAM_SUPPORT_SPECTRUM)
        supports = (
            tuple(sorted(int(i) for i in rng.choice(d, size=size, replace=False)))
            for _ in range(n_samples)
        )

    checked = 0
    worst = math.inf
    violations: list[tuple[int, ...]] = []
    for support in supports:
        sub = gram.sigma[np.ix_(support, support)]
        lam = float(np.linalg.eigvalsh(sub)[0])
        checked += 1
        worst = min(worst, lam)
        if lam <= tol:
            violations.append(tuple(support))
    return SupportSpectrumReport(
        sparsity=int(sparsity),
        support_size=size,
        exhaustive=exhaustive,
        supports_checked=checked,
        min_eigenvalue=worst,
        violations=tuple(violations),
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def design_to_csv(design: PreferenceDesign) -> str:
    """Render a design as RFC-4180 CSV with a ``diff_0..diff_{d-1}`` header.

    Cells are written with ``repr`` so the round trip through
    ``design_from_csv`` is bit-exact.
    """

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow([f"diff_{j}" for j in range(design.dim)])
    for row in design.diffs:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def design_from_csv(text: str, feature_bound: float | None = None) -> PreferenceDesign:
    """Parse the CSV form produced by ``design_to_csv``."""

    try:
        rows = [row for row in csv.reader(io.StringIO(text)) if row]
    except csv.Error as exc:
        raise SchemaError(f"unreadable csv: {exc}") from exc
    if len(rows) < 2:
        raise SchemaError("csv needs a header row and at least one data row")
    header, data = rows[0], rows[1:]
    expected = [f"diff_{j}" for j in range(len(header))]
    if header != expected:
        raise SchemaError(f"bad header {header!r}, expected {expected!r}")
    try:
        values = [[float(cell) for cell in row] for row in data]
    except ValueError as exc:
        raise SchemaError(f"non-numeric cell: {exc}") from exc
    if any(len(row) != len(header) for row in values):
        raise SchemaError("ragged csv rows")
    try:
        return PreferenceDesign(np.array(values, dtype=float), feature_bound=feature_bound)
    except DomainError as exc:
        raise SchemaError(f"csv holds an invalid design: {exc}") from exc


def estimator_spec_to_json(spec: EstimatorSpec) -> dict:
    """Plain-dict form of a spec, safe for ``json.dumps``."""

    return {
        "kind": spec.kind,
        "ball_radius": float(spec.ball_radius),
        "gamma": None if spec.gamma is None else float(spec.gamma),
        "sparsity": None if spec.sparsity is None else int(spec.sparsity),
        "shift": None if spec.shift is None else [float(v) for v in spec.shift],
        "grad_tol": float(spec.grad_tol),
        "max_iters": int(spec.max_iters),
    }


def estimator_spec_from_json(data: dict) -> EstimatorSpec:
    """Inverse of ``estimator_spec_to_json``; malformed payloads raise SchemaError."""

    try:
        shift = data["shift"]
        return EstimatorSpec(
            kind=data["kind"],
            ball_radius=data["ball_radius"],
            gamma=data["gamma"],
            sparsity=data["sparsity"],
            shift=None if shift is None else np.asarray(shift, dtype=float),
            grad_tol=data.get("grad_tol", 1e-8),
            max_iters=data.get("max_iters", 200_000),
        )
    except (KeyError, TypeError, AttributeError, DomainError) as exc:
        raise SchemaError(f"bad estimator spec payload: {exc}") from exc
