"""Gaussian-process Bayesian optimization of training hyperparameters.

The search space is (learning rate, batch size, weight decay), worked in a
normalized unit cube: learning rate on a log10 axis, batch size on a log2
axis with integer rounding, weight decay linear. A Matern 5/2 GP with ARD
lengthscales and constant mean (the empirical mean of the observations)
models validation F1; candidates are ranked by closed-form expected
improvement over the best observation so far.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.special import erf

N_DIMS = 3
SQRT5 = math.sqrt(5.0)

LENGTHSCALE_BOUNDS = (0.05, 3.0)
SIGNAL_VAR_BOUNDS = (0.01, 4.0)
N_RESTARTS = 64
JITTER_INITIAL = 1e-8
JITTER_MAX = 1e-4


class GpFitError(RuntimeError):
    """Cholesky factorization failed even after jitter escalation."""


@dataclass(frozen=True)
class HyperPoint:
    """One raw hyperparameter configuration."""

    learning_rate: float
    batch_size: int
    weight_decay: float


@dataclass(frozen=True)
class HyperSpace:
    """Box bounds and axis scalings of the tunable hyperparameters."""

    lr_bounds: tuple[float, float] = (1e-6, 1e-4)
    batch_bounds: tuple[int, int] = (2, 32)
    wd_bounds: tuple[float, float] = (0.0, 0.3)

    def normalize(self, point: HyperPoint) -> np.ndarray:
        lr_lo, lr_hi = math.log10(self.lr_bounds[0]), math.log10(self.lr_bounds[1])
        b_lo, b_hi = math.log2(self.batch_bounds[0]), math.log2(self.batch_bounds[1])
        wd_lo, wd_hi = self.wd_bounds
        return np.array([
            (math.log10(point.learning_rate) - lr_lo) / (lr_hi - lr_lo),
            (math.log2(point.batch_size) - b_lo) / (b_hi - b_lo),
            (point.weight_decay - wd_lo) / (wd_hi - wd_lo),
        ])

    def denormalize(self, u: Sequence[float]) -> HyperPoint:
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        lr_lo, lr_hi = math.log10(self.lr_bounds[0]), math.log10(self.lr_bounds[1])
        b_lo, b_hi = math.log2(self.batch_bounds[0]), math.log2(self.batch_bounds[1])
        wd_lo, wd_hi = self.wd_bounds
        batch = int(round(2.0 ** (b_lo + u[1] * (b_hi - b_lo))))
        batch = min(max(batch, self.batch_bounds[0]), self.batch_bounds[1])
        return HyperPoint(
            learning_rate=float(10.0 ** (lr_lo + u[0] * (lr_hi - lr_lo))),
            batch_size=batch,
            weight_decay=float(wd_lo + u[2] * (wd_hi - wd_lo)),
        )


@dataclass(frozen=True, eq=False)
class Trial:
    """One evaluated configuration: raw point, cube coordinates, observed F1."""

    point: HyperPoint
    u: np.ndarray
    f: float
    failed: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.f <= 1.0):
            raise ValueError(f"observed F1 must lie in [0, 1], got {self.f}")


@dataclass(frozen=True)
class AcquisitionConfig:
    """Candidate sampling settings for the acquisition maximizer."""

    n_candidates: int = 2048
    xi: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.xi < 0:
            raise ValueError("xi must be >= 0")


@dataclass
class GpSurrogate:
    """Fitted GP posterior over the unit cube (Matern 5/2, constant mean)."""

    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    mean: float
    inputs: np.ndarray
    targets: np.ndarray
    chol_lower: np.ndarray
    alpha: np.ndarray
    fit_seed: int = 0


def _scaled_distance(u: np.ndarray, v: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Pairwise ARD-scaled Euclidean distances, shape (len(u), len(v))."""
    diff = (u[:, None, :] - v[None, :, :]) / lengthscales
    return np.sqrt(np.maximum(np.sum(diff * diff, axis=2), 0.0))


def kernel_matrix(
    u: np.ndarray, v: np.ndarray, lengthscales: np.ndarray, signal_var: float
) -> np.ndarray:
    """Matern 5/2 kernel matrix between two point sets."""
    r = _scaled_distance(np.atleast_2d(u), np.atleast_2d(v), lengthscales)
    return signal_var * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * np.exp(-SQRT5 * r)


def kernel_eval(
    u: Sequence[float], v: Sequence[float], lengthscales: Sequence[float],
    signal_var: float,
) -> float:
    """Matern 5/2 covariance between two cube points.

    k(u, v) = s * (1 + sqrt(5) r + 5 r^2 / 3) * exp(-sqrt(5) r) with
    r the lengthscale-weighted Euclidean distance.
    """
    lengthscales = np.asarray(lengthscales, dtype=float)
    if np.any(lengthscales <= 0):
        raise ValueError(f"lengthscales must be positive, got {lengthscales}")
    if signal_var <= 0:
        raise ValueError(f"signal variance must be positive, got {signal_var}")
    out = kernel_matrix(
        np.asarray(u, dtype=float), np.asarray(v, dtype=float), lengthscales, signal_var
    )
    return float(out[0, 0])


def _cholesky_with_jitter(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = JITTER_INITIAL
    eye = np.eye(matrix.shape[0])
    while True:
        try:
            return cholesky(matrix + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            pass
        jitter *= 2.0
        if jitter > JITTER_MAX:
            raise GpFitError(
                f"kernel matrix not positive definite up to jitter {JITTER_MAX}"
            )


def log_marginal_likelihood(
    inputs: np.ndarray,
    targets: np.ndarray,
    lengthscales: np.ndarray,
    signal_var: float,
    noise_var: float,
) -> float:
    """Exact GP log marginal likelihood with the constant empirical mean.

    -0.5 r^T K^-1 r - 0.5 log|K| - (m/2) log(2 pi), where r are the
    mean-centered targets and K includes the noise and jitter terms.
    """
    m = len(targets)
    residual = targets - targets.mean()
    k = kernel_matrix(inputs, inputs, lengthscales, signal_var)
    k[np.diag_indices_from(k)] += noise_var
    lower, _ = _cholesky_with_jitter(k)
    alpha = cho_solve((lower, True), residual)
    log_det = 2.0 * np.sum(np.log(np.diag(lower)))
    return float(-0.5 * residual @ alpha - 0.5 * log_det - 0.5 * m * math.log(2 * math.pi))


def _merge_duplicates(trials: Sequence[Trial]) -> tuple[np.ndarray, np.ndarray]:
    """Average targets of exactly coincident inputs (keeps K positive definite)."""
    groups: dict[tuple[float, ...], list[float]] = {}
    order: list[tuple[float, ...]] = []
    for trial in trials:
        key = tuple(float(x) for x in trial.u)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(trial.f)
    inputs = np.array(order)
    targets = np.array([np.mean(groups[key]) for key in order])
    return inputs, targets


def gp_fit(trials: Sequence[Trial], noise_var: float = 1e-4, seed: int = 0) -> GpSurrogate:
    """Fit the surrogate, selecting kernel hyperparameters by random restarts.

    64 seeded draws of (ARD lengthscales, signal variance), log-uniform over
    their bounds, scored by exact log marginal likelihood; the best draw is
    kept. Deterministic given (trials, noise_var, seed).
    """
    if len(trials) < 2:
        raise ValueError(f"need at least 2 trials to fit a GP, got {len(trials)}")
    inputs, targets = _merge_duplicates(trials)
    rng = np.random.default_rng(seed)
    ls_lo, ls_hi = np.log(LENGTHSCALE_BOUNDS[0]), np.log(LENGTHSCALE_BOUNDS[1])
    sv_lo, sv_hi = np.log(SIGNAL_VAR_BOUNDS[0]), np.log(SIGNAL_VAR_BOUNDS[1])

    best_lml = -np.inf
    best_params: tuple[np.ndarray, float] | None = None
    for _ in range(N_RESTARTS):
        lengthscales = np.exp(rng.uniform(ls_lo, ls_hi, size=N_DIMS))
        signal_var = float(np.exp(rng.uniform(sv_lo, sv_hi)))
        lml = log_marginal_likelihood(inputs, targets, lengthscales, signal_var, noise_var)
        if lml > best_lml:
            best_lml = lml
            best_params = (lengthscales, signal_var)
    assert best_params is not None
    lengthscales, signal_var = best_params

    k = kernel_matrix(inputs, inputs, lengthscales, signal_var)
    k[np.diag_indices_from(k)] += noise_var
    lower, _ = _cholesky_with_jitter(k)
    mean = float(targets.mean())
    alpha = cho_solve((lower, True), targets - mean)
    return GpSurrogate(
        lengthscales=lengthscales,
        signal_var=signal_var,
        noise_var=noise_var,
        mean=mean,
        inputs=inputs,
        targets=targets,
        chol_lower=lower,
        alpha=alpha,
        fit_seed=seed,
    )


def gp_predict_batch(g: GpSurrogate, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior (mean, variance) at a batch of cube points, via the Cholesky."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    k_star = kernel_matrix(g.inputs, u, g.lengthscales, g.signal_var)  # (m, q)
    mu = g.mean + k_star.T @ g.alpha
    v = solve_triangular(g.chol_lower, k_star, lower=True)
    var = g.signal_var - np.sum(v * v, axis=0)
    return mu, np.maximum(var, 0.0)


def gp_predict(g: GpSurrogate, u: Sequence[float]) -> tuple[float, float]:
    """Posterior (mean, variance >= 0) at one cube point."""
    mu, var = gp_predict_batch(g, np.asarray(u, dtype=float))
    return float(mu[0]), float(var[0])


def expected_improvement(mu: float, sigma: float, f_best: float, xi: float = 0.0) -> float:
    """Closed-form EI of a Gaussian belief over the current best observation.

    EI = (mu - f_best - xi) Phi(z) + sigma phi(z), z = (mu - f_best - xi)/sigma,
    degenerating to max(mu - f_best - xi, 0) at sigma = 0. Never negative.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    gap = mu - f_best - xi
    if sigma == 0.0:
        return max(gap, 0.0)
    z = gap / sigma
    cdf = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return max(gap * cdf + sigma * pdf, 0.0)


def _ei_batch(g: GpSurrogate, u: np.ndarray, f_best: float, xi: float) -> np.ndarray:
    mu, var = gp_predict_batch(g, u)
    sigma = np.sqrt(var)
    gap = mu - f_best - xi
    z = np.where(sigma > 0, gap / np.where(sigma > 0, sigma, 1.0), 0.0)
    cdf = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    ei = np.where(sigma > 0, gap * cdf + sigma * pdf, np.maximum(gap, 0.0))
    return np.maximum(ei, 0.0)


REFINE_STEP = 0.02
REFINE_SWEEPS = 10


def propose_next(
    g: GpSurrogate, space: HyperSpace, acq: AcquisitionConfig | None = None
) -> tuple[HyperPoint, np.ndarray]:
    """Maximize EI over seeded uniform candidates plus local refinement.

    The best of `n_candidates` uniform cube samples is polished by 10 sweeps
    of coordinate-wise +-0.02 steps, accepting only improvements, so the
    returned point's EI is at least that of every raw candidate.
    """
    acq = acq or AcquisitionConfig()
    rng = np.random.default_rng(acq.seed)
    f_best = float(np.max(g.targets))
    candidates = rng.uniform(size=(acq.n_candidates, N_DIMS))
    ei = _ei_batch(g, candidates, f_best, acq.xi)
    best = candidates[int(np.argmax(ei))].copy()
    best_ei = float(np.max(ei))

    for _ in range(REFINE_SWEEPS):
        for dim in range(N_DIMS):
            for step in (REFINE_STEP, -REFINE_STEP):
                trial = best.copy()
                trial[dim] = min(max(trial[dim] + step, 0.0), 1.0)
                trial_ei = float(_ei_batch(g, trial[None, :], f_best, acq.xi)[0])
                if trial_ei > best_ei:
                    best, best_ei = trial, trial_ei
    return space.denormalize(best), best


def latin_hypercube(n: int, rng: np.random.Generator) -> np.ndarray:
    """n stratified samples of the unit cube, one stratum per row and axis."""
    u = np.empty((n, N_DIMS))
    for dim in range(N_DIMS):
        u[:, dim] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return u


def tune(
    objective: Callable[[HyperPoint], float],
    space: HyperSpace | None = None,
    budget: int = 30,
    init: int = 5,
    seed: int = 0,
    noise_var: float = 1e-4,
    n_candidates: int = 2048,
    xi: float = 0.0,
) -> tuple[Trial, list[Trial]]:
    """Sequential GP optimization of a hyperparameter-to-F1 objective.

    Evaluates `init` Latin-hypercube points, then repeats fit / propose /
    evaluate until `budget` evaluations are spent. Objective failures
    (exceptions or non-finite returns) are recorded as f = 0 with a failure
    flag instead of aborting. Returns (best trial, full history in
    evaluation order); with a deterministic objective the whole run is a
    pure function of its arguments.
    """
    space = space or HyperSpace()
    if init < 2:
        raise ValueError(f"init must be >= 2, got {init}")
    if budget < init:
        raise ValueError(f"budget {budget} is smaller than init {init}")
    rng = np.random.default_rng(seed)

    def evaluate(u: np.ndarray) -> Trial:
        point = space.denormalize(u)
        u_eval = space.normalize(point)  # after batch-size rounding
        try:
            f = float(objective(point))
        except Exception:  # failure scores zero; divergent trials must not kill the run
            return Trial(point, u_eval, 0.0, failed=True)
        if not math.isfinite(f):
            return Trial(point, u_eval, 0.0, failed=True)
        return Trial(point, u_eval, f)

    history = [evaluate(u) for u in latin_hypercube(init, rng)]
    while len(history) < budget:
        gp_seed = int(rng.integers(2**31))
        acq_seed = int(rng.integers(2**31))
        surrogate = gp_fit(history, noise_var=noise_var, seed=gp_seed)
        _, u = propose_next(
            surrogate, space, AcquisitionConfig(n_candidates, xi, acq_seed)
        )
        history.append(evaluate(u))
    best = max(history, key=lambda t: t.f)  # max() keeps the earliest on ties
    return best, history
