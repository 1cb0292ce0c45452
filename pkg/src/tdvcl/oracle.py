"""Conjugate linear-Gaussian testbed with a closed-form true posterior.

Bayesian linear regression ``y = X w + noise`` with a Gaussian prior on
``w`` keeps every posterior Gaussian, so the recursive update can be checked
exactly and the drift of approximate recursions measured against the truth.

Approximate recursions fit a diagonal Gaussian to the weighted objective::

    sum_i w_i E_q[log p(y_{t-i} | X_{t-i}, w)] - sum_i v_i KL(q || q_{t-i-1})

whose optimum is available in closed form. With ``A = sum_i w_i X'X / s2 +
sum_i v_i diag(1 / var_i)`` the mean solves ``A m = b`` and the variances are
``sum_i v_i / diag(A)``. After each fit the mean is perturbed by
``noise_scale * N(0, I)``, a stand-in for optimisation error.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import ContractError, NumericError
from .objectives import nstep_coefficients

KL_CSV_COLUMNS = ("run_id", "seed", "method", "t", "task", "kl_to_truth")


@dataclass(frozen=True)
class ConjugateGaussianPosterior:
    """``N(mean, cov)``; ``cov`` is a variance vector (diagonal) or a full matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape not in ((d,), (d, d)):
            raise ContractError(f"covariance shape {cov.shape} does not match mean of length {d}")
        if cov.ndim == 1:
            if not np.all(cov > 0):
                raise NumericError("diagonal covariance must be strictly positive")
        else:
            if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
                raise NumericError("covariance must be symmetric")
            _cholesky(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def diagonal(self):
        return self.cov.ndim == 1

    def full_cov(self):
        return np.diag(self.cov) if self.diagonal else self.cov

    def precision(self):
        if self.diagonal:
            return np.diag(1.0 / self.cov)
        return _spd_inverse(self.cov)

    @classmethod
    def isotropic(cls, dim, variance):
        return cls(np.zeros(dim), np.full(dim, float(variance)))


@dataclass(frozen=True)
class ConjugateStream:
    """Tasks ``[(X_t, y_t), ...]`` sharing one weight vector, plus the model."""

    tasks: list
    noise_var: float
    prior: ConjugateGaussianPosterior
    true_weights: np.ndarray | None = None

    def __len__(self):
        return len(self.tasks)


def _cholesky(a):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NumericError("matrix is not positive definite") from exc


def _spd_inverse(a):
    L = _cholesky(a)
    inv_l = np.linalg.solve(L, np.eye(a.shape[0]))
    return inv_l.T @ inv_l


def _check_data(X, y, dim):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[1] != dim:
        raise ContractError(f"X {X.shape} and y {y.shape} do not conform to dimension {dim}")
    return X, y


def exact_update(prior, X, y, noise_var):
    """Conjugate posterior after observing ``y = X w + N(0, noise_var)``."""
    if not noise_var > 0:
        raise ContractError("noise_var must be positive")
    X, y = _check_data(X, y, prior.dim)
    if X.shape[0] == 0:
        return prior
    prec = prior.precision() + X.T @ X / noise_var
    cov = _spd_inverse(prec)
    cov = 0.5 * (cov + cov.T)
    rhs = prior.precision() @ prior.mean + X.T @ y / noise_var
    return ConjugateGaussianPosterior(cov @ rhs, cov)


def exact_trajectory(stream):
    """True posteriors after each task, ``[p_1, ..., p_T]``."""
    out, post = [], stream.prior
    for X, y in stream.tasks:
        post = exact_update(post, X, y, stream.noise_var)
        out.append(post)
    return out


def kl_to_truth(approx, exact):
    """``KL(approx || exact)`` between Gaussians in closed form."""
    if approx.dim != exact.dim:
        raise ContractError(f"dimension mismatch: {approx.dim} vs {exact.dim}")
    c0, c1 = approx.full_cov(), exact.full_cov()
    L0, L1 = _cholesky(c0), _cholesky(c1)
    solved = np.linalg.solve(L1, L0)
    diff = np.linalg.solve(L1, exact.mean - approx.mean)
    logdet = 2.0 * (np.sum(np.log(np.diag(L1))) - np.sum(np.log(np.diag(L0))))
    value = 0.5 * (np.sum(solved ** 2) + diff @ diff - approx.dim + logdet)
    # rounding can leave a tiny negative value when the two coincide
    return max(float(value), 0.0)


def parse_mode(mode):
    """``"single_step"`` -> 1 and ``"n_step(n)"`` -> n."""
    if mode == "single_step":
        return 1
    m = re.fullmatch(r"n_step\((\d+)\)", str(mode))
    if m is None or int(m.group(1)) < 1:
        raise ContractError(f"mode must be 'single_step' or 'n_step(n)' with n >= 1, got {mode!r}")
    return int(m.group(1))


def weighted_diagonal_fit(likelihood_terms, anchors, noise_var):
    """Closed-form diagonal-Gaussian optimum of the weighted objective.

    ``likelihood_terms`` is ``[(w_i, X_i, y_i)]`` and ``anchors`` is
    ``[(v_i, diagonal posterior)]``.
    """
    if not anchors:
        raise ContractError("at least one KL anchor is required")
    dim = anchors[0][1].dim
    A = np.zeros((dim, dim))
    b = np.zeros(dim)
    for w, X, y in likelihood_terms:
        X, y = _check_data(X, y, dim)
        A += w * X.T @ X / noise_var
        b += w * X.T @ y / noise_var
    v_total = 0.0
    for v, p in anchors:
        if not p.diagonal:
            raise ContractError("anchors must be diagonal approximations")
        A[np.diag_indices(dim)] += v / p.cov
        b += v * p.mean / p.cov
        v_total += v
    try:
        mean = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular system in the weighted fit") from exc
    return ConjugateGaussianPosterior(mean, v_total / np.diag(A))


def perturbed_recursion(stream, noise_scale, mode, rng):
    """Approximate posteriors ``[q_1, ..., q_T]`` from a perturbed diagonal recursion.

    ``single_step`` anchors each fit to the previous approximation only;
    ``n_step(n)`` uses the n-step weights over the last ``min(n, t)`` tasks.
    """
    if noise_scale < 0:
        raise ContractError("noise_scale must be non-negative")
    n = parse_mode(mode)
    prior = stream.prior
    if not prior.diagonal:
        prior = ConjugateGaussianPosterior(prior.mean, np.diag(prior.cov).copy())
    history = [prior]
    for t in range(1, len(stream) + 1):
        sched = nstep_coefficients(min(n, t))
        lik = [(w, *stream.tasks[t - 1 - i]) for i, w in enumerate(sched.likelihood_weights)]
        anchors = [(v, history[t - 1 - i]) for i, v in enumerate(sched.kl_weights)]
        q = weighted_diagonal_fit(lik, anchors, stream.noise_var)
        if noise_scale > 0:
            q = ConjugateGaussianPosterior(q.mean + noise_scale * rng.normal(q.dim), q.cov)
        history.append(q)
    return history[1:]


def make_conjugate_stream(T, rng, dim=5, n_per_task=20, noise_var=1.0, prior_var=1.0):
    """Tasks with orthogonal designs, so every true posterior is diagonal."""
    if n_per_task < dim:
        raise ContractError("orthogonal designs need n_per_task >= dim")
    w = rng.normal(dim) * np.sqrt(prior_var)
    tasks = []
    for _ in range(T):
        Q, _ = np.linalg.qr(rng.normal((n_per_task, dim)))
        X = Q * (0.5 + 1.5 * rng.uniform(dim))
        y = X @ w + rng.normal(n_per_task) * np.sqrt(noise_var)
        tasks.append((X, y))
    prior = ConjugateGaussianPosterior.isotropic(dim, prior_var)
    return ConjugateStream(tasks, float(noise_var), prior, w)


def kl_trajectory(stream, noise_scale, mode, rng):
    """Per-task ``KL(q_t || p_t)`` of the perturbed recursion."""
    approx = perturbed_recursion(stream, noise_scale, mode, rng)
    return [kl_to_truth(q, p) for q, p in zip(approx, exact_trajectory(stream))]


def write_kl_csv(records, path):
    """``records`` holds ``(run_id, seed, method, kls)``; one row per task."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KL_CSV_COLUMNS)
        for run_id, seed, method, kls in records:
            for t, kl in enumerate(kls, start=1):
                w.writerow([run_id, seed, method, t, t, repr(float(kl))])
    return path
