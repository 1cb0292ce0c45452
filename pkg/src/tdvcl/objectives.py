"""Continual-learning objectives over mean-field Gaussian posteriors.

All variational objectives share one form. Lag ``i`` refers to task ``t-i``
and to the anchor snapshot ``q_{t-i-1}``::

    loss = -sum_i w_i * meanloglik_i + beta * sum_i v_i * KL(q || q_{t-i-1})

The schedules differ only in the weights ``w`` and ``v``:

* VCL: ``w = [1]``, ``v = [1]``.
* n-step KL: ``w_i = (n-i)/n``, ``v_i = 1/n``.
* TD(lambda): ``w_i = lam^i (1-lam^(n-i)) / (1-lam^n)`` and
  ``v_i = lam^i (1-lam) / (1-lam^n)``.

``meanloglik_i`` is the per-example mean log-likelihood of the lag-``i``
batch. It is averaged over Monte-Carlo draws that are shared by every lag in
one evaluation. When a replay batch is empty its likelihood term is dropped
and the remaining weights are left as they are. KL terms only need snapshots,
so they are always applied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import forward
from .numcore import ContractError, GradTape, Tensor, backward, softmax_xent
from .vardist import kl_diag, param_leaves, sample

KINDS = ("OnlineMLE", "BatchMLE", "VCL", "VCLCoreSet", "NStepKL", "TDLambda")
VARIATIONAL = ("VCL", "VCLCoreSet", "NStepKL", "TDLambda")


@dataclass(frozen=True)
class CoefficientSchedule:
    likelihood_weights: tuple
    kl_weights: tuple
    effective_n: int


def nstep_coefficients(n):
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    return CoefficientSchedule(tuple((n - i) / n for i in range(n)),
                               tuple(1.0 / n for _ in range(n)), n)


def tdlambda_coefficients(n, lam):
    """TD(lambda) weights; ``lam = 0`` uses ``0**0 = 1`` (plain VCL)."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if not 0.0 <= lam < 1.0:
        raise ContractError(f"lambda must lie in [0, 1), got {lam}")
    if lam == 0.0:
        first = (1.0,) + (0.0,) * (n - 1)
        return CoefficientSchedule(first, first, n)
    # 1 - lam**k via expm1 keeps full precision as lam -> 1
    log_lam = math.log(lam)

    def one_minus_pow(k):
        return -math.expm1(k * log_lam)

    norm = one_minus_pow(n)
    w = tuple(math.exp(i * log_lam) * one_minus_pow(n - i) / norm for i in range(n))
    v = tuple(math.exp(i * log_lam) * (1.0 - lam) / norm for i in range(n))
    return CoefficientSchedule(w, v, n)


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    n: int = 1
    lam: float | None = None
    beta: float = 1.0
    train_mc_samples: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown objective kind {self.kind!r}; expected one of {KINDS}")
        if self.n < 1:
            raise ContractError("n must be >= 1")
        if self.kind == "TDLambda":
            if self.lam is None:
                raise ContractError("TDLambda needs lambda")
            if not 0.0 <= self.lam < 1.0:
                raise ContractError(f"lambda must lie in [0, 1), got {self.lam}")
        if not self.beta > 0:
            raise ContractError("beta must be positive")
        if self.train_mc_samples < 1:
            raise ContractError("train_mc_samples must be >= 1")

    @property
    def variational(self):
        return self.kind in VARIATIONAL

    @property
    def horizon(self):
        """Largest KL lag the objective can use."""
        return self.n if self.kind in ("NStepKL", "TDLambda") else 1

    def schedule(self, t, n_batches=1):
        """Weights at task ``t``; the horizon is clamped to ``min(n, t)``.

        MLE kinds have no KL weights. BatchMLE weights every supplied batch by 1.
        """
        if self.kind == "OnlineMLE":
            return CoefficientSchedule((1.0,), (), 1)
        if self.kind == "BatchMLE":
            return CoefficientSchedule((1.0,) * n_batches, (), n_batches)
        if self.kind in ("VCL", "VCLCoreSet"):
            return nstep_coefficients(1)
        n_t = min(self.n, t)
        if self.kind == "NStepKL":
            return nstep_coefficients(n_t)
        return tdlambda_coefficients(n_t, self.lam)


@dataclass(frozen=True)
class Batch:
    """Inputs, labels and an optional ``(head_index, head_size)``."""

    x: np.ndarray
    y: np.ndarray
    head: tuple | None = None

    def __len__(self):
        return len(self.y)

    @property
    def is_empty(self):
        return len(self.y) == 0


EMPTY_BATCH = Batch(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))


@dataclass
class ObjectiveValue:
    loss: float
    diagnostics: dict
    grad_mu: np.ndarray | None = None
    grad_rho: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``loss, diag = evaluate_objective(...)``
        return iter((self.loss, self.diagnostics))


def _infer_t(history, task_index):
    if task_index is not None:
        return int(task_index)
    return 1 if len(history) == 0 else history.newest_index + 1


def anchor_for(history, prior, target_index):
    """Snapshot ``q_{target_index}``; index 0 falls back to the prior."""
    for snap in history:
        if snap.task_index == target_index:
            return snap
    if target_index == 0 and prior is not None:
        return prior
    raise ContractError(f"no posterior snapshot for task {target_index} in history")


def mean_loglik(theta, q, batch):
    """Per-example mean log-likelihood, averaged over the rows of ``theta``."""
    head, size = batch.head if batch.head is not None else (None, None)
    logits = forward(theta, q.layer_spec, batch.x, head, size)
    nll, _ = softmax_xent(logits, batch.y)
    return -nll.mean()


def draw_noise(spec, q, rng):
    return rng.normal((spec.train_mc_samples, len(q)))


def _theta(spec, q, rng, eps):
    if not spec.variational:
        mu, _ = param_leaves(q)
        return mu.reshape(1, len(q))
    if eps is None:
        eps = draw_noise(spec, q, rng)
    return sample(q, rng, eps=eps)


def _build(spec, q_live, history, prior, per_lag_batches, rng, task_index, eps):
    if not per_lag_batches or per_lag_batches[0] is None or per_lag_batches[0].is_empty:
        raise ContractError("the current-task batch must not be empty")
    t = _infer_t(history, task_index)
    sched = spec.schedule(t, n_batches=len(per_lag_batches))
    theta = _theta(spec, q_live, rng, eps)
    diag = {}
    lik_total = None
    for i, w in enumerate(sched.likelihood_weights):
        batch = per_lag_batches[i] if i < len(per_lag_batches) else None
        if w == 0.0 or batch is None or batch.is_empty:
            continue
        ll = mean_loglik(theta, q_live, batch)
        diag[f"loglik_{i}"] = ll.item()
        diag[f"w_lik_{i}"] = w
        term = ll * w
        lik_total = term if lik_total is None else lik_total + term
    loss = -lik_total
    diag["expected_loglik"] = lik_total.item()
    if spec.variational:
        kl_total = None
        for i, v in enumerate(sched.kl_weights):
            if v == 0.0:
                continue
            kl = kl_diag(q_live, anchor_for(history, prior, t - i - 1))
            diag[f"kl_{i}"] = kl.item()
            diag[f"w_kl_{i}"] = v
            term = kl * v
            kl_total = term if kl_total is None else kl_total + term
        diag["kl_total"] = kl_total.item()
        loss = loss + kl_total * spec.beta
    diag["loss"] = loss.item()
    return loss, diag


def evaluate_objective(spec, q_live, history, prior, per_lag_batches, rng, *,
                       task_index=None, eps=None, with_grad=False):
    """Loss and per-term diagnostics; gradients w.r.t. ``mu``/``rho`` on request.

    ``per_lag_batches[i]`` holds data of task ``t-i`` (``EMPTY_BATCH`` or
    ``None`` when replay has nothing for that lag). ``eps`` fixes the
    ``(train_mc_samples, P)`` noise shared by all likelihood terms.
    """
    if not with_grad:
        loss, diag = _build(spec, q_live, history, prior, per_lag_batches, rng, task_index, eps)
        return ObjectiveValue(loss.item(), diag)
    with GradTape() as tape:
        mu = tape.watch(q_live.mu, "mu")
        rho = tape.watch(q_live.rho, "rho")
        loss, diag = _build(spec, q_live, history, prior, per_lag_batches, rng, task_index, eps)
    grads = backward(tape, loss)
    return ObjectiveValue(loss.item(), diag, grads[mu], grads[rho])


def td_target(k, q_live, history, per_lag_batches, rng, *, prior=None, task_index=None,
              eps=None, n_samples=5):
    """k-step TD target: ``sum_{i<k} meanloglik_i - KL(q || q_{t-k})``."""
    t = _infer_t(history, task_index)
    if k < 1 or k > t:
        raise ContractError(f"k={k} must satisfy 1 <= k <= t={t}")
    if len(per_lag_batches) < k or any(b is None or b.is_empty for b in per_lag_batches[:k]):
        raise ContractError(f"td_target({k}) needs batches for lags 0..{k - 1}")
    anchor = anchor_for(history, prior, t - k)
    if eps is None:
        eps = rng.normal((n_samples, len(q_live)))
    theta = sample(q_live, rng, eps=eps)
    lik = sum(mean_loglik(theta, q_live, per_lag_batches[i]).item() for i in range(k))
    return lik - kl_diag(q_live, anchor).item()


def compound_identity_residual(n, lam, q_live, history, per_lag_batches, rng, *, prior=None,
                               task_index=None, n_samples=5):
    """|TD(lambda) objective - normalised discounted sum of TD targets|.

    The TD(lambda) objective is taken with ``beta = 1`` and positive sign. One
    noise draw is shared by both sides.
    """
    t = _infer_t(history, task_index)
    if n > t:
        raise ContractError(f"n={n} exceeds the number of available tasks t={t}")
    eps = rng.normal((n_samples, len(q_live)))
    spec = ObjectiveSpec("TDLambda", n=n, lam=lam, beta=1.0, train_mc_samples=n_samples)
    objective = -evaluate_objective(spec, q_live, history, prior, per_lag_batches, rng,
                                    task_index=t, eps=eps).loss
    norm = (1.0 - lam) / (1.0 - lam ** n)
    targets = sum(lam ** k * td_target(k + 1, q_live, history, per_lag_batches, rng, prior=prior,
                                       task_index=t, eps=eps)
                  for k in range(n))
    return abs(objective - norm * targets)

