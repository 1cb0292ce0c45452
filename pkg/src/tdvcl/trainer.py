"""Per-task optimisation and the whole-stream continual-learning driver."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .evalreport import AccuracyMatrix, accuracy
from .network import layer_shapes
from .numcore import ContractError, GradTape, NumericError, SeededRng, backward
from .objectives import evaluate_objective, mean_loglik
from .tasks import CoreSet, ReplayBuffer, replay_batch, replay_update, split_coreset
from .vardist import (GaussianPrior, PosteriorHistory, PosteriorSnapshot, init_from_prior,
                      kl_diag, sample)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 100
    learning_rate: float = 1e-3
    patience: float = 5
    train_mc_samples: int = 5
    validation_fraction: float = 0.1
    seed: int = 0
    # divide beta by the task's training-set size (opt-in, see README)
    kl_dataset_scaling: bool = False

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.train_mc_samples) < 1:
            raise ContractError("batch_size, max_epochs and train_mc_samples must be positive")
        if not self.learning_rate > 0 or not self.patience > 0:
            raise ContractError("learning_rate and patience must be positive")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ContractError("validation_fraction must lie in (0, 0.5]")


@dataclass(frozen=True)
class ContinualConfig:
    """Everything :func:`run_continual` needs beyond the stream and objective."""

    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: tuple = (100, 100)
    prior_variance: float = 1e-5
    replay_tasks: int = 2
    replay_per_task: int = 200
    eval_samples: int = 100
    coreset_epochs: int = 20
    # None samples initial means from the prior; a float s draws them from N(0, s^2/fan_in)
    init_mean_scale: float | None = None


class AdamState:
    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ContractError("params, grads and Adam moments must have equal shape")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient")
    state.step += 1
    kernels.adam_update(params, np.ascontiguousarray(grads, dtype=np.float64), state.m, state.v,
                        lr, state.beta1, state.beta2, state.eps, state.step)
    return params, state


def _n_lags(spec, t, buffer):
    if spec.kind in ("NStepKL", "TDLambda"):
        return min(spec.n, t)
    if spec.kind == "BatchMLE":
        return 1 + (buffer.max_tasks if buffer is not None else 0)
    return 1


def train_task(q_live, spec, task, buffer, history, prior, config, rng=None, task_index=None):
    """Optimise ``spec``'s objective on ``task`` with Adam and early stopping.

    Returns ``(q_live, log)``; ``q_live`` is updated in place and ends at the
    parameters of the best validation epoch.
    """
    if len(task) == 0:
        raise ContractError("task data must not be empty")
    rng = rng or SeededRng(config.seed)
    t = task.task_id if task_index is None else task_index
    n = len(task)
    order = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val, train = task.subset(np.sort(order[:n_val])), task.subset(np.sort(order[n_val:]))
    if len(train) == 0:
        train = val
    # fixed noise so epoch-to-epoch validation losses are comparable
    val_eps = rng.child(1).normal((spec.train_mc_samples, len(q_live)))
    n_lags = _n_lags(spec, t, buffer)
    if config.kl_dataset_scaling and spec.variational:
        spec = replace(spec, beta=spec.beta / len(train))

    states = [AdamState(len(q_live))]
    if spec.variational:
        states.append(AdamState(len(q_live)))

    def val_loss():
        return evaluate_objective(spec, q_live, history, prior, [val.batch()], rng,
                                  task_index=t, eps=val_eps).loss

    best = val_loss()
    best_params = (q_live.mu.copy(), q_live.rho.copy())
    stale = 0
    records = []
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(train))
        losses, terms = [], {}
        for start in range(0, len(train), config.batch_size):
            idx = perm[start:start + config.batch_size]
            batches = [train.batch(idx)]
            for lag in range(1, n_lags):
                batches.append(replay_batch(buffer, lag, config.batch_size, rng)
                               if buffer is not None else None)
            res = evaluate_objective(spec, q_live, history, prior, batches, rng,
                                     task_index=t, with_grad=True)
            adam_step(q_live.mu, res.grad_mu, states[0], config.learning_rate)
            if spec.variational:
                adam_step(q_live.rho, res.grad_rho, states[1], config.learning_rate)
            losses.append(res.loss)
            for key, value in res.diagnostics.items():
                terms[key] = terms.get(key, 0.0) + value
        current = val_loss()
        steps = len(losses)
        records.append({"event": "epoch", "task": t, "epoch": epoch,
                        "train_loss": float(np.mean(losses)), "val_loss": current,
                        "terms": {k: v / steps for k, v in terms.items()}})
        if current < best:
            best, stale = current, 0
            best_params = (q_live.mu.copy(), q_live.rho.copy())
        else:
            stale += 1
            if stale >= config.patience:
                break
    q_live.mu[:] = best_params[0]
    q_live.rho[:] = best_params[1]
    records.append({"event": "train_end", "task": t, "epochs": len(records),
                    "best_val_loss": best})
    return q_live, records


def _finetune_coreset(q, anchor, coreset, spec, config, epochs, rng):
    """Fine-tune ``q`` in place on the stored core sets, anchored by KL to ``anchor``."""
    datasets = [d for d in coreset.union() if len(d)]
    if not datasets:
        return q
    states = (AdamState(len(q)), AdamState(len(q)))
    total = sum(len(d) for d in datasets)
    steps = max(1, math.ceil(total / config.batch_size))
    beta = spec.beta / total if config.kl_dataset_scaling else spec.beta
    for _ in range(epochs * steps):
        with GradTape() as tape:
            mu = tape.watch(q.mu)
            rho = tape.watch(q.rho)
            theta = sample(q, rng, eps=rng.normal((spec.train_mc_samples, len(q))))
            lik = None
            for d in datasets:
                idx = rng.integers(0, len(d), min(config.batch_size, len(d)))
                ll = mean_loglik(theta, q, d.batch(idx))
                lik = ll if lik is None else lik + ll
            loss = kl_diag(q, anchor) * beta - lik * (1.0 / len(datasets))
        grads = backward(tape, loss)
        adam_step(q.mu, grads[mu], states[0], config.learning_rate)
        adam_step(q.rho, grads[rho], states[1], config.learning_rate)
    return q


def _fan_in_means(layer_spec, scale, rng):
    parts = []
    for out, fan_in in layer_shapes(layer_spec):
        parts.append(rng.normal(out * fan_in + out) * (scale / math.sqrt(fan_in)))
    return np.concatenate(parts)


@dataclass
class ContinualResult:
    matrix: AccuracyMatrix
    logs: list
    snapshots: list


def run_continual(stream, spec, config, on_task=None):
    """Train through ``stream`` task by task, evaluating on all seen test sets.

    After task ``t``: push the posterior snapshot, update the replay buffer,
    then fill row ``t`` of the accuracy matrix. ``VCLCoreSet`` evaluates a
    core-set fine-tuned copy that is discarded afterwards.
    """
    if len(stream) == 0:
        raise ContractError("stream must not be empty")
    tc = config.train
    root = SeededRng(tc.seed)
    first_train = stream.tasks[0][0]
    layer_spec = (first_train.dim, *config.hidden, stream.output_size)
    prior = GaussianPrior(config.prior_variance)
    q = init_from_prior(layer_spec, prior, root.child(0))
    if config.init_mean_scale is not None:
        q.mu[:] = _fan_in_means(layer_spec, config.init_mean_scale, root.child(0, 1))
    history = PosteriorHistory(spec.horizon + 1)
    history.push(PosteriorSnapshot.from_prior(prior, layer_spec), 0)
    buffer = ReplayBuffer(config.replay_tasks, config.replay_per_task)
    coreset = CoreSet(config.replay_tasks, config.replay_per_task) if spec.kind == "VCLCoreSet" else None
    matrix = AccuracyMatrix(seed=tc.seed, method=spec.kind)
    logs, snapshots = [], []
    for t, (train, _test) in enumerate(stream, start=1):
        if coreset is not None:
            core, train = split_coreset(train, config.replay_per_task, root.child(5, t))
            coreset.add_core(core)
        q, records = train_task(q, spec, train, buffer, history, prior, tc,
                                rng=root.child(1, t), task_index=t)
        logs.extend(records)
        history.push(q, t)
        snapshots.append(history[0])
        replay_update(buffer, train, root.child(3, t))
        evaluated = q
        if coreset is not None:
            evaluated = _finetune_coreset(q.copy(), history[0], coreset, spec, tc,
                                          config.coreset_epochs, root.child(6, t))
        row = []
        for k in range(t):
            test = stream.tasks[k][1]
            row.append(accuracy(evaluated, test, config.eval_samples, root.child(4, t, k),
                                deterministic=not spec.variational))
        matrix.append_row(row)
        record = {"event": "task", "task": t, "accuracies": row, "avg_accuracy": float(np.mean(row))}
        logs.append(record)
        log.info("%s seed=%d task=%d avg_acc=%.4f", spec.kind, tc.seed, t, record["avg_accuracy"])
        if on_task is not None:
            on_task(record)
    return ContinualResult(matrix, logs, snapshots)
