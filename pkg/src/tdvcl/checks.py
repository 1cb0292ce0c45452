"""Invariant suites behind ``tdvcl check``.

Each suite returns a list of :class:`CheckResult`. The random problems are
small on purpose so a suite finishes in seconds.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numcore import SeededRng
from .objectives import (Batch, ObjectiveSpec, compound_identity_residual, evaluate_objective,
                         nstep_coefficients, tdlambda_coefficients)
from .oracle import (exact_trajectory, exact_update, kl_trajectory, make_conjugate_stream,
                     perturbed_recursion)
from .vardist import GaussianPrior, MeanFieldGaussian, PosteriorHistory, PosteriorSnapshot
from .network import n_params

LAMBDAS = (0.0, 0.1, 0.5, 0.9, 1.0 - 1e-9)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float

    def to_dict(self):
        return asdict(self)


def coefficient_suite(max_n=10):
    """Normalisation and limit properties of the weight schedules."""
    worst_sum = worst_vcl = worst_limit = 0.0
    for n in range(1, max_n + 1):
        for lam in LAMBDAS:
            s = tdlambda_coefficients(n, lam)
            worst_sum = max(worst_sum, abs(sum(s.kl_weights) - 1.0))
        ns = nstep_coefficients(n)
        worst_sum = max(worst_sum, abs(sum(ns.kl_weights) - 1.0))
        zero = tdlambda_coefficients(n, 0.0)
        padded = (1.0,) + (0.0,) * (n - 1)
        worst_vcl = max(worst_vcl, max(abs(a - b) for a, b in zip(zero.likelihood_weights, padded)),
                        max(abs(a - b) for a, b in zip(zero.kl_weights, padded)))
        near = tdlambda_coefficients(n, 1.0 - 1e-9)
        worst_limit = max(worst_limit,
                          max(abs(a - b) for a, b in zip(near.likelihood_weights, ns.likelihood_weights)),
                          max(abs(a - b) for a, b in zip(near.kl_weights, ns.kl_weights)))
    return [CheckResult("kl_weights_sum_to_one", worst_sum < 1e-12, worst_sum, 1e-12),
            CheckResult("lambda_zero_is_vcl", worst_vcl < 1e-12, worst_vcl, 1e-12),
            CheckResult("lambda_one_limit_is_nstep", worst_limit < 1e-6, worst_limit, 1e-6)]


def random_problem(rng, n_lags, layer_spec=(4, 5, 3), batch_size=6, spread=0.5):
    """Live posterior, snapshot history ``q_0..q_{t-1}`` and per-lag batches at ``t = n_lags``."""
    P = n_params(layer_spec)
    prior = GaussianPrior(1.0)

    def rand_q():
        return MeanFieldGaussian(rng.normal(P) * spread, rng.normal(P) * 0.5 - 1.0, layer_spec)

    t = n_lags
    history = PosteriorHistory(t + 1)
    history.push(PosteriorSnapshot.from_prior(prior, layer_spec), 0)
    for k in range(1, t):
        history.push(rand_q(), k)
    batches = []
    for _ in range(n_lags):
        x = rng.uniform((batch_size, layer_spec[0]))
        y = rng.integers(0, layer_spec[-1], batch_size)
        batches.append(Batch(x, y))
    return rand_q(), history, prior, batches, t


def proposition_suite(networks=100, seed=0):
    """Compound TD identity and the VCL equivalences of the schedules."""
    rng = SeededRng(seed)
    worst = 0.0
    for net in range(networks):
        for n in (2, 3, 5, 8):
            q, history, prior, batches, t = random_problem(rng.child(net, n), n)
            for lam in (0.1, 0.5, 0.9):
                r = compound_identity_residual(n, lam, q, history, batches, rng.child(net, n, int(lam * 10)),
                                               prior=prior, task_index=t)
                worst = max(worst, r)
    results = [CheckResult("compound_td_identity", worst < 1e-8, worst, 1e-8)]
    results.extend(equivalence_suite(seed))
    return results


def equivalence_suite(seed=0, trials=20):
    """NStepKL(n=1) and TDLambda(lam=0) reproduce the VCL loss."""
    rng = SeededRng(seed)
    worst_n = worst_l = 0.0
    for trial in range(trials):
        q, history, prior, batches, t = random_problem(rng.child(99, trial), 3)
        eps = rng.normal((5, len(q)))
        beta = 0.5 + rng.uniform()

        def loss(spec):
            return evaluate_objective(spec, q, history, prior, batches, rng, task_index=t, eps=eps).loss

        vcl = loss(ObjectiveSpec("VCL", beta=beta))
        worst_n = max(worst_n, abs(loss(ObjectiveSpec("NStepKL", n=1, beta=beta)) - vcl))
        worst_l = max(worst_l, abs(loss(ObjectiveSpec("TDLambda", n=3, lam=0.0, beta=beta)) - vcl))
    return [CheckResult("nstep_n1_equals_vcl", worst_n < 1e-12, worst_n, 1e-12),
            CheckResult("tdlambda_lam0_equals_vcl", worst_l < 1e-12, worst_l, 1e-12)]


def relative_error(analytic, numeric, floor=1e-6):
    """Coordinate-wise ``|a - n| / max(|a|, |n|, floor)``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_suite(seed=0, h=1e-5, floor=1e-6):
    """Full TD(lambda) objective gradient against central differences on a [10, 10] net."""
    rng = SeededRng(seed)
    q, history, prior, batches, t = random_problem(rng, 3, layer_spec=(6, 10, 10, 3), batch_size=8)
    spec = ObjectiveSpec("TDLambda", n=3, lam=0.5, beta=0.7)
    eps = rng.normal((spec.train_mc_samples, len(q)))

    def loss():
        return evaluate_objective(spec, q, history, prior, batches, rng, task_index=t, eps=eps).loss

    res = evaluate_objective(spec, q, history, prior, batches, rng, task_index=t, eps=eps, with_grad=True)
    worst = {}
    for name, arr, grad in (("mu", q.mu, res.grad_mu), ("rho", q.rho, res.grad_rho)):
        numeric = np.empty_like(arr)
        for i in range(arr.size):
            old = arr[i]
            arr[i] = old + h
            up = loss()
            arr[i] = old - h
            down = loss()
            arr[i] = old
            numeric[i] = (up - down) / (2 * h)
        worst[name] = float(relative_error(grad, numeric, floor).max())
    return [CheckResult(f"fd_gradient_{k}", v < 1e-4, v, 1e-4) for k, v in worst.items()]


def oracle_suite(seed=0, runs=30, noise_scale=0.1, n=3):
    """Exact recursion, zero-noise recovery and the compounding-error direction."""
    rng = SeededRng(seed)
    worst_joint = 0.0
    for k in range(10):
        stream = make_conjugate_stream(4, rng.child(1, k), dim=4, n_per_task=6)
        seq = exact_trajectory(stream)[-1]
        X = np.vstack([x for x, _ in stream.tasks])
        y = np.concatenate([y for _, y in stream.tasks])
        joint = exact_update(stream.prior, X, y, stream.noise_var)
        worst_joint = max(worst_joint, float(np.abs(seq.mean - joint.mean).max()),
                          float(np.abs(seq.cov - joint.cov).max()))
    worst_zero = 0.0
    for k in range(10):
        stream = make_conjugate_stream(6, rng.child(2, k))
        truth = exact_trajectory(stream)
        for mode in ("single_step", f"n_step({n})"):
            approx = perturbed_recursion(stream, 0.0, mode, rng.child(3, k))
            for a, e in zip(approx, truth):
                worst_zero = max(worst_zero, float(np.abs(a.mean - e.mean).max()),
                                 float(np.abs(a.cov - np.diag(e.cov)).max()))
    finals = {"single_step": [], f"n_step({n})": []}
    for k in range(runs):
        stream = make_conjugate_stream(10, rng.child(4, k))
        for mode in finals:
            finals[mode].append(kl_trajectory(stream, noise_scale, mode, rng.child(5, k, len(mode)))[-1])
    med_single = float(np.median(finals["single_step"]))
    med_n = float(np.median(finals[f"n_step({n})"]))
    return [CheckResult("sequential_equals_joint", worst_joint < 1e-10, worst_joint, 1e-10),
            CheckResult("zero_noise_recovers_truth", worst_zero < 1e-6, worst_zero, 1e-6),
            CheckResult(f"median_final_kl_n_step_{n}_below_single_step", med_n < med_single,
                        med_n - med_single, 0.0)]


SUITES = {
    "coefficients": coefficient_suite,
    "propositions": proposition_suite,
    "gradients": gradient_suite,
    "oracle": oracle_suite,
}
