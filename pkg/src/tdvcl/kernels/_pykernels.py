"""NumPy implementations of the per-parameter kernels.

These are the reference versions; ``_ckernels`` must agree with them to
round-off.
"""
import numpy as np
from scipy.special import expit


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return expit(x)


def kl_diag(mu_q, sig_q, mu_p, sig_p):
    var_p = sig_p * sig_p
    terms = (np.log(sig_p) - np.log(sig_q)
             + (sig_q * sig_q + (mu_q - mu_p) ** 2) / (2.0 * var_p) - 0.5)
    return float(terms.sum())


def kl_diag_grad(mu_q, rho_q, mu_p, sig_p):
    """KL(q || p) and its gradient w.r.t. ``mu_q`` and ``rho_q``.

    ``q`` has std ``softplus(rho_q)``; ``p`` is given by mean/std directly.
    """
    sig_q = softplus(rho_q)
    var_p = sig_p * sig_p
    diff = mu_q - mu_p
    value = float((np.log(sig_p) - np.log(sig_q)
                   + (sig_q * sig_q + diff * diff) / (2.0 * var_p) - 0.5).sum())
    g_mu = diff / var_p
    g_rho = (sig_q / var_p - 1.0 / sig_q) * expit(rho_q)
    return value, g_mu, g_rho


def adam_update(params, grads, m, v, lr, beta1, beta2, eps, step):
    """In-place bias-corrected Adam update; ``step`` is the 1-based count."""
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    params -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
