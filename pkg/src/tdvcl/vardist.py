"""Mean-field Gaussian posteriors over network parameters.

Standard deviations are parametrised as ``softplus(rho)``. Snapshots are
deep, read-only copies used as KL anchors while the live posterior trains.

Snapshot file layout (``save_snapshot``/``load_snapshot``), little-endian::

    offset  type         field
    0       4 bytes      magic b"TDVS"
    4       uint32       format version (1)
    8       int64        task_index
    16      uint32       L, number of entries in layer_spec
    20      uint32[L]    layer_spec
    ...     uint64       P, parameter count
    ...     float64[P]   mu
    ...     float64[P]   rho

A ``.json`` path stores the same fields as a JSON object instead
(``task_index``, ``layer_spec``, ``mu``, ``rho``); floats round-trip exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .network import n_params
from .numcore import ContractError, Tensor, current_tape, record
from .numcore import softplus as softplus_op

_MAGIC = b"TDVS"
_VERSION = 1


def inverse_softplus(std):
    std = np.asarray(std, dtype=np.float64)
    return np.log(np.expm1(std))


@dataclass(frozen=True)
class GaussianPrior:
    """Isotropic ``N(0, variance * I)``."""

    variance: float = 1e-5

    def __post_init__(self):
        if not self.variance > 0:
            raise ContractError(f"prior variance must be positive, got {self.variance}")

    @property
    def std(self):
        return float(np.sqrt(self.variance))


@dataclass
class MeanFieldGaussian:
    mu: np.ndarray
    rho: np.ndarray
    layer_spec: tuple

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        self.rho = np.ascontiguousarray(self.rho, dtype=np.float64)
        self.layer_spec = tuple(int(s) for s in self.layer_spec)
        if self.mu.shape != self.rho.shape or self.mu.ndim != 1:
            raise ContractError("mu and rho must be flat vectors of equal length")
        if n_params(self.layer_spec) != self.mu.size:
            raise ContractError(
                f"layer_spec {self.layer_spec} needs {n_params(self.layer_spec)} parameters, got {self.mu.size}")

    @property
    def sigma(self):
        return kernels.softplus(self.rho)

    def __len__(self):
        return self.mu.size

    def copy(self):
        return MeanFieldGaussian(self.mu.copy(), self.rho.copy(), self.layer_spec)


@dataclass(frozen=True)
class PosteriorSnapshot:
    mu: np.ndarray
    rho: np.ndarray
    layer_spec: tuple
    task_index: int
    sigma: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        rho = np.array(self.rho, dtype=np.float64)
        sigma = kernels.softplus(rho)
        for arr in (mu, rho, sigma):
            arr.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "layer_spec", tuple(int(s) for s in self.layer_spec))

    @classmethod
    def of(cls, q, task_index):
        return cls(q.mu, q.rho, q.layer_spec, int(task_index))

    @classmethod
    def from_prior(cls, prior, layer_spec, task_index=0):
        P = n_params(layer_spec)
        rho = np.full(P, float(inverse_softplus(prior.std)))
        return cls(np.zeros(P), rho, layer_spec, task_index)

    def to_posterior(self):
        return MeanFieldGaussian(self.mu.copy(), self.rho.copy(), self.layer_spec)


class PosteriorHistory:
    """Most recent snapshot first; slot 0 is ``q_{t-1}``."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ContractError("history capacity must be >= 1")
        self.capacity = int(capacity)
        self.snapshots: list[PosteriorSnapshot] = []

    def __len__(self):
        return len(self.snapshots)

    def __getitem__(self, i):
        return self.snapshots[i]

    def __iter__(self):
        return iter(self.snapshots)

    @property
    def newest_index(self):
        return self.snapshots[0].task_index if self.snapshots else None

    def push(self, q, task_index):
        if self.snapshots and task_index <= self.snapshots[0].task_index:
            raise ContractError(
                f"task_index {task_index} must exceed newest stored index {self.snapshots[0].task_index}")
        snap = q if isinstance(q, PosteriorSnapshot) and q.task_index == task_index \
            else PosteriorSnapshot.of(q, task_index)
        self.snapshots.insert(0, snap)
        del self.snapshots[self.capacity:]
        return self


def push_snapshot(history, q, task_index):
    return history.push(q, task_index)


def init_from_prior(layer_spec, prior, rng):
    """Means drawn i.i.d. from the prior; stds set exactly to the prior std."""
    if not layer_spec:
        raise ContractError("layer_spec must not be empty")
    P = n_params(layer_spec)
    mu = rng.normal(P) * prior.std
    rho = np.full(P, float(inverse_softplus(prior.std)))
    return MeanFieldGaussian(mu, rho, layer_spec)


def param_leaves(q):
    """``(mu, rho)`` as tape leaves when a tape is active, else constants."""
    tape = current_tape()
    if tape is None:
        return Tensor(q.mu), Tensor(q.rho)
    return tape.watch(q.mu, "mu"), tape.watch(q.rho, "rho")


def sample(q, rng, n_samples=None, eps=None):
    """Reparametrised draw ``mu + softplus(rho) * eps``.

    Returns a ``(P,)`` Tensor, or ``(n_samples, P)`` when ``n_samples`` is
    given. Pass ``eps`` to fix the noise. Under an active tape the result is
    differentiable with respect to ``q.mu`` and ``q.rho``.
    """
    if eps is None:
        shape = (len(q),) if n_samples is None else (n_samples, len(q))
        eps = rng.normal(shape)
    mu, rho = param_leaves(q)
    return mu + softplus_op(rho) * Tensor(eps)


def _anchor(p, size):
    if isinstance(p, GaussianPrior):
        return np.zeros(size), np.full(size, p.std)
    if isinstance(p, PosteriorSnapshot):
        return p.mu, p.sigma
    return p.mu, kernels.softplus(p.rho)


def kl_diag(q, p):
    """Analytic KL(q || p) between diagonal Gaussians, as a scalar Tensor.

    ``p`` may be a posterior, a snapshot or a :class:`GaussianPrior`. Under an
    active tape the result is differentiable w.r.t. ``q.mu`` and ``q.rho``.
    """
    if not isinstance(p, GaussianPrior) and len(p.mu) != len(q):
        raise ContractError(f"KL dimension mismatch: {len(q)} vs {len(p.mu)}")
    mu_p, sig_p = _anchor(p, len(q))
    mu, rho = param_leaves(q)
    value, g_mu, g_rho = kernels.kl_diag_grad(q.mu, q.rho, mu_p, sig_p)
    return record(np.asarray(value), (mu, rho), lambda g: (g * g_mu, g * g_rho))


def save_snapshot(snap, path):
    path = Path(path)
    if path.suffix == ".json":
        doc = {"task_index": snap.task_index, "layer_spec": list(snap.layer_spec),
               "mu": snap.mu.tolist(), "rho": snap.rho.tolist()}
        path.write_text(json.dumps(doc))
        return path
    spec = list(snap.layer_spec)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Iq", _VERSION, snap.task_index))
        fh.write(struct.pack(f"<I{len(spec)}I", len(spec), *spec))
        fh.write(struct.pack("<Q", snap.mu.size))
        fh.write(snap.mu.astype("<f8").tobytes())
        fh.write(snap.rho.astype("<f8").tobytes())
    return path


def load_snapshot(path):
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        return PosteriorSnapshot(np.array(doc["mu"]), np.array(doc["rho"]),
                                 tuple(doc["layer_spec"]), int(doc["task_index"]))
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a snapshot file")
    version, task_index = struct.unpack_from("<Iq", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    (L,) = struct.unpack_from("<I", data, 16)
    spec = struct.unpack_from(f"<{L}I", data, 20)
    off = 20 + 4 * L
    (P,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) != off + 16 * P:
        raise OSError(f"{path}: truncated snapshot")
    mu = np.frombuffer(data, "<f8", P, off).astype(np.float64)
    rho = np.frombuffer(data, "<f8", P, off + 8 * P).astype(np.float64)
    return PosteriorSnapshot(mu, rho, tuple(spec), int(task_index))
