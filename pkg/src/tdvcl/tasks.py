"""Task streams, IDX ingestion and the restricted replay memory."""
from __future__ import annotations

import gzip
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import ContractError
from .objectives import EMPTY_BATCH, Batch

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskDataset:
    inputs: np.ndarray
    labels: np.ndarray
    task_id: int
    class_count: int
    head: int | None = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] != labels.shape[0]:
            raise ContractError(f"inputs {inputs.shape} and labels {labels.shape} disagree")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ContractError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(inputs)):
            raise ContractError("inputs must be finite")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, index):
        return TaskDataset(self.inputs[index], self.labels[index], self.task_id,
                           self.class_count, self.head)

    def batch(self, index=None):
        head = None if self.head is None else (self.head, self.class_count)
        if index is None:
            return Batch(self.inputs, self.labels, head)
        return Batch(self.inputs[index], self.labels[index], head)


@dataclass
class TaskStream:
    tasks: list
    protocol: str

    def __post_init__(self):
        for train, test in self.tasks:
            if train.class_count != test.class_count or train.dim != test.dim:
                raise ContractError(f"train/test of task {train.task_id} disagree on shape")

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def output_size(self):
        train = self.tasks[0][0]
        heads = 1 + max((tr.head or 0) for tr, _ in self.tasks)
        return train.class_count * heads


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise OSError(f"{path}: truncated IDX file (wanted {n} bytes, got {len(data)})")
    return data


def load_idx(images_path, labels_path):
    """Big-endian IDX images/labels, optionally gzipped; pixels scaled to [0, 1]."""
    with _open(images_path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path))
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"{images_path}: image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
        pixels = np.frombuffer(_read_exact(fh, count * rows * cols, images_path), dtype=np.uint8)
    with _open(labels_path) as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, labels_path))
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"{labels_path}: label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")
        labels = np.frombuffer(_read_exact(fh, n_labels, labels_path), dtype=np.uint8)
    if n_labels != count:
        raise IdxFormatError(f"{count} images but {n_labels} labels")
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return inputs, labels.astype(np.int64)


def write_idx(images, labels, images_path, labels_path, compress=False):
    """Inverse of :func:`load_idx` for uint8 ``images`` of shape ``(N, rows, cols)``."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    opener = gzip.open if compress else open
    with opener(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with opener(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def make_permuted_stream(base_train, base_test, T, rng):
    """Task 1 keeps pixel order; tasks 2..T use fresh uniform permutations."""
    if T < 1:
        raise ContractError("T must be >= 1")
    D = base_train.dim
    tasks = []
    for t in range(1, T + 1):
        perm = np.arange(D) if t == 1 else rng.permutation(D)
        tasks.append((
            TaskDataset(base_train.inputs[:, perm], base_train.labels, t, base_train.class_count),
            TaskDataset(base_test.inputs[:, perm], base_test.labels, t, base_test.class_count),
        ))
    return TaskStream(tasks, "permuted")


def make_split_stream(base_train, base_test, pairs, multi_head=False):
    """Binary tasks over disjoint class pairs, relabelled to {0, 1}."""
    seen = [c for pair in pairs for c in pair]
    if len(seen) != len(set(seen)):
        raise ContractError(f"class pairs overlap: {pairs}")
    tasks = []
    for t, (a, b) in enumerate(pairs, start=1):
        head = t - 1 if multi_head else None
        split = []
        for base in (base_train, base_test):
            keep = (base.labels == a) | (base.labels == b)
            split.append(TaskDataset(base.inputs[keep], (base.labels[keep] == b).astype(np.int64),
                                     t, 2, head))
        tasks.append(tuple(split))
    return TaskStream(tasks, "split")


def make_synthetic_stream(T, rng, n_train=400, n_test=200, dim=20, classes=2, spread=3.0):
    """Gaussian class blobs in ``dim`` dimensions, one feature permutation per task."""
    centers = rng.normal((classes, dim)) * spread / np.sqrt(dim)
    base = []
    for n in (n_train, n_test):
        y = rng.integers(0, classes, n)
        x = centers[y] + rng.normal((n, dim)) * 0.5
        x = (x - x.min()) / (x.max() - x.min())
        base.append(TaskDataset(x, y, 1, classes))
    stream = make_permuted_stream(base[0], base[1], T, rng)
    return TaskStream(stream.tasks, "synthetic")


class ReplayBuffer:
    """Up to ``per_task`` examples from each of the ``max_tasks`` newest finished tasks."""

    def __init__(self, max_tasks, per_task):
        if max_tasks < 0 or per_task < 0:
            raise ContractError("replay budget must be non-negative")
        self.max_tasks = int(max_tasks)
        self.per_task = int(per_task)
        self.stored: OrderedDict[int, TaskDataset] = OrderedDict()
        self.last_finished = 0

    def __len__(self):
        return sum(len(d) for d in self.stored.values())

    def add(self, data, finished_id):
        if finished_id <= self.last_finished:
            raise ContractError(f"task {finished_id} is not newer than stored task {self.last_finished}")
        self.last_finished = finished_id
        if self.max_tasks == 0 or len(data) == 0:
            return self
        self.stored[finished_id] = data
        while len(self.stored) > self.max_tasks:
            self.stored.popitem(last=False)
        return self

    def union(self):
        """All stored examples as one list of per-task datasets, oldest first."""
        return list(self.stored.values())


def replay_update(buffer, finished_task, rng):
    """Store a uniform ``per_task`` subset of ``finished_task`` (whole task if smaller)."""
    n = len(finished_task)
    k = min(buffer.per_task, n)
    idx = np.sort(rng.choice(n, k, replace=False)) if k < n else np.arange(n)
    return buffer.add(finished_task.subset(idx), finished_task.task_id)


def replay_batch(buffer, lag, batch_size, rng):
    """Uniform with-replacement batch from task ``current - lag``, else ``EMPTY_BATCH``.

    The current task is the one after ``buffer.last_finished``.
    """
    if lag < 1:
        raise ContractError("replay lag must be >= 1")
    data = buffer.stored.get(buffer.last_finished + 1 - lag)
    if data is None or len(data) == 0:
        return EMPTY_BATCH
    return data.batch(rng.integers(0, len(data), batch_size))


def split_coreset(task, size, rng):
    """Reserve a random ``size`` subset; returns ``(core, remainder)``."""
    n = len(task)
    k = min(size, n)
    perm = rng.permutation(n)
    return task.subset(np.sort(perm[:k])), task.subset(np.sort(perm[k:]))


class CoreSet(ReplayBuffer):
    """Core-set examples reserved before training, one entry per observed task."""

    def add_core(self, core):
        return self.add(core, core.task_id)
