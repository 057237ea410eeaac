"""Per-client synthetic datasets living inside a :class:`~fedmgp.features.FeatureBasis`."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureBasis

DATASET_SCHEMA = "fedmgp.dataset/1"


class InfeasibleSplitError(ValueError):
    pass


class ClassNotAssignedError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticTask:
    n_classes: int
    prototypes: np.ndarray  # (K, d)
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]


@dataclass
class ClientDataset:
    client_id: int
    X: np.ndarray  # (n, d)
    y: np.ndarray  # (n,) global class ids
    classes: tuple[int, ...]  # label space the client trains / is evaluated on
    class_proportions: np.ndarray  # (K,)

    @property
    def n(self) -> int:
        return len(self.y)

    def __len__(self) -> int:
        return len(self.y)


def base_novel_split(K: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    n_base = math.ceil(K / 2)
    return tuple(range(n_base)), tuple(range(n_base, K))


def pathological_split(K: int, N: int, rng: np.random.Generator):
    """Split classes into base/novel halves and hand each client a disjoint share of the base classes.

    Returns ``(base, novel, assignments)`` where ``assignments[c]`` is the
    sorted tuple of base classes owned by client ``c``. Group sizes differ by
    at most one; novel classes belong to nobody.
    """
    base, novel = base_novel_split(K)
    if len(base) < N:
        raise InfeasibleSplitError(f"{len(base)} base classes cannot be split across {N} clients")
    order = rng.permutation(np.array(base))
    assignments = [tuple(sorted(int(k) for k in part)) for part in np.array_split(order, N)]
    return base, novel, assignments


def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Round nonnegative ``shares`` (summing to 1) to integers summing exactly to ``total``."""
    raw = np.asarray(shares, dtype=float) * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        # stable: ties go to the lower index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(K: int, N: int, alpha: float, total_per_class: int, rng: np.random.Generator):
    """Split each class's ``total_per_class`` samples across ``N`` clients by a Dirichlet(alpha) draw.

    Returns ``(proportions, counts)`` with shapes ``(N, K)``; ``counts[:, k]``
    sums to ``total_per_class`` exactly. Rows of ``proportions`` are the
    client's class distribution (all zeros for a client that received nothing).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if total_per_class < 1 or K < 1 or N < 1:
        raise ValueError("K, N and total_per_class must be positive")
    counts = np.zeros((N, K), dtype=int)
    for k in range(K):
        share = rng.dirichlet(np.full(N, float(alpha)))
        counts[:, k] = largest_remainder(share, total_per_class)
    totals = counts.sum(axis=1, keepdims=True)
    proportions = np.divide(counts, totals, out=np.zeros((N, K)), where=totals > 0)
    return proportions, counts


def make_task(basis: FeatureBasis, K: int, base=None, novel=None) -> SyntheticTask:
    """Class prototypes ``u_C + q_k`` with ``q_k`` drawn from the basis' reserved class directions."""
    if len(basis.free_dirs) < K:
        raise ValueError(f"basis reserves {len(basis.free_dirs)} class directions, need {K}")
    if base is None or novel is None:
        base, novel = base_novel_split(K)
    prototypes = basis.global_dir[None, :] + basis.free_dirs[:K]
    return SyntheticTask(K, prototypes, tuple(base), tuple(novel))


def sample_features(
    task: SyntheticTask,
    basis: FeatureBasis,
    labels: np.ndarray,
    shift: np.ndarray,
    signal_scale: float,
    noise_sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    eta = rng.standard_normal((len(labels), basis.n_noise))
    return signal_scale * task.prototypes[labels] + shift[None, :] + noise_sigma * eta @ basis.noise_dirs


def generate_client_data(
    task: SyntheticTask,
    basis: FeatureBasis,
    client_id: int,
    counts,
    signal_scale: float,
    client_shift: float,
    noise_sigma: float,
    rng: np.random.Generator,
    allowed: tuple[int, ...] | None = None,
) -> ClientDataset:
    """Draw ``counts[k]`` samples of every class ``k``.

    ``x = signal_scale * prototype(y) + client_shift * mu_c + noise_sigma * sum_l eta_l xi_l``.
    With ``allowed`` set (pathological mode) a nonzero count outside it is an error.
    """
    counts = np.asarray(counts, dtype=int)
    if counts.shape != (task.n_classes,):
        raise ValueError("counts must have one entry per class")
    if allowed is not None:
        bad = [k for k in np.flatnonzero(counts) if k not in allowed]
        if bad:
            raise ClassNotAssignedError(f"client {client_id} is not assigned classes {bad}")
        classes = tuple(allowed)
    else:
        classes = tuple(range(task.n_classes))
    labels = np.repeat(np.arange(task.n_classes), counts)
    X = sample_features(
        task, basis, labels, client_shift * basis.client_dirs[client_id], signal_scale, noise_sigma, rng
    )
    total = counts.sum()
    props = counts / total if total > 0 else np.zeros(task.n_classes)
    return ClientDataset(client_id, X, labels, classes, props)


def write_datasets_csv(path, datasets: list[ClientDataset]) -> None:
    """One row per sample: ``client_id, y, x0 .. x{d-1}``."""
    datasets = list(datasets)
    d = datasets[0].X.shape[1] if datasets else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {DATASET_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "y"] + [f"x{i}" for i in range(d)])
        for ds in datasets:
            for x, y in zip(ds.X, ds.y):
                w.writerow([ds.client_id, int(y)] + [repr(float(v)) for v in x])


def read_datasets_csv(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Inverse of :func:`write_datasets_csv`; returns ``{client_id: (X, y)}``."""
    rows: dict[int, tuple[list, list]] = {}
    with open(Path(path), encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# schema:"):
            raise ValueError("missing schema line")
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            xs, ys = rows.setdefault(int(row[0]), ([], []))
            ys.append(int(row[1]))
            xs.append([float(v) for v in row[2:]])
    return {c: (np.array(xs), np.array(ys, dtype=int)) for c, (xs, ys) in rows.items()}
