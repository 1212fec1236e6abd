"""Server-side aggregation rules: FedAvg, the FedAvg* oracle, Multi-Krum,
RFA (smoothed Weiszfeld geometric median), and RLR sign-voting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .nn import vec_mean

Array = np.ndarray


@dataclass
class AggregationOutcome:
    """Result of one aggregation: the global update, which client ids were
    kept, and rule-specific diagnostics."""

    global_update: Array
    selected: tuple[int, ...]
    diagnostics: dict = field(default_factory=dict)


def _ids(updates, client_ids) -> list[int]:
    if client_ids is None:
        return list(range(len(updates)))
    client_ids = [int(i) for i in client_ids]
    if len(client_ids) != len(updates):
        raise ValueError(f"{len(updates)} updates but {len(client_ids)} client ids")
    return client_ids


def fedavg(updates, client_ids=None) -> AggregationOutcome:
    """Plain coordinate mean of every received update."""
    if not len(updates):
        raise ValueError("fedavg needs at least one update")
    ids = _ids(updates, client_ids)
    return AggregationOutcome(vec_mean(updates), tuple(sorted(ids)))


def fedavg_star(updates, malicious_flags, client_ids=None) -> AggregationOutcome:
    """Oracle aggregator: averages ground-truth-benign updates only."""
    ids = _ids(updates, client_ids)
    if len(malicious_flags) != len(updates):
        raise ValueError(f"{len(updates)} updates but {len(malicious_flags)} role flags")
    benign = [u for u, bad in zip(updates, malicious_flags) if not bad]
    if not benign:
        raise ValueError("fedavg_star needs at least one benign update")
    kept = tuple(sorted(i for i, bad in zip(ids, malicious_flags) if not bad))
    excluded = tuple(sorted(i for i, bad in zip(ids, malicious_flags) if bad))
    return AggregationOutcome(vec_mean(benign), kept, {"excluded": excluded})


def multi_krum(updates, f: int, m: int | None = None, client_ids=None) -> AggregationOutcome:
    """Select the m updates closest to their n-f-2 nearest neighbors.

    Each update is scored by the sum of squared L2 distances to its
    n-f-2 nearest other updates; the m lowest scores are averaged.
    """
    n = len(updates)
    ids = _ids(updates, client_ids)
    if m is None:
        m = n - f
    if n < 2 * f + 3:
        raise ConfigError(
            f"multi_krum requires n >= 2f + 3 (n={n}, f={f} gives minimum {2 * f + 3})"
        )
    if not 1 <= m <= n - f:
        raise ConfigError(f"m must lie in [1, n - f] = [1, {n - f}], got {m}")

    stacked = np.stack([np.asarray(u, dtype=np.float64) for u in updates])
    sq_dists = np.empty((n, n))
    for i in range(n):
        sq_dists[i] = ((stacked - stacked[i]) ** 2).sum(axis=1)
    np.fill_diagonal(sq_dists, np.inf)

    neighbor_count = n - f - 2
    scores = np.sort(sq_dists, axis=1)[:, :neighbor_count].sum(axis=1)
    chosen = np.argsort(scores, kind="stable")[:m]
    kept = tuple(sorted(ids[i] for i in chosen))
    return AggregationOutcome(
        vec_mean([updates[i] for i in chosen]),
        kept,
        {"scores": {ids[i]: float(scores[i]) for i in range(n)}},
    )


def rfa_geometric_median(
    updates, max_iters: int = 100, tol: float = 1e-6, smoothing: float = 1e-8, client_ids=None
) -> AggregationOutcome:
    """Smoothed Weiszfeld iteration toward the geometric median."""
    if not len(updates):
        raise ValueError("rfa needs at least one update")
    ids = _ids(updates, client_ids)
    stacked = np.stack([np.asarray(u, dtype=np.float64) for u in updates])

    def objective(v: Array) -> float:
        return float(np.linalg.norm(stacked - v, axis=1).sum())

    v = stacked.mean(axis=0)
    path = [objective(v)]
    iterations = 0
    for _ in range(max_iters):
        dists = np.linalg.norm(stacked - v, axis=1)
        weights = 1.0 / np.maximum(dists, smoothing)
        v_next = (weights[:, None] * stacked).sum(axis=0) / weights.sum()
        iterations += 1
        step = float(np.linalg.norm(v_next - v))
        v = v_next
        path.append(objective(v))
        if step < tol:
            break
    return AggregationOutcome(
        v,
        tuple(sorted(ids)),
        {"iterations": iterations, "objective_path": path, "objective": path[-1]},
    )


def rlr(updates, sign_threshold: float, server_lr: float = 1.0, client_ids=None) -> AggregationOutcome:
    """Robust learning rate: coordinates without enough sign agreement get
    their learning direction reversed."""
    if not len(updates):
        raise ValueError("rlr needs at least one update")
    if sign_threshold < 0:
        raise ValueError(f"sign_threshold must be >= 0, got {sign_threshold}")
    ids = _ids(updates, client_ids)
    stacked = np.stack([np.asarray(u, dtype=np.float64) for u in updates])
    agreement = np.abs(np.sign(stacked).sum(axis=0))
    lr_per_coord = np.where(agreement >= sign_threshold, server_lr, -server_lr)
    flipped = int((lr_per_coord < 0).sum()) if server_lr > 0 else 0
    return AggregationOutcome(
        lr_per_coord * stacked.mean(axis=0),
        tuple(sorted(ids)),
        {"flipped_coords": flipped},
    )
