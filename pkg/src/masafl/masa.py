"""Unlearning-based filtering aggregation.

The server rebuilds each client's model, blends it with the round mean
(fusion), runs a few epochs of gradient ascent on a clean proxy set while
summing the observed losses, and drops the clients whose accumulated loss
sits too far above the cohort median. Backdoored models shed their main
task much faster under ascent, so their accumulated loss blows up first.
Unlearning is diagnostic only: the aggregate is the mean of the raw,
unfused updates of the surviving clients.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .defenses import AggregationOutcome
from .errors import ConfigError
from .nn import ModelState, OptimizerState, backward, cross_entropy, flatten, forward, sgd_step, unflatten, vec_mean
from .rng import child_rng

Array = np.ndarray


@dataclass
class MasaConfig:
    """Hyperparameters of the unlearning filter.

    fusion_degree must exceed 0.5 so the client's own update dominates the
    blend; 1.0 disables fusion entirely.
    """

    fusion_degree: float = 0.7
    filter_radius: float = 1.0
    unlearn_epochs: int = 5
    unlearn_rate: float = 0.001
    unlearn_momentum: float = 0.9
    batch_size: int = 64
    loss_cap: float = 50.0

    def __post_init__(self):
        if not 0.5 < self.fusion_degree <= 1.0:
            raise ConfigError(
                f"fusion_degree must lie in (0.5, 1], got {self.fusion_degree}"
            )
        if self.filter_radius <= 0:
            raise ConfigError(f"filter_radius must be > 0, got {self.filter_radius}")
        if self.unlearn_epochs < 1:
            raise ConfigError(f"unlearn_epochs must be >= 1, got {self.unlearn_epochs}")
        if self.unlearn_rate <= 0:
            raise ConfigError(f"unlearn_rate must be > 0, got {self.unlearn_rate}")
        if not 0.0 <= self.unlearn_momentum < 1.0:
            raise ConfigError(
                f"unlearn_momentum must lie in [0, 1), got {self.unlearn_momentum}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_cap <= 0:
            raise ConfigError(f"loss_cap must be > 0, got {self.loss_cap}")


@dataclass
class UnlearningTrace:
    """Losses observed while gradient-ascending one client's model."""

    client_id: int
    accumulated_loss: float
    per_batch_losses: list[float] = field(default_factory=list)
    cap_events: int = 0


@dataclass
class MdsResult:
    """Median deviation scores: (value - median) / population std."""

    scores: Array
    median: float
    sigma: float


def fuse(theta_prev: ModelState, delta_i: Array, delta_bar: Array, fusion_degree: float) -> ModelState:
    """Reconstruct a client model blended with the round-mean update."""
    if not 0.5 < fusion_degree <= 1.0:
        raise ConfigError(f"fusion_degree must lie in (0.5, 1], got {fusion_degree}")
    theta = flatten(theta_prev)
    delta_i = np.asarray(delta_i, dtype=np.float64)
    delta_bar = np.asarray(delta_bar, dtype=np.float64)
    if delta_i.shape != theta.shape or delta_bar.shape != theta.shape:
        raise ConfigError(
            f"update shapes {delta_i.shape}/{delta_bar.shape} do not match "
            f"model dimension {theta.shape}"
        )
    fused = theta + fusion_degree * delta_i + (1.0 - fusion_degree) * delta_bar
    return unflatten(fused, theta_prev.shape_signature)


def unlearn_and_accumulate(
    model: ModelState, proxy: Dataset, cfg: MasaConfig, seed: int, client_id: int = 0
) -> UnlearningTrace:
    """Gradient-ascend a copy of the model on the proxy set.

    Each minibatch loss is recorded (capped at loss_cap) before the ascent
    step that consumes it. The caller's model is left untouched.
    """
    if len(proxy) == 0:
        raise ValueError("proxy dataset is empty")
    work = model.copy()
    opt = OptimizerState(learning_rate=cfg.unlearn_rate, momentum=cfg.unlearn_momentum)
    rng = child_rng(int(seed), int(client_id))
    losses: list[float] = []
    cap_events = 0
    for _ in range(cfg.unlearn_epochs):
        order = rng.permutation(len(proxy))
        for lo in range(0, len(order), cfg.batch_size):
            batch = proxy.subset(order[lo : lo + cfg.batch_size])
            loss = cross_entropy(forward(work, batch), batch.labels)
            if not np.isfinite(loss) or loss > cfg.loss_cap:
                loss = cfg.loss_cap
                cap_events += 1
            losses.append(float(loss))
            grad = backward(work, batch)
            if not np.all(np.isfinite(grad)):
                # saturated model: ascent has nowhere to go, skip the step
                continue
            sgd_step(work, grad, opt, ascend=True)
    return UnlearningTrace(
        client_id=client_id,
        accumulated_loss=float(sum(losses)),
        per_batch_losses=losses,
        cap_events=cap_events,
    )


def mds(values) -> MdsResult:
    """Score each value by its distance above the median in std units.

    The median of an even-length set is its lower-middle element, so the
    median is always a member and scores exactly zero. A zero std (all
    values equal) defines every score as zero.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"mds needs a nonempty 1-D array, got shape {a.shape}")
    median = float(np.sort(a, kind="stable")[(a.size - 1) // 2])
    sigma = float(a.std())
    if sigma == 0.0:
        return MdsResult(np.zeros(a.size), median, 0.0)
    return MdsResult((a - median) / sigma, median, sigma)


def filter_scores(scores, radius: float) -> list[int]:
    """Positions whose score is strictly below the radius."""
    if radius <= 0:
        raise ConfigError(f"filter radius must be > 0, got {radius}")
    return [i for i, c in enumerate(np.asarray(scores, dtype=np.float64)) if c < radius]


def masa_aggregate(
    updates,
    theta_prev: ModelState,
    proxy: Dataset,
    cfg: MasaConfig,
    seed: int,
    client_ids=None,
    n_workers: int = 1,
) -> AggregationOutcome:
    """Full pipeline: fuse, unlearn, score, filter, average the survivors.

    If every client scores at or above the radius, the single lowest-score
    client is kept so the round still produces an update; the diagnostics
    flag the fallback.
    """
    updates = [np.asarray(u, dtype=np.float64) for u in updates]
    if not updates:
        raise ValueError("masa_aggregate needs at least one update")
    ids = list(range(len(updates))) if client_ids is None else [int(i) for i in client_ids]
    if len(ids) != len(updates):
        raise ValueError(f"{len(updates)} updates but {len(ids)} client ids")

    delta_bar = vec_mean(updates)

    def probe(position: int) -> UnlearningTrace:
        fused = fuse(theta_prev, updates[position], delta_bar, cfg.fusion_degree)
        return unlearn_and_accumulate(fused, proxy, cfg, seed, client_id=ids[position])

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            traces = list(pool.map(probe, range(len(updates))))
    else:
        traces = [probe(i) for i in range(len(updates))]

    accumulated = np.array([t.accumulated_loss for t in traces])
    result = mds(accumulated)
    kept_positions = filter_scores(result.scores, cfg.filter_radius)
    fallback = not kept_positions
    if fallback:
        kept_positions = [int(np.argmin(result.scores))]

    global_update = vec_mean([updates[i] for i in kept_positions])
    selected = tuple(sorted(ids[i] for i in kept_positions))
    diagnostics = {
        "accumulated_losses": {ids[i]: float(accumulated[i]) for i in range(len(ids))},
        "scores": {ids[i]: float(result.scores[i]) for i in range(len(ids))},
        "median": result.median,
        "sigma": result.sigma,
        "cap_events": int(sum(t.cap_events for t in traces)),
        "fallback": fallback,
    }
    return AggregationOutcome(global_update, selected, diagnostics)
