"""Client-side training, benign and malicious.

Malicious behavior is the benign SGD loop plus optional transforms: data
poisoning happens upstream (the shard already contains stamped examples),
gradient masking and model projection hook into the loop, and scaling or
statistical crafting rewrite the finished update. With every transform
disabled the malicious path is bit-identical to the benign one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, TriggerSpec, concat
from .errors import ConfigError, EmptyShardError
from .nn import ModelState, OptimizerState, backward, flatten, sgd_step, unflatten
from .rng import child_rng

Array = np.ndarray

ATTACK_KINDS = ("badnet", "dba", "scaling", "pgd", "neurotoxin", "lie")


@dataclass
class TrainConfig:
    """Local SGD settings shared by benign and malicious clients."""

    epochs: int = 2
    learning_rate: float = 0.1
    lr_decay: float = 0.99
    momentum: float = 0.0
    batch_size: int = 16

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class AttackSpec:
    """Which attack a malicious client runs, with its knobs."""

    kind: str = "badnet"
    scale_factor: float = 2.0
    pgd_radius_factor: float = 1.0
    mask_percentile: float = 0.75
    lie_z: float = 1.5
    dba_part_index: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}, expected one of {ATTACK_KINDS}")
        if self.scale_factor <= 0:
            raise ConfigError(f"scale_factor must be > 0, got {self.scale_factor}")
        if self.pgd_radius_factor <= 0:
            raise ConfigError(f"pgd_radius_factor must be > 0, got {self.pgd_radius_factor}")
        if not 0.0 < self.mask_percentile < 1.0:
            raise ConfigError(f"mask_percentile must lie in (0, 1), got {self.mask_percentile}")
        if self.lie_z <= 0:
            raise ConfigError(f"lie_z must be > 0, got {self.lie_z}")
        if not 0 <= self.dba_part_index <= 3:
            raise ConfigError(f"dba_part_index must lie in 0..3, got {self.dba_part_index}")


def _run_local_sgd(theta_global, shard, cfg, seed, grad_transform=None, epoch_hook=None):
    """Minibatch SGD from the global model; returns the update vector."""
    if len(shard) == 0:
        raise EmptyShardError("client shard is empty")
    theta0 = flatten(theta_global)
    model = unflatten(theta0, theta_global.shape_signature)
    opt = OptimizerState(learning_rate=cfg.learning_rate, momentum=cfg.momentum)
    rng = child_rng(int(seed))
    for _ in range(cfg.epochs):
        order = rng.permutation(len(shard))
        for lo in range(0, len(order), cfg.batch_size):
            batch = shard.subset(order[lo : lo + cfg.batch_size])
            grad = backward(model, batch)
            if grad_transform is not None:
                grad = grad_transform(grad)
            sgd_step(model, grad, opt)
        if epoch_hook is not None:
            epoch_hook(model)
    return flatten(model) - theta0


def benign_local_train(theta_global: ModelState, shard: Dataset, cfg: TrainConfig, seed: int) -> Array:
    """Honest client: minimize cross-entropy on the local shard."""
    return _run_local_sgd(theta_global, shard, cfg, seed)


def malicious_local_train(
    theta_global: ModelState,
    clean_part: Dataset,
    poisoned_part: Dataset,
    cfg: TrainConfig,
    seed: int,
    grad_transform=None,
    epoch_hook=None,
) -> Array:
    """Dual-objective client: the same SGD over the clean + poisoned shard."""
    if len(clean_part) == 0 and len(poisoned_part) == 0:
        raise EmptyShardError("client shard is empty")
    shard = concat(clean_part, poisoned_part)
    return _run_local_sgd(theta_global, shard, cfg, seed, grad_transform, epoch_hook)


def apply_scaling(delta: Array, factor: float) -> Array:
    """Amplify the whole update."""
    if factor <= 0:
        raise ValueError(f"scale factor must be > 0, got {factor}")
    return np.asarray(delta, dtype=np.float64) * float(factor)


def apply_pgd(theta_mal: Array, theta_global: Array, radius_factor: float) -> Array:
    """Project a model onto the L2 ball around the global model.

    The radius is radius_factor times the global model norm; in-ball
    models pass through unchanged.
    """
    if radius_factor <= 0:
        raise ValueError(f"radius_factor must be > 0, got {radius_factor}")
    theta_mal = np.asarray(theta_mal, dtype=np.float64)
    theta_global = np.asarray(theta_global, dtype=np.float64)
    radius = radius_factor * np.linalg.norm(theta_global)
    v = theta_mal - theta_global
    dist = np.linalg.norm(v)
    if dist == 0.0 or dist <= radius:
        return theta_mal
    return theta_global + v * (radius / dist)


def neurotoxin_mask(prev_agg_delta: Array | None, mask_percentile: float) -> Array:
    """Boolean mask of the coordinates with bottom-percentile magnitude
    in the previous round's aggregated update. An absent or all-zero
    history unmasks everything.
    """
    if prev_agg_delta is None:
        raise ValueError("prev_agg_delta is required; pass a zero vector before round 1")
    prev = np.abs(np.asarray(prev_agg_delta, dtype=np.float64))
    mask = np.zeros(prev.shape, dtype=bool)
    if not prev.any():
        mask[:] = True
        return mask
    k = math.floor(mask_percentile * prev.size)
    mask[np.argsort(prev, kind="stable")[:k]] = True
    return mask


def neurotoxin_constrain(grad: Array, prev_agg_delta: Array, mask_percentile: float) -> Array:
    """Zero every gradient coordinate outside the low-importance mask."""
    mask = neurotoxin_mask(prev_agg_delta, mask_percentile)
    return np.where(mask, np.asarray(grad, dtype=np.float64), 0.0)


def lie_craft(reference_updates, z: float) -> Array:
    """Coordinate mean of the reference cohort plus z standard deviations."""
    refs = [np.asarray(u, dtype=np.float64) for u in reference_updates]
    if not refs:
        raise ValueError("lie_craft needs at least one reference update")
    stacked = np.stack(refs)
    return stacked.mean(axis=0) + z * stacked.std(axis=0)


def dba_subtrigger(trigger: TriggerSpec, part: int) -> TriggerSpec:
    """One of four disjoint pieces of the plus trigger.

    Pixels are grouped by position relative to the pattern center:
    group 0 is the north arm plus the center, then east, south, west.
    The four groups union back to the full mask.
    """
    if not 0 <= part <= 3:
        raise ValueError(f"part must lie in 0..3, got {part}")
    if len(trigger.pattern) < 4:
        raise ValueError(f"trigger has {len(trigger.pattern)} pixels, need >= 4 to decompose")
    rows = sorted(r for r, _, _ in trigger.pattern)
    cols = sorted(c for _, c, _ in trigger.pattern)
    rc = rows[(len(rows) - 1) // 2]
    cc = cols[(len(cols) - 1) // 2]
    groups: list[list[tuple[int, int, float]]] = [[], [], [], []]
    for r, c, v in trigger.pattern:
        if r < rc:
            groups[0].append((r, c, v))
        elif r > rc:
            groups[2].append((r, c, v))
        elif c > cc:
            groups[1].append((r, c, v))
        elif c < cc:
            groups[3].append((r, c, v))
        else:
            groups[0].append((r, c, v))
    return TriggerSpec(tuple(groups[part]), anchor=trigger.anchor, shape_name=trigger.shape_name)
