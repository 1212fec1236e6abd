"""Round-loop orchestration: sampling, local training, defense dispatch,
global updates, metric bookkeeping, and whole-experiment runs.

Every random choice is keyed by (experiment seed, context, round, client),
so an experiment is a pure function of its config: re-runs and different
worker counts produce identical reports.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .attacks import (
    AttackSpec,
    TrainConfig,
    apply_pgd,
    apply_scaling,
    benign_local_train,
    dba_subtrigger,
    lie_craft,
    malicious_local_train,
    neurotoxin_mask,
)
from .data import (
    Dataset,
    PoisonSpec,
    gen_synthetic,
    partition_dirichlet,
    partition_iid,
    poison_shard,
    sample_proxy,
    stamp_dataset,
)
from .defenses import AggregationOutcome, fedavg, fedavg_star, multi_krum, rfa_geometric_median, rlr
from .errors import ConfigError
from .masa import MasaConfig, masa_aggregate
from .nn import ModelState, flatten, forward, init_model, l2_norm, param_count, unflatten
from .rng import child_rng

Array = np.ndarray

DEFENSES = ("fedavg", "fedavg_star", "multi_krum", "rfa", "rlr", "masa")
FILTERING_DEFENSES = ("fedavg_star", "multi_krum", "masa")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one simulated federation."""

    n_clients: int = 20
    clients_per_round: int | None = None
    rounds: int = 40
    attack_ratio: float = 0.2
    attack: AttackSpec | None = field(default_factory=AttackSpec)
    poison: PoisonSpec = field(default_factory=PoisonSpec)
    distribution: str = "iid"
    dirichlet_alpha: float = 0.5
    defense: str = "masa"
    defense_params: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    masa: MasaConfig = field(default_factory=MasaConfig)
    classes: int = 8
    per_class: int = 200
    test_per_class: int = 50
    image_shape: tuple[int, int] = (10, 10)
    hidden_units: int = 64
    proxy_fraction: float = 0.01
    proxy_shifted: bool = False
    seed: int = 0
    n_workers: int = 1

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackSpec(**self.attack)
        if isinstance(self.poison, dict):
            self.poison = PoisonSpec(**self.poison)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.masa, dict):
            self.masa = MasaConfig(**self.masa)
        self.image_shape = tuple(self.image_shape)
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.clients_per_round is None:
            self.clients_per_round = self.n_clients
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ConfigError(
                f"clients_per_round must lie in [1, {self.n_clients}], "
                f"got {self.clients_per_round}"
            )
        if not 0.0 <= self.attack_ratio <= 1.0:
            raise ConfigError(f"attack_ratio must lie in [0, 1], got {self.attack_ratio}")
        if self.n_malicious * 2 >= self.n_clients and self.n_malicious > 0:
            raise ConfigError(
                f"attack_ratio {self.attack_ratio} gives {self.n_malicious} malicious "
                f"clients of {self.n_clients}; fewer than half must be malicious"
            )
        if self.distribution not in ("iid", "dirichlet"):
            raise ConfigError(
                f"distribution must be 'iid' or 'dirichlet', got {self.distribution!r}"
            )
        if self.dirichlet_alpha <= 0:
            raise ConfigError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}, expected one of {DEFENSES}")
        if not 0.0 < self.proxy_fraction <= 1.0:
            raise ConfigError(
                f"proxy_fraction must lie in (0, 1], got {self.proxy_fraction}"
            )
        if self.n_workers < 1:
            raise ConfigError(f"n_workers must be >= 1, got {self.n_workers}")

    @property
    def n_malicious(self) -> int:
        if self.attack is None:
            return 0
        return int(round(self.attack_ratio * self.n_clients))


@dataclass
class RoundReport:
    """Outcome of one aggregation round."""

    round_index: int
    ma: float
    ba: float
    ra: float
    tpr: float | None
    fpr: float | None
    sampled: tuple[int, ...]
    malicious_sampled: tuple[int, ...]
    selected: tuple[int, ...]
    global_update_norm: float
    unlearning: dict | None = None

    @property
    def n_selected(self) -> int:
        return len(self.selected)


@dataclass
class ExperimentReport:
    """All round reports plus converged-phase summary statistics."""

    config: dict
    rounds: list[RoundReport]
    summary: dict


@dataclass
class SimState:
    """Mutable federation state threaded through the round loop."""

    model: ModelState
    shards: list[Dataset]
    poisoned_shards: dict[int, tuple[Dataset, Dataset]]
    proxy: Dataset
    clean_test: Dataset
    triggered_test: Dataset
    malicious_ids: frozenset[int]
    prev_agg_delta: Array
    round_index: int = 0


def sample_clients(n: int, k: int, round_index: int, seed: int) -> list[int]:
    """Uniform sample without replacement, reproducible per (seed, round)."""
    if k > n:
        raise ValueError(f"cannot sample {k} of {n} clients")
    rng = child_rng(int(seed), rngmod.SAMPLE, int(round_index))
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def build_triggered_test(clean_test: Dataset, trigger, target_label: int) -> Dataset:
    """Stamp the full trigger on every non-target-class test example.

    Target-class examples are dropped: they cannot evidence a backdoor.
    Ground-truth labels are retained.
    """
    keep = np.flatnonzero(clean_test.labels != target_label)
    if keep.size == 0:
        raise ValueError("test set has no examples outside the target class")
    return stamp_dataset(clean_test.subset(keep), trigger)


def evaluate(
    model: ModelState, clean_test: Dataset, triggered_test: Dataset, target_label: int
) -> tuple[float, float, float]:
    """(MA, BA, RA) percentages.

    MA: clean examples classified to their label. BA: triggered examples
    classified to the target. RA: triggered examples still classified to
    their ground-truth label.
    """
    if len(clean_test) == 0 or len(triggered_test) == 0:
        raise ValueError("evaluation sets must be nonempty")
    clean_pred = forward(model, clean_test).argmax(axis=1)
    ma = 100.0 * float((clean_pred == clean_test.labels).mean())
    trig_pred = forward(model, triggered_test).argmax(axis=1)
    ba = 100.0 * float((trig_pred == target_label).mean())
    ra = 100.0 * float((trig_pred == triggered_test.labels).mean())
    return ma, ba, ra


def detection_metrics(selected, sampled, malicious_ids) -> tuple[float | None, float | None]:
    """(TPR, FPR) percentages, treating exclusion as a positive detection.

    TPR is None when no malicious client was sampled; FPR is None when no
    benign client was sampled.
    """
    selected = set(selected)
    sampled = list(sampled)
    if not set(selected) <= set(sampled):
        raise ValueError("selected ids must be a subset of sampled ids")
    malicious_ids = set(malicious_ids)
    mal = [i for i in sampled if i in malicious_ids]
    ben = [i for i in sampled if i not in malicious_ids]
    tpr = 100.0 * sum(1 for i in mal if i not in selected) / len(mal) if mal else None
    fpr = 100.0 * sum(1 for i in ben if i not in selected) / len(ben) if ben else None
    return tpr, fpr


def build_experiment(cfg: ExperimentConfig) -> SimState:
    """Materialize datasets, shards, poisoned splits, proxy, and the model."""
    train_set = gen_synthetic(
        cfg.classes, cfg.per_class, cfg.image_shape, seed=cfg.seed
    )
    test_seed_rng = child_rng(cfg.seed, rngmod.TEST)
    test_set = gen_synthetic(
        cfg.classes,
        cfg.test_per_class,
        cfg.image_shape,
        seed=int(test_seed_rng.integers(0, 2**31)),
    )
    if cfg.distribution == "iid":
        shards = partition_iid(train_set, cfg.n_clients, seed=cfg.seed)
    else:
        shards = partition_dirichlet(train_set, cfg.n_clients, cfg.dirichlet_alpha, seed=cfg.seed)

    malicious_ids = frozenset(range(cfg.n_malicious))
    poisoned_shards: dict[int, tuple[Dataset, Dataset]] = {}
    for rank, cid in enumerate(sorted(malicious_ids)):
        spec = cfg.poison
        if cfg.attack is not None and cfg.attack.kind == "dba":
            part = dba_subtrigger(spec.trigger, rank % 4)
            spec = replace(spec, trigger=part)
        poison_seed = int(child_rng(cfg.seed, rngmod.POISON, cid).integers(0, 2**31))
        poisoned_shards[cid] = poison_shard(shards[cid], spec, seed=poison_seed)

    proxy = sample_proxy(train_set, cfg.proxy_fraction, seed=cfg.seed, shifted=cfg.proxy_shifted)
    input_dim = cfg.image_shape[0] * cfg.image_shape[1]
    model = init_model((input_dim, cfg.hidden_units, cfg.classes), seed=cfg.seed)
    triggered = build_triggered_test(test_set, cfg.poison.trigger, cfg.poison.target_label)
    return SimState(
        model=model,
        shards=shards,
        poisoned_shards=poisoned_shards,
        proxy=proxy,
        clean_test=test_set,
        triggered_test=triggered,
        malicious_ids=malicious_ids,
        prev_agg_delta=np.zeros(param_count(model.shape_signature)),
    )


def _client_update(state: SimState, cfg: ExperimentConfig, cid: int, round_cfg: TrainConfig, seed: int) -> Array:
    """One client's submitted update (Lie crafting happens at round level)."""
    if cid not in state.malicious_ids:
        return benign_local_train(state.model, state.shards[cid], round_cfg, seed)

    clean_part, poisoned_part = state.poisoned_shards[cid]
    attack = cfg.attack
    grad_transform = None
    epoch_hook = None
    if attack.kind == "neurotoxin":
        mask = neurotoxin_mask(state.prev_agg_delta, attack.mask_percentile)
        grad_transform = lambda g: np.where(mask, g, 0.0)
    if attack.kind == "pgd":
        theta_global = flatten(state.model)
        signature = state.model.shape_signature

        def epoch_hook(model):
            projected = apply_pgd(flatten(model), theta_global, attack.pgd_radius_factor)
            model.layers = unflatten(projected, signature).layers

    delta = malicious_local_train(
        state.model, clean_part, poisoned_part, round_cfg, seed,
        grad_transform=grad_transform, epoch_hook=epoch_hook,
    )
    if attack.kind == "scaling":
        delta = apply_scaling(delta, attack.scale_factor)
    return delta


def run_round(state: SimState, cfg: ExperimentConfig) -> RoundReport:
    """Advance the federation by one round and report its metrics."""
    state.round_index += 1
    t = state.round_index
    sampled = sample_clients(cfg.n_clients, cfg.clients_per_round, t, cfg.seed)
    mal_sampled = tuple(i for i in sampled if i in state.malicious_ids)

    eff_lr = cfg.train.learning_rate * cfg.train.lr_decay ** (t - 1)
    round_cfg = replace(cfg.train, learning_rate=eff_lr)
    seeds = {
        cid: int(child_rng(cfg.seed, rngmod.ROUND, t, cid).integers(0, 2**31))
        for cid in sampled
    }

    def compute(cid: int) -> Array:
        return _client_update(state, cfg, cid, round_cfg, seeds[cid])

    if cfg.n_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
            updates = list(pool.map(compute, sampled))
    else:
        updates = [compute(cid) for cid in sampled]

    if cfg.attack is not None and cfg.attack.kind == "lie" and mal_sampled:
        refs = [updates[sampled.index(cid)] for cid in mal_sampled]
        crafted = lie_craft(refs, cfg.attack.lie_z)
        for cid in mal_sampled:
            updates[sampled.index(cid)] = crafted

    outcome = _aggregate(state, cfg, updates, sampled, t)
    state.model = unflatten(
        flatten(state.model) + outcome.global_update, state.model.shape_signature
    )
    state.prev_agg_delta = outcome.global_update

    ma, ba, ra = evaluate(state.model, state.clean_test, state.triggered_test, cfg.poison.target_label)
    if cfg.defense in FILTERING_DEFENSES:
        tpr, fpr = detection_metrics(outcome.selected, sampled, state.malicious_ids)
    else:
        tpr, fpr = None, None
    unlearning = None
    if cfg.defense == "masa":
        unlearning = {
            "accumulated_losses": outcome.diagnostics["accumulated_losses"],
            "scores": outcome.diagnostics["scores"],
            "cap_events": outcome.diagnostics["cap_events"],
            "fallback": outcome.diagnostics["fallback"],
        }
    return RoundReport(
        round_index=t,
        ma=ma,
        ba=ba,
        ra=ra,
        tpr=tpr,
        fpr=fpr,
        sampled=tuple(sampled),
        malicious_sampled=mal_sampled,
        selected=outcome.selected,
        global_update_norm=l2_norm(outcome.global_update),
        unlearning=unlearning,
    )


def _aggregate(state: SimState, cfg: ExperimentConfig, updates, sampled, t: int) -> AggregationOutcome:
    params = cfg.defense_params
    n = len(updates)
    if cfg.defense == "fedavg":
        return fedavg(updates, client_ids=sampled)
    if cfg.defense == "fedavg_star":
        flags = [cid in state.malicious_ids for cid in sampled]
        return fedavg_star(updates, flags, client_ids=sampled)
    if cfg.defense == "multi_krum":
        f = int(params.get("f", math.ceil(0.25 * n)))
        m = params.get("m")
        m = int(m) if m is not None else None
        return multi_krum(updates, f, m, client_ids=sampled)
    if cfg.defense == "rfa":
        return rfa_geometric_median(
            updates,
            max_iters=int(params.get("max_iters", 100)),
            tol=float(params.get("tol", 1e-6)),
            smoothing=float(params.get("smoothing", 1e-8)),
            client_ids=sampled,
        )
    if cfg.defense == "rlr":
        threshold = float(params.get("sign_threshold", math.ceil(0.25 * n) + 1))
        return rlr(updates, threshold, float(params.get("server_lr", 1.0)), client_ids=sampled)
    if cfg.defense == "masa":
        masa_seed = int(child_rng(cfg.seed, rngmod.MASA, t).integers(0, 2**31))
        return masa_aggregate(
            updates, state.model, state.proxy, cfg.masa, masa_seed,
            client_ids=sampled, n_workers=cfg.n_workers,
        )
    raise ConfigError(f"unknown defense {cfg.defense!r}")


def summarize(rounds: list[RoundReport]) -> dict:
    """Converged-phase means: metrics over the final quarter of rounds,
    detection rates both over all rounds and excluding the first quarter."""
    t = len(rounds)
    tail = rounds[-max(1, t // 4) :]
    post_warmup = rounds[t // 4 :]

    def mean_of(reports, attr):
        vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "final_ma": mean_of(tail, "ma"),
        "final_ba": mean_of(tail, "ba"),
        "final_ra": mean_of(tail, "ra"),
        "tpr_all": mean_of(rounds, "tpr"),
        "fpr_all": mean_of(rounds, "fpr"),
        "tpr_post_warmup": mean_of(post_warmup, "tpr"),
        "fpr_post_warmup": mean_of(post_warmup, "fpr"),
        "rounds": t,
    }


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run the full round loop; the report is a pure function of cfg."""
    from .reporting import config_to_dict

    state = build_experiment(cfg)
    rounds = [run_round(state, cfg) for _ in range(cfg.rounds)]
    return ExperimentReport(
        config=config_to_dict(cfg),
        rounds=rounds,
        summary=summarize(rounds),
    )
