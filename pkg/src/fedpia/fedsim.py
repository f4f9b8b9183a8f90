"""Federated orchestration: rounds, local training, evaluation, metrics.

A federation is a shared frozen backbone, K clients (private data split,
adapter stack, head, optimizer, RNG substream), and one global adapter
stack. Only adapter stacks ever cross the client/server boundary; heads and
optimizer state are client-private because class counts differ per client.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, PartitionSpec, dirichlet_partition, gen_synthetic
from .errors import ConfigError, DataError, ShapeError
from .model import (
    AdapterStack,
    Backbone,
    ClassifierHead,
    OptimizerState,
    adamw_step,
    forward,
    init_adapters,
    init_backbone,
    init_head,
    init_optimizer,
    loss_and_backward,
    lr_at,
    trainable_params,
)
from .numerics import Rng, sigmoid
from .pia import FusionConfig, client_pia, fedavg, merge_stacks, server_pia

__all__ = [
    "ModelConfig",
    "DataConfig",
    "ExperimentConfig",
    "ClientState",
    "ClientRoundRecord",
    "RoundMetrics",
    "Federation",
    "build_federation",
    "local_train",
    "run_round",
    "run_experiment",
    "evaluate",
    "spike_score",
    "benchmark_config",
    "METHODS",
]

METHODS = ("fedpia", "fedavg_adapters", "local_only", "full_finetune", "classifier_only")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16
    bottleneck: int = 4
    depth: int = 2
    adapter_init_std: float = 0.01
    shared_adapter_init: bool = True


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 2000
    features: int = 12
    num_classes: int = 8
    kind: str = "single"  # "single" | "multi" | "mixed"
    margin: float = 2.0
    concentration: float = 0.5
    class_masks: list[list[int]] | None = None
    feature_shift: bool = False
    eval_frac: float = 0.25
    mixed_single_clients: int = 3

    def __post_init__(self):
        if self.kind not in ("single", "multi", "mixed"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if not (0.0 < self.eval_frac < 1.0):
            raise ConfigError("eval_frac must lie in (0, 1)")
        if self.kind == "mixed" and self.class_masks is not None:
            raise ConfigError("class_masks are not supported with mixed task kinds")


@dataclass(frozen=True)
class ExperimentConfig:
    """Full experiment description; defaults follow the training protocol
    (lr 1e-4, batch 16, 30 rounds, 10% warmup, weight decay 0.01)."""

    methods: tuple[str, ...] = ("fedpia",)
    clients: int = 5
    rounds: int = 30
    local_steps: int = 100
    batch_size: int = 16
    base_lr: float = 0.0001
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    seeds: tuple[int, ...] = (0,)
    server_pia_on: bool = True
    client_pia_on: bool = True
    dataset_fraction: float = 1.0
    fusion: FusionConfig = field(default_factory=FusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r} (choose from {METHODS})")
        if self.clients < 1 or self.rounds < 1 or self.local_steps < 1:
            raise ConfigError("clients, rounds and local_steps must be >= 1")
        if not (0.0 < self.dataset_fraction <= 1.0):
            raise ConfigError("dataset_fraction must lie in (0, 1]")
        if self.data.kind == "mixed" and not (
            1 <= self.data.mixed_single_clients < self.clients
        ):
            raise ConfigError("mixed kind needs 1 <= mixed_single_clients < clients")


@dataclass
class ClientState:
    id: int
    train: Dataset
    eval: Dataset
    stack: AdapterStack
    head: ClassifierHead
    backbone: Backbone
    rng: Rng
    opt: OptimizerState | None = None

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def kind(self) -> str:
        return self.train.kind


@dataclass
class ClientRoundRecord:
    client_id: int
    loss_start: float
    loss_end: float
    accuracy: float
    macro_f1: float


@dataclass
class RoundMetrics:
    round_index: int
    clients: list[ClientRoundRecord]
    mean_loss_start: float
    mean_loss_end: float
    mean_accuracy: float
    mean_macro_f1: float
    wall_time: float = 0.0

    def to_record(self, method: str, seed: int) -> dict:
        # wall_time intentionally stays out: metrics files must be byte-
        # identical across reruns of the same config and seed.
        return {
            "type": "round",
            "method": method,
            "seed": seed,
            "round": self.round_index,
            "clients": [
                {
                    "id": c.client_id,
                    "loss_start": c.loss_start,
                    "loss_end": c.loss_end,
                    "accuracy": c.accuracy,
                    "macro_f1": c.macro_f1,
                }
                for c in self.clients
            ],
            "mean_loss_start": self.mean_loss_start,
            "mean_loss_end": self.mean_loss_end,
            "mean_accuracy": self.mean_accuracy,
            "mean_macro_f1": self.mean_macro_f1,
        }


@dataclass
class Federation:
    backbone: Backbone
    clients: list[ClientState]
    global_stack: AdapterStack


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}\x1f{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _split_train_eval(
    ds: Dataset, rng: Rng, eval_frac: float, dataset_fraction: float
) -> tuple[Dataset, Dataset]:
    n = len(ds)
    if n < 2:
        raise DataError("client partition too small to split into train/eval")
    order = rng.permutation(n)
    n_eval = min(n - 1, max(1, int(round(eval_frac * n))))
    eval_idx = order[:n_eval]
    train_idx = order[n_eval:]
    if dataset_fraction < 1.0:
        keep = max(1, int(np.ceil(dataset_fraction * len(train_idx))))
        train_idx = train_idx[:keep]
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(eval_idx))


def _client_partitions(cfg: ExperimentConfig, seed: int) -> list[Dataset]:
    d = cfg.data
    shift_seeds = None
    if d.feature_shift:
        shift_seeds = [_derive_seed(seed, f"shift{k}") for k in range(cfg.clients)]

    if d.kind in ("single", "multi"):
        ds = gen_synthetic(
            _derive_seed(seed, "data"),
            d.n_samples,
            d.features,
            d.num_classes,
            d.kind,
            d.margin,
        )
        spec = PartitionSpec(
            clients=cfg.clients,
            concentration=d.concentration,
            seed=_derive_seed(seed, "partition"),
            class_masks=d.class_masks,
            feature_transform_seeds=shift_seeds,
        )
        return dirichlet_partition(ds, spec)

    # Mixed task kinds: the first clients share a single-label problem, the
    # rest a multilabel one, over the same feature width.
    s = d.mixed_single_clients
    single = gen_synthetic(
        _derive_seed(seed, "data/single"),
        d.n_samples,
        d.features,
        d.num_classes,
        "single",
        d.margin,
    )
    multi = gen_synthetic(
        _derive_seed(seed, "data/multi"),
        d.n_samples,
        d.features,
        d.num_classes,
        "multi",
        d.margin,
    )
    parts = dirichlet_partition(
        single,
        PartitionSpec(
            clients=s,
            concentration=d.concentration,
            seed=_derive_seed(seed, "partition/single"),
            feature_transform_seeds=shift_seeds[:s] if shift_seeds else None,
        ),
    )
    parts += dirichlet_partition(
        multi,
        PartitionSpec(
            clients=cfg.clients - s,
            concentration=d.concentration,
            seed=_derive_seed(seed, "partition/multi"),
            feature_transform_seeds=shift_seeds[s:] if shift_seeds else None,
        ),
    )
    return parts


def build_federation(cfg: ExperimentConfig, seed: int, method: str) -> Federation:
    """Materialize data, backbone, per-client state and the global stack."""
    root = Rng(seed)
    parts = _client_partitions(cfg, seed)
    backbone = init_backbone(
        root.child("backbone"), cfg.data.features, cfg.model.width, cfg.model.depth
    )

    if cfg.model.shared_adapter_init:
        template = init_adapters(
            root.child("adapters_shared"),
            cfg.model.width,
            cfg.model.bottleneck,
            cfg.model.depth,
            cfg.model.adapter_init_std,
        )
        global_stack = template.copy()
    else:
        template = None
        global_stack = init_adapters(
            root.child("global/adapters"),
            cfg.model.width,
            cfg.model.bottleneck,
            cfg.model.depth,
            cfg.model.adapter_init_std,
        )

    clients = []
    for k, part in enumerate(parts):
        crng = root.child(f"client{k}")
        train, eval_ds = _split_train_eval(
            part, crng.child("split"), cfg.data.eval_frac, cfg.dataset_fraction
        )
        if template is not None:
            stack = template.copy()
        else:
            stack = init_adapters(
                crng.child("adapters"),
                cfg.model.width,
                cfg.model.bottleneck,
                cfg.model.depth,
                cfg.model.adapter_init_std,
            )
        head = init_head(crng.child("head"), cfg.model.width, train.num_classes)
        clients.append(
            ClientState(
                id=k,
                train=train,
                eval=eval_ds,
                stack=stack,
                head=head,
                backbone=backbone.thaw() if method == "full_finetune" else backbone,
                rng=crng,
            )
        )
    return Federation(backbone=backbone, clients=clients, global_stack=global_stack)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    warmup_frac: float


def local_train(
    client: ClientState,
    steps: int,
    sched: LrSchedule,
    round_index: int,
    step_offset: int,
    batch_size: int,
    weight_decay: float,
    method: str = "fedpia",
) -> list[float]:
    """Run AdamW over ``steps`` minibatches from the client's labeled stream.

    Optimizer moments restart each round (parameters may have been replaced
    by fusion); the lr schedule keeps advancing via ``step_offset``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = len(client.train)
    if n < 1:
        raise DataError("client has no training data")

    if method == "full_finetune":
        params = trainable_params(client.stack, client.head, client.backbone)
    elif method == "classifier_only":
        params = {
            k: v
            for k, v in trainable_params(client.stack, client.head).items()
            if k.startswith("head.")
        }
    else:
        params = trainable_params(client.stack, client.head)
    client.opt = init_optimizer(params, weight_decay)

    if batch_size >= n:
        # Full-batch regime: every step sees the whole partition, in order.
        idx = np.tile(np.arange(n), (steps, 1))
    else:
        stream = client.rng.child(f"round{round_index}/batches")
        idx = stream.integers(0, n, steps * batch_size).reshape(steps, batch_size)
    losses: list[float] = []
    for s in range(steps):
        batch = client.train.features[idx[s]]
        labels = client.train.labels[idx[s]]
        logits, cache = forward(client.backbone, client.stack, client.head, batch)
        loss, grads = loss_and_backward(
            logits,
            labels,
            cache,
            client.stack,
            client.head,
            backbone=client.backbone if method == "full_finetune" else None,
        )
        lr = lr_at(step_offset + s, sched.total_steps, sched.base_lr, sched.warmup_frac)
        adamw_step(client.opt, params, {k: grads[k] for k in params}, lr)
        losses.append(loss)
    return losses


def dataset_loss(client: ClientState, split: Dataset) -> float:
    """Mean loss of the client's current model over a whole split.

    Round records use this rather than single-minibatch losses so that
    start-of-round jumps measure the adopted parameters, not batch luck.
    """
    logits, cache = forward(client.backbone, client.stack, client.head, split.features)
    loss, _ = loss_and_backward(
        logits, split.labels, cache, client.stack, client.head
    )
    return loss


def evaluate(client: ClientState, split: Dataset) -> tuple[float, float]:
    """(accuracy, macro-F1) of the client's current model on ``split``."""
    if len(split) < 1:
        raise DataError("cannot evaluate on an empty split")
    logits, _ = forward(client.backbone, client.stack, client.head, split.features)
    if split.kind == "single":
        pred = np.argmax(logits, axis=1)
        acc = float((pred == split.labels).mean())
        f1 = _macro_f1_single(pred, split.labels, split.num_classes)
    else:
        pred = (sigmoid(logits) >= 0.5).astype(np.float64)
        acc = float((pred == split.labels).mean())
        f1 = _macro_f1_multi(pred, split.labels)
    return acc, f1


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def _macro_f1_single(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    scores = []
    for c in range(num_classes):
        tp = float(np.sum((pred == c) & (truth == c)))
        fp = float(np.sum((pred == c) & (truth != c)))
        fn = float(np.sum((pred != c) & (truth == c)))
        scores.append(_f1(tp, fp, fn))
    return float(np.mean(scores))


def _macro_f1_multi(pred: np.ndarray, truth: np.ndarray) -> float:
    scores = []
    for c in range(truth.shape[1]):
        tp = float(np.sum((pred[:, c] == 1) & (truth[:, c] == 1)))
        fp = float(np.sum((pred[:, c] == 1) & (truth[:, c] == 0)))
        fn = float(np.sum((pred[:, c] == 0) & (truth[:, c] == 1)))
        scores.append(_f1(tp, fp, fn))
    return float(np.mean(scores))


def _server_reduce(
    method: str,
    uploads: list[AdapterStack],
    sizes: list[int],
    cfg: ExperimentConfig,
) -> AdapterStack:
    """Server-side aggregation; receives nothing but adapter stacks and sizes."""
    for s in uploads:
        if not isinstance(s, AdapterStack):
            raise ShapeError("server inputs must be adapter stacks only")
    if method == "fedpia" and cfg.server_pia_on:
        return server_pia(uploads, sizes, cfg.fusion)
    return fedavg(uploads, sizes)


def run_round(
    fed: Federation,
    cfg: ExperimentConfig,
    method: str,
    round_index: int,
) -> RoundMetrics:
    """One communication round; mutates ``fed`` in place.

    fedpia: every client merges the incoming global stack into its local one
    (aligned first unless client PIA is disabled), trains, and uploads; the
    server aligns-and-integrates (or plain-FedAvgs when server PIA is
    disabled). fedavg_adapters: clients adopt the global stack verbatim and
    the server averages. Local baselines exchange nothing.
    """
    t0 = time.perf_counter()
    sched = LrSchedule(
        base_lr=cfg.base_lr,
        total_steps=cfg.rounds * cfg.local_steps,
        warmup_frac=cfg.warmup_frac,
    )
    step_offset = (round_index - 1) * cfg.local_steps

    records = []
    for client in fed.clients:
        if method == "fedpia":
            if cfg.client_pia_on:
                probe = None
                if cfg.fusion.client_cost_mode == "activation":
                    stream = client.rng.child(f"round{round_index}/probe")
                    pick = stream.integers(0, len(client.train), cfg.fusion.m_probe)
                    probe = client.train.features[pick]
                else:
                    probe = client.train.features[: cfg.fusion.m_probe]
                client.stack = client_pia(
                    fed.global_stack, client.stack, probe, cfg.fusion, client.backbone
                )
            else:
                client.stack = merge_stacks(
                    client.stack, fed.global_stack, cfg.fusion.lambda_merge
                )
        elif method == "fedavg_adapters":
            client.stack = fed.global_stack.copy()
        # local_only / full_finetune / classifier_only: keep own parameters.

        loss_start = dataset_loss(client, client.train)
        local_train(
            client,
            cfg.local_steps,
            sched,
            round_index,
            step_offset,
            cfg.batch_size,
            cfg.weight_decay,
            method,
        )
        loss_end = dataset_loss(client, client.train)
        acc, f1 = evaluate(client, client.eval)
        records.append(
            ClientRoundRecord(
                client_id=client.id,
                loss_start=loss_start,
                loss_end=loss_end,
                accuracy=acc,
                macro_f1=f1,
            )
        )

    if method in ("fedpia", "fedavg_adapters"):
        uploads = [c.stack.copy() for c in fed.clients]
        sizes = [len(c.train) for c in fed.clients]
        fed.global_stack = _server_reduce(method, uploads, sizes, cfg)

    return RoundMetrics(
        round_index=round_index,
        clients=records,
        mean_loss_start=float(np.mean([r.loss_start for r in records])),
        mean_loss_end=float(np.mean([r.loss_end for r in records])),
        mean_accuracy=float(np.mean([r.accuracy for r in records])),
        mean_macro_f1=float(np.mean([r.macro_f1 for r in records])),
        wall_time=time.perf_counter() - t0,
    )


def run_experiment(
    cfg: ExperimentConfig, method: str, seed: int
) -> tuple[list[RoundMetrics], Federation]:
    """All rounds of one method under one seed; fully reproducible."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    fed = build_federation(cfg, seed, method)
    backbone_before = [w.copy() for w in fed.backbone.weights]
    metrics = [run_round(fed, cfg, method, r) for r in range(1, cfg.rounds + 1)]
    for before, after in zip(backbone_before, fed.backbone.weights):
        if not np.array_equal(before, after):
            raise ShapeError("frozen backbone changed during the experiment")
    return metrics, fed


def spike_score(metrics: list[RoundMetrics]) -> float:
    """Mean aggregation-induced loss jump across round boundaries.

    For every client and every round r >= 2 this measures
    loss_start(r) - loss_end(r-1); larger values mean the exchanged
    parameters destabilize local training more.
    """
    if len(metrics) < 2:
        raise ValueError("spike score needs at least two rounds")
    jumps = []
    for prev, cur in zip(metrics[:-1], metrics[1:]):
        prev_end = {c.client_id: c.loss_end for c in prev.clients}
        for c in cur.clients:
            jumps.append(c.loss_start - prev_end[c.client_id])
    return float(np.mean(jumps))


def benchmark_config(
    task_heterogeneous: bool = False, seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
) -> ExperimentConfig:
    """Built-in desk-scale heterogeneous-FL benchmarks.

    The default variant splits one 8-class problem across 5 clients with
    Dirichlet(0.5) skew and unequal class pools (differing C_k); the
    task-heterogeneous variant mixes single-label and multilabel clients
    with per-client feature rotations. Adapter inits are per-client and
    deliberately large so neuron arrangements genuinely differ: naive
    averaging then mixes unrelated neurons, which is the failure mode the
    permutation machinery exists to fix.
    """
    common = dict(
        methods=("fedpia", "fedavg_adapters"),
        clients=5,
        rounds=30,
        batch_size=16,
        base_lr=0.01,
        warmup_frac=0.1,
        weight_decay=0.01,
        seeds=tuple(seeds),
        fusion=FusionConfig(gamma=0.3, normalize_weights=True),
    )
    if task_heterogeneous:
        return ExperimentConfig(
            local_steps=40,
            model=ModelConfig(
                width=32,
                bottleneck=6,
                depth=2,
                adapter_init_std=0.6,
                shared_adapter_init=False,
            ),
            data=DataConfig(
                n_samples=4000,
                features=12,
                num_classes=6,
                kind="mixed",
                margin=2.0,
                concentration=0.5,
                feature_shift=True,
                mixed_single_clients=3,
            ),
            **common,
        )
    return ExperimentConfig(
        local_steps=25,
        model=ModelConfig(
            width=32,
            bottleneck=6,
            depth=2,
            adapter_init_std=0.5,
            shared_adapter_init=False,
        ),
        data=DataConfig(
            n_samples=4000,
            features=12,
            num_classes=8,
            kind="single",
            margin=2.0,
            concentration=0.5,
            class_masks=[[0, 1, 2], [1, 2, 3, 4], [3, 4, 5, 6], [0, 5, 6, 7], [2, 3, 7]],
            feature_shift=False,
        ),
        **common,
    )
