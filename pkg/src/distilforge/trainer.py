"""Two-stage collaborative training of a pair of peer networks.

Stage 1 trains each peer independently with plain cross-entropy and freezes
a snapshot of each as its self-teacher. Stage 2 trains the peers jointly:
for every batch each network minimizes a weighted sum of cross-entropy,
a mutual term against the other peer (response KL plus distance/angle
relation penalties, peer side held constant) and a softened KL against its
own frozen snapshot. Updates are plain SGD with momentum and weight decay
under a step-drop learning-rate schedule.

Everything is deterministic: identical configs, datasets and seeds replay
bit-identical parameter and metric trajectories on the same platform.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import AutodiffError, Tensor, backward
from .data import Dataset, batch_iterator
from .losses import (
    TRIPLE_CAP_BATCH,
    LossWeights,
    TotalLoss,
    TupleSets,
    cross_entropy,
    total_loss,
)
from .models import PeerNetwork

logger = logging.getLogger(__name__)

__all__ = [
    "CSV_HEADER",
    "VARIANTS",
    "UPDATE_ORDERS",
    "TrainingDivergence",
    "TrainConfig",
    "OptimizerState",
    "MetricsRecord",
    "TrainResult",
    "variant_weights",
    "sgd_step",
    "lr_at",
    "evaluate_top1",
    "metrics_to_csv",
    "pretrain_stage1",
    "train_stage2",
    "train_pair",
]

VARIANTS = ("A", "B", "C", "D")
UPDATE_ORDERS = ("sequential", "simultaneous")

CSV_HEADER = (
    "epoch,stage,net,lr,loss_total,loss_ce,loss_kl_mutual,loss_dd,loss_ad,loss_sd,"
    "train_top1,test_top1,pi_collapses,triples_skipped"
)


class TrainingDivergence(RuntimeError):
    """A run produced non-finite losses or gradients."""


@dataclass(frozen=True)
class TrainConfig:
    """Schedule, optimizer and objective settings for one paired run."""

    stage1_epochs: int = 20
    stage2_epochs: int = 50
    batch_size: int = 128
    lr: float = 0.1
    lr_milestones: tuple = (15, 30, 40)
    lr_factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "A"
    update_order: str = "sequential"

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.stage1_epochs < 0:
            raise ValueError("stage1_epochs must be >= 0")
        if self.stage2_epochs < 0:
            raise ValueError("stage2_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ValueError("lr must be positive")
        if not (np.isfinite(self.lr_factor) and 0 < self.lr_factor <= 1):
            raise ValueError("lr_factor must be in (0, 1]")
        if not (np.isfinite(self.momentum) and 0 <= self.momentum < 1):
            raise ValueError("momentum must be in [0, 1)")
        if not (np.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ValueError("weight_decay must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("lr_milestones must be strictly increasing")
        if ms and ms[-1] >= self.stage2_epochs:
            raise ValueError("lr_milestones must lie below stage2_epochs")
        if not isinstance(self.weights, LossWeights):
            raise ValueError("weights must be a LossWeights instance")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {','.join(VARIANTS)}")
        if self.update_order not in UPDATE_ORDERS:
            raise ValueError(f"update_order must be one of {','.join(UPDATE_ORDERS)}")


def variant_weights(weights: LossWeights, variant: str) -> tuple[LossWeights, bool]:
    """Effective weights and relation-term switch for an ablation variant.

    A runs the full objective; B drops the self term; C drops the mutual
    response KL; D drops the relation term (both distance and angle).
    """
    if variant == "A":
        return weights, True
    if variant == "B":
        return weights.replace(gamma=0.0), True
    if variant == "C":
        return weights.replace(beta2=0.0), True
    if variant == "D":
        return weights, False
    raise ValueError(f"variant must be one of {','.join(VARIANTS)}")


@dataclass
class OptimizerState:
    """Momentum velocity buffers, one per parameter."""

    velocities: dict

    @classmethod
    def for_network(cls, net: PeerNetwork) -> "OptimizerState":
        return cls({name: np.zeros_like(p.data) for name, p in net.parameters.items()})


def sgd_step(
    parameters: dict,
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """One SGD update: g' = g + wd*w; v <- momentum*v + g'; w <- w - lr*v."""
    for name, p in parameters.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingDivergence(f"non-finite gradient for parameter '{name}'")
        g = g + weight_decay * p.data
        v = state.velocities[name]
        v *= momentum
        v += g
        p.data = p.data - lr * v


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate for a stage-2 epoch: lr * factor ** (#milestones <= epoch)."""
    drops = sum(1 for m in config.lr_milestones if m <= epoch)
    return config.lr * config.lr_factor ** drops


def evaluate_top1(net: PeerNetwork, dataset: Dataset) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    logits = net.forward(dataset.features).logits.data
    predictions = logits.argmax(axis=1)
    return float((predictions == dataset.labels).mean())


@dataclass
class MetricsRecord:
    """One (epoch, net) row of the training log."""

    epoch: int
    stage: int
    net: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_kl_mutual: float
    loss_dd: float
    loss_ad: float
    loss_sd: float
    train_top1: float
    test_top1: float
    pi_collapses: int
    triples_skipped: int

    def csv_row(self) -> str:
        def fmt(x: float) -> str:
            return format(x, ".9g")

        return ",".join(
            [
                str(self.epoch),
                str(self.stage),
                str(self.net),
                fmt(self.lr),
                fmt(self.loss_total),
                fmt(self.loss_ce),
                fmt(self.loss_kl_mutual),
                fmt(self.loss_dd),
                fmt(self.loss_ad),
                fmt(self.loss_sd),
                fmt(self.train_top1),
                fmt(self.test_top1),
                str(self.pi_collapses),
                str(self.triples_skipped),
            ]
        )


def metrics_to_csv(records: Sequence[MetricsRecord]) -> str:
    """Render records under the fixed header, floats at 9 significant digits."""
    return "\n".join([CSV_HEADER] + [r.csv_row() for r in records]) + "\n"


class _EpochStats:
    """Sample-weighted accumulators for one network over one epoch."""

    def __init__(self):
        self.samples = 0
        self.total = 0.0
        self.ce = 0.0
        self.kl_mutual = 0.0
        self.dd = 0.0
        self.ad = 0.0
        self.sd = 0.0
        self.pi_collapses = 0
        self.triples_skipped = 0

    def add(self, batch_size: int, result: TotalLoss) -> None:
        self.samples += batch_size
        self.total += result.total.item() * batch_size
        self.ce += result.ce * batch_size
        self.kl_mutual += result.kl_mutual * batch_size
        self.dd += result.distance * batch_size
        self.ad += result.angle * batch_size
        self.sd += result.self_distill * batch_size
        self.pi_collapses += result.pi_collapses
        self.triples_skipped += result.triples_skipped

    def record(
        self, epoch: int, stage: int, net: int, lr: float, train_top1: float, test_top1: float
    ) -> MetricsRecord:
        n = max(self.samples, 1)
        return MetricsRecord(
            epoch=epoch,
            stage=stage,
            net=net,
            lr=lr,
            loss_total=self.total / n,
            loss_ce=self.ce / n,
            loss_kl_mutual=self.kl_mutual / n,
            loss_dd=self.dd / n,
            loss_ad=self.ad / n,
            loss_sd=self.sd / n,
            train_top1=train_top1,
            test_top1=test_top1,
            pi_collapses=self.pi_collapses,
            triples_skipped=self.triples_skipped,
        )


def _require_pair(nets) -> None:
    if len(nets) != 2:
        raise ValueError("training expects exactly two peer networks")


def pretrain_stage1(
    nets: Sequence[PeerNetwork],
    train_ds: Dataset,
    test_ds: Dataset,
    config: TrainConfig,
) -> tuple[list[PeerNetwork], list[MetricsRecord]]:
    """Independent cross-entropy training of both peers, then freeze snapshots.

    Both peers see the same batch sequence; they differ only through their
    initialization. Returns (frozen snapshots, per-epoch metric records).
    """
    _require_pair(nets)
    states = [OptimizerState.for_network(net) for net in nets]
    records: list[MetricsRecord] = []
    for epoch in range(config.stage1_epochs):
        ce_sums = [0.0, 0.0]
        seen = 0
        try:
            for batch in batch_iterator(train_ds, config.batch_size, config.seed, epoch):
                b = len(batch)
                for k in (0, 1):
                    out = nets[k].forward(batch.features)
                    loss = cross_entropy(out.logits, batch.one_hot_labels)
                    nets[k].zero_grads()
                    backward(loss)
                    sgd_step(
                        nets[k].parameters,
                        states[k],
                        config.lr,
                        config.momentum,
                        config.weight_decay,
                    )
                    ce_sums[k] += loss.item() * b
                seen += b
        except AutodiffError as exc:
            raise TrainingDivergence(f"stage 1 epoch {epoch}: {exc}") from exc
        for k in (0, 1):
            mean_ce = ce_sums[k] / seen
            records.append(
                MetricsRecord(
                    epoch=epoch,
                    stage=1,
                    net=k + 1,
                    lr=config.lr,
                    loss_total=mean_ce,
                    loss_ce=mean_ce,
                    loss_kl_mutual=0.0,
                    loss_dd=0.0,
                    loss_ad=0.0,
                    loss_sd=0.0,
                    train_top1=evaluate_top1(nets[k], train_ds),
                    test_top1=evaluate_top1(nets[k], test_ds),
                    pi_collapses=0,
                    triples_skipped=0,
                )
            )
    if records:
        first = [r.loss_ce for r in records[:2]]
        final = [r.loss_ce for r in records[-2:]]
        logger.info(
            "stage 1 mean cross-entropy: net1 %.6g -> %.6g, net2 %.6g -> %.6g",
            first[0], final[0], first[1], final[1],
        )
        if any(f >= s for f, s in zip(final, first)) and config.stage1_epochs > 1:
            logger.warning("stage 1 cross-entropy did not decrease within its epoch budget")
    snapshots = [net.snapshot() for net in nets]
    return snapshots, records


def _peer_objective(
    nets: Sequence[PeerNetwork],
    snapshots: Optional[Sequence[PeerNetwork]],
    k: int,
    batch,
    weights: LossWeights,
    tuples: Optional[TupleSets],
    include_relation: bool,
) -> TotalLoss:
    outputs = nets[k].forward(batch.features)
    peer_outputs = nets[1 - k].forward(batch.features) if weights.beta > 0 else None
    snap_logits = snapshots[k].forward(batch.features).logits if weights.gamma > 0 else None
    return total_loss(
        outputs, peer_outputs, snap_logits, batch.one_hot_labels, weights, tuples,
        include_relation,
    )


def train_stage2(
    nets: Sequence[PeerNetwork],
    snapshots: Optional[Sequence[PeerNetwork]],
    train_ds: Dataset,
    test_ds: Dataset,
    config: TrainConfig,
) -> list[MetricsRecord]:
    """Joint training under the configured variant's objective.

    With the default sequential order the first peer steps before the second
    peer's loss is formed, so the second peer sees updated outputs within the
    same batch; the simultaneous order forms both losses from pre-step
    outputs and then applies both updates. Batch shuffling continues the
    stage-1 epoch numbering so the stream never repeats across stages.
    """
    _require_pair(nets)
    weights, include_relation = variant_weights(config.weights, config.variant)
    if weights.gamma > 0 and (snapshots is None or len(snapshots) != 2):
        raise ValueError("snapshots of both peers are required when the self term is active")
    need_tuples = weights.beta > 0 and include_relation
    states = [OptimizerState.for_network(net) for net in nets]
    records: list[MetricsRecord] = []
    for epoch in range(config.stage2_epochs):
        lr = lr_at(epoch, config)
        shuffle_epoch = config.stage1_epochs + epoch
        stats = [_EpochStats(), _EpochStats()]
        try:
            batches = batch_iterator(train_ds, config.batch_size, config.seed, shuffle_epoch)
            for batch_index, batch in enumerate(batches):
                b = len(batch)
                tuples = None
                if need_tuples and b >= 2:
                    rng = None
                    if b > TRIPLE_CAP_BATCH:
                        rng = np.random.default_rng([config.seed, shuffle_epoch, batch_index])
                    tuples = TupleSets.build(b, rng=rng)
                if config.update_order == "sequential":
                    for k in (0, 1):
                        result = _peer_objective(
                            nets, snapshots, k, batch, weights, tuples, include_relation
                        )
                        nets[k].zero_grads()
                        backward(result.total)
                        sgd_step(
                            nets[k].parameters, states[k], lr, config.momentum,
                            config.weight_decay,
                        )
                        stats[k].add(b, result)
                else:
                    results = [
                        _peer_objective(
                            nets, snapshots, k, batch, weights, tuples, include_relation
                        )
                        for k in (0, 1)
                    ]
                    for k in (0, 1):
                        nets[k].zero_grads()
                    for k in (0, 1):
                        backward(results[k].total)
                    for k in (0, 1):
                        sgd_step(
                            nets[k].parameters, states[k], lr, config.momentum,
                            config.weight_decay,
                        )
                        stats[k].add(b, results[k])
                if b < 3 and need_tuples:
                    logger.debug(
                        "stage 2 epoch %d batch %d: %d samples, angle term skipped",
                        epoch, batch_index, b,
                    )
        except AutodiffError as exc:
            raise TrainingDivergence(f"stage 2 epoch {epoch}: {exc}") from exc
        for k in (0, 1):
            records.append(
                stats[k].record(
                    epoch=epoch,
                    stage=2,
                    net=k + 1,
                    lr=lr,
                    train_top1=evaluate_top1(nets[k], train_ds),
                    test_top1=evaluate_top1(nets[k], test_ds),
                )
            )
    return records


@dataclass
class TrainResult:
    """Trained peers, their stage-1 snapshots and the full metric log."""

    nets: list
    snapshots: list
    records: list


def train_pair(
    nets: Sequence[PeerNetwork],
    train_ds: Dataset,
    test_ds: Dataset,
    config: TrainConfig,
) -> TrainResult:
    """Run stage 1 then stage 2 and collect all metric records."""
    snapshots, stage1_records = pretrain_stage1(nets, train_ds, test_ds, config)
    stage2_records = train_stage2(nets, snapshots, train_ds, test_ds, config)
    return TrainResult(nets=list(nets), snapshots=snapshots, records=stage1_records + stage2_records)
