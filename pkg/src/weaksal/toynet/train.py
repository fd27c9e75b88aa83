"""Minibatch SGD with momentum, weight decay and gradient accumulation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from weaksal.errors import EmptyDataset, ShapeError
from weaksal.imagecore import BinaryMask, Image
from weaksal.toynet.config import NetConfig, TrainConfig
from weaksal.toynet.losses import (
    classification_loss,
    classification_loss_grad,
    label_target,
    saliency_loss,
    saliency_loss_grad_logit,
)
from weaksal.toynet.network import backward, forward
from weaksal.toynet.params import CLS_NAMES, NetParams


@dataclass(frozen=True)
class TrainSample:
    image: Image
    target: BinaryMask
    labels: tuple[int, ...] | None = None
    name: str = ""

    @property
    def degenerate(self) -> bool:
        """All-background or all-foreground targets carry no usable gradient."""
        s = int(self.target.values.sum())
        return s == 0 or s == self.target.values.size


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


@dataclass
class ValRecord:
    iteration: int
    train_loss: float
    val_loss: float


def sgd_step(params: NetParams, grads: dict[str, np.ndarray], cfg: TrainConfig, state: SgdState,
             trainable: Iterable[str] | None = None) -> tuple[NetParams, SgdState]:
    """v <- momentum * v + grad + weight_decay * p ;  p <- p - lr * v.

    Only ``trainable`` tensors move (all by default). Updated tensors are
    stored as float32 so checkpoints reproduce them exactly.
    """
    names = list(params) if trainable is None else list(trainable)
    out = NetParams(params)
    vel = dict(state.velocity)
    for name in names:
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = cfg.momentum * vel.get(name, np.zeros_like(p)) + g + cfg.weight_decay * p
        vel[name] = v
        out[name] = (p - cfg.learning_rate * v).astype(np.float32)
    return out, SgdState(vel, state.steps + 1)


class GradientAccumulator:
    """Averages gradients over a fixed window; yields the mean when full."""

    def __init__(self, window: int):
        self.window = window
        self._sum: dict[str, np.ndarray] | None = None
        self._count = 0

    def add(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray] | None:
        if self._sum is None:
            self._sum = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
        else:
            for k, v in grads.items():
                self._sum[k] += v
        self._count += 1
        if self._count < self.window:
            return None
        mean = {k: v / self.window for k, v in self._sum.items()}
        self._sum, self._count = None, 0
        return mean


def sample_loss(sample: TrainSample, params: NetParams, net_cfg: NetConfig, with_labels: bool = True) -> float:
    """Training objective: the saliency loss per pixel plus the label loss."""
    out = forward(sample.image, params, net_cfg)
    loss = saliency_loss(out.fused_prob, sample.target).total / sample.target.values.size
    if with_labels and sample.labels:
        loss += classification_loss(out.class_scores, label_target(sample.labels, net_cfg.n_classes))
    return loss


def dataset_loss(samples: Sequence[TrainSample], params: NetParams, net_cfg: NetConfig,
                 with_labels: bool = True) -> float:
    usable = [s for s in samples if not s.degenerate]
    if not usable:
        raise EmptyDataset("no sample with a non-degenerate target")
    return float(np.mean([sample_loss(s, params, net_cfg, with_labels) for s in usable]))


def sample_gradients(sample: TrainSample, params: NetParams, net_cfg: NetConfig, with_labels: bool):
    """Loss and gradients for one sample.

    The saliency term is divided by the pixel count so the step size does
    not depend on image size. It trains the backbone and saliency head; the label term
    only reaches the classification layer.
    """
    out = forward(sample.image, params, net_cfg)
    n = sample.target.values.size
    d_logit = saliency_loss_grad_logit(out.fused_prob, sample.target) / n
    loss = saliency_loss(out.fused_prob, sample.target).total / n
    d_scores = None
    if with_labels and sample.labels:
        target = label_target(sample.labels, net_cfg.n_classes)
        loss += classification_loss(out.class_scores, target)
        d_scores = classification_loss_grad(out.class_scores, target)
    grads = backward(out, params, net_cfg, d_logit, d_scores, scores_reach_backbone=False)
    return loss, grads.total


def train_round(train: Sequence[TrainSample], val: Sequence[TrainSample], cfg: TrainConfig,
                net_cfg: NetConfig, params: NetParams, freeze_classifier: bool = False,
                log=None) -> tuple[NetParams, list[ValRecord]]:
    """Train for ``cfg.iterations_per_round`` minibatch iterations.

    Validation runs every ``cfg.validate_every`` iterations and after the
    last one; the parameters with the lowest validation loss are returned.
    """
    cfg.validate()
    params.check(net_cfg)
    if cfg.iterations_per_round == 0:
        return params.copy(), []
    pool = [s for s in train if not s.degenerate]
    if not pool:
        raise EmptyDataset("no training sample with a non-degenerate annotation")
    val_pool = [s for s in val if not s.degenerate] or pool
    with_labels = not freeze_classifier
    trainable = [n for n in params if not (freeze_classifier and n in CLS_NAMES)]

    rng = np.random.default_rng(cfg.rng_seed)
    order: list[int] = []
    state = SgdState()
    acc = GradientAccumulator(cfg.loss_accumulation)
    history: list[ValRecord] = []
    best, best_loss = params.copy(), np.inf
    running, n_running = 0.0, 0
    for it in range(1, cfg.iterations_per_round + 1):
        batch_grads = None
        for _ in range(cfg.minibatch):
            if not order:
                order = list(rng.permutation(len(pool)))
            loss, g = sample_gradients(pool[order.pop()], params, net_cfg, with_labels)
            running += loss
            n_running += 1
            if batch_grads is None:
                batch_grads = g
            else:
                for k in batch_grads:
                    batch_grads[k] += g[k]
        mean = acc.add({k: v / cfg.minibatch for k, v in batch_grads.items()})
        if mean is not None:
            params, state = sgd_step(params, mean, cfg, state, trainable)
        if it % cfg.validate_every == 0 or it == cfg.iterations_per_round:
            val_loss = dataset_loss(val_pool, params, net_cfg, with_labels)
            history.append(ValRecord(it, running / n_running, val_loss))
            running, n_running = 0.0, 0
            if log is not None:
                log(f"iter {it}: train {history[-1].train_loss:.4f} val {val_loss:.4f}")
            if val_loss < best_loss:
                best, best_loss = params.copy(), val_loss
    return best, history
