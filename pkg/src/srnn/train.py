"""Optimisation: Nesterov SGD with weight decay, multi-step schedule,
crop/flip augmentation, top-k evaluation and the two-stage fit loop."""
from __future__ import annotations

import logging
import math
from decimal import Decimal
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Dataset, batches
from .model import (HEADS, ScaleClassifier, SrnnHalfGru, SrnnVanilla, base_logits, head_logits,
                    srnn_forward)
from .numerics import ContractError
from .vision import Size, build_pyramid, check_sizes

log = logging.getLogger(__name__)

DESK_SCALES: tuple[Size, ...] = ((16, 16), (32, 32), (64, 64))


class DivergenceError(ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    decay_every: int = 15
    decay_factor: float = 0.1
    epochs: int = 35
    batch_size: int = 32
    seed: int = 0
    scales: tuple[Size, ...] = DESK_SCALES
    head: str = "srnn_halfgru"
    pretrain_epochs: int = 30
    pretrain_lr0: float = 0.02
    pretrain_decay_every: int = 20
    augment: bool = True

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ContractError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if not 0 < self.decay_factor < 1:
            raise ContractError("decay_factor must lie in (0, 1)")
        if min(self.epochs, self.decay_every, self.batch_size, self.pretrain_decay_every) < 1:
            raise ContractError("epochs, decay_every, pretrain_decay_every and batch_size must be >= 1")
        if self.head not in HEADS:
            raise ContractError(f"unknown head {self.head!r}")
        object.__setattr__(self, "scales", tuple(check_sizes(self.scales)))

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """The ImageNet fine-tuning recipe: 65 epochs, x0.1 every 30."""
        return cls(**{"decay_every": 30, "epochs": 65, **overrides})


def lr_at_epoch(cfg: TrainConfig, epoch: int, lr0: float | None = None) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    base = cfg.lr0 if lr0 is None else lr0
    # Evaluate in decimal from the shortest reprs so that 0.001 * 0.1**2 comes
    # out as 1e-05 rather than 1.0000000000000003e-05; one final rounding.
    k = epoch // cfg.decay_every
    return float(Decimal(repr(base)) * Decimal(repr(cfg.decay_factor)) ** k)


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices and kernels, never to biases."""
    return not (name.endswith("bias") or name == "gate.bias")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, nx.Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()})


def sgd_nesterov_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray],
                      state: OptimizerState, lr: float, cfg: TrainConfig):
    """In-place momentum step; missing gradients count as zero.

    ``g' = g + wd*p``, ``v <- mu*v + g'``, then ``p -= lr * (g' + mu*v)``
    (Nesterov) or ``p -= lr * v``.
    """
    mu, wd = cfg.momentum, cfg.weight_decay
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None or v.shape != p.data.shape:
            raise ContractError(f"optimizer state for {name!r} does not match parameter shape {p.data.shape}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        if wd and decays(name):
            g = g + wd * p.data
        v *= mu
        v += g
        step = g + mu * v if cfg.nesterov else v
        p.data -= (lr * step).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# augmentation

PAD = 4


def crop_flip(img: np.ndarray, dy: int, dx: int, flip: bool) -> np.ndarray:
    """Reflect-pad by 4, crop the original extent at offset (dy, dx), optionally mirror."""
    h, w = img.shape[-2:]
    padded = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(PAD, PAD), (PAD, PAD)], mode="reflect")
    out = padded[..., dy:dy + h, dx:dx + w]
    return np.ascontiguousarray(out[..., ::-1] if flip else out)


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(0, 2 * PAD + 1, size=2)
    flip = rng.random() < 0.5
    return crop_flip(img, int(dy), int(dx), bool(flip))


# ---------------------------------------------------------------------------
# evaluation

def topk_error(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Percentage of rows whose label is not among the k largest scores.

    Ties rank the lower class index first.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    k = min(k, logits.shape[1])
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hit = (order == labels[:, None]).any(axis=1)
    return 100.0 * float(1.0 - hit.mean())


def dataset_pyramid_logits(model: ScaleClassifier, head: str, ds: Dataset,
                           scales: Sequence[Size], chunk: int = 200) -> np.ndarray:
    out = []
    for start in range(0, len(ds), chunk):
        x = ds.images[start:start + chunk]
        out.append(head_logits(model, head, build_pyramid(x, scales)))
    return np.concatenate(out)


def evaluate(model: ScaleClassifier, ds: Dataset, scales: Sequence[Size],
             head: str | None = None) -> tuple[float, float]:
    """(top-1 error %, top-5 error %) of ``head`` on ``ds``.

    For ``single`` the classifier sees only the last size in ``scales``.
    """
    head = head or model.head
    logits = dataset_pyramid_logits(model, head, ds, scales)
    return topk_error(logits, ds.labels, 1), topk_error(logits, ds.labels, 5)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_top1: float
    val_top5: float


def _train_loss(model: ScaleClassifier, x: np.ndarray, y: np.ndarray, scales: Sequence[Size]) -> nx.Tensor:
    pyr = build_pyramid(x.astype(model.dtype), scales)
    if isinstance(model, SrnnVanilla):
        return nx.cross_entropy_from_logits(srnn_forward(model, pyr), y)
    # single-scale classifier: each pyramid level is a separate example of
    # the same image, so the loss is the mean over levels
    total = None
    for level in pyr.levels:
        loss = nx.cross_entropy_from_logits(base_logits(model, level), y)
        total = loss if total is None else nx.add(total, loss)
    return nx.scale(total, 1.0 / len(pyr))


def train_epochs(model: ScaleClassifier, train: Dataset, val: Dataset | None, cfg: TrainConfig,
                 epochs: int, lr0: float, rng: np.random.Generator,
                 eval_head: str | None = None) -> list[EpochRecord]:
    state = OptimizerState.zeros_like(model.params)
    history = []
    for epoch in range(epochs):
        lr = lr_at_epoch(cfg, epoch, lr0)
        total, count = 0.0, 0
        for x, y in batches(train, cfg.batch_size, rng, augment=cfg.augment):
            model.zero_grad()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = _train_loss(model, x, y, cfg.scales)
            except nx.NumericError:
                raise DivergenceError(epoch) from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch)
            nx.backward(loss)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            sgd_nesterov_step(model.params, grads, state, lr, cfg)
            total += value * len(y)
            count += len(y)
        top1, top5 = evaluate(model, val, cfg.scales, eval_head) if val is not None else (math.nan, math.nan)
        rec = EpochRecord(epoch, lr, total / count, top1, top5)
        log.info("epoch %d lr %.3g loss %.4f val top1 %.2f", epoch, lr, rec.train_loss, top1)
        history.append(rec)
    model.zero_grad()
    return history


def pretrain(cfg: TrainConfig, train: Dataset, val: Dataset | None, config=None,
             rng: np.random.Generator | None = None) -> tuple[ScaleClassifier, list[EpochRecord]]:
    """Stage 1: train the base CNN + classifier as a single-scale model."""
    from .model import BaseCnnConfig
    rng = np.random.default_rng([cfg.seed, 1]) if rng is None else rng
    config = config or BaseCnnConfig(in_channels=train.images.shape[1])
    model = ScaleClassifier.init(config, train.num_classes, rng)
    stage = replace(cfg, head="single", decay_every=cfg.pretrain_decay_every)
    history = train_epochs(model, train, val, stage, cfg.pretrain_epochs, cfg.pretrain_lr0, rng, "single")
    return model, history


def fit(cfg: TrainConfig, train: Dataset, model: ScaleClassifier, val: Dataset | None = None,
        eval_head: str | None = None) -> tuple[ScaleClassifier, list[EpochRecord]]:
    """Train ``model`` under ``cfg.head`` for ``cfg.epochs`` epochs.

    A plain base classifier passed with an SRNN head is wrapped first (U =
    identity, zero gates); ``single`` trains the base classifier itself.
    The model is updated in place and returned with per-epoch metrics;
    validation uses ``eval_head`` when given (e.g. an ensemble over a base
    trained with ``single``).
    """
    if len(train) == 0:
        raise ContractError("empty training set")
    if cfg.head in ("ens_logit", "ens_prob"):
        raise ContractError(f"{cfg.head} is inference-only; train its base with head 'single'")
    if train.num_classes != model.num_classes:
        raise ContractError(f"dataset has {train.num_classes} classes, model {model.num_classes}")
    if cfg.head == "single":
        if isinstance(model, SrnnVanilla):
            raise ContractError("head 'single' expects a base classifier")
    else:
        want = SrnnHalfGru if cfg.head == "srnn_halfgru" else SrnnVanilla
        if type(model) is ScaleClassifier:
            model = want.from_pretrained(model)
        elif type(model) is not want:
            raise ContractError(f"head {cfg.head!r} cannot train a {type(model).__name__}")
    rng = np.random.default_rng([cfg.seed, 2])
    history = train_epochs(model, train, val, cfg, cfg.epochs, cfg.lr0, rng, eval_head or cfg.head)
    return model, history
