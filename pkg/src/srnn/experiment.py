"""Desk-scale reproduction of the single-scale / ensemble / SRNN comparison.

One seed: generate the synthetic shape-by-texture task, pretrain the base
CNN, evaluate the single-scale and ensemble baselines on it, fine-tune
both SRNN heads from it and record their anytime curves.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, SyntheticSpec, generate_scale_task
from .model import BaseCnnConfig, SrnnVanilla, anytime_macs, srnn_prefix_logits
from .train import TrainConfig, evaluate, fit, pretrain, topk_error
from .vision import build_pyramid

log = logging.getLogger(__name__)

# 12 fine-tuning epochs with one x0.1 step at epoch 6 keep the 30/65 ratio of
# the full recipe; 20 pretraining epochs (step at 14) are what the base CNN
# needs to pick up the fine textures reliably. Five seeds fit the runtime budget.
DESK = TrainConfig(epochs=12, decay_every=6, pretrain_epochs=20, pretrain_decay_every=14, pretrain_lr0=0.02)


@dataclass
class DeskResult:
    seed: int
    top1: dict[str, float] = field(default_factory=dict)
    top5: dict[str, float] = field(default_factory=dict)
    anytime: dict[str, list[tuple[int, float, int]]] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def best_single(self) -> float:
        return min(v for k, v in self.top1.items() if k.startswith("single_"))

    @property
    def best_ensemble(self) -> float:
        return min(self.top1["ens_prob"], self.top1["ens_logit"])


def bench_table(model: SrnnVanilla, val: Dataset, scales, chunk: int = 200) -> list[tuple[int, float, int]]:
    """(scales used, top-1 error %, cumulative MACs per image) for every prefix."""
    per_k = [[] for _ in scales]
    for start in range(0, len(val), chunk):
        pyr = build_pyramid(val.images[start:start + chunk], scales)
        for k, logits in enumerate(srnn_prefix_logits(model, pyr)):
            per_k[k].append(logits)
    macs = anytime_macs(model, scales)
    return [(k + 1, topk_error(np.concatenate(per_k[k]), val.labels, 1), macs[k]) for k in range(len(scales))]


def run_desk_seed(seed: int, cfg: TrainConfig = DESK, spec: SyntheticSpec | None = None,
                  cnn: BaseCnnConfig = BaseCnnConfig()) -> DeskResult:
    t0 = time.perf_counter()
    spec = spec or SyntheticSpec(seed=seed)
    cfg = replace(cfg, seed=seed)
    train, val = generate_scale_task(spec)
    res = DeskResult(seed)

    base, _ = pretrain(cfg, train, None, cnn)
    for s in cfg.scales:
        name = f"single_{s[0]}x{s[1]}"
        res.top1[name], res.top5[name] = evaluate(base, val, [s], "single")
    for head in ("ens_prob", "ens_logit"):
        res.top1[head], res.top5[head] = evaluate(base, val, cfg.scales, head)

    for head in ("srnn_vanilla", "srnn_halfgru"):
        model, _ = fit(replace(cfg, head=head), train, base.clone())
        res.top1[head], res.top5[head] = evaluate(model, val, cfg.scales, head)
        res.anytime[head] = bench_table(model, val, cfg.scales)
        log.info("seed %d %s top-1 %.2f", seed, head, res.top1[head])
    res.seconds = time.perf_counter() - t0
    return res
