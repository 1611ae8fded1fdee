"""Finite-difference verification of SRNN gradients on a micro model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import BaseCnnConfig, ScaleClassifier, SrnnHalfGru, SrnnVanilla, srnn_forward
from .vision import build_pyramid

MICRO = BaseCnnConfig(channels=(4, 8), in_channels=1)
MICRO_SIZES = ((4, 4), (8, 8))
KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class GradResult:
    head: str
    name: str
    rel_error: float


def micro_problem(head: str, rng: np.random.Generator):
    """Random double-precision micro SRNN, 3 upscaled 2×2 images, 2 classes."""
    base = ScaleClassifier.init(MICRO, 2, rng, dtype=np.float64)
    cls = SrnnHalfGru if head == "srnn_halfgru" else SrnnVanilla
    model = cls.from_pretrained(base)
    for name, p in model.params.items():
        if name.endswith("bias"):
            p.data = rng.normal(0.0, 0.1, p.shape)
        elif name.startswith(("srnn.", "gate.")):
            p.data = rng.normal(0.0, 0.4, p.shape)
    images = rng.uniform(0.0, 1.0, (3, 1, 2, 2))
    pyramid = build_pyramid(images, MICRO_SIZES)
    labels = rng.integers(0, 2, size=3)
    return model, pyramid, labels


def _loss(model, pyramid, labels):
    return nx.cross_entropy_from_logits(srnn_forward(model, pyramid), labels)


def check_head(head: str, seed: int, eps: float = 1e-5, max_draws: int = 200) -> list[GradResult]:
    """Relative error of reverse-mode vs central differences per parameter.

    Draws are rejected until every ReLU input is at least ``KINK_MARGIN``
    away from zero, so the difference quotient never straddles a kink.
    """
    rng = np.random.default_rng([seed, 7919])
    for _ in range(max_draws):
        model, pyramid, labels = micro_problem(head, rng)
        with nx.record_kinks() as kinks, nx.no_grad():
            _loss(model, pyramid, labels)
        if min(kinks) >= KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no kink-free draw in {max_draws} attempts")

    model.zero_grad()
    nx.backward(_loss(model, pyramid, labels))
    results = []
    for name, p in model.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        original = p.data

        def f(value, p=p):
            p.data = value
            with nx.no_grad():
                return float(_loss(model, pyramid, labels).data)

        numeric = nx.finite_diff_gradient(f, original, eps)
        p.data = original
        results.append(GradResult(head, name, nx.relative_error(analytic, numeric)))
    return results


def run(seed: int) -> list[GradResult]:
    return check_head("srnn_vanilla", seed) + check_head("srnn_halfgru", seed)
