"""Base CNN, scale ensembles and the two scale-recurrent heads.

Parameters live in a flat ``name -> Tensor`` dict with canonical names
(``cnn.stage0.weight``, ``fc.bias``, ``srnn.U``, ``gate.Wz`` ...), which is
also the checkpoint layout.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ContractError, ShapeError, Tensor
from .vision import Pyramid, bicubic_resize, conv2d, conv2d_macs, conv_output_size, global_avg_pool

HEADS = ("single", "ens_logit", "ens_prob", "srnn_vanilla", "srnn_halfgru")


class EnsembleMode(str, Enum):
    LOGIT_MEAN = "logit_mean"
    PROB_MEAN = "prob_mean"


@dataclass(frozen=True)
class BaseCnnConfig:
    """Stack of 3×3 conv + ReLU stages followed by global average pooling."""

    channels: tuple[int, ...] = (16, 32, 64, 128)
    in_channels: int = 1
    stride: int = 2
    kernel: int = 3

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def min_size(self) -> int:
        return self.stride ** len(self.channels)

    def macs(self, size: tuple[int, int]) -> int:
        """Multiply-accumulates of one forward pass at ``size`` (per image)."""
        h, w = size
        total, cin = 0, self.in_channels
        for cout in self.channels:
            h = conv_output_size(h, self.kernel, self.stride, self.kernel // 2)
            w = conv_output_size(w, self.kernel, self.stride, self.kernel // 2)
            total += conv2d_macs(cin, cout, self.kernel, h, w)
            cin = cout
        return total


class ScaleClassifier:
    """Base CNN plus fully connected classifier ``F``."""

    head = "single"

    def __init__(self, config: BaseCnnConfig, num_classes: int, params: dict[str, Tensor]):
        self.config = config
        self.num_classes = num_classes
        self.params = params

    @classmethod
    def init(cls, config: BaseCnnConfig, num_classes: int, rng: np.random.Generator,
             dtype=np.float32) -> "ScaleClassifier":
        """He (fan-in) initialisation of the convolutions, zero biases."""
        params: dict[str, Tensor] = {}
        cin, k = config.in_channels, config.kernel
        for i, cout in enumerate(config.channels):
            std = np.sqrt(2.0 / (cin * k * k))
            params[f"cnn.stage{i}.weight"] = rng.normal(0.0, std, (cout, cin, k, k))
            params[f"cnn.stage{i}.bias"] = np.zeros(cout)
            cin = cout
        d = config.feature_dim
        params["fc.weight"] = rng.normal(0.0, np.sqrt(1.0 / d), (num_classes, d))
        params["fc.bias"] = np.zeros(num_classes)
        return cls(config, num_classes, _as_params(params, dtype))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "ScaleClassifier":
        out = copy.copy(self)
        out.params = _as_params(self.state_dict(), dtype)
        return out

    def clone(self) -> "ScaleClassifier":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.params["fc.weight"].data.dtype

    def base(self) -> "ScaleClassifier":
        """The CNN + classifier part as a plain :class:`ScaleClassifier`."""
        keep = {k: v for k, v in self.params.items() if k.startswith(("cnn.", "fc."))}
        return ScaleClassifier(self.config, self.num_classes, _as_params({k: v.data for k, v in keep.items()}, self.dtype))


class SrnnVanilla(ScaleClassifier):
    """Shared CNN + ReLU recurrence ``h_s = relu(f_s + U h_{s-1})``."""

    head = "srnn_vanilla"

    @classmethod
    def from_pretrained(cls, base: ScaleClassifier) -> "SrnnVanilla":
        """Copy CNN and classifier from ``base``; ``U`` starts as the identity."""
        d = base.config.feature_dim
        state = {k: v.data.copy() for k, v in base.base().params.items()}
        state["srnn.U"] = np.eye(d)
        return cls(base.config, base.num_classes, _as_params(state, base.dtype))


class SrnnHalfGru(SrnnVanilla):
    """Vanilla recurrence blended with the previous state by one sigmoid gate."""

    head = "srnn_halfgru"

    @classmethod
    def from_pretrained(cls, base: ScaleClassifier) -> "SrnnHalfGru":
        """As the vanilla head, plus all-zero gate parameters (gate = 0.5)."""
        d = base.config.feature_dim
        state = {k: v.data.copy() for k, v in base.base().params.items()}
        state["srnn.U"] = np.eye(d)
        state["gate.Wz"] = np.zeros((d, d))
        state["gate.Uz"] = np.zeros((d, d))
        state["gate.bias"] = np.zeros(d)
        return cls(base.config, base.num_classes, _as_params(state, base.dtype))


def _as_params(state: dict[str, np.ndarray], dtype) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=dtype), requires_grad=True, name=k) for k, v in state.items()}


def required_tensors(config: BaseCnnConfig, head: str) -> list[str]:
    names = []
    for i in range(len(config.channels)):
        names += [f"cnn.stage{i}.weight", f"cnn.stage{i}.bias"]
    names += ["fc.weight", "fc.bias"]
    if head in ("srnn_vanilla", "srnn_halfgru"):
        names.append("srnn.U")
    if head == "srnn_halfgru":
        names += ["gate.Wz", "gate.Uz", "gate.bias"]
    return names


# ---------------------------------------------------------------------------
# forward passes

def cnn_features(model: ScaleClassifier, x) -> Tensor:
    """Pooled feature vectors (B×D, elementwise >= 0) for a batch of images."""
    x = nx.as_tensor(x)
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"cnn_features: expected B×{cfg.in_channels}×H×W, got {x.shape}")
    if min(x.shape[2:]) < cfg.min_size:
        raise ShapeError(f"cnn_features: input {x.shape[2:]} below minimum size {cfg.min_size}")
    h = x
    for i in range(len(cfg.channels)):
        h = conv2d(h, model.params[f"cnn.stage{i}.weight"], model.params[f"cnn.stage{i}.bias"],
                   stride=cfg.stride, padding=cfg.kernel // 2)
        h = nx.relu(h)
    return global_avg_pool(h)


def classify(model: ScaleClassifier, features) -> Tensor:
    return nx.linear(features, model.params["fc.weight"], model.params["fc.bias"])


def base_logits(model: ScaleClassifier, x) -> Tensor:
    return classify(model, cnn_features(model, x))


def transition(h, U) -> Tensor:
    """State transition ``U h`` for a row batch of states."""
    return nx.linear(h, U)


def _levels(pyramid) -> Sequence[np.ndarray]:
    levels = pyramid.levels if isinstance(pyramid, Pyramid) else list(pyramid)
    if not levels:
        raise ContractError("empty pyramid")
    levels = [np.asarray(lv.data if isinstance(lv, Tensor) else lv) for lv in levels]
    if levels[0].ndim == 3:
        levels = [lv[None] for lv in levels]
    if len({lv.shape[0] for lv in levels}) != 1:
        raise ContractError("pyramid levels disagree in batch size")
    return levels


def _cast(x: np.ndarray, model: ScaleClassifier) -> np.ndarray:
    return x if x.dtype == model.dtype else x.astype(model.dtype)


def srnn_states(model: SrnnVanilla, pyramid, gates: list | None = None) -> Iterator[Tensor]:
    """Yield the hidden state after each scale, smallest scale first.

    Dispatches on ``model``: a :class:`SrnnHalfGru` runs the gated update.
    Gate activations are appended to ``gates`` when a list is passed.
    """
    levels = _levels(pyramid)
    p = model.params
    gated = isinstance(model, SrnnHalfGru)
    h = Tensor(np.zeros((levels[0].shape[0], model.config.feature_dim), dtype=model.dtype))
    for x in levels:
        f = cnn_features(model, _cast(x, model))
        cand = nx.relu(nx.add(f, transition(h, p["srnn.U"])))
        if gated:
            pre = nx.add(nx.linear(f, p["gate.Wz"]), nx.linear(h, p["gate.Uz"]))
            z = nx.sigmoid(nx.add_bias(pre, p["gate.bias"]))
            if gates is not None:
                gates.append(z.data)
            h = nx.affine_combine(z, h, cand)
        else:
            h = cand
        yield h


def _check_head(model, cls, name):
    if not isinstance(model, cls):
        raise ContractError(f"{name} needs a {cls.__name__}, got {type(model).__name__}")


def srnn_vanilla_forward(model: SrnnVanilla, pyramid) -> Tensor:
    """Logits ``F(h_n)`` of the ungated recurrence."""
    _check_head(model, SrnnVanilla, "srnn_vanilla_forward")
    if isinstance(model, SrnnHalfGru):
        raise ContractError("srnn_vanilla_forward got a half-GRU model")
    *_, h = srnn_states(model, pyramid)
    return classify(model, h)


def srnn_halfgru_forward(model: SrnnHalfGru, pyramid, gates: list | None = None) -> Tensor:
    """Logits ``F(h_n)`` of the single-gate recurrence."""
    _check_head(model, SrnnHalfGru, "srnn_halfgru_forward")
    *_, h = srnn_states(model, pyramid, gates)
    return classify(model, h)


def srnn_forward(model: SrnnVanilla, pyramid) -> Tensor:
    if isinstance(model, SrnnHalfGru):
        return srnn_halfgru_forward(model, pyramid)
    return srnn_vanilla_forward(model, pyramid)


def srnn_prefix_logits(model: SrnnVanilla, pyramid) -> list[np.ndarray]:
    """Anytime readout: logits ``F(h_k)`` for every prefix length k = 1..n."""
    with nx.no_grad():
        return [classify(model, h).data for h in srnn_states(model, pyramid)]


def ensemble_forward(model: ScaleClassifier, pyramid, mode: EnsembleMode | str) -> np.ndarray:
    """Average per-scale base-classifier outputs (logits or probabilities)."""
    mode = EnsembleMode(mode)
    levels = _levels(pyramid)
    with nx.no_grad():
        outs = [base_logits(model, _cast(x, model)).data for x in levels]
    if mode is EnsembleMode.PROB_MEAN:
        outs = [nx.softmax(o) for o in outs]
    return sum(outs[1:], outs[0]) / len(outs)


def single_scale_forward(model: ScaleClassifier, img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize ``img`` (C×H×W or batch) to ``size`` and classify it."""
    img = np.asarray(img)
    x = img if tuple(img.shape[-2:]) == tuple(size) else bicubic_resize(img, *size)
    if x.ndim == 3:
        x = x[None]
    with nx.no_grad():
        return base_logits(model, _cast(x, model)).data


def head_logits(model: ScaleClassifier, head: str, pyramid) -> np.ndarray:
    """Inference output of any of the five heads for a batched pyramid.

    ``single`` uses the last (largest) level only.
    """
    if head == "single":
        return single_scale_forward(model, _levels(pyramid)[-1], _levels(pyramid)[-1].shape[-2:])
    if head == "ens_logit":
        return ensemble_forward(model, pyramid, EnsembleMode.LOGIT_MEAN)
    if head == "ens_prob":
        return ensemble_forward(model, pyramid, EnsembleMode.PROB_MEAN)
    if head in ("srnn_vanilla", "srnn_halfgru"):
        want = SrnnHalfGru if head == "srnn_halfgru" else SrnnVanilla
        _check_head(model, want, head)
        with nx.no_grad():
            return srnn_forward(model, pyramid).data
    raise ContractError(f"unknown head {head!r}; expected one of {HEADS}")


def recurrence_macs(model: ScaleClassifier) -> int:
    d = model.config.feature_dim
    if isinstance(model, SrnnHalfGru):
        return 3 * d * d
    if isinstance(model, SrnnVanilla):
        return d * d
    return 0


def anytime_macs(model: ScaleClassifier, sizes: Sequence[tuple[int, int]]) -> list[int]:
    """Cumulative multiply-accumulates per image after each prefix of ``sizes``."""
    readout = model.num_classes * model.config.feature_dim
    total, out = 0, []
    for s in sizes:
        total += model.config.macs(s) + recurrence_macs(model)
        out.append(total + readout)
    return out

