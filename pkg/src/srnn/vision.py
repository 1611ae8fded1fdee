"""Image operators: convolution, global average pooling, bicubic resizing
and image pyramids.

Images are ``C×H×W`` float arrays (raw pixels in [0, 1]); batches are
``B×C×H×W``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import ContractError, ShapeError, Tensor, _make, as_tensor

Size = tuple[int, int]


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, differentiable in all inputs."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected B×C×H×W input and 4-d weight, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: weight expects {wcin} input channels, input has {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {cout} output channels")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}×{kw} larger than padded input {h}×{w} (padding {padding})")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows: (b, i, j); cols: (cin, di, dj)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += dcols[:, :, di, dj]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dw, db

    return _make(np.ascontiguousarray(out), (x, weight, bias), backward)


def conv2d_macs(cin: int, cout: int, k: int, out_h: int, out_w: int) -> int:
    return cout * out_h * out_w * cin * k * k


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean: B×C×H×W -> B×C."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected B×C×H×W, got {x.shape}")
    h, w = x.shape[2:]
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# resizing

def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``n_out × n_in`` matrix applying 1-D bicubic resampling along one axis.

    Half-pixel centres; taps beyond the border are clamped to the edge
    pixel, which folds their weight into the first/last column.
    """
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    for k in range(-1, 3):
        idx = base + k
        wts = cubic_kernel(src - idx)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), wts)
    m.setflags(write=False)
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, clamp: bool = True) -> np.ndarray:
    """Resize the last two axes of ``img`` with separable bicubic sampling.

    Works on a single ``C×H×W`` image or any stack of them. ``clamp``
    clips the result to [0, 1] (raw pixel data).
    """
    if out_h < 1 or out_w < 1:
        raise ContractError(f"bicubic_resize: output size must be positive, got {out_h}×{out_w}")
    img = np.asarray(img)
    h, w = img.shape[-2:]
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    out = np.matmul(np.matmul(ry, img.astype(np.float64)), rx.T)
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


@dataclass(frozen=True)
class Pyramid:
    """Resized copies of one image (or batch), smallest first."""

    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.levels:
            raise ContractError("pyramid needs at least one level")
        areas = [lv.shape[-2] * lv.shape[-1] for lv in self.levels]
        if any(b <= a for a, b in zip(areas, areas[1:])):
            raise ContractError(f"pyramid levels must strictly ascend in area, got {self.scales}")
        if len({lv.shape[:-2] for lv in self.levels}) != 1:
            raise ContractError("pyramid levels disagree in batch/channel extents")

    @property
    def scales(self) -> list[Size]:
        return [tuple(lv.shape[-2:]) for lv in self.levels]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def prefix(self, k: int) -> "Pyramid":
        return Pyramid(self.levels[:k])


def check_sizes(target_sizes: Sequence[Size]) -> list[Size]:
    sizes = [tuple(int(v) for v in s) for s in target_sizes]
    if not sizes:
        raise ContractError("build_pyramid: no target sizes")
    areas = [h * w for h, w in sizes]
    if any(b <= a for a, b in zip(areas, areas[1:])):
        raise ContractError(f"build_pyramid: sizes must strictly ascend in area, got {sizes}")
    return sizes


def build_pyramid(img: np.ndarray, target_sizes: Sequence[Size], clamp: bool = True) -> Pyramid:
    """Bicubic copies of ``img`` at each target size (ascending).

    A target equal to the source size is passed through unchanged. ``img``
    may be a single image or a batch; every level keeps the leading axes.
    """
    sizes = check_sizes(target_sizes)
    img = np.asarray(img)
    src = tuple(img.shape[-2:])
    levels = tuple(img if s == src else bicubic_resize(img, *s, clamp=clamp) for s in sizes)
    return Pyramid(levels)
