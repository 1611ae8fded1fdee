"""Command line: ``train``, ``eval``, ``gradcheck`` and ``bench``.

Exit codes: 0 success, 2 config error, 3 divergence, 4 checkpoint/head
mismatch, 5 gradient check failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import gradcheck
from .checkpoint import CheckpointError
from .data import ConfigError, Dataset, FormatError, SyntheticSpec, generate_scale_task, load_cifar10_binary
from .experiment import bench_table
from .model import HEADS, BaseCnnConfig, ScaleClassifier
from .numerics import ContractError
from .train import DivergenceError, EpochRecord, TrainConfig, evaluate, fit, pretrain

log = logging.getLogger("srnn")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_GRADCHECK = 0, 2, 3, 4, 5
GRAD_TOL = 1e-4


@dataclass(frozen=True)
class RunConfig:
    head: str = "srnn_halfgru"
    dataset: str = "synthetic"
    data_path: str = ""
    val_path: str = ""
    scales: tuple = ((16, 16), (32, 32), (64, 64))
    lr0: float = 0.001
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    decay_every: int = 15
    decay_factor: float = 0.1
    epochs: int = 35
    batch_size: int = 32
    seed: int = 0
    pretrain_epochs: int = 20
    pretrain_lr0: float = 0.02
    pretrain_decay_every: int = 14
    pretrained: str = ""
    augment: bool = True
    channels: tuple = (16, 32, 64, 128)
    noise: float = SyntheticSpec.noise
    train_per_class: int = SyntheticSpec.train_per_class
    val_per_class: int = SyntheticSpec.val_per_class
    out_dir: str = "."

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, momentum=self.momentum, nesterov=self.nesterov,
                           weight_decay=self.weight_decay, decay_every=self.decay_every,
                           decay_factor=self.decay_factor, epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed, scales=self.scales, head=self.head,
                           pretrain_epochs=self.pretrain_epochs, pretrain_lr0=self.pretrain_lr0,
                           pretrain_decay_every=self.pretrain_decay_every,
                           augment=self.augment)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(noise=self.noise, train_per_class=self.train_per_class,
                             val_per_class=self.val_per_class, seed=self.seed)


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_scales(v: str) -> tuple:
    out = []
    for item in v.split(","):
        h, w = item.strip().lower().replace("×", "x").split("x")
        out.append((int(h), int(w)))
    return tuple(out)


def _parse_ints(v: str) -> tuple:
    return tuple(int(c) for c in v.split(","))


_PARSERS = {bool: _parse_bool, int: int, float: float, str: str}
_SPECIAL = {"scales": _parse_scales, "channels": _parse_ints}


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Unknown keys and bad values raise :class:`ConfigError` naming the line.
    """
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser = _SPECIAL.get(key) or _PARSERS[{"bool": bool, "int": int, "float": float}.get(types[key], str)]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    cfg = RunConfig(**values)
    if cfg.head not in HEADS:
        raise ConfigError(f"unknown head {cfg.head!r}; expected one of {', '.join(HEADS)}")
    if cfg.dataset not in ("synthetic", "cifar10"):
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    try:
        cfg.train_config()
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        return generate_scale_task(cfg.synthetic_spec())
    full = load_cifar10_binary(cfg.data_path)
    if cfg.val_path:
        return full, load_cifar10_binary(cfg.val_path, split="val")
    cut = len(full) - max(1, len(full) // 10)
    val = full.subset(np.arange(cut, len(full)))
    val.split = "val"
    return full.subset(np.arange(cut)), val


# ---------------------------------------------------------------------------
# csv helpers

def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_csv(path: Path, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())
    return buf.getvalue()


def metrics_rows(history: list[EpochRecord]) -> list[list[str]]:
    return [[r.epoch, repr(r.lr), _fmt(r.train_loss), _fmt(r.val_top1), _fmt(r.val_top5)] for r in history]


METRICS_HEADER = ["epoch", "lr", "train_loss", "val_top1", "val_top5"]


# ---------------------------------------------------------------------------
# commands

def cmd_train(config_path) -> int:
    cfg = load_config(config_path)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = load_data(cfg)
    tcfg = cfg.train_config()
    srnn_head = cfg.head in ("srnn_vanilla", "srnn_halfgru")

    if cfg.pretrained:
        base = ckpt.base_from_state(ckpt.load(cfg.pretrained))
    elif srnn_head:
        log.info("pretraining base CNN for %d epochs", cfg.pretrain_epochs)
        base, hist = pretrain(tcfg, train, val, BaseCnnConfig(channels=cfg.channels,
                                                               in_channels=train.images.shape[1]))
        write_csv(out / "pretrain_metrics.csv", METRICS_HEADER, metrics_rows(hist))
        ckpt.checkpoint_save(base, out / "pretrained.srnn")
    else:
        base = ScaleClassifier.init(BaseCnnConfig(channels=cfg.channels, in_channels=train.images.shape[1]),
                                    train.num_classes, np.random.default_rng([cfg.seed, 1]))

    if srnn_head:
        model, hist = fit(tcfg, train, base.clone(), val)
        ckpt.checkpoint_save(model, out / "model.srnn", base=base)
    else:
        # ensembles wrap an ordinary single-scale classifier
        model, hist = fit(replace(tcfg, head="single"), train, base, val, eval_head=cfg.head)
        ckpt.checkpoint_save(model, out / "model.srnn")
    write_csv(out / "metrics.csv", METRICS_HEADER, metrics_rows(hist))
    print(f"trained {cfg.head} for {len(hist)} epochs; final val top-1 {hist[-1].val_top1:.2f}%")
    return EXIT_OK


def _scale_name(s) -> str:
    return f"{s[0]}x{s[1]}"


def eval_table(states: list[dict], cfg: RunConfig, val: Dataset) -> list[tuple[str, float, float]]:
    """Rows: each single scale (ascending), ens_prob, ens_logit, then SRNN heads present."""
    base = ckpt.base_from_state(states[0], dtype=np.float64)
    rows = []
    for s in cfg.scales:
        rows.append((f"single_{_scale_name(s)}", *evaluate(base, val, [s], "single")))
    for head in ("ens_prob", "ens_logit"):
        rows.append((head, *evaluate(base, val, cfg.scales, head)))
    srnns = {}
    for st in states:
        head = ckpt.infer_head(st)
        if head != "single" and head not in srnns:
            srnns[head] = ckpt.model_from_state(st, head=head, dtype=np.float64)
    for head in ("srnn_vanilla", "srnn_halfgru"):
        if head in srnns:
            rows.append((head, *evaluate(srnns[head], val, cfg.scales, head)))
    return rows


def _check_states(states: list[dict], cfg: RunConfig) -> None:
    """Raise CheckpointError naming absent tensors for the configured head."""
    missing = ckpt.missing_tensors(states[0], "single", "base." if "base.fc.weight" in states[0] else "")
    if missing:
        raise CheckpointError("missing tensors: " + ", ".join(missing))
    for st in states:
        head = ckpt.infer_head(st)
        if head != "single":
            gaps = ckpt.missing_tensors(st, head)
            if gaps:
                raise CheckpointError("missing tensors: " + ", ".join(gaps))
    if cfg.head in ("srnn_vanilla", "srnn_halfgru"):
        have = [ckpt.infer_head(st) for st in states]
        if cfg.head not in have:
            gaps = min((ckpt.missing_tensors(st, cfg.head) for st in states), key=len)
            raise CheckpointError("missing tensors: " + ", ".join(gaps))


def cmd_eval(checkpoints, config_path) -> int:
    cfg = load_config(config_path)
    states = [ckpt.load(p) for p in checkpoints]
    _check_states(states, cfg)
    _, val = load_data(cfg)
    rows = eval_table(states, cfg, val)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval.csv", ["head", "top1", "top5"], [[h, _fmt(a), _fmt(b)] for h, a, b in rows])
    print(f"{'head':<16}{'top-1 %':>10}{'top-5 %':>10}")
    for h, a, b in rows:
        print(f"{h:<16}{a:>10.2f}{b:>10.2f}")
    return EXIT_OK


def cmd_bench(checkpoint_path, config_path) -> int:
    cfg = load_config(config_path)
    state = ckpt.load(checkpoint_path)
    stored = ckpt.infer_head(state)
    head = cfg.head if cfg.head in ("srnn_vanilla", "srnn_halfgru") else stored
    if head == "single":
        head = "srnn_vanilla"
    if stored == "srnn_halfgru" and head == "srnn_vanilla":
        raise CheckpointError("config asks for srnn_vanilla but the checkpoint holds a half-GRU model")
    model = ckpt.model_from_state(state, head=head, dtype=np.float64)
    _, val = load_data(cfg)
    rows = bench_table(model, val, cfg.scales)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "bench.csv", ["scales_used", "top1", "mac_count"], [[k, _fmt(e), m] for k, e, m in rows])
    print(f"{'scales_used':>12}{'top-1 %':>10}{'MACs/image':>14}")
    for k, e, m in rows:
        print(f"{k:>12}{e:>10.2f}{m:>14}")
    return EXIT_OK


def cmd_gradcheck(seed: int = 0) -> int:
    results = gradcheck.run(seed)
    worst = max(results, key=lambda r: r.rel_error)
    failed = [r for r in results if not r.rel_error < GRAD_TOL]
    for r in failed:
        print(f"FAIL {r.head} {r.name}: relative error {r.rel_error:.3e}")
    print(f"worst: {worst.head} {worst.name} relative error {worst.rel_error:.3e} (tolerance {GRAD_TOL:g})")
    return EXIT_GRADCHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SRNN_THREADS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srnn", description="Scale-recurrent image classifiers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="pretrain + fine-tune a head from a run config")
    t.add_argument("config")
    e = sub.add_parser("eval", help="table of top-1/top-5 error for every head")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("config")
    g = sub.add_parser("gradcheck", help="finite-difference check of both SRNN heads")
    g.add_argument("--seed", type=int, default=0)
    b = sub.add_parser("bench", help="anytime inference: error and cost per scale prefix")
    b.add_argument("checkpoint")
    b.add_argument("config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits
    with threadpool_limits(_threads()):
        try:
            if args.command == "train":
                return cmd_train(args.config)
            if args.command == "eval":
                return cmd_eval(args.checkpoints, args.config)
            if args.command == "bench":
                return cmd_bench(args.checkpoint, args.config)
            return cmd_gradcheck(args.seed)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except DivergenceError as exc:
            print(f"diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except FormatError as exc:
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except CheckpointError as exc:
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
