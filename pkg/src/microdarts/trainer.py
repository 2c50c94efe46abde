"""First-order bilevel search loop."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor
from .dataio import Dataset, Split, batches
from .diagnostics import DiagRecord, correlation_matrix, export_csv, mean_offdiag, op_ratio
from .discretize import collect_activations
from .errors import NumericError, StructuralError
from .supernet import ArchParams, NodeNormMode, NormTap, SuperNet, edge_list, save_supernet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_w_max: float = 0.025
    lr_w_min: float = 0.001
    momentum: float = 0.9
    weight_decay_w: float = 3e-4
    lr_alpha: float = 3e-3
    weight_decay_alpha: float = 1e-3
    freeze_epochs: int | None = None  # None -> 30% of epochs
    seed: int = 0
    mode: str = "off"
    precision: str = "f32"
    grad_clip: float = 5.0
    diag_interval: int = 10

    def __post_init__(self):
        if self.freeze_epochs is None or self.freeze_epochs < 0:
            self.freeze_epochs = int(0.3 * self.epochs)
        self.mode = NodeNormMode(self.mode).value
        if self.epochs < 0:
            raise StructuralError("epochs must be non-negative")
        if self.epochs > 0 and self.freeze_epochs >= self.epochs:
            raise StructuralError(f"freeze_epochs ({self.freeze_epochs}) must be < epochs ({self.epochs})")
        for name in ("lr_w_max", "lr_w_min", "lr_alpha"):
            if getattr(self, name) <= 0:
                raise StructuralError(f"{name} must be positive")
        if self.batch_size < 2:
            raise StructuralError("batch_size must be at least 2")


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 0 or not 0 <= t <= total:
        raise StructuralError(f"cosine_lr needs 0 <= t <= T and T > 0, got t={t}, T={total}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


@contextlib.contextmanager
def trainable(on, off):
    """Mark ``on`` as trainable and ``off`` as frozen for the duration."""
    saved = [(p, p.requires_grad) for p in list(on) + list(off)]
    for p in on:
        p.requires_grad = True
    for p in off:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class EpochMetrics:
    loss_w: float
    loss_alpha: float
    acc: float
    lr_w: float
    steps: int
    alpha_steps: int


@dataclass
class Optimizers:
    w: SGD
    alpha: SGD


def make_optimizers(net: SuperNet, arch: ArchParams, cfg: TrainConfig) -> Optimizers:
    return Optimizers(
        SGD(net.parameters(), cfg.lr_w_max, cfg.momentum, cfg.weight_decay_w),
        SGD(arch.tensors, cfg.lr_alpha, 0.0, cfg.weight_decay_alpha),
    )


def train_epoch(net: SuperNet, arch: ArchParams, data: Dataset, split: Split, cfg: TrainConfig,
                epoch: int, opt: Optimizers | None = None) -> EpochMetrics:
    """One pass over the weight split, alternating with alpha steps on the alpha split.

    Each step: SGD on the weights with a train batch (alpha frozen), then, once
    ``epoch >= freeze_epochs``, an alpha step with a validation batch (weights
    frozen).  Alpha batches cycle if that split is shorter.
    """
    opt = opt or make_optimizers(net, arch, cfg)
    weights = net.parameters()
    lr = cosine_lr(epoch, max(cfg.epochs, 1), cfg.lr_w_max, cfg.lr_w_min)
    w_batches = batches(data, split.train_w, cfg.batch_size, cfg.seed, epoch, "train_w")
    a_batches = batches(data, split.train_alpha, cfg.batch_size, cfg.seed, epoch, "train_alpha")
    update_alpha = epoch >= cfg.freeze_epochs and len(a_batches) > 0
    losses_w, losses_a, correct, seen = [], [], 0, 0
    for i, wb in enumerate(w_batches):
        try:
            if wb.tag != "train_w":
                raise StructuralError(f"weight step received a {wb.tag!r} batch")
            with trainable(weights, arch.tensors):
                ad.zero_grad(weights + arch.tensors)
                logits = net(Tensor(wb.images), arch)
                loss = ad.cross_entropy(logits, wb.labels)
                ad.backward(loss, weights)
                if any(a.grad is not None for a in arch.tensors):
                    raise StructuralError("alpha received a gradient during the weight step")
                clip_grad_norm(weights, cfg.grad_clip)
                opt.w.step(lr)
            losses_w.append(loss.item())
            correct += int((logits.data.argmax(axis=1) == wb.labels).sum())
            seen += wb.labels.size
            if update_alpha:
                ab = a_batches[i % len(a_batches)]
                if ab.tag != "train_alpha":
                    raise StructuralError(f"alpha step received a {ab.tag!r} batch")
                with trainable(arch.tensors, weights):
                    ad.zero_grad(weights + arch.tensors)
                    loss_a = ad.cross_entropy(net(Tensor(ab.images), arch), ab.labels)
                    ad.backward(loss_a, arch.tensors)
                    if any(p.grad is not None for p in weights):
                        raise StructuralError("weights received a gradient during the alpha step")
                    opt.alpha.step()
                losses_a.append(loss_a.item())
        except NumericError as exc:
            raise NumericError(f"epoch {epoch} batch {i}: {exc}", where=f"{exc.where} batch {i}") from exc
    ad.zero_grad(weights + arch.tensors)
    return EpochMetrics(
        float(np.mean(losses_w)) if losses_w else float("nan"),
        float(np.mean(losses_a)) if losses_a else float("nan"),
        correct / seen if seen else float("nan"),
        lr, len(losses_w), len(losses_a),
    )


def threads() -> int:
    try:
        return max(1, int(os.environ.get("MICRODARTS_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy; batches are reduced in order regardless of thread count."""
    starts = list(range(0, len(labels), batch_size))
    if not starts:
        return float("nan"), float("nan")

    def run(s):
        x, y = images[s:s + batch_size], labels[s:s + batch_size]
        with ad.no_grad():
            logits = model(Tensor(x))
            loss = ad.cross_entropy(logits, y).item()
        return loss * y.size, int((logits.data.argmax(axis=1) == y).sum())

    n = threads()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    total_loss = sum(p[0] for p in parts)
    total_correct = sum(p[1] for p in parts)
    return total_loss / len(labels), total_correct / len(labels)


@dataclass
class SearchResult:
    net: SuperNet
    arch: ArchParams
    records: list = field(default_factory=list)
    checkpoint: Path | None = None


def probe_batch(data: Dataset, split: Split, size: int) -> np.ndarray:
    return data.images[split.train_alpha[:size]]


def diagnose_epoch(net: SuperNet, arch: ArchParams, probe: np.ndarray, epoch: int,
                   metrics: EpochMetrics, with_corr: bool) -> DiagRecord:
    tap = NormTap()
    with ad.no_grad():
        net(Tensor(probe), arch, tap)
    space = net.space
    zero, skip = space.index("zero"), space.index("skip_connect")
    rec = DiagRecord(
        epoch, metrics.loss_w, metrics.loss_alpha, metrics.acc,
        op_ratio(arch.alpha_normal.data, zero), op_ratio(arch.alpha_normal.data, skip), metrics.lr_w,
        dict(tap.raw), dict(tap.out),
        op_ratio(arch.alpha_reduce.data, zero), op_ratio(arch.alpha_reduce.data, skip),
    )
    if with_corr:
        store = collect_activations(net, arch, probe, batches=1, batch_size=probe.shape[0])
        vals = [mean_offdiag(correlation_matrix(store, c.index, n))
                for c in store.cells for n in range(store.nodes)]
        vals = [v for v in vals if not math.isnan(v)]
        rec.mean_op_corr = float(np.mean(vals)) if vals else float("nan")
    return rec


def alpha_json(arch: ArchParams, space) -> str:
    nodes = 0
    while len(edge_list(nodes)) < arch.alpha_normal.shape[0]:
        nodes += 1
    labels = [f"{src}->{node}" for node, src in edge_list(nodes)]
    doc = {
        "space": space.spec,
        "ops": space.names,
        "edges": labels,
        "alpha_normal": [[float(v) for v in row] for row in arch.alpha_normal.data],
        "alpha_reduce": [[float(v) for v in row] for row in arch.alpha_reduce.data],
    }
    return json.dumps(doc, indent=1) + "\n"


def search(cfg: TrainConfig, net: SuperNet, data: Dataset, split: Split, out_dir=None,
           extra_config: dict | None = None, on_epoch=None) -> SearchResult:
    """Run every epoch, recording a diagnostics row per epoch.

    With ``out_dir`` writes ``diag.csv``, ``checkpoint.mdrt`` and ``alpha.json``.
    On a numeric abort the rows recorded so far are still written.
    """
    arch = net.new_arch()
    result = SearchResult(net, arch)
    if NodeNormMode(cfg.mode) is not net.mode:
        raise StructuralError(f"network built for mode {net.mode.value}, config asks for {cfg.mode}")
    opt = make_optimizers(net, arch, cfg)
    probe = probe_batch(data, split, cfg.batch_size)
    out = Path(out_dir) if out_dir is not None else None
    try:
        for epoch in range(cfg.epochs):
            metrics = train_epoch(net, arch, data, split, cfg, epoch, opt)
            with_corr = cfg.diag_interval > 0 and (epoch % cfg.diag_interval == 0 or epoch == cfg.epochs - 1)
            rec = diagnose_epoch(net, arch, probe, epoch, metrics, with_corr)
            result.records.append(rec)
            log.info("epoch %d loss_w %.4f loss_a %.4f acc %.3f zero %.3f skip %.3f", epoch,
                     rec.loss_w, rec.loss_alpha, rec.acc, rec.zero_ratio, rec.skip_ratio)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            export_csv(result.records, out / "diag.csv")
    if out is not None:
        result.checkpoint = out / "checkpoint.mdrt"
        save_supernet(result.checkpoint, net, arch, extra_config)
        (out / "alpha.json").write_text(alpha_json(arch, net.space))
    return result
