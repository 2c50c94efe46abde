"""Discrete network built from a genotype, and its training loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor
from .dataio import Dataset, batches
from .discretize import Genotype
from .ops import FactorizedReduce, Module, OpKind, ReLUConvBN, build_op, init_weight, static_bn
from .rng import SplitMix64
from .supernet import SuperNetConfig
from .trainer import clip_grad_norm, cosine_lr, evaluate


class DiscreteCell(Module):
    def __init__(self, selection, c_pp, c_p, c, reduction, reduction_prev, rng):
        self.reduction = reduction
        self.selection = selection
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, rng.fork("pre0"))
        else:
            self.pre0 = ReLUConvBN(c_pp, c, 1, 1, 0, rng.fork("pre0"))
        self.pre1 = ReLUConvBN(c_p, c, 1, 1, 0, rng.fork("pre1"))
        self.ops = []
        for n, pairs in enumerate(selection):
            for pred, name in pairs:
                stride = 2 if reduction and pred < 2 else 1
                kind = OpKind.from_name(name).with_stride(stride)
                self.ops.append(build_op(kind, c, c, rng.fork(f"n{n}p{pred}")))

    def __call__(self, s0, s1):
        states = [self.pre0(s0), self.pre1(s1)]
        i = 0
        for pairs in self.selection:
            total = None
            for pred, _ in pairs:
                out = self.ops[i](states[pred])
                total = out if total is None else total + out
                i += 1
            states.append(total)
        return ad.concat(states[2:], axis=1)


class DiscreteNet(Module):
    def __init__(self, genotype: Genotype, config: SuperNetConfig, seed: int = 0):
        rng = SplitMix64(seed).fork("discrete")
        c = config.init_channels
        c_stem = config.stem_multiplier * c
        self.stem = init_weight(rng.fork("stem"), (c_stem, config.in_channels, 3, 3), config.in_channels * 9)
        c_pp, c_p, c_curr = c_stem, c_stem, c
        reduction_prev = False
        self.cells = []
        for i in range(config.cells):
            reduction = i in config.reduction_positions
            if reduction:
                c_curr *= 2
            self.cells.append(DiscreteCell(genotype.cell(reduction), c_pp, c_p, c_curr, reduction,
                                           reduction_prev, rng.fork(f"cell{i}")))
            reduction_prev = reduction
            c_pp, c_p = c_p, genotype.nodes * c_curr
        self.head_w = init_weight(rng.fork("head"), (config.classes, c_p), c_p)
        self.head_b = Tensor(np.zeros(config.classes), requires_grad=True, name="b")
        for name, p in self.named_parameters():
            p.name = name

    def __call__(self, x):
        s = static_bn(ad.conv2d(x, self.stem, 1, 1))
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return ad.linear(ad.global_avg_pool(s1), self.head_w, self.head_b)


@dataclass
class RetrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr_max: float = 0.025
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    seed: int = 0


@dataclass
class RetrainRow:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float
    lr: float


def retrain(genotype: Genotype, net_config: SuperNetConfig, cfg: RetrainConfig, data: Dataset,
            train_idx, test_idx, out_csv=None) -> list:
    """Train the discrete network from scratch; test accuracy is measured each epoch."""
    net = DiscreteNet(genotype, net_config, cfg.seed)
    params = net.parameters()
    opt = SGD(params, cfg.lr_max, cfg.momentum, cfg.weight_decay)
    test_x, test_y = data.images[test_idx], data.labels[test_idx]
    rows = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        losses, correct, seen = [], 0, 0
        for b in batches(data, train_idx, cfg.batch_size, cfg.seed, epoch, "retrain"):
            ad.zero_grad(params)
            logits = net(Tensor(b.images))
            loss = ad.cross_entropy(logits, b.labels)
            ad.backward(loss, params)
            clip_grad_norm(params, cfg.grad_clip)
            opt.step(lr)
            losses.append(loss.item())
            correct += int((logits.data.argmax(axis=1) == b.labels).sum())
            seen += b.labels.size
        _, test_acc = evaluate(net, test_x, test_y, cfg.batch_size)
        rows.append(RetrainRow(epoch, float(np.mean(losses)), correct / max(seen, 1), test_acc, lr))
    if out_csv is not None:
        write_retrain_csv(out_csv, rows)
    return rows


def write_retrain_csv(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "test_acc", "lr"])
        for r in rows:
            w.writerow([r.epoch, repr(r.loss), repr(r.train_acc), repr(r.test_acc), repr(r.lr)])
        if rows:
            w.writerow(["final", "", "", repr(rows[-1].test_acc), ""])
