"""Candidate operations, static batch normalization and the softmax-mixed edge."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import StructuralError
from .rng import SplitMix64

BN_EPS = 1e-5

KIND_TAGS = ("zero", "identity", "max_pool", "avg_pool", "sep_conv", "dil_conv")


@dataclass(frozen=True)
class OpKind:
    kind: str
    kernel: int = 0
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise StructuralError(f"unknown op kind {self.kind!r}")
        if self.kind in ("zero", "identity"):
            if self.kernel not in (0, 1) or self.dilation != 1:
                raise StructuralError(f"{self.kind} takes no kernel hyperparameters")
        elif self.kernel <= 0 or self.kernel % 2 == 0:
            raise StructuralError(f"kernel must be odd and positive, got {self.kernel}")
        if self.dilation < 1:
            raise StructuralError(f"dilation must be positive, got {self.dilation}")
        if self.stride not in (1, 2):
            raise StructuralError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def name(self) -> str:
        if self.kind == "zero":
            return "zero"
        if self.kind == "identity":
            return "skip_connect"
        return f"{self.kind}_{self.kernel}x{self.kernel}"

    def with_stride(self, stride: int) -> "OpKind":
        return replace(self, stride=stride)

    @classmethod
    def from_name(cls, name: str) -> "OpKind":
        name = name.strip()
        aliases = {"zero": "zero", "none": "zero", "skip_connect": "identity",
                   "identity": "identity", "skip": "identity"}
        if name in aliases:
            return cls(aliases[name])
        for tag in ("max_pool", "avg_pool", "sep_conv", "dil_conv"):
            if name.startswith(tag + "_"):
                size = name[len(tag) + 1:]
                a, _, b = size.partition("x")
                if a.isdigit() and a == b:
                    return cls(tag, int(a), 2 if tag == "dil_conv" else 1)
        raise StructuralError(f"unknown operation name {name!r}")


ZERO = OpKind("zero")
SKIP = OpKind("identity")
MAX_POOL3 = OpKind("max_pool", 3)
AVG_POOL3 = OpKind("avg_pool", 3)
SEP_CONV3 = OpKind("sep_conv", 3)
SEP_CONV5 = OpKind("sep_conv", 5)
DIL_CONV3 = OpKind("dil_conv", 3, 2)
DIL_CONV5 = OpKind("dil_conv", 5, 2)

NAMED_SPACES = {
    "S1": (ZERO, SKIP, MAX_POOL3, AVG_POOL3, SEP_CONV3, SEP_CONV5, DIL_CONV3, DIL_CONV5),
    "S2": (ZERO, MAX_POOL3, AVG_POOL3, SKIP, SEP_CONV3),
    "S3": (ZERO, SKIP, SEP_CONV3),
}


@dataclass(frozen=True)
class SearchSpace:
    """Ordered candidate set; the order fixes the column index of alpha."""

    ops: tuple
    name: str = "custom"

    def __post_init__(self):
        if not self.ops:
            raise StructuralError("search space must contain at least one operation")
        names = [op.name for op in self.ops]
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate operations in search space: {names}")
        if any(op.stride != 1 for op in self.ops):
            raise StructuralError("search space ops are declared at stride 1")

    @classmethod
    def named(cls, name: str) -> "SearchSpace":
        if name not in NAMED_SPACES:
            raise StructuralError(f"unknown search space {name!r}; expected S1, S2 or S3")
        return cls(NAMED_SPACES[name], name)

    @classmethod
    def parse(cls, text: str) -> "SearchSpace":
        """``S1``/``S2``/``S3`` or a comma-separated list of op names."""
        text = text.strip()
        if text in NAMED_SPACES:
            return cls.named(text)
        return cls(tuple(OpKind.from_name(n) for n in text.split(",") if n.strip()))

    @property
    def names(self) -> list[str]:
        return [op.name for op in self.ops]

    def __len__(self):
        return len(self.ops)

    def index(self, name: str) -> int | None:
        try:
            return self.names.index(name)
        except ValueError:
            return None

    @property
    def spec(self) -> str:
        return self.name if self.name in NAMED_SPACES else ",".join(self.names)


# ----------------------------------------------------------------------------
# parameterized building blocks


class Module:
    """Container whose parameters are the Tensor / Module attributes it holds."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.name is not None:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def init_weight(rng: SplitMix64, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(shape, -bound, bound), requires_grad=True, name="w")


def static_bn(x: Tensor, eps: float = BN_EPS) -> Tensor:
    """Per-channel ``(x - mean) / sqrt(var + eps)`` with the biased variance."""
    return ad.static_bn(x, eps)


class ReLUConvBN(Module):
    def __init__(self, c_in, c_out, kernel, stride, padding, rng):
        self.w = init_weight(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return static_bn(ad.conv2d(ad.relu(x), self.w, self.stride, self.padding))


class FactorizedReduce(Module):
    """Stride-2 reduction by two offset 1x1 convolutions, concatenated."""

    def __init__(self, c_in, c_out, rng):
        if c_out % 2:
            raise StructuralError(f"factorized reduce needs an even channel count, got {c_out}")
        self.w1 = init_weight(rng, (c_out // 2, c_in, 1, 1), c_in)
        self.w2 = init_weight(rng, (c_out // 2, c_in, 1, 1), c_in)

    def __call__(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise StructuralError(f"factorized reduce needs even spatial size, got {x.shape}")
        x = ad.relu(x)
        a = ad.conv2d(x, self.w1, stride=2)
        b = ad.conv2d(x[:, :, 1:, 1:], self.w2, stride=2)
        return static_bn(ad.concat([a, b], axis=1))


class SepBlock(Module):
    """relu -> depthwise conv -> pointwise conv -> static BN."""

    def __init__(self, c_in, c_out, kernel, stride, dilation, rng):
        self.dw = init_weight(rng, (c_in, 1, kernel, kernel), kernel * kernel)
        self.pw = init_weight(rng, (c_out, c_in, 1, 1), c_in)
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (kernel - 1) // 2

    def __call__(self, x):
        c = x.shape[1]
        h = ad.conv2d(ad.relu(x), self.dw, self.stride, self.padding, self.dilation, groups=c)
        return static_bn(ad.conv2d(h, self.pw))


class SepConv(Module):
    def __init__(self, c_in, c_out, kernel, stride, rng):
        self.blocks = [SepBlock(c_in, c_in, kernel, stride, 1, rng),
                       SepBlock(c_in, c_out, kernel, 1, 1, rng)]

    def __call__(self, x):
        return self.blocks[1](self.blocks[0](x))


class Pool(Module):
    def __init__(self, mode, stride):
        self.fn = ad.max_pool2d if mode == "max_pool" else ad.avg_pool2d
        self.stride = stride

    def __call__(self, x):
        return static_bn(self.fn(x, 3, self.stride, 1))


class Identity(Module):
    def __init__(self, c_in, c_out, stride, post_norm, rng):
        if stride == 1 and c_in != c_out:
            raise StructuralError(f"identity cannot map {c_in} to {c_out} channels")
        self.reduce = FactorizedReduce(c_in, c_out, rng) if stride == 2 else None
        self.post_norm = post_norm

    def __call__(self, x):
        out = x if self.reduce is None else self.reduce(x)
        return static_bn(out) if self.post_norm else out


class Zero(Module):
    def __init__(self, c_out, stride):
        self.c_out, self.stride = c_out, stride

    def __call__(self, x):
        b, _, h, w = x.shape
        s = self.stride
        shape = (b, self.c_out, (h - 1) // s + 1, (w - 1) // s + 1)
        return Tensor(np.zeros(shape, dtype=x.data.dtype), dtype=x.data.dtype)


def build_op(kind: OpKind, c_in: int, c_out: int, rng: SplitMix64, post_norm: bool = False):
    """Instantiate ``kind`` with fresh weights drawn from ``rng``."""
    s = kind.stride
    if kind.kind == "zero":
        return Zero(c_out, s)
    if kind.kind == "identity":
        return Identity(c_in, c_out, s, post_norm, rng)
    if c_in != c_out and kind.kind in ("max_pool", "avg_pool"):
        raise StructuralError(f"{kind.name} cannot map {c_in} to {c_out} channels")
    if kind.kind in ("max_pool", "avg_pool"):
        return Pool(kind.kind, s)
    if kind.kind == "sep_conv":
        return SepConv(c_in, c_out, kind.kernel, s, rng)
    return SepBlock(c_in, c_out, kind.kernel, s, kind.dilation, rng)


def op_forward(kind: OpKind, x: Tensor, channels_out: int | None = None, seed: int = 0) -> Tensor:
    """Apply a freshly initialised ``kind`` to ``x``."""
    if x.ndim != 4:
        raise StructuralError(f"operations expect 4-D input, got {x.shape}")
    c_out = x.shape[1] if channels_out is None else channels_out
    return build_op(kind, x.shape[1], c_out, SplitMix64(seed))(x)


# ----------------------------------------------------------------------------
# mixed edge


def mix(outputs, alpha_row: Tensor) -> Tensor:
    """softmax(alpha_row)-weighted sum of op outputs; ``None`` is an all-zero output."""
    if alpha_row.ndim != 1 or alpha_row.shape[0] != len(outputs):
        raise StructuralError(f"alpha row of shape {alpha_row.shape} for {len(outputs)} operations")
    return ad.weighted_sum(ad.softmax(alpha_row), outputs)


class MixedOp(Module):
    def __init__(self, space: SearchSpace, c_in, c_out, stride, rng, post_norm=False):
        self.kinds = [k.with_stride(stride) for k in space.ops]
        self.ops = [build_op(k, c_in, c_out, rng.fork(k.name), post_norm) for k in self.kinds]

    def outputs(self, x: Tensor) -> list:
        return [None if k.kind == "zero" else op(x) for k, op in zip(self.kinds, self.ops)]

    def __call__(self, x: Tensor, alpha_row: Tensor) -> Tensor:
        return mix(self.outputs(x), alpha_row)


def mixed_op_forward(x: Tensor, edge_ops, alpha_row) -> Tensor:
    """Mixed edge output.

    ``edge_ops`` may hold callables or :class:`OpKind` values; kinds are
    instantiated with deterministic fresh weights.
    """
    if not isinstance(alpha_row, Tensor):
        alpha_row = Tensor(alpha_row, dtype=x.data.dtype)
    if alpha_row.ndim != 1 or alpha_row.shape[0] != len(edge_ops):
        raise StructuralError(f"alpha row of length {alpha_row.shape} for {len(edge_ops)} ops")
    outs = []
    for i, op in enumerate(edge_ops):
        if isinstance(op, OpKind):
            outs.append(None if op.kind == "zero" else op_forward(op, x, seed=i))
        else:
            outs.append(op(x))
    return mix(outs, alpha_row)


def softmax_weights(alpha_row) -> np.ndarray:
    a = np.asarray(alpha_row, dtype=np.float64)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def alpha_grad_analytic(upstream, op_outputs, alpha_row) -> np.ndarray:
    """``S_o * <upstream, o(x) - mixed(x)>`` for every op ``o`` on the edge."""
    g = np.asarray(upstream.data if isinstance(upstream, Tensor) else upstream, dtype=np.float64)
    outs = [np.zeros_like(g) if o is None else
            np.asarray(o.data if isinstance(o, Tensor) else o, dtype=np.float64) for o in op_outputs]
    s = softmax_weights(alpha_row.data if isinstance(alpha_row, Tensor) else alpha_row)
    if len(outs) != s.size:
        raise StructuralError(f"{len(outs)} outputs for alpha row of length {s.size}")
    mixed = sum(si * o for si, o in zip(s, outs))
    return np.array([si * np.vdot(g, o - mixed) for si, o in zip(s, outs)])
