"""Cell DAG, node normalization and the stacked one-shot model."""

from __future__ import annotations

import enum
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, StructuralError
from .ops import FactorizedReduce, MixedOp, Module, ReLUConvBN, SearchSpace, init_weight, mix, static_bn
from .rng import SplitMix64


class NodeNormMode(str, enum.Enum):
    OFF = "off"
    PRE = "pre"
    POST = "post"


def edge_list(nodes: int) -> list[tuple[int, int]]:
    """``(target node, source state)`` pairs, ordered by target then source.

    States 0 and 1 are the two cell inputs; intermediate node ``j`` is state
    ``j + 2``.
    """
    return [(j, i) for j in range(nodes) for i in range(j + 2)]


def edge_count(nodes: int) -> int:
    return sum(j + 2 for j in range(nodes))


def edge_index(node: int, source: int) -> int:
    if not 0 <= source < node + 2:
        raise StructuralError(f"node {node} has no incoming edge from state {source}")
    return sum(j + 2 for j in range(node)) + source


def node_edges(node: int) -> range:
    start = edge_index(node, 0)
    return range(start, start + node + 2)


@dataclass(frozen=True)
class CellSpec:
    nodes: int = 4
    reduction: bool = False
    k: int = 2

    def __post_init__(self):
        if self.nodes < 1:
            raise StructuralError("a cell needs at least one intermediate node")
        if not 1 <= self.k <= 2:
            raise StructuralError(f"k must be 1 or 2 (node 0 has two predecessors), got {self.k}")

    @property
    def edges(self) -> int:
        return edge_count(self.nodes)


@dataclass(frozen=True)
class SuperNetConfig:
    cells: int = 4
    init_channels: int = 8
    nodes: int = 4
    k: int = 2
    classes: int = 4
    in_channels: int = 1
    stem_multiplier: int = 3

    def __post_init__(self):
        if self.cells < 2:
            raise StructuralError(f"need at least 2 cells, got {self.cells}")
        if self.init_channels < 2 or self.init_channels % 2:
            raise StructuralError("init_channels must be an even number >= 2")
        if self.classes < 2:
            raise StructuralError("need at least 2 classes")

    @property
    def reduction_positions(self) -> tuple[int, int]:
        return (self.cells // 3, 2 * self.cells // 3)


class ArchParams:
    """Per-edge, per-op logits shared by all cells of one type."""

    def __init__(self, edges: int, ops: int, dtype=None):
        self.alpha_normal = Tensor(np.zeros((edges, ops)), requires_grad=True, name="alpha_normal",
                                   dtype=dtype)
        self.alpha_reduce = Tensor(np.zeros((edges, ops)), requires_grad=True, name="alpha_reduce",
                                   dtype=dtype)

    @property
    def tensors(self) -> list[Tensor]:
        return [self.alpha_normal, self.alpha_reduce]

    def of(self, reduction: bool) -> Tensor:
        return self.alpha_reduce if reduction else self.alpha_normal

    def copy(self) -> "ArchParams":
        out = ArchParams(*self.alpha_normal.shape, dtype=self.alpha_normal.data.dtype)
        out.alpha_normal.data = self.alpha_normal.data.copy()
        out.alpha_reduce.data = self.alpha_reduce.data.copy()
        return out

    def set(self, normal, reduce) -> None:
        normal = np.asarray(normal, dtype=self.alpha_normal.data.dtype)
        reduce = np.asarray(reduce, dtype=self.alpha_reduce.data.dtype)
        if normal.shape != self.alpha_normal.shape or reduce.shape != self.alpha_reduce.shape:
            raise StructuralError("alpha shape mismatch")
        if not (np.all(np.isfinite(normal)) and np.all(np.isfinite(reduce))):
            raise StructuralError("alpha entries must be finite")
        self.alpha_normal.data = normal.copy()
        self.alpha_reduce.data = reduce.copy()


def node_output(edge_outputs, mode: NodeNormMode | str = NodeNormMode.OFF):
    """Sum incoming edge outputs; under pre-normalization also static-BN the sum.

    Returns ``(output, raw_sum)``.
    """
    edge_outputs = list(edge_outputs)
    if not edge_outputs:
        raise StructuralError("node has no incoming edges")
    shape = edge_outputs[0].shape
    if any(e.shape != shape for e in edge_outputs):
        raise StructuralError(f"edge outputs disagree: {[e.shape for e in edge_outputs]}")
    raw = edge_outputs[0]
    for e in edge_outputs[1:]:
        raw = raw + e
    out = static_bn(raw) if NodeNormMode(mode) is NodeNormMode.PRE else raw
    return out, raw


class Tap:
    """Observer for a forward pass; the default records nothing."""

    def node(self, cell: int, node: int, raw: Tensor, out: Tensor) -> None:
        pass

    def edge(self, cell: int, edge: int, outputs: list, mixed: Tensor) -> None:
        pass

    wants_edges = False


def rms_norm(x: np.ndarray) -> float:
    """``||x|| / sqrt(x.size)``: the L2 norm with the shape constant divided out."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.linalg.norm(x) / np.sqrt(x.size))


class NormTap(Tap):
    """Collects raw and effective node norms; input states use node ids -2 and -1.

    Norms are per-element (RMS) so that the inputs of a reduction cell, which
    have twice the resolution of its intermediate nodes, stay comparable.
    """

    def __init__(self):
        self.raw: dict[tuple[int, int], float] = {}
        self.out: dict[tuple[int, int], float] = {}

    def node(self, cell, node, raw, out):
        self.raw[(cell, node)] = rms_norm(raw.data)
        self.out[(cell, node)] = rms_norm(out.data)


class Cell(Module):
    def __init__(self, space: SearchSpace, nodes: int, c_pp: int, c_p: int, c: int,
                 reduction: bool, reduction_prev: bool, mode: NodeNormMode, rng: SplitMix64):
        self.nodes = nodes
        self.reduction = reduction
        self.mode = NodeNormMode(mode)
        self.channels = c
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, rng.fork("pre0"))
        else:
            self.pre0 = ReLUConvBN(c_pp, c, 1, 1, 0, rng.fork("pre0"))
        self.pre1 = ReLUConvBN(c_p, c, 1, 1, 0, rng.fork("pre1"))
        post = self.mode is NodeNormMode.POST
        self.edges = [
            MixedOp(space, c, c, 2 if reduction and src < 2 else 1, rng.fork(f"edge{e}"), post)
            for e, (_, src) in enumerate(edge_list(nodes))
        ]

    def __call__(self, s0: Tensor, s1: Tensor, alpha: Tensor, index: int = 0,
                 tap: Tap | None = None) -> Tensor:
        tap = tap or Tap()
        if alpha.shape[0] != len(self.edges):
            raise StructuralError(f"alpha has {alpha.shape[0]} rows for {len(self.edges)} edges")
        with ad.scope(f"cell{index}"):
            s0 = self.pre0(s0)
            s1 = self.pre1(s1)
            if s0.shape != s1.shape:
                raise StructuralError(f"cell inputs disagree after preprocessing: {s0.shape}, {s1.shape}")
            states = []
            for slot, s in ((-2, s0), (-1, s1)):
                out = static_bn(s) if self.mode is NodeNormMode.PRE else s
                tap.node(index, slot, s, out)
                states.append(out)
            for j in range(self.nodes):
                with ad.scope(f"node{j}"):
                    incoming = []
                    for e in node_edges(j):
                        src = edge_list(self.nodes)[e][1]
                        mop = self.edges[e]
                        outs = mop.outputs(states[src])
                        mixed = mix(outs, alpha[e])
                        if tap.wants_edges:
                            tap.edge(index, e, outs, mixed)
                        incoming.append(mixed)
                    out, raw = node_output(incoming, self.mode)
                tap.node(index, j, raw, out)
                states.append(out)
            return ad.concat(states[2:], axis=1)


def cell_forward(cell: Cell, s_prev_prev: Tensor, s_prev: Tensor, arch: ArchParams,
                 mode: NodeNormMode | str | None = None, index: int = 0, tap: Tap | None = None) -> Tensor:
    if mode is not None and NodeNormMode(mode) is not cell.mode:
        raise StructuralError(f"cell was built for mode {cell.mode.value}, asked for {mode}")
    return cell(s_prev_prev, s_prev, arch.of(cell.reduction), index, tap)


class SuperNet(Module):
    """Stem, stacked cells, global average pool and a linear head."""

    def __init__(self, config: SuperNetConfig, space: SearchSpace,
                 mode: NodeNormMode | str = NodeNormMode.OFF, seed: int = 0):
        self.config = config
        self.space = space
        self.mode = NodeNormMode(mode)
        rng = SplitMix64(seed).fork("supernet")
        c = config.init_channels
        c_stem = config.stem_multiplier * c
        self.stem = init_weight(rng.fork("stem"), (c_stem, config.in_channels, 3, 3),
                                config.in_channels * 9)
        c_pp, c_p, c_curr = c_stem, c_stem, c
        reduction_prev = False
        self.cells = []
        for i in range(config.cells):
            reduction = i in config.reduction_positions
            if reduction:
                c_curr *= 2
            self.cells.append(Cell(space, config.nodes, c_pp, c_p, c_curr, reduction,
                                   reduction_prev, self.mode, rng.fork(f"cell{i}")))
            reduction_prev = reduction
            c_pp, c_p = c_p, config.nodes * c_curr
        head_rng = rng.fork("head")
        self.head_w = init_weight(head_rng, (config.classes, c_p), c_p)
        self.head_b = Tensor(np.zeros(config.classes), requires_grad=True, name="b")
        for name, p in self.named_parameters():
            p.name = name

    def new_arch(self) -> ArchParams:
        return ArchParams(edge_count(self.config.nodes), len(self.space))

    def __call__(self, x, arch: ArchParams, tap: Tap | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise StructuralError(f"expected input (B, {cfg.in_channels}, H, W), got {x.shape}")
        with ad.scope("stem"):
            s = static_bn(ad.conv2d(x, self.stem, 1, 1))
        s0 = s1 = s
        for i, cell in enumerate(self.cells):
            s0, s1 = s1, cell(s0, s1, arch.of(cell.reduction), i, tap)
        with ad.scope("head"):
            return ad.linear(ad.global_avg_pool(s1), self.head_w, self.head_b)


def supernet_forward(net: SuperNet, batch, arch: ArchParams, tap: Tap | None = None) -> Tensor:
    return net(batch, arch, tap)


# ----------------------------------------------------------------------------
# checkpoint file: magic, version, config block, named f32 tensors

MAGIC = b"MDRT"
VERSION = 1


def format_config(config: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.items())


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"line {lineno}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_checkpoint(path, config: dict, tensors: dict) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    block = format_config(config).encode("utf-8")
    buf += struct.pack("<I", len(block)) + block
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path) -> tuple[dict, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise InputError(f"{path}: truncated at byte {pos}, need {n} more bytes")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise InputError(f"{path}: bad magic at byte 0")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = parse_config_text(take(n).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise InputError(f"{path}: {len(data) - pos} trailing bytes after byte {pos}")
    return config, tensors


def net_config_dict(net: SuperNet) -> dict:
    d = {f"net.{k}": v for k, v in asdict(net.config).items()}
    d["net.space"] = net.space.spec
    d["net.mode"] = net.mode.value
    return d


def save_supernet(path, net: SuperNet, arch: ArchParams, extra: dict | None = None) -> None:
    tensors = {name: p.data for name, p in net.named_parameters()}
    tensors["alpha_normal"] = arch.alpha_normal.data
    tensors["alpha_reduce"] = arch.alpha_reduce.data
    config = net_config_dict(net)
    config.update(extra or {})
    write_checkpoint(path, config, tensors)


def load_supernet(path) -> tuple[SuperNet, ArchParams, dict]:
    config, tensors = read_checkpoint(path)
    try:
        kwargs = {f.name: int(config[f"net.{f.name}"]) for f in fields(SuperNetConfig)}
        space = SearchSpace.parse(config["net.space"])
        mode = NodeNormMode(config["net.mode"])
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: incomplete network config ({exc})") from exc
    net = SuperNet(SuperNetConfig(**kwargs), space, mode)
    arch = net.new_arch()
    dtype = ad.get_dtype()
    for name, p in net.named_parameters():
        if name not in tensors or tensors[name].shape != p.shape:
            raise InputError(f"{path}: missing or misshapen tensor {name!r}")
        p.data = tensors[name].astype(dtype)
    arch.set(tensors["alpha_normal"], tensors["alpha_reduce"])
    return net, arch, config
