"""Turning a trained supernet into a discrete genotype.

Three selectors live here: the value-based argmax baseline, greedy
decorrelation (cosine similarity against node outputs with Gram-Schmidt
removal of already selected operators), and an exhaustive enumeration oracle.

Activations are never needed as whole vectors: everything the selectors use
is an inner product, so :class:`ActivationStore` streams one Gram matrix per
cell over the discretization batches.  Vectors are kept only on request.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DegenerateError, InputError, OracleCapError, StructuralError
from .ops import SearchSpace, softmax_weights
from .supernet import ArchParams, Tap, edge_list, node_edges

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
RESIDUAL_FLOOR = 1e-10  # relative to the node output norm


# ----------------------------------------------------------------------------
# vector primitives


@dataclass
class FlatActivation:
    vector: np.ndarray
    source: tuple = ()


def _vec(a) -> np.ndarray:
    return np.asarray(a.vector if isinstance(a, FlatActivation) else a, dtype=np.float64).ravel()


def degenerate(a, floor: float = NORM_FLOOR) -> bool:
    return float(np.linalg.norm(_vec(a))) < floor


def cosine_sim(a, b) -> float:
    """Cosine of the angle between two flat activations; 0 when either is degenerate."""
    a, b = _vec(a), _vec(b)
    if a.size != b.size:
        raise StructuralError(f"cosine_sim: lengths {a.size} and {b.size} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def gs_remove(y, o) -> np.ndarray:
    """Remove the component of ``y`` along ``o``: ``y - <o,y>/<o,o> * o``."""
    y, o = _vec(y), _vec(o)
    if y.size != o.size:
        raise StructuralError(f"gs_remove: lengths {y.size} and {o.size} differ")
    oo = float(np.dot(o, o))
    if math.sqrt(oo) <= NORM_FLOOR:
        raise DegenerateError("cannot project onto a near-zero operator output")
    return y - (np.dot(o, y) / oo) * o


# ----------------------------------------------------------------------------
# activation store


@dataclass
class CellActivations:
    """Streamed inner products for one cell.

    Source order: node outputs ``0..N-1`` first, then every ``(edge, op)`` in
    edge-major order.  ``theta`` holds, per edge, the Gram matrix of
    ``[bn(mixed), bn(o_1), ..., bn(o_M)]`` with per-batch static BN.
    """

    index: int
    reduction: bool
    nodes: int
    ops: int
    gram: np.ndarray = None
    theta: np.ndarray = None
    length: int = 0
    vectors: dict | None = None

    def __post_init__(self):
        e = len(edge_list(self.nodes))
        size = self.nodes + e * self.ops
        if self.gram is None:
            self.gram = np.zeros((size, size))
        if self.theta is None:
            self.theta = np.zeros((e, self.ops + 1, self.ops + 1))

    @property
    def edges(self) -> int:
        return len(edge_list(self.nodes))

    def y(self, node: int) -> int:
        return node

    def op(self, edge: int, op: int) -> int:
        return self.nodes + edge * self.ops + op

    def source(self, i: int) -> tuple:
        if i < self.nodes:
            return (self.index, "node", i)
        e, o = divmod(i - self.nodes, self.ops)
        return (self.index, "op", e, o)

    def add_chunk(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        self.gram += rows @ rows.T
        self.length += rows.shape[1]
        if self.vectors is not None:
            for i, r in enumerate(rows):
                self.vectors.setdefault(i, []).append(r.astype(np.float32))

    def vector(self, i: int) -> FlatActivation:
        if self.vectors is None:
            raise InputError("vectors were not kept; collect with keep_vectors=True")
        return FlatActivation(np.concatenate(self.vectors[i]), self.source(i))


@dataclass
class ActivationStore:
    space: SearchSpace
    nodes: int
    cells: list = field(default_factory=list)
    batches: int = 0

    def of_type(self, reduction: bool) -> list:
        return [c for c in self.cells if c.reduction == reduction]

    @classmethod
    def from_vectors(cls, space: SearchSpace, nodes: int, cells, keep_vectors: bool = True):
        """Build a store from explicit vectors.

        ``cells`` is a list of dicts with keys ``reduction`` (bool), ``y``
        (list of N node vectors) and ``ops`` (mapping ``(edge, op)`` to vector;
        missing entries are zero vectors).
        """
        store = cls(space, nodes)
        m = len(space)
        for idx, spec in enumerate(cells):
            c = CellActivations(idx, bool(spec.get("reduction", False)), nodes, m,
                                vectors={} if keep_vectors else None)
            length = np.asarray(spec["y"][0]).size
            rows = np.zeros((c.gram.shape[0], length))
            for n, v in enumerate(spec["y"]):
                rows[c.y(n)] = np.asarray(v, dtype=np.float64).ravel()
            for (e, o), v in spec["ops"].items():
                rows[c.op(e, o)] = np.asarray(v, dtype=np.float64).ravel()
            c.add_chunk(rows)
            store.cells.append(c)
        store.batches = 1
        return store


class _CollectTap(Tap):
    wants_edges = True

    def __init__(self, store: ActivationStore, keep_vectors: bool):
        self.store = store
        self.keep = keep_vectors
        self.rows: dict[int, dict] = {}

    def _cell(self, index, reduction):
        while len(self.store.cells) <= index:
            i = len(self.store.cells)
            self.store.cells.append(CellActivations(i, False, self.store.nodes, len(self.store.space),
                                                    vectors={} if self.keep else None))
        c = self.store.cells[index]
        c.reduction = reduction
        return c

    def node(self, cell, node, raw, out):
        if node >= 0:
            self.rows.setdefault(cell, {})[("node", node)] = raw.data

    def edge(self, cell, edge, outputs, mixed):
        slot = self.rows.setdefault(cell, {})
        slot[("mixed", edge)] = mixed.data
        for o, out in enumerate(outputs):
            slot[("op", edge, o)] = out  # None for zero

    def flush(self, reductions):
        for index, slot in self.rows.items():
            c = self._cell(index, reductions[index])
            shape = slot[("node", 0)].shape
            length = int(np.prod(shape))
            rows = np.zeros((c.gram.shape[0], length))
            for n in range(c.nodes):
                rows[c.y(n)] = slot[("node", n)].ravel()
            for e in range(c.edges):
                bn_rows = np.zeros((c.ops + 1, length))
                bn_rows[0] = _bn(slot[("mixed", e)]).ravel()
                for o in range(c.ops):
                    out = slot[("op", e, o)]
                    if out is not None:
                        rows[c.op(e, o)] = out.data.ravel()
                        bn_rows[o + 1] = _bn(out.data).ravel()
                c.theta[e] += bn_rows @ bn_rows.T
            c.add_chunk(rows)
        self.rows = {}


def _bn(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    axes = (0,) + tuple(range(2, x.ndim))
    c = x - x.mean(axis=axes, keepdims=True)
    return c / np.sqrt((c * c).mean(axis=axes, keepdims=True) + eps)


def collect_activations(net, arch: ArchParams, images, batches: int = 1, batch_size: int = 16,
                        keep_vectors: bool = False) -> ActivationStore:
    """Run ``batches`` forward passes over ``images`` and stream the Gram matrices.

    Batches are consecutive slices of ``images`` in the given order.  With
    ``keep_vectors`` the flattened activations themselves are retained too.
    """
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise InputError("discretization subset is empty")
    if batches < 1:
        raise InputError(f"need at least one batch, got {batches}")
    store = ActivationStore(net.space, net.config.nodes)
    tap = _CollectTap(store, keep_vectors)
    reductions = [c.reduction for c in net.cells]
    starts = range(0, images.shape[0], batch_size)
    for b, start in enumerate(starts):
        if b >= batches:
            break
        chunk = images[start:start + batch_size]
        with ad.no_grad():
            net(ad.Tensor(chunk), arch, tap)
        tap.flush(reductions)
        store.batches += 1
    return store


# ----------------------------------------------------------------------------
# genotype


@dataclass(frozen=True)
class Genotype:
    """Per cell type and node, ``k`` distinct ``(predecessor, op name)`` pairs."""

    normal: tuple
    reduce: tuple
    space: str
    nodes: int
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise StructuralError("k must be at least 1")
        object.__setattr__(self, "normal", tuple(tuple((int(p), str(o)) for p, o in n) for n in self.normal))
        object.__setattr__(self, "reduce", tuple(tuple((int(p), str(o)) for p, o in n) for n in self.reduce))
        for tag, cell in (("normal", self.normal), ("reduce", self.reduce)):
            if len(cell) != self.nodes:
                raise StructuralError(f"{tag}: {len(cell)} nodes, expected {self.nodes}")
            for n, pairs in enumerate(cell):
                if len(pairs) != self.k:
                    raise StructuralError(f"{tag} node {n}: {len(pairs)} selections, expected {self.k}")
                preds = [p for p, _ in pairs]
                if len(set(preds)) != len(preds):
                    raise StructuralError(f"{tag} node {n}: repeated predecessor {preds}")
                for p, op in pairs:
                    if not 0 <= p < n + 2:
                        raise StructuralError(f"{tag} node {n}: predecessor {p} out of range")
                    if op == "zero":
                        raise StructuralError(f"{tag} node {n}: zero cannot be selected")

    def cell(self, reduction: bool) -> tuple:
        return self.reduce if reduction else self.normal

    def check_space(self, space: SearchSpace) -> None:
        for cell in (self.normal, self.reduce):
            for pairs in cell:
                for _, op in pairs:
                    if space.index(op) is None:
                        raise StructuralError(f"operation {op!r} is not in search space {space.spec}")

    def to_dict(self) -> dict:
        def enc(cell):
            return [[{"pred": p, "op": o} for p, o in pairs] for pairs in cell]
        return {"normal": enc(self.normal), "reduce": enc(self.reduce), "space": self.space,
                "nodes": self.nodes, "k": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        try:
            def dec(cell):
                return tuple(tuple((int(s["pred"]), str(s["op"])) for s in pairs) for pairs in cell)
            return cls(dec(d["normal"]), dec(d["reduce"]), str(d["space"]), int(d["nodes"]), int(d["k"]))
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed genotype: {exc}") from exc


def _state_label(i: int) -> str:
    return ("c_{k-2}", "c_{k-1}")[i] if i < 2 else str(i - 2)


def emit_genotype(g: Genotype, fmt: str = "json", cell: str | None = None) -> str:
    """Render as JSON, or as one DOT digraph per cell type (``cell`` picks one)."""
    if fmt == "json":
        return json.dumps(g.to_dict(), indent=2) + "\n"
    if fmt != "dot":
        raise StructuralError(f"unknown format {fmt!r}")
    kinds = [cell] if cell else ["normal", "reduce"]
    parts = []
    for kind in kinds:
        pairs = g.normal if kind == "normal" else g.reduce
        lines = [f"digraph {kind} {{", "  rankdir=LR;"]
        for i in range(g.nodes + 2):
            lines.append(f'  "{_state_label(i)}";')
        lines.append('  "c_{k}";')
        for n, sel in enumerate(pairs):
            for p, op in sel:
                lines.append(f'  "{_state_label(p)}" -> "{n}" [label="{op}"];')
        for n in range(g.nodes):
            lines.append(f'  "{n}" -> "c_{{k}}";')
        lines.append("}")
        parts.append("\n".join(lines) + "\n")
    return "".join(parts)


def parse_genotype(text: str) -> Genotype:
    try:
        return Genotype.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise InputError(f"genotype is not valid JSON: {exc}") from exc


# ----------------------------------------------------------------------------
# value-based discretization


def _value_select(weights: np.ndarray, space: SearchSpace, node: int, k: int, used=()) -> list:
    zero = space.index("zero")
    cands = []
    for e in node_edges(node):
        src = e - node_edges(node).start
        for o in range(len(space)):
            if o != zero:
                cands.append((-weights[e, o], e, o, src))
    cands.sort()
    chosen, taken = [], set(used)
    for _, e, o, src in cands:
        if src not in taken:
            chosen.append((src, o))
            taken.add(src)
            if len(chosen) + len(used) == k:
                break
    return chosen


def value_discretize(arch: ArchParams, space: SearchSpace, nodes: int, k: int) -> Genotype:
    """Per node, keep the ``k`` largest non-zero softmax weights on distinct edges.

    Ties break toward the lower edge index, then the lower op index.
    """
    cells = []
    for reduction in (False, True):
        w = softmax_weights(arch.of(reduction).data)
        cell = []
        for n in range(nodes):
            if k > n + 2:
                raise StructuralError(f"node {n} has only {n + 2} predecessors, k={k}")
            cell.append(tuple((src, space.ops[o].name) for src, o in _value_select(w, space, n, k)))
        cells.append(tuple(cell))
    return Genotype(cells[0], cells[1], space.spec, nodes, k)


# ----------------------------------------------------------------------------
# decorrelation discretization


@dataclass
class Selection:
    cell_type: str
    round: int
    node: int
    pred: int
    edge: int
    op: str
    mean_cos: float
    cell_cos: list
    residual_max_cos: float
    fallback: bool = False


@dataclass
class DecorrelationResult:
    genotype: Genotype
    selections: list


class _Basis:
    """Orthonormal basis of span(selected ops) in coefficient space of one cell."""

    def __init__(self, cell: CellActivations):
        self.g = cell.gram
        self.q: list[np.ndarray] = []

    def inner(self, a, b) -> float:
        return float(a @ self.g @ b)

    def unit(self, i: int) -> np.ndarray:
        v = np.zeros(self.g.shape[0])
        v[i] = 1.0
        return v

    def residual(self, v: np.ndarray) -> np.ndarray:
        # classical GS applied twice keeps the residual orthogonal to working precision
        for _ in range(2):
            for q in self.q:
                v = v - self.inner(q, v) * q
        return v

    def add(self, i: int) -> bool:
        v = self.unit(i)
        scale = math.sqrt(max(self.g[i, i], 0.0))
        u = self.residual(v)
        nu = math.sqrt(max(self.inner(u, u), 0.0))
        if scale < NORM_FLOOR or nu <= 1e-9 * scale:
            return False  # already spanned, nothing new to remove
        self.q.append(u / nu)
        return True

    def cos(self, v: np.ndarray, i: int, v_floor: float) -> float:
        nv = math.sqrt(max(self.inner(v, v), 0.0))
        ni = math.sqrt(max(self.g[i, i], 0.0))
        if nv < v_floor or ni < NORM_FLOOR:
            return 0.0
        return float(np.clip(float(v @ self.g[:, i]) / (nv * ni), -1.0, 1.0))


def decorrelation_discretize(store: ActivationStore, space: SearchSpace | None = None,
                             nodes: int | None = None, k: int = 2,
                             arch: ArchParams | None = None) -> DecorrelationResult:
    """Greedy decorrelation selection, ``k`` rounds over all nodes.

    In each round every node, in order, orthogonalizes its output against all
    operators already selected anywhere in the cell, scores each eligible
    (edge, op) candidate by signed cosine similarity averaged over the cells of
    the same type, and keeps the best.  Zero is never a candidate, nor is an
    edge the node already uses.  When no candidate has a usable vector the slot
    falls back to the value-based choice (needs ``arch``).
    """
    space = space or store.space
    nodes = nodes or store.nodes
    zero = space.index("zero")
    out_cells, selections = [], []
    for reduction in (False, True):
        tag = "reduce" if reduction else "normal"
        cells = store.of_type(reduction)
        if not cells:
            raise InputError(f"no {tag} cells in the activation store")
        bases = [_Basis(c) for c in cells]
        picked: list[list[tuple[int, int]]] = [[] for _ in range(nodes)]
        for n in range(nodes):
            if k > n + 2:
                raise StructuralError(f"node {n} has only {n + 2} predecessors, k={k}")
        for r in range(k):
            for n in range(nodes):
                used = {src for src, _ in picked[n]}
                cands = [(e, o) for e in node_edges(n) for o in range(len(space))
                         if o != zero and (e - node_edges(n).start) not in used]
                residuals = []
                for c, b in zip(cells, bases):
                    y = b.unit(c.y(n))
                    floor = max(NORM_FLOOR, RESIDUAL_FLOOR * math.sqrt(max(c.gram[n, n], 0.0)))
                    residuals.append((b.residual(y), floor))
                scored = []
                for e, o in cands:
                    if all(c.gram[c.op(e, o), c.op(e, o)] < NORM_FLOOR ** 2 for c in cells):
                        continue
                    per_cell = [b.cos(res, c.op(e, o), fl)
                                for c, b, (res, fl) in zip(cells, bases, residuals)]
                    scored.append((float(np.mean(per_cell)), e, o, per_cell))
                fallback = not scored
                if fallback:
                    log.warning("%s node %d round %d: no usable candidate, using alpha", tag, n, r)
                    w = softmax_weights(arch.of(reduction).data) if arch is not None else \
                        np.zeros((len(edge_list(nodes)), len(space)))
                    src, o = _value_select(w, space, n, len(used) + 1, used)[-1]
                    e = node_edges(n).start + src
                    best = (0.0, e, o, [0.0] * len(cells))
                else:
                    # max score; ties go to the lowest edge, then lowest op
                    best = min(scored, key=lambda t: (-t[0], t[1], t[2]))
                score, e, o, per_cell = best
                src = e - node_edges(n).start
                picked[n].append((src, o))
                worst = 0.0
                for c, b in zip(cells, bases):
                    b.add(c.op(e, o))
                    res = b.residual(b.unit(c.y(n)))
                    floor = max(NORM_FLOOR, RESIDUAL_FLOOR * math.sqrt(max(c.gram[n, n], 0.0)))
                    for pe, po in _selected_edges(picked):
                        worst = max(worst, abs(b.cos(res, c.op(pe, po), floor)))
                selections.append(Selection(tag, r, n, src, e, space.ops[o].name, score,
                                            list(per_cell), worst, fallback))
        out_cells.append(tuple(tuple((s, space.ops[o].name) for s, o in p) for p in picked))
    g = Genotype(out_cells[0], out_cells[1], space.spec, nodes, k)
    return DecorrelationResult(g, selections)


def _selected_edges(picked):
    for n, pairs in enumerate(picked):
        for src, o in pairs:
            yield node_edges(n).start + src, o


# ----------------------------------------------------------------------------
# exhaustive oracle and synthesis score


def _ls_energy(gram: np.ndarray, y: int, idx: list[int]) -> float:
    """Squared norm of the least-squares projection of source ``y`` onto ``idx``."""
    if not idx:
        return 0.0
    a = gram[np.ix_(idx, idx)]
    b = gram[idx, y]
    coef = np.linalg.lstsq(a, b, rcond=1e-12)[0]
    return float(max(b @ coef, 0.0))


def _node_options(space: SearchSpace, n: int, k: int) -> list:
    zero = space.index("zero")
    ops = [o for o in range(len(space)) if o != zero]
    opts = []
    for srcs in itertools.combinations(range(n + 2), k):
        for choice in itertools.product(ops, repeat=k):
            opts.append(tuple(zip(srcs, choice)))
    return opts


def synthesis_score(store: ActivationStore, genotype: Genotype, reduction: bool | None = None,
                    scope: str = "cell") -> float:
    """Cosine between node outputs and their least-squares synthesis by the selected ops.

    ``scope="cell"`` synthesizes every node output from the span of all ops
    selected anywhere in the cell, which is the quantity greedy decorrelation
    works on; ``scope="node"`` uses only the node's own ops.  Averaged over
    cells of a type; with ``reduction=None`` averaged over both types.
    """
    if scope not in ("cell", "node"):
        raise StructuralError(f"scope must be 'cell' or 'node', got {scope!r}")
    space = SearchSpace.parse(genotype.space) if genotype.space else store.space
    if reduction is None:
        return 0.5 * (synthesis_score(store, genotype, False, scope)
                      + synthesis_score(store, genotype, True, scope))
    sel = genotype.cell(reduction)
    selection = [[(p, space.index(op)) for p, op in sel[n]] for n in range(genotype.nodes)]
    return float(np.mean([_cell_score(c, selection, scope) for c in store.of_type(reduction)]))


def _cell_score(c: CellActivations, selection, scope: str = "cell") -> float:
    idx = [[c.op(node_edges(n).start + p, o) for p, o in pairs] for n, pairs in enumerate(selection)]
    everything = sorted({i for row in idx for i in row})
    num, den = 0.0, 0.0
    for n, own in enumerate(idx):
        num += _ls_energy(c.gram, c.y(n), everything if scope == "cell" else own)
        den += max(c.gram[n, n], 0.0)
    return math.sqrt(num / den) if den > 0 else 0.0


@dataclass
class OracleResult:
    genotype: Genotype
    score: float
    scores: dict
    enumerated: int


def exhaustive_oracle(store: ActivationStore, space: SearchSpace | None = None,
                      nodes: int | None = None, k: int = 2, cap: int = 10**6,
                      scope: str = "cell") -> OracleResult:
    """Best selection by least-squares synthesis cosine, found by enumeration.

    The whole cell is enumerated jointly when ``nodes * k <= 6``, scored with
    :func:`synthesis_score`'s ``scope``.  Larger cells are enumerated node by
    node with each node's own ops, since the cell-wide score does not split
    by node.  Refuses when the count exceeds ``cap``.
    """
    space = space or store.space
    nodes = nodes or store.nodes
    options = [_node_options(space, n, k) for n in range(nodes)]
    joint = nodes * k <= 6
    per_type = math.prod(len(o) for o in options) if joint else sum(len(o) for o in options)
    count = 2 * per_type
    if count > cap:
        raise OracleCapError(count, cap)
    cells_out, scores = [], {}
    for reduction in (False, True):
        cells = store.of_type(reduction)
        if not cells:
            raise InputError("activation store lacks a cell type")
        if joint:
            best, best_score = None, -1.0
            for combo in itertools.product(*options):
                s = float(np.mean([_cell_score(c, combo, scope) for c in cells]))
                if s > best_score + 1e-15:
                    best, best_score = combo, s
            chosen = list(best)
        else:
            chosen = []
            for n in range(nodes):
                best, best_score = None, -1.0
                for opt in options[n]:
                    s = 0.0
                    for c in cells:
                        idx = [c.op(node_edges(n).start + p, o) for p, o in opt]
                        yy = c.gram[n, n]
                        s += math.sqrt(_ls_energy(c.gram, n, idx) / yy) if yy > 0 else 0.0
                    s /= len(cells)
                    if s > best_score + 1e-15:
                        best, best_score = opt, s
                chosen.append(best)
            best_score = float(np.mean([_cell_score(c, chosen, scope) for c in cells]))
        cells_out.append(tuple(tuple((p, space.ops[o].name) for p, o in sorted(pairs)) for pairs in chosen))
        scores["reduce" if reduction else "normal"] = best_score
    g = Genotype(cells_out[0], cells_out[1], space.spec, nodes, k)
    return OracleResult(g, 0.5 * (scores["normal"] + scores["reduce"]), scores, count)


def canonical(g: Genotype) -> Genotype:
    """Same genotype with each node's pairs sorted by predecessor."""
    return Genotype(tuple(tuple(sorted(p)) for p in g.normal), tuple(tuple(sorted(p)) for p in g.reduce),
                    g.space, g.nodes, g.k)
