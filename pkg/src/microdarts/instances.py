"""Seeded synthetic activation stores for checking the discretizers.

Node outputs are built the way a supernet builds them: each node is a
positive combination of the op outputs on its incoming edges.  Two families:

* orthogonal: every op vector in a cell is orthogonal to every other, so the
  best K-subset is known in closed form and greedy must match enumeration;
* correlated: op vectors fall into a few clusters that cut across edges,
  node outputs are softmax(alpha)-weighted mixtures plus a little noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretize import ActivationStore
from .ops import SearchSpace
from .rng import SplitMix64
from .supernet import ArchParams, edge_list, node_edges

NONZERO_S1 = SearchSpace.named("S1").names[1:]


@dataclass
class Instance:
    store: ActivationStore
    arch: ArchParams
    space: SearchSpace
    nodes: int
    k: int


def _space(rng: SplitMix64, m: int) -> SearchSpace:
    picks = sorted(rng.permutation(len(NONZERO_S1))[:m].tolist())
    return SearchSpace.parse(",".join(["zero"] + [NONZERO_S1[i] for i in picks]))


def _orthonormal(rng: SplitMix64, length: int, count: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal((length, count)))
    return q.T


def orthogonal_instance(seed: int, max_ops: int = 7, max_nodes: int = 2, max_k: int = 2,
                        length: int = 64) -> Instance:
    """Mutually orthogonal op vectors with random norms; positive node coefficients."""
    rng = SplitMix64(seed).fork("orthogonal")
    nodes = 1 + int(rng.uint64s(1)[0] % np.uint64(max_nodes))
    k = 1 + int(rng.uint64s(1)[0] % np.uint64(max_k))
    m = 2 + int(rng.uint64s(1)[0] % np.uint64(max_ops - 1))
    space = _space(rng, m)
    edges = len(edge_list(nodes))
    cells = []
    for reduction in (False, True):
        r = rng.fork("reduce" if reduction else "normal")
        basis = _orthonormal(r, max(length, edges * m), edges * m)
        norms = r.uniform(edges * m, 0.5, 2.0)
        coefs = r.uniform(edges * m, 0.1, 1.0)
        ops, ys = {}, []
        for e in range(edges):
            for o in range(1, m + 1):
                i = e * m + (o - 1)
                ops[(e, o)] = norms[i] * basis[i]
        for n in range(nodes):
            y = np.zeros(basis.shape[1])
            for e in node_edges(n):
                for o in range(1, m + 1):
                    y += coefs[e * m + o - 1] * ops[(e, o)]
            ys.append(y)
        cells.append({"reduction": reduction, "y": ys, "ops": ops})
    arch = ArchParams(edges, m + 1)
    arch.set(rng.fork("alpha").normal((edges, m + 1)), rng.fork("alpha_r").normal((edges, m + 1)))
    return Instance(ActivationStore.from_vectors(space, nodes, cells, keep_vectors=False), arch, space,
                    nodes, k)


def correlated_instance(seed: int, max_ops: int = 7, max_nodes: int = 2, k: int = 2,
                        length: int = 64, shared: float = 0.8, alpha_std: float = 1.0,
                        noise: float = 0.05) -> Instance:
    """Op vectors drawn from a few shared latent directions; nodes are softmax(alpha) mixtures.

    Each op vector is ``shared * g[c] + (1 - shared) * own`` with its cluster
    ``c`` drawn uniformly, so near-duplicates appear across edges as well as
    within them.  That is the situation in which keeping both members of a
    correlated pair wastes a slot.
    """
    rng = SplitMix64(seed).fork("correlated")
    nodes = 1 + int(rng.uint64s(1)[0] % np.uint64(max_nodes))
    m = 2 + int(rng.uint64s(1)[0] % np.uint64(max_ops - 1))
    space = _space(rng, m)
    edges = len(edge_list(nodes))
    arch = ArchParams(edges, m + 1)
    alphas = [rng.fork("alpha").normal((edges, m + 1), alpha_std),
              rng.fork("alpha_r").normal((edges, m + 1), alpha_std)]
    arch.set(*alphas)
    cells = []
    for reduction, alpha in zip((False, True), alphas):
        r = rng.fork("reduce" if reduction else "normal")
        w = np.exp(alpha - alpha.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        clusters = max(2, (edges * m) // 2)
        latent = r.normal((clusters, length))
        ops, ys = {}, []
        for e in range(edges):
            for o in range(1, m + 1):
                c = int(r.uint64s(1)[0] % np.uint64(clusters))
                v = shared * latent[c] + (1 - shared) * r.normal(length)
                ops[(e, o)] = r.uniform(1, 0.5, 2.0)[0] * v
        for n in range(nodes):
            y = noise * r.normal(length)
            for e in node_edges(n):
                for o in range(1, m + 1):
                    y = y + w[e, o] * ops[(e, o)]
            ys.append(y)
        cells.append({"reduction": reduction, "y": ys, "ops": ops})
    return Instance(ActivationStore.from_vectors(space, nodes, cells, keep_vectors=False), arch, space,
                    nodes, k)
