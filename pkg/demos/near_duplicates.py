"""Why decorrelation picks different operators than alpha does.

One node with two incoming edges.  Skip on edge 0 and skip on edge 1 produce
the same feature map; sep_conv on edge 1 carries the rest of the node
output.  Alpha prefers skip on both edges, so the value-based discretizer keeps
two copies of the same signal.  Greedy decorrelation takes one skip, removes
its direction from the node output, and then finds the conv.
"""

import numpy as np

from microdarts.discretize import (ActivationStore, decorrelation_discretize, synthesis_score,
                                   value_discretize)
from microdarts.ops import SearchSpace
from microdarts.supernet import ArchParams

space = SearchSpace.parse("zero,skip_connect,sep_conv_3x3")
rng = np.random.default_rng(0)
skip = rng.normal(size=256)
conv = rng.normal(size=256)
conv -= conv @ skip / (skip @ skip) * skip

ops = {(0, 1): skip, (1, 1): skip.copy(), (1, 2): conv,
       (0, 2): 0.1 * rng.normal(size=256)}
y = 2 * skip + conv
cell = {"y": [y], "ops": ops}
store = ActivationStore.from_vectors(space, 1, [dict(cell, reduction=False), dict(cell, reduction=True)])

arch = ArchParams(2, 3)
logits = np.array([[0.0, 2.0, 0.5], [0.0, 2.0, 1.5]])
arch.set(logits, logits)

value = value_discretize(arch, space, 1, 2)
result = decorrelation_discretize(store, space, 1, 2, arch)

print("value-based :", value.normal[0], f"synthesis cosine {synthesis_score(store, value):.3f}")
print("decorrelated:", result.genotype.normal[0], f"synthesis cosine {synthesis_score(store, result.genotype):.3f}")
print()
for s in result.selections[:2]:
    print(f"round {s.round}: picked {s.op} on input {s.pred}, cosine {s.mean_cos:.3f}, "
          f"residual vs selected {s.residual_max_cos:.1e}")
