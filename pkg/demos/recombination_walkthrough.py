"""Layer-wise recombination on three tiny models.

Every model is a stack of layers. Recombination draws one permutation per
layer index and hands layer k of input model perm[k][j] to output model j,
so each output is a patchwork of the inputs. Nothing is averaged.
"""
import numpy as np

from fedmr import build_mlp, global_model_gen, model_recombine
from fedmr.structure import decompose

K = 3
models = [build_mlp(2, [3], 2, seed=[0, j]) for j in range(K)]

# tag each model by the value of its first weight so sources are easy to follow
def tag(model, k):
    layer = model.layers[k]
    return "-" if not layer.params else f"{layer.params['weight'].flat[0]:+.3f}"

print("architecture:", models[0].architecture_id)
print()
for j, m in enumerate(models):
    print(f"input  {j}:", "  ".join(tag(m, k) for k in range(len(m.layers))))

out = model_recombine(models, rng_seed=[7, 1])
print()
for j, m in enumerate(out.entries):
    print(f"output {j}:", "  ".join(tag(m, k) for k in range(len(m.layers))))

print()
print("source model for each (layer, output slot):")
for k, src in enumerate(out.sources):
    print(f"  layer {k} ({models[0].layers[k].kind:7s}) <- {src}")

# the set of layer blocks is untouched, only their owners change
before = sorted(b.key() for row in decompose(models).lists for b in row if b.params)
after = sorted(b.key() for row in decompose(out.entries).lists for b in row if b.params)
print()
print(f"{len(before)} parameter blocks before and after, same multiset: {before == after}")

# the global model is the plain average, used only for inference
g = global_model_gen(out.entries)
w = np.mean([m.layers[0].params["weight"] for m in models], axis=0)
print("global first-layer weight equals the input average:", np.allclose(g.layers[0].params["weight"], w))
