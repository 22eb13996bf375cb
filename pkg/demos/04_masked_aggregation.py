"""Boundary-masked aggregation: what the mask actually blocks.

Local aggregation mixes each point's k neighbor features through two small
networks (a position-dependent weight net and a feature transform) and an
outer product. In masked mode every neighbor feature is scaled by that
neighbor's boundary score first, so a neighbor with g=0 contributes exactly
what a zero feature vector would, no matter what its features are. The demo
verifies the blocking bitwise, then shows the three aggregation variants
agree when the mask is all ones, and how the augmented variant amplifies
instead of suppressing.

Run:  python demos/04_masked_aggregation.py
"""

import numpy as np

from cloudseg import BoundaryField, PointCloud
from cloudseg.encode import (
    GemLayer,
    LayerConfig,
    augmented_aggregation,
    global_aggregation,
    masked_local_aggregation,
)
from cloudseg.neighbors import knn_index, relative_positions

rng = np.random.default_rng(0)
n, k, c_feat = 256, 8, 16
positions = rng.uniform(-1, 1, (n, 3))
features = rng.normal(size=(n, c_feat))
cloud = PointCloud(positions, rng.uniform(0, 1, (n, 3)), 2,
                   np.zeros(n, dtype=np.int64))
idx = knn_index(cloud, k)
rel = relative_positions(cloud, idx)

config = LayerConfig(role="encoder", mode="masked", k=k, c_mid=8, c_feat=c_feat,
                     c_out=32)
layer = GemLayer.create(config, c_in=c_feat, rng=np.random.default_rng(1))

# mark a third of the points as boundaries (g=0)
g = np.ones(n)
g[rng.permutation(n)[: n // 3]] = 0.0
field = BoundaryField(soft=g)

out = masked_local_aggregation(features, rel, idx, field, layer.phi, layer.mnet,
                                  proj=layer.proj)

# scrambling the features of every masked point changes nothing, bitwise
scrambled = features.copy()
scrambled[g == 0.0] = rng.normal(size=(int(np.sum(g == 0.0)), c_feat)) * 1e6
out2 = masked_local_aggregation(scrambled, rel, idx, field, layer.phi, layer.mnet,
                                   proj=layer.proj)
print(f"masked points scrambled, outputs identical: {np.array_equal(out, out2)}")

# scrambling an unmasked point does propagate to its neighbors
scrambled = features.copy()
victim = int(np.flatnonzero(g == 1.0)[0])
scrambled[victim] += 100.0
out3 = masked_local_aggregation(scrambled, rel, idx, field, layer.phi, layer.mnet,
                                   proj=layer.proj)
touched = int(np.sum(np.any(out3 != out, axis=1)))
print(f"one interior point scrambled, {touched} points change "
      f"(its aggregation neighborhood)")

# with g identically 1 the masked, global, and augmented forms coincide
ones = BoundaryField(soft=np.ones(n))
m_out = masked_local_aggregation(features, rel, idx, ones, layer.phi, layer.mnet,
                                    proj=layer.proj)
g_out = global_aggregation(features, rel, idx, layer.phi, layer.mnet,
                              proj=layer.proj)
a_out = augmented_aggregation(features, rel, idx, ones, layer.phi, layer.mnet,
                                 proj=layer.proj)
print(f"g=1 everywhere: masked == global == augmented: "
      f"{np.array_equal(m_out, g_out) and np.array_equal(g_out, a_out)}")

# the augmented variant scales boundary neighbors by 2-g instead of g: with
# g=0 it doubles their features rather than deleting them
aug = augmented_aggregation(features, rel, idx, field, layer.phi, layer.mnet,
                               proj=layer.proj)
doubled = features.copy()
doubled[g == 0.0] *= 2.0
ref = global_aggregation(doubled, rel, idx, layer.phi, layer.mnet,
                            proj=layer.proj)
print(f"augmented == global on doubled boundary features: "
      f"{np.array_equal(aug, ref)}")
