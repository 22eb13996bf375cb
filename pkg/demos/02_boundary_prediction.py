"""Train the boundary prediction module by itself in a few seconds.

The module is a per-point MLP reading one signal: the per-channel variance
of the k nearest neighbors' colors. Interior neighborhoods share one base
color, so their variance is just sensor noise; neighborhoods straddling a
label contact mix two palettes and the variance jumps. The weighted
cross-entropy (boundary misses cost w2=10x) biases the module toward
recall: missing a boundary point lets foreign features leak through the
mask downstream, while over-masking merely drops one neighbor.

Run:  python demos/02_boundary_prediction.py
"""

import numpy as np

from cloudseg import ArchConfig, generate_scene, init_network, sample_scene_spec
from cloudseg.boundary import (
    BoundaryField,
    annotate_boundary_gt,
    binarize,
    bpm_apply,
    bpm_backward,
    bpm_loss,
    neighbor_feature_variance,
)
from cloudseg.metrics import boundary_scores
from cloudseg.neighbors import knn_index
from cloudseg.train import OptimizerState, adam_step

scenes = [generate_scene(sample_scene_spec(s, target_points=1024)) for s in (3, 4, 5)]
held_out = generate_scene(sample_scene_spec(6, target_points=1024))

net = init_network(ArchConfig(), num_classes=5, seed=0)
bpm = net.bpm
rule = net.rule


def prepare(cloud):
    idx = knn_index(cloud, rule.k)
    return neighbor_feature_variance(cloud.colors, idx), annotate_boundary_gt(cloud, idx, rule)


train = [prepare(c) for c in scenes]
val_var, val_gt = prepare(held_out)


def score(tag):
    ghat, _ = bpm_apply(val_var, bpm)
    hard = binarize(BoundaryField(soft=ghat)).hard
    p, r, f1 = boundary_scores(val_gt.hard, hard)
    print(f"{tag:14s} precision {p:.3f}  recall {r:.3f}  f1 {f1:.3f}")


score("untrained")

params = {name: arr for name, arr in bpm.mlp.params().items()}
opt = OptimizerState(lr=1e-3,
                     m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()})
for epoch in range(200):
    for var, gt in train:
        ghat, cache = bpm_apply(var, bpm)
        loss, dghat = bpm_loss(BoundaryField(soft=ghat), gt, bpm.w1, bpm.w2)
        adam_step(params, bpm_backward(bpm, cache, dghat), opt)

score("200 epochs")

ghat, _ = bpm_apply(val_var, bpm)
interior = val_gt.hard == 1
print(f"\nheld-out soft scores: interior mean {ghat[interior].mean():.3f}, "
      f"boundary mean {ghat[~interior].mean():.3f}")
print("the w2=10 weighting pins boundary scores near 0 first; interior scores"
      "\nclimb toward 1 only where the variance is unambiguously quiet")
