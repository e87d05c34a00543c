"""
Skewed clients and seam-weighted masks
======================================

The synthetic stand-ins for the cross-silo splits: six label-skewed clients
sized like the real ones, a shifted public set, and toy segmentation masks
with their per-pixel loss weights.
"""

import numpy as np

from fedhelp import data as D

# six clients, train sizes scaled from the reference split to 3400
plan = D.isic19_plan(3400, min_test=50)
source = D.make_classification(0, N=8000, cluster_spread=2.0)
shards = D.partition(source, plan, seed=0)
for cid, (train, test) in enumerate(shards):
    share = train.histogram() / len(train)
    print(f"client {cid}: {len(train):5d} train / {len(test):4d} test, label mix {np.round(share, 2)}")

# the public set has ten classes and rotated means
public = D.make_public_set(0, C_pub=10, P=1000, shift=0.3)
print("public classes", public.num_classes, "first id", public.ids[0])

# one toy image: mask, distance to the nearest and second-nearest blob border
seg = D.make_segmentation(3, 1, 16, 16)
mask = seg.masks[0]
print("\nmask")
print("\n".join("".join("#" if v else "." for v in row) for row in mask))
print("\nweight map (rounded); seams between blobs light up")
print(np.round(seg.weights[0], 1))

# two bars four pixels apart meet in the middle at d1 = d2 = 2
bars = np.zeros((5, 9), dtype=int)
bars[:, :3] = 1
bars[:, 6:] = 1
d1, d2 = D.distance_transforms(bars)
print("\nmidpoint distances", d1[2, 4], d2[2, 4])
