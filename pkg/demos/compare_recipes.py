"""Train baseline, SAD-only and full models on the toy data and compare them.

Prints spreadness, mean peak std, mean feature difference under an eye-band
occluder, masked occluded accuracy and part retrieval for one seed.

    python demos/compare_recipes.py [seed]
"""

import sys

import numpy as np

from facediv import analysis as A
from facediv.geometry import OccluderSpec
from facediv.network import build
from facediv.synthdata import generate_samples
from facediv.training import fit, toy_train_config

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
data = generate_samples(20, 50, seed=0, size=32, zoom=1.3)
train = [s for s in data if s.split == "train"]
test = [s for s in data if s.split == "test"]
pairs = generate_samples(150, 2, seed=0, size=32, train_fraction=0.5, id_offset=1000, zoom=1.3)
eye_band = OccluderSpec(rect=(24.0, 35.0, 48.0, 12.0))

print(f"{'recipe':9s} {'spread':>7s} {'std':>6s} {'diff':>7s} {'occ_acc':>7s}  eyes  nose mouth", flush=True)
for recipe in ("baseline", "sad", "full"):
    config = toy_train_config(recipe, seed=seed)
    model = build(config.net_config(), np.random.default_rng(seed))
    fit(model, train, config)
    stats = A.peak_stats(model, test)
    diff = A.feature_diff(model, test, eye_band, np.random.default_rng(0)).values.mean()
    occ = A.occluded_accuracy(model, test, OccluderSpec(), np.random.default_rng(1))
    fa, fb = A.features(model, pairs[0::2]), A.features(model, pairs[1::2])
    ret = []
    for region in ("eyes", "nose", "mouth"):
        part = A.part_filters(stats, region)
        ret.append(A.pair_rank1(fa, fb, part) if len(part) else float("nan"))
    print(f"{recipe:9s} {A.spreadness(stats).mean:7.2f} {np.mean(stats.mean_std()):6.2f} "
          f"{diff:7.4f} {occ:7.3f}  " + " ".join(f"{r:.3f}" for r in ret), flush=True)
