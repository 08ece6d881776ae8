"""Write a strip of faces in random poses with one shared occluder warped onto each.

    python demos/occlusion_gallery.py out.pgm
"""

import sys

import numpy as np

from facediv.geometry import OccluderSpec
from facediv.io import write_pgm
from facediv.synthdata import generate_samples
from facediv.training import make_pair_batch

out = sys.argv[1] if len(sys.argv) > 1 else "gallery.pgm"
samples = generate_samples(6, 2, seed=7, size=96, zoom=1.3)
batch = make_pair_batch(samples[::2], OccluderSpec(), np.random.default_rng(0))
top = np.concatenate(list(batch.images[:, 0]), axis=1)
bottom = np.concatenate(list(batch.occluded[:, 0]), axis=1)
write_pgm(out, np.concatenate([top, bottom], axis=0)[None])
print(f"wrote {out}; template rectangle {batch.rect}")
