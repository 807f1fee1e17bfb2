"""Train a small embedder on synthetic heads and use it to match pixels across frames.

Run with ``python3 demos/01_train_and_match.py [steps]``. The default of 300
steps takes about half a minute; the full schedule is 2000.
"""
import sys
from pathlib import Path

import numpy as np

from densemarks import embedder as E
from densemarks import evaluation as V
from densemarks import matcher as M
from densemarks import synthetic as S
from densemarks.io import write_ppm

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = Path("demo_out")
out.mkdir(exist_ok=True)

# Twenty short sequences of a moving head, plus four held out for scoring.
tpl = S.make_template()
train = [S.generate_sequence(s, template=tpl) for s in range(20)]
held = [S.generate_sequence(1000 + s, template=tpl) for s in range(4)]
seq = held[0]
print("frames per sequence:", seq.num_frames, " image size:", seq.size,
      " tracked pairs:", len(seq.tracks))

# Before training every pixel maps to roughly the same point, so matching is poor.
cfg = E.TrainConfig(steps=steps, warmup_steps=min(100, steps // 5))
p0, _, _ = E.init_model(cfg)
print("untrained  MAE %.2f px  RMSE %.2f px" % V.matching_quality(p0, held))

result = E.train(train, cfg, callback=lambda k, r: k % 100 == 0 and print(f"  step {k:4d}  loss {r.losses[-1]:.3f}"))
print("trained    MAE %.2f px  RMSE %.2f px" % V.matching_quality(result.params, held))

# The embedding is a point in the unit cube; compare it with the renderer's ground truth.
a = E.embed_image(result.params, seq.images[0], seq.masks[0])
gt = seq.uvw_map(0)
print("mean |predicted - true| coordinate error: %.3f" % np.abs(a.coords - gt.coords)[gt.valid].mean())

# Dense warp: every pixel of frame 5 pulls its colour from the closest embedding in frame 0.
b = E.embed_image(result.params, seq.images[5], seq.masks[5])
warped, field = M.nn_warp(a, seq.images[0], b)
write_ppm(out / "source.ppm", seq.images[0])
write_ppm(out / "target.ppm", seq.images[5])
write_ppm(out / "warped.ppm", warped)
print("wrote", out / "warped.ppm", "with", int(field.valid.sum()), "matched pixels")

# One annotated pixel (a landmark) found again in another frame.
nose = tuple(int(v) for v in np.round(seq.landmarks[0, 30]))
if a.valid[nose[1], nose[0]]:
    ref = M.query_point([(a, nose)])
    (x, y), d = M.find_point(b, ref)
    print(f"point at {nose} in frame 0 found at ({x}, {y}) in frame 5;"
          f" true position {tuple(float(v) for v in np.round(seq.landmarks[5, 30], 1))}")
