"""Walkthrough: phantoms -> models -> a short training run -> clinical metrics.

Run as ``python notebooks/walkthrough.py [out_dir]``. It uses small sizes so it
finishes in a couple of minutes on one CPU core; the full-size reference runs
live in ``tests/test_acceptance.py``.
"""

import os
import sys

import numpy as np

from ventriseg import (DV_REF, FV_REF, FastVentricleConfig, PhantomSpec, TrainConfig,
                       bland_altman, build, count_flops, count_parameters, generate_dataset,
                       infer_masks, mann_whitney_u, peak_activation_bytes, train)
from ventriseg.metrics import summarize, volume_report
from ventriseg.phantom import split_chronological
from ventriseg.plots import bland_altman_svg, boxplot_svg
from ventriseg.search import optimize_input

out = sys.argv[1] if len(sys.argv) > 1 else "walkthrough_out"
os.makedirs(out, exist_ok=True)

# %% 1. Synthetic cine MR studies
# Each study has ED and ES phases; masks are nested ellipsoid sections, and the
# analytic volumes give an exact reference for the volumetry.
spec = PhantomSpec(n_slices=6, image_size=32, pixel_spacing_mm=5.0, slice_spacing_mm=10.0)
studies = generate_dataset(40, 0, spec)
s0 = studies[0]
print("study", s0.study_id, "LV-endo ED/ES mL:",
      round(s0.analytic_volumes[("lv_endo", "ED")], 1),
      round(s0.analytic_volumes[("lv_endo", "ES")], 1))

# %% 2. The model pair at reference size
# The encoder-decoder baseline is an order of magnitude heavier than the
# bottleneck network; the static cost model shows where that comes from.
shape = (16, 1, 64, 64)
for name, cfg in (("DeepVentricle", DV_REF), ("FastVentricle", FV_REF)):
    g = build(cfg)
    print(f"{name:14s} params {count_parameters(g):>9,d}  GFLOPs {count_flops(g, shape) / 1e9:7.2f}"
          f"  peak act MB {peak_activation_bytes(g, shape) / 2**20:7.1f}")

# %% 3. A short FastVentricle run on the small phantoms
train_s, val_s, test_s = split_chronological(studies, (0.7, 0.1, 0.2))
small = FastVentricleConfig(initial_filters=8, projection_ratio=2, initial_bottlenecks=1,
                            section2_repeats=1, input_size=32)
graph, history = train(build(small, seed=0), train_s, TrainConfig(epochs=15, batch_size=8,
                       learning_rate=3e-3, slices_per_phase=0, dtype="float32"), val_s)
for e, (tl, vl) in enumerate(zip(history.train_loss, history.val_loss)):
    print(f"epoch {e}  train {tl:.4f}  val {vl:.4f}")

# %% 4. Volumes, RAVE and agreement on held-out studies
rows = []
for s in test_s:
    rows += volume_report(s, infer_masks(graph, s))
for key, stats in summarize(rows).items():
    print(key, {k: round(v, 3) if isinstance(v, float) else v for k, v in stats.items()})
lv = [(r.v_truth, r.v_pred) for r in rows if r.structure == "lv_endo"]
ba = bland_altman(lv)
print(f"LV-endo bias {ba.bias_mL:.1f} mL, limits [{ba.loa_low_mL:.1f}, {ba.loa_high_mL:.1f}]")
ed = [r.rave for r in rows if r.structure == "lv_endo" and r.phase == "ED"]
es = [r.rave for r in rows if r.structure == "lv_endo" and r.phase == "ES"]
print("WMW ED vs ES RAVE:", mann_whitney_u(ed, es))
with open(os.path.join(out, "boxplot.svg"), "w") as fh:
    fh.write(boxplot_svg(rows))
with open(os.path.join(out, "bland_altman.svg"), "w") as fh:
    fh.write(bland_altman_svg(rows))

# %% 5. What input does the network want to see?
# Gradient descent on the pixels towards a ground-truth mask, weights frozen.
target = test_s[0].truth_masks["ED"][2:3].astype(np.float64)
image, losses = optimize_input(graph, target, steps=100, seed=0)
print(f"input optimisation loss {losses[0]:.3f} -> {losses[-1]:.4f}")
