"""The guidance machinery: weight schedule, masked local attention.

Local guidance holds full weight early (while each block forms in its
own region) and hands over to the global caption as denoising finishes.
"""

from pathlib import Path

import numpy as np

from blockgen import autodiff as ad
from blockgen import diffusion as df
from blockgen import grammar as gr
from blockgen.report import weight_schedule_plot

cfg = df.DiffusionConfig()
print("T =", cfg.total_steps, " threshold =", cfg.threshold_step, " w_max =", cfg.w_max)
for t in (0, 50, 100, 150, 175, 200):
    w_l, w_g = df.guidance_weights(t, cfg)
    print(f"  t={t:>3}: local {w_l:.3f}  global {w_g:.3f}  (sum {w_l + w_g})")

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
weight_schedule_plot(cfg, out / "weight_schedule.png")
print("wrote", out / "weight_schedule.png")

# Local cross-attention concatenates text and image token streams.
rng = np.random.default_rng(0)
q = ad.constant(rng.normal(size=(4, 8)))
kt, vt = ad.constant(rng.normal(size=(3, 8))), ad.constant(rng.normal(size=(3, 8)))
ki, vi = ad.constant(rng.normal(size=(5, 8))), ad.constant(rng.normal(size=(5, 8)))
attn = df.local_cross_attention(q, kt, vt, ki, vi)
print("\nlocal_cross_attention output shape:", attn.shape)

# Spatial masks restrict each entity's influence to its box, at each
# attention site's resolution.
scene = gr.generate_scene(4, gr.DEFAULT_CONFIG, n_entities=2)
box = scene.entities[0].box(gr.DEFAULT_CONFIG)
for res in (16, 8):
    mask = df.downsample_mask(box, res, res)
    rows = ["".join("#" if v else "." for v in row) for row in mask]
    print(f"\nentity-0 mask at {res}x{res}:")
    print("\n".join("  " + r for r in rows))
