"""Train the toy system at the default config and show what each stage does.

    python demos/end_to_end.py            # about 5 minutes on one core
    python demos/end_to_end.py --quick    # a few seconds, untrained-quality output
"""
import sys
import time

import numpy as np

from mmdiff import config, stages as S
from mmdiff.denoiser import eval_bidiffuser_terms
from mmdiff.metrics import toy_fid
from mmdiff.pipeline import System

quick = "--quick" in sys.argv
cfg = config.defaults()
if quick:
    cfg.update({"denoiser.pretrain_steps": 20, "denoiser.finetune_steps": 20, "llm.steps": 20,
                "align.steps": 20, "adapter.steps": 20, "diffusion.T": 20})

world = S.World.build()
print(f"world: {len(world.captions)} image/caption pairs, e.g. {world.captions[0]!r}")

t0 = time.time()
den, _ = S.pretrain_joint(world, cfg)
before = eval_bidiffuser_terms(den, world.x0, world.y0, S.schedule(cfg))
S.finetune_bidiffuser(den, world, cfg)
after = eval_bidiffuser_terms(den, world.x0, world.y0, S.schedule(cfg))
print(f"denoiser trained in {time.time() - t0:.0f}s")
print(f"  conditional losses (t2i, i2t): {before[0]:.4f}, {before[1]:.4f} -> {after[0]:.4f}, {after[1]:.4f}")

acc, lat = S.i2t_accuracy(den, world, cfg, seed=0)
decoded = world.codebook.decode_batch(lat[:3])
print(f"image -> text latent -> nearest caption: {acc:.1%} exact")
for truth, got in zip(world.captions[:3], decoded):
    print(f"  {truth!r:42} -> {got!r}")

llm, proj, log, _ = S.align_stage(den, world, cfg, manner="mid", latents=lat)
print(f"mid alignment: cosine {log.before[0]:.3f} -> {log.after[0]:.3f}, mse {log.before[1]:.4f} -> {log.after[1]:.5f}")

llm, adapter, _ = S.adapter_stage(den, world, cfg)
sysm = System(world.vocab, world.encoder, S.schedule(cfg), den, llm, None, adapter,
              lam=cfg["adapter.lambda"], guide=S.guidance(cfg))
caps = world.captions * 2
real = np.stack([world.image_of()[c] for c in caps])
print(f"toy-FID with adapter {toy_fid(real, sysm.images_for(caps, seed=0)):.3f}, "
      f"without {toy_fid(real, sysm.images_for(caps, seed=0, lam=0.0)):.3f}")

img, rec = sysm.text_to_image(world.captions[0], seed=1)
print(f"text -> image for {rec.conditioning!r}:")
for row in img[:, :, 0]:
    print("  " + "".join("#" if v > -0.6 else "." for v in row))
