"""
Adversarial training with a three-way discriminator
===================================================

A conditional generator receives a corrupted image and tries to produce
a same-class candidate; the discriminator labels pairs as different,
same or fake. Runs on two classes of 8x8 Gaussian blobs and writes a
mosaic of conditioning images (top row) and generated samples below.

With the two group means weighted equally, even a perfect generator
only earns p_same = 1/3 from the best discriminator, so ln 3 is the floor
the generator loss can approach. On these blobs the discriminator pulls
ahead and the printed generator loss climbs above ln 3.
"""

import argparse
import math

import numpy as np
import torch
from PIL import Image

from rpnet import Generator, TrainConfig, build_siam1, corrupt, synthetic_blobs
from rpnet.cli import image_grid
from rpnet.training import adversarial_step, new_adversarial_state

parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
parser.add_argument("--steps", type=int, default=500)
parser.add_argument("--out", default="gr_samples.png")
args = parser.parse_args()

torch.manual_seed(0)
ds = synthetic_blobs(per_class=64, size=8)
disc = build_siam1((1, 8, 8), (8, 8, 16, 16, 16), n_outputs=3)
gen = Generator((1, 8, 8), widths=(8, 16, 16))
cfg = TrainConfig(lr_init=2e-4, lr_final=2e-4, total_updates=args.steps, batch_size=32,
                  beta1=0.5, l2_init=0.0, l2_late=0.0, augment=False, seed=0)
state = new_adversarial_state(gen, disc, cfg)

print(f"ln 3 = {math.log(3):.3f}")
for step in range(1, args.steps + 1):
    l_dis, l_gen, _ = adversarial_step(state, ds, (0, 1))
    if step % 100 == 0:
        print(f"step {step:4d}  L_dis={np.mean(state.losses_dis[-100:]):.3f}  "
              f"L_gen={np.mean(state.losses_gen[-100:]):.3f}")

# four conditioning images per class, three samples each
cond = np.concatenate([ds.images[0][:4], ds.images[1][:4]])
gen.eval()
noise = torch.Generator().manual_seed(1)
with torch.no_grad():
    c = torch.as_tensor(cond)
    rows = [cond] + [gen(corrupt(c, state.corruption, noise)).numpy() for _ in range(3)]
grid = np.clip(image_grid(np.stack(rows))[0], 0, 1)

Image.fromarray((grid * 255).astype(np.uint8)).resize(
    (grid.shape[1] * 8, grid.shape[0] * 8), Image.NEAREST).save(args.out)
print(f"wrote {args.out}")
