"""Why the decomposition loss has to be order-invariant.

A single blurry image cannot tell you whether the motion went left-to-right or
right-to-left: the reversed frame sequence blurs to the same picture. The
pairwise loss compares frame pairs (1,7), (2,6), (3,5) through their sum and
their absolute difference, both symmetric in the pair, so either ordering of a
correct answer scores zero.
"""
import numpy as np
import torch

from bmdsr.data_pipeline import ShapeSpec, ToyVideoSpec, generate_toy_video
from bmdsr.losses_metrics import (FixedRandomConv, content_mse_loss, s2d_central_loss,
                                  s2d_pairwise_loss)

spec = ToyVideoSpec(height=32, width=32, n_frames=7, seed=0, shapes=[
    ShapeSpec("square", 8, (1.0, 1.0, 1.0), position=(8, 16), velocity=(2.5, 0.0))])
sharp = torch.from_numpy(np.stack(generate_toy_video(spec))).permute(0, 3, 1, 2).float()

# %% A naive per-frame L1 punishes the reversed (equally valid) answer...
reversed_seq = torch.flip(sharp, [0])
print("per-frame L1, reversed:", float((reversed_seq - sharp).abs().mean()))
# ...while the pairwise loss does not.
print("pairwise, reversed:   ", float(s2d_pairwise_loss(reversed_seq, sharp)))

# %% Swapping just one pair is also free; breaking a pair is not.
swapped = sharp.clone()
swapped[[0, 6]] = sharp[[6, 0]]
print("pairwise, one swap:   ", float(s2d_pairwise_loss(swapped, sharp)))
broken = sharp.clone()
broken[0] = sharp[1]
print("pairwise, wrong frame:", float(s2d_pairwise_loss(broken, sharp)))

# %% The centre frame is unambiguous, so it gets a direct pixel + feature loss.
phi = FixedRandomConv()
print("central, exact:  ", float(s2d_central_loss(sharp[3], sharp[3], phi)))
print("central, shifted:", float(s2d_central_loss(sharp[2], sharp[3], phi)))

# The HR heads use plain MSE.
print("content, +0.1 offset:", float(content_mse_loss(sharp[3] + 0.1, sharp[3])))
