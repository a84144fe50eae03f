"""Train a small model on toy data, then decompose and super-resolve.

Uses the desk preset (quarter-width networks, 32-px HR patches) so it runs on a
laptop CPU. Pass a step count as the first argument; the default of 300 takes
about three minutes and already beats bicubic upsampling on the training clips.
"""
import sys
import tempfile

from bmdsr.data_pipeline import ToySuiteSpec, build_dataset
from bmdsr.evaluation import bicubic_baseline, decompose, evaluate, to_image
from bmdsr.fileio import make_grid, write_png
from bmdsr.networks import count_parameters
from bmdsr.training import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = tempfile.mkdtemp(prefix="bmdsr_train_")

suite = ToySuiteSpec(n_sequences=8, n_frames=7, height=64, width=64, seed=0, test_fraction=0)
manifest = build_dataset(suite, f"{out}/data", scale=2)

# %% Full model: BMDNet -> {ForNet, CoreNet, BackNet} -> FuNet, trained jointly.
cfg = TrainConfig.desk(variant="FCB", scale=2, max_steps=steps)
result = train(manifest, cfg, f"{out}/run")
print(count_parameters(result.model).to_dict())
print("loss at step 1 / last:", result.history[0]["total"], result.history[-1]["total"])

# %% Compare with plain bicubic upsampling of the blurry input.
ours = evaluate(manifest, "train", model=result.model, grid_path=f"{out}/grid.png")
base = bicubic_baseline(manifest, "train")
print(f"PSNR  bicubic {base.aggregate['mean_psnr']:.2f}  model {ours.aggregate['mean_psnr']:.2f}")

# %% The intermediate seven-frame decomposition of the first clip.
from bmdsr.data_pipeline import load_sample  # noqa: E402

sample = load_sample(manifest, manifest.samples[0])
frames = decompose(result.model, sample.blur_lr)
write_png(f"{out}/decomposition.png", make_grid([list(frames), list(sample.sharp_lr)]))
print("written to", out)
