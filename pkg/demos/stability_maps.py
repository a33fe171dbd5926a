"""
Prediction spread under roto-reflections
========================================

Train a planar U-Net and a p4m GU-Net briefly on the pentomino task, then feed
each the eight roto-reflections of one test image.  Predictions are mapped
back to the original orientation and the per-pixel standard deviation of the
foreground probability is saved as an image.  The p4m map is black up to
float rounding; the planar map lights up along shape boundaries.

    python3 demos/stability_maps.py --out runs/stability
"""
import argparse
from pathlib import Path

import numpy as np

from gcnnseg import data as D
from gcnnseg.model import ArchitectureConfig, build
from gcnnseg.train import TrainConfig, evaluate, stability_report, train

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="runs/stability")
parser.add_argument("--epochs", type=int, default=15)
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

task = D.SyntheticTaskConfig(image_size=33, shapes_per_image=4, cell_size=2, num_images=200, model_depth=2)
synth = D.generate_synthetic(task)
tr, va, te = (synth.split(s) for s in D.SPLITS)
test_rgb = synth.images[[i for i, s in enumerate(synth.splits) if s == "test"]]
D.save_image(out / "input.png", test_rgb[0])
D.save_image(out / "truth.png", te.masks[0].astype(np.uint8), mask=True)

for group in ("p1", "p4m"):
    model = build(ArchitectureConfig(group=group, depth=2, base_width=8), seed=0)
    train(model, tr, va, TrainConfig(epochs=args.epochs, batches_per_epoch=10, batch_size=16))
    rep = stability_report(model, te.images[:1], "p4m")
    dsc = evaluate(model, te)["dsc"]
    print(f"{group:>4}: test DSC {dsc:.3f}  max std {rep.max_std:.2e}  mean std {rep.mean_std:.2e}")
    D.save_image(out / f"{group}_mean.png", np.round(rep.mean * 255).astype(np.uint8))
    # std is at most 0.5; scale so 0.1 is already white
    D.save_image(out / f"{group}_std.png", np.clip(np.round(rep.std * 2550), 0, 255).astype(np.uint8))

print("maps written to", out)
