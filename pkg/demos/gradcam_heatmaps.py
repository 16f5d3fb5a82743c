"""
Grad-CAM before and after attention
===================================

Trains the parallel model on the default synthetic corpus until TDR at 5% FDR
reaches 0.95 (a few minutes), then computes Grad-CAM heatmaps of the PA probability
on the backbone's last tap and on the attention-refined map, and writes
them as overlay PNGs.
"""

import tempfile
from pathlib import Path

import numpy as np

from agpad.attention import FusionConfig
from agpad.data import SynthConfig, generate_synth, load_dataset, save_image
from agpad.gradcam import grad_cam, upsample_overlay
from agpad.model import PADModel
from agpad.metrics import ScoreSet, tdr_at_fdr
from agpad.train import TrainConfig, train

work = Path(tempfile.mkdtemp(prefix="agpad_cam_"))
report = generate_synth(SynthConfig(seed=0), work)
train_x, train_y = load_dataset(report.manifest.split("train"), 64)
test_x, test_y = load_dataset(report.manifest.split("test"), 64)

model = PADModel.create(fusion=FusionConfig(mode="parallel"), seed=0)
train(model, (train_x, train_y), TrainConfig(seed=0),
      on_epoch=lambda rec: tdr_at_fdr(ScoreSet.from_labels(model.pa_score(test_x), test_y), 0.05)[0] >= 0.95)

np.set_printoptions(precision=2, suppress=True)
for label in (0, 1):
    idx = int(np.flatnonzero(test_y == label)[0])
    image = test_x[idx]
    name = "live" if label == 0 else "pa"
    print(f"{name}: PA score {model.pa_score(image):.3f}")
    for layer in ("tap5", "attended"):
        heat = grad_cam(model, image, layer)
        print(f"  {layer} heatmap:\n{heat.values}")
        overlay = upsample_overlay(heat, image, opacity=0.5)
        save_image(work / f"{name}_{layer}.png", overlay.transpose(2, 0, 1))
print("overlays in", work)
