"""
Training the part localizer
===========================

Generates the default creature dataset (8 classes, 5 parts, 64x64), trains
the fully convolutional localizer on dense part label maps and reports
MPK/MRK/APK with and without heatmap smoothing. The first test image and its
part-1 heatmap are written as PPM files to ./localize_demo.
"""

from pathlib import Path

import numpy as np

from pscnn.io import write_ppm
from pscnn.synthetic import default_dataset
from pscnn.training import InferenceConfig, evaluate_fcn, localizer_defaults, train_localizer

out = Path("localize_demo")
out.mkdir(exist_ok=True)

train, test = default_dataset(seed=7)
print(f"{len(train)} training and {len(test)} test creatures")

# about half a minute on one core
result = train_localizer(train, test, localizer_defaults())
print(result.report.summary_table("FCN"))
print(result.report.part_table())

# smoothing radius 0 disables the Gaussian filter
raw = evaluate_fcn(result.model, test, InferenceConfig(radius=0))
print(f"MPK without smoothing {100 * raw.mpk:.1f}, with smoothing {100 * result.report.mpk:.1f}")

heat = result.model.heatmaps(test.images[:1])[0]
write_ppm(out / "image.ppm", test.images[0])
# upsample the 13x13 map so it is visible next to the image
part1 = np.kron(heat[1] / max(heat[1].max(), 1e-12), np.ones((4, 4)))
write_ppm(out / "part1_heat.ppm", np.repeat(part1[None], 3, axis=0))
print("wrote", sorted(p.name for p in out.iterdir()))
