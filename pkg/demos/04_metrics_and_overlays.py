"""Micro versus macro metrics, and mask overlays.

F1 and IoU pool confusion counts over the whole evaluation set before
applying their formula once (micro). Dice averages the per-image scores
(macro), so images with small structures weigh as much as busy ones. The two
disagree as soon as image difficulty varies.

Run:  python demos/04_metrics_and_overlays.py
"""

import numpy as np
from PIL import Image

from dtrattunet.evaluation import (
    ConfusionCounts,
    confusion_counts,
    dice_macro,
    f1_micro,
    iou_micro,
    render_overlay,
)

print("One perfect image and one half-right image:")
perfect = ConfusionCounts(tp=50, fp=0, fn=0, tn=14)
half = ConfusionCounts(tp=1, fp=1, fn=1, tn=61)
print(f"  dice_macro = {dice_macro([perfect, half]):.2f}   (average of 100 and 50)")
print(f"  f1_micro   = {f1_micro([perfect, half]):.2f}   (pooled counts favor the busy image)")
print(f"  iou_micro  = {iou_micro([perfect, half]):.2f}")

f1 = f1_micro([perfect, half]) / 100
iou = iou_micro([perfect, half]) / 100
print(f"  identity check: 2*IoU/(1+IoU) = {200 * iou / (1 + iou):.2f} equals the F1 above\n")

print("Counts come from plain one-vs-rest pixel comparison:")
rng = np.random.default_rng(0)
pred = rng.integers(0, 3, size=(8, 8))
gt = rng.integers(0, 3, size=(8, 8))
for class_id, label in ((1, "GGO"), (2, "consolidation")):
    c = confusion_counts(pred, gt, class_id)
    print(f"  {label:<14} tp={c.tp:<3} fp={c.fp:<3} fn={c.fn:<3} tn={c.tn}")

print("\nOverlay rendering: GGO green, consolidation red, lung contour cyan.")
size = 96
yy, xx = np.ogrid[:size, :size]
lung = ((yy - 48) ** 2 + (xx - 48) ** 2 <= 38**2).astype(np.int64)
labels = np.zeros((size, size), dtype=np.int64)
labels[((yy - 40) ** 2 + (xx - 36) ** 2 <= 9**2) & (lung == 1)] = 1
labels[((yy - 60) ** 2 + (xx - 62) ** 2 <= 7**2) & (lung == 1)] = 2
image = 0.15 + 0.35 * lung + rng.normal(0, 0.02, size=(size, size))

rgb = render_overlay(image, labels, lung_mask=lung, alpha=0.5)
out_path = "overlay_demo.png"
Image.fromarray(rgb, mode="RGB").save(out_path)
print(f"  wrote {out_path} ({rgb.shape[0]}x{rgb.shape[1]} RGB)")
