"""How each evaluation metric responds to characteristic failure modes.

One ground-truth blob, a family of distorted predictions, one table.
MAE rewards calibrated probabilities, the adaptive F-measure and
Dice/IoU judge the thresholded mask, the structure measure compares
region statistics, and the alignment measure is sensitive to where the
errors sit relative to the object.

    python3 demos/04_metrics_tour.py
"""

import numpy as np

from boxsam.metrics import evaluate_pair, evaluate_pairs

rng = np.random.default_rng(7)

gt = np.zeros((96, 96), dtype=np.float64)
gt[30:66, 26:62] = 1.0


def shifted(mask, dy, dx):
    out = np.zeros_like(mask)
    out[max(dy, 0):96 + min(dy, 0), max(dx, 0):96 + min(dx, 0)] = \
        mask[max(-dy, 0):96 + min(-dy, 0), max(-dx, 0):96 + min(-dx, 0)]
    return out


def grown(mask, r):
    out = mask.copy()
    for _ in range(r):
        pad = np.pad(out, 1)
        out = np.maximum.reduce([pad[2:, 1:-1], pad[:-2, 1:-1],
                                 pad[1:-1, 2:], pad[1:-1, :-2], out])
    return out


cases = [
    ("exact", gt.copy()),
    ("confident 0.9/0.1", np.where(gt > 0.5, 0.9, 0.1)),
    ("hesitant 0.6/0.4", np.where(gt > 0.5, 0.6, 0.4)),
    ("shifted 6px", shifted(gt, 6, 6)),
    ("shifted 20px", shifted(gt, 20, 20)),
    ("dilated 4px", grown(gt, 4)),
    ("eroded 4px", 1.0 - grown(1.0 - gt, 4)),
    ("salt noise", np.clip(gt + (rng.random(gt.shape) < 0.03), 0, 1)),
    ("all background", np.zeros_like(gt)),
    ("all foreground", np.ones_like(gt)),
    ("uniform 0.5", np.full_like(gt, 0.5)),
]

print(f"{'prediction':<20} {'MAE':>7} {'F':>7} {'S':>7} {'E':>7} "
      f"{'Dice':>7} {'IoU':>7}")
for name, pred in cases:
    s = evaluate_pair(pred, gt)
    f = "    n/a" if s["f_adaptive"] is None else f"{s['f_adaptive']:7.3f}"
    print(f"{name:<20} {s['mae']:7.3f} {f} {s['s_alpha']:7.3f} "
          f"{s['e_phi']:7.3f} {s['dice']:7.3f} {s['iou']:7.3f}")

# the F-measure is undefined when the ground truth is empty; aggregate
# evaluation records the skip instead of failing
report = evaluate_pairs([
    ("has_object", gt.copy(), gt),
    ("no_object", np.zeros_like(gt), np.zeros_like(gt)),
])
print(f"\nempty-GT image: F skipped for "
      f"{[row['id'] for row in report.skipped]}, "
      f"mean MAE {report.means['mae']:.3f}")
