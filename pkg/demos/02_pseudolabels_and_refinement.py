"""Box-driven pseudo-labels, the consistency partition, and component
refinement, demonstrated without any network in the loop.

The oracle segmenter plays the role of a promptable foundation model:
it answers box prompts with ground truth restricted to the boxes, and
can inject controlled corruption. Here every image gets two spurious
background components; the partition flags all of them (component box
count disagrees with the annotation count), and the redundancy step
removes exactly the spurious parts because the stand-in predictor (the
ground truth itself) gives them no support.

    python3 demos/02_pseudolabels_and_refinement.py
"""

from pathlib import Path

import numpy as np

from boxsam.data import connected_components, load_image, load_mask
from boxsam.pseudolabel import (NoiseSpec, OracleSegmenter,
                                generate_initial_pseudolabels,
                                partition_by_box_count, redundancy_process)
from boxsam.synth import SynthConfig, generate

root = Path("demo_output/refinement")
manifest = generate(SynthConfig(count=6, size=(96, 96), contrast=0.6,
                                seed=13), root / "data")

clean = generate_initial_pseudolabels(OracleSegmenter.from_manifest(manifest),
                                      manifest, root / "pseudolabels_clean")
ok, bad = partition_by_box_count(clean)
print(f"clean segmenter: {len(ok.entries)} consistent, "
      f"{len(bad.entries)} flagged")

noise = NoiseSpec(extra_blob_count=2, seed=1)
segmenter = OracleSegmenter.from_manifest(manifest, noise)
labeled = generate_initial_pseudolabels(segmenter, manifest,
                                        root / "pseudolabels")

consistent, flagged = partition_by_box_count(labeled)
print(f"noisy segmenter: {len(consistent.entries)} consistent, "
      f"{len(flagged.entries)} flagged")

print(f"\n{'sample':<12} {'components':>11} {'kept':>5} {'removed':>8} "
      f"{'clean again':>12}")
for entry in flagged.entries:
    pseudo = (load_mask(entry.pseudo_label_path) > 0.5).astype(np.float32)
    gt = (load_mask(entry.gt_mask_path) > 0.5).astype(np.float32)
    refined, report = redundancy_process(pseudo, gt, tau=0.0,
                                         sample_id=entry.sample_id)
    clean = bool(np.array_equal(refined, gt))
    print(f"{entry.sample_id:<12} {report.components_total:>11} "
          f"{report.components_kept:>5} {report.components_removed:>8} "
          f"{str(clean):>12}")

# the rule is per component: one supported pixel rescues the whole
# component, and a component with no support vanishes entirely
label = np.zeros((16, 16), dtype=np.float32)
label[2:6, 2:6] = 1.0
label[10:14, 9:15] = 1.0
pred = np.zeros_like(label)
pred[3, 3] = 0.02  # tiny but positive support in the first component
refined, report = redundancy_process(label, pred, tau=0.0)
print(f"\ntwo components, one supported pixel: kept={report.components_kept}"
      f" removed={report.components_removed}")
print("surviving pixels:", int(refined.sum()), "of", int(label.sum()))
