"""Cut a reconstruction along peel-layer seams, flatten each piece, pack an atlas."""
import sys
from pathlib import Path

import numpy as np

from peelkit import flatten_partitions, make_scene, pack_atlas, peel_render, reconstruct_label
from peelkit.pipeline import save_distortion_heatmap, save_uv_wireframe
from peelkit.seams import partition_mesh

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/unwrap")
out.mkdir(parents=True, exist_ok=True)

stack = peel_render(make_scene("two_garment_mannequin", 128), 4)
for label in (5, 9, 10):
    lm = reconstruct_label(stack, label)
    parts = partition_mesh(lm)
    charts = flatten_partitions(parts)
    atlas = pack_atlas(charts, 512, 2)
    qc = np.concatenate([c.qc_ratio for c in charts])
    print(f"label {label}: {len(parts)} partitions -> {len(charts)} charts, "
          f"flipped {sum(c.flipped for c in charts)}, qc p50/p90 "
          f"{np.percentile(qc, 50):.3f}/{np.percentile(qc, 90):.3f}, "
          f"utilization {atlas.utilization():.2f}")
    save_uv_wireframe(atlas, out / f"uv_{label}.png")
    save_distortion_heatmap(atlas, out / f"qc_{label}.png")
