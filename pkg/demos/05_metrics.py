"""Losses and evaluation metrics on rendered stacks."""
import numpy as np

from peelkit import (DRAFT_WEIGHTS, PAPER_WEIGHTS, iou, l_depth, l_norm, l_rgb, make_scene, nre,
                     peel_render, total_loss)
from peelkit.metrics import combine_losses

gt = peel_render(make_scene("two_garment_mannequin", 128), 4)
# depths pushed back by 1% stand in for an imperfect prediction
pred = gt.replace(depth=np.where(gt.valid, gt.depth * 1.01, 0).astype(np.float32))

print("identity  total loss", total_loss(gt, gt), " IOU(pants)", iou(gt.seg, gt.seg, 9))
print(f"scaled    L_depth {l_depth(pred, gt):.3f}  L_norm {l_norm(pred, gt):.3f}  "
      f"L_rgb {l_rgb(pred, gt):.3f}")
print(f"          NRE {nre(pred.normal[0], gt.normal[0]):.4f}")
unit = {"depth": 1, "seg": 1, "norm": 1, "rgb": 1}
print("unit components, paper weights:", combine_losses(unit, PAPER_WEIGHTS))
print("unit components, draft weights:", combine_losses(unit, DRAFT_WEIGHTS))
