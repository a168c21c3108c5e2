"""Tour of the detection geometry primitives.

Run: python demos/01_box_geometry.py
"""

import numpy as np

from mitodet import boxgeom as bg

print("== IoU ==")
a = bg.BBox(0, 0, 10, 10)
b = bg.BBox(5, 5, 15, 15)
print(f"iou(identical)  = {bg.iou(a, a):.4f}")
print(f"iou(quarter)    = {bg.iou(a, b):.4f}  (25 overlap / 175 union)")
print(f"iou(disjoint)   = {bg.iou(a, bg.BBox(20, 20, 30, 30)):.4f}")

print("\n== NMS ==")
dets = [
    bg.Detection(bg.BBox(0, 0, 10, 10), bg.MITOTIC_FIGURE, 0.9),
    bg.Detection(bg.BBox(1, 1, 11, 11), bg.MITOTIC_FIGURE, 0.8),   # overlaps the first
    bg.Detection(bg.BBox(50, 50, 60, 60), bg.MITOTIC_FIGURE, 0.7),
]
kept = bg.nms(dets, iou_threshold=0.5)
print(f"{len(dets)} detections -> {len(kept)} after suppression "
      f"(scores {[d.score for d in kept]})")

print("\n== Anchors ==")
cfg = bg.AnchorConfig(strides=(8, 16), scales=(1.0, 1.5), aspect_ratios=(0.5, 1.0, 2.0))
anchors = bg.generate_anchors(cfg, 64, 64)
print(f"64x64 image, strides {cfg.strides}: {anchors.shape[0]} anchors "
      f"({cfg.anchors_per_cell} per cell)")

print("\n== Box encoding ==")
anchor = bg.BBox(0, 0, 10, 10)
gt = bg.BBox(0, 0, 20, 20)
offsets = bg.encode_box(anchor, gt)
print(f"encode(anchor, gt) = {np.round(offsets, 4)}")
print(f"decode round trip  = {bg.decode_box(anchor, offsets)}")

print("\n== Anchor matching ==")
gts = np.array([[0, 0, 10, 10]], dtype=float)
candidates = np.array([[0, 0, 10, 6], [0, 0, 10, 4.5], [0, 0, 10, 1]])
asn = bg.match_anchors(candidates, gts, pos_threshold=0.5, neg_threshold=0.4)
names = {0: "positive(gt 0)", bg.NEGATIVE: "negative", bg.IGNORE: "ignore"}
for i, label in enumerate(asn.gt_index):
    print(f"anchor {i} (iou {bg.iou_matrix(candidates[i:i+1], gts)[0,0]:.2f}) "
          f"-> {names[int(label)]}")
