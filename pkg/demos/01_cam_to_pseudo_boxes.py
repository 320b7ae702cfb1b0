"""From a class-activation heatmap to pseudo-label boxes, step by step.

Builds a small synthetic heatmap with two hot regions and one speck of
noise, then walks the conversion pipeline: binarize, label connected
components, gate by pixel area, emit tight boxes.

Run:  python demos/01_cam_to_pseudo_boxes.py
"""
import numpy as np

from wsdet.heatmap import binarize, cam_to_boxes, connected_components

rng = np.random.default_rng(0)

# a 48x48 attention map: a strong 10x10 region, a weaker 6x6 region and a
# single hot pixel that should not survive the area gate
heat = rng.uniform(0.0, 0.25, size=(48, 48))
heat[8:18, 6:16] = rng.uniform(0.75, 0.95, size=(10, 10))
heat[30:36, 28:34] = rng.uniform(0.55, 0.7, size=(6, 6))
heat[4, 40] = 0.99

print("heatmap: 48x48, values in [%.2f, %.2f]" % (heat.min(), heat.max()))

binary = binarize(heat, tau=0.5)
print(f"binarize(tau=0.5): {np.count_nonzero(binary)} pixels survive "
      f"(surviving pixels keep their activation, the rest becomes 0)")

components = connected_components(binary, connectivity=8)
print(f"connected components (8-connectivity): {len(components)}")
for i, comp in enumerate(components):
    box = comp.bounding_box()
    print(f"  component {i}: {comp.pixel_area:3d} px, tight box {box.to_list()}")

# gate out anything smaller than 8 pixels; the classifier confidence for
# this image becomes the score of every emitted box
detections = cam_to_boxes(heat, tau=0.5, score=0.83, min_area=8, max_area=48 * 48 // 4)
print(f"\nafter area gating (min 8 px): {len(detections)} pseudo-boxes")
for det in detections:
    print(f"  score {det.score}  source {det.source}  box {det.box.to_list()}")

print("\nthe lone hot pixel was dropped by the minimum-area gate, as intended")
