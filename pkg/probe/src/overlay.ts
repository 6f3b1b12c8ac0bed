/**
 * Visual prompting: draw ground-truth bounding boxes onto a copy of the
 * input image before it reaches the model, anchoring attention to the
 * prompted regions.
 */

import type { Box, GrayImage } from "./image.js";
import { cloneImage } from "./image.js";

export interface OverlayStyle {
  value: number;     // border intensity
  thickness: number; // border width in pixels, drawn inward
}

export const DEFAULT_STYLE: OverlayStyle = { value: 255, thickness: 1 };

export function overlayBoxes(
  image: GrayImage,
  boxes: Box[],
  style: OverlayStyle = DEFAULT_STYLE,
): GrayImage {
  const out = cloneImage(image);
  for (const box of boxes) {
    if (box.x < 0 || box.y < 0 || box.w <= 0 || box.h <= 0
        || box.x + box.w > image.width || box.y + box.h > image.height) {
      throw new Error(
        `box (${box.x},${box.y},${box.w},${box.h}) out of bounds for ` +
        `${image.width}x${image.height}`);
    }
    const t = Math.min(style.thickness, Math.ceil(Math.min(box.w, box.h) / 2));
    for (let y = box.y; y < box.y + box.h; y++) {
      for (let x = box.x; x < box.x + box.w; x++) {
        const nearEdge = x < box.x + t || x >= box.x + box.w - t
          || y < box.y + t || y >= box.y + box.h - t;
        if (nearEdge) {
          out.pixels[y * out.width + x] = style.value;
        }
      }
    }
  }
  return out;
}

/** Fraction of a patch-grid map's mass inside any of the boxes. */
export function massInBoxes(
  values: Float32Array | Float64Array,
  grid: number,
  imageSize: number,
  boxes: Box[],
): number {
  const patch = imageSize / grid;
  let mass = 0;
  for (let gy = 0; gy < grid; gy++) {
    for (let gx = 0; gx < grid; gx++) {
      const px = gx * patch;
      const py = gy * patch;
      const inside = boxes.some(
        (b) => px + patch > b.x && px < b.x + b.w
            && py + patch > b.y && py < b.y + b.h,
      );
      if (inside) mass += values[gy * grid + gx];
    }
  }
  return mass;
}
