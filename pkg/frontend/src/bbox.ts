/**
 * Box drawing math: pointer drags to integer boxes in image pixels.
 *
 * Every function works in original-image coordinates; display zoom is
 * divided out at the pointer-event boundary and never leaks further in.
 */

import type { Box } from "./types.js";

/** Convert a client-space offset inside the pane to image coordinates. */
export function toImagePoint(
  offsetX: number,
  offsetY: number,
  zoom: number,
): { x: number; y: number } {
  if (!(zoom > 0)) {
    throw new Error(`zoom must be positive, got ${zoom}`);
  }
  return { x: offsetX / zoom, y: offsetY / zoom };
}

/**
 * Normalize a completed drag into an integer box.
 *
 * Corners are sorted so reversed drags work, coordinates round to the
 * nearest integer, and the result is clamped to the image bounds. A drag
 * that collapses to zero width or height after rounding returns null and
 * the caller ignores it.
 */
export function dragToBox(
  x0: number,
  y0: number,
  x1: number,
  y1: number,
  width: number,
  height: number,
): Box | null {
  const xmin = clamp(Math.round(Math.min(x0, x1)), 0, width);
  const xmax = clamp(Math.round(Math.max(x0, x1)), 0, width);
  const ymin = clamp(Math.round(Math.min(y0, y1)), 0, height);
  const ymax = clamp(Math.round(Math.max(y0, y1)), 0, height);
  if (xmin >= xmax || ymin >= ymax) {
    return null;
  }
  return { xmin, ymin, xmax, ymax };
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(Math.max(v, lo), hi);
}

/** CSS placement for a box overlay at the given display zoom. */
export function overlayStyle(
  box: Box,
  zoom: number,
): { left: string; top: string; width: string; height: string } {
  return {
    left: `${box.xmin * zoom}px`,
    top: `${box.ymin * zoom}px`,
    width: `${(box.xmax - box.xmin) * zoom}px`,
    height: `${(box.ymax - box.ymin) * zoom}px`,
  };
}
