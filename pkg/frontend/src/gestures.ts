/**
 * Pointer gesture to prompt mapping. Canvas pixels map to image-space
 * (row, col) integers here and nowhere else — the canvas does the only
 * scaling, so display zoom can never drift away from prompt coordinates.
 */

import type { Prompt } from "./api.js";

export interface CanvasPoint {
  x: number;
  y: number;
}

export interface ImagePoint {
  row: number;
  col: number;
}

export const DRAG_THRESHOLD_PX = 3;

/** Map a canvas-space point onto integer image coordinates, clamped in-bounds. */
export function toImagePoint(
  p: CanvasPoint,
  canvasWidth: number,
  canvasHeight: number,
  imageWidth: number,
  imageHeight: number,
): ImagePoint {
  const col = Math.floor((p.x / canvasWidth) * imageWidth);
  const row = Math.floor((p.y / canvasHeight) * imageHeight);
  return {
    row: Math.min(Math.max(row, 0), imageHeight - 1),
    col: Math.min(Math.max(col, 0), imageWidth - 1),
  };
}

/**
 * One pointer gesture yields exactly one prompt: a press-and-release within
 * the drag threshold is a click (negative when the negative mode or right
 * button is active); a longer drag is a single box prompt with re-ordered
 * corners. Box drags never emit click side effects.
 */
export function gestureToPrompt(
  down: ImagePoint,
  up: ImagePoint,
  options: { negative?: boolean; dragThresholdPx?: number } = {},
): Prompt {
  const threshold = options.dragThresholdPx ?? DRAG_THRESHOLD_PX;
  const dragged =
    Math.abs(up.row - down.row) > threshold || Math.abs(up.col - down.col) > threshold;
  if (!dragged) {
    return { type: "click", row: down.row, col: down.col, positive: !options.negative };
  }
  return {
    type: "box",
    row_min: Math.min(down.row, up.row),
    col_min: Math.min(down.col, up.col),
    row_max: Math.max(down.row, up.row),
    col_max: Math.max(down.col, up.col),
  };
}
