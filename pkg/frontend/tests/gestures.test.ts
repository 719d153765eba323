import { describe, expect, it } from "vitest";

import { gestureToPrompt, toImagePoint } from "../src/gestures.js";

describe("toImagePoint", () => {
  it("scales canvas coordinates into image space", () => {
    // 512x512 canvas over a 64x64 image: 8 canvas px per image px
    expect(toImagePoint({ x: 256, y: 128 }, 512, 512, 64, 64)).toEqual({ row: 16, col: 32 });
  });

  it("clamps to the image bounds", () => {
    expect(toImagePoint({ x: 511.9, y: 600 }, 512, 512, 64, 64)).toEqual({ row: 63, col: 63 });
    expect(toImagePoint({ x: -5, y: -5 }, 512, 512, 64, 64)).toEqual({ row: 0, col: 0 });
  });
});

describe("gestureToPrompt", () => {
  it("maps a stationary press to a positive click", () => {
    const p = gestureToPrompt({ row: 10, col: 12 }, { row: 10, col: 12 });
    expect(p).toEqual({ type: "click", row: 10, col: 12, positive: true });
  });

  it("tolerates sub-threshold jitter as a click", () => {
    const p = gestureToPrompt({ row: 10, col: 12 }, { row: 12, col: 14 });
    expect(p.type).toBe("click");
  });

  it("maps negative mode to a negative click", () => {
    const p = gestureToPrompt({ row: 3, col: 4 }, { row: 3, col: 4 }, { negative: true });
    expect(p).toEqual({ type: "click", row: 3, col: 4, positive: false });
  });

  it("maps a drag to exactly one box with sorted corners", () => {
    const p = gestureToPrompt({ row: 30, col: 40 }, { row: 10, col: 8 });
    expect(p).toEqual({ type: "box", row_min: 10, col_min: 8, row_max: 30, col_max: 40 });
  });

  it("a drag in negative mode is still a box, never a click", () => {
    const p = gestureToPrompt({ row: 0, col: 0 }, { row: 20, col: 20 }, { negative: true });
    expect(p.type).toBe("box");
  });
});
