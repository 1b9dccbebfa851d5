import { describe, expect, it } from "vitest";

import { dragToBox, overlayStyle, toImagePoint } from "../src/bbox.js";
import { boxToTuple } from "../src/types.js";

describe("toImagePoint", () => {
  it("divides display offsets by the zoom factor", () => {
    expect(toImagePoint(33, 18, 8)).toEqual({ x: 4.125, y: 2.25 });
    expect(toImagePoint(5, 7, 1)).toEqual({ x: 5, y: 7 });
  });

  it("rejects a non-positive zoom", () => {
    expect(() => toImagePoint(1, 1, 0)).toThrow(/zoom/);
    expect(() => toImagePoint(1, 1, -2)).toThrow(/zoom/);
  });
});

describe("dragToBox", () => {
  it("maps the canonical drag (1,2)->(3,4) at zoom 1 to box 1,2,3,4", () => {
    const box = dragToBox(1, 2, 3, 4, 32, 32);
    expect(box).not.toBeNull();
    expect(boxToTuple(box!)).toEqual([1, 2, 3, 4]);
  });

  it("normalizes reversed drags to the same box", () => {
    const forward = dragToBox(1, 2, 3, 4, 32, 32);
    const backward = dragToBox(3, 4, 1, 2, 32, 32);
    const mixed = dragToBox(1, 4, 3, 2, 32, 32);
    expect(backward).toEqual(forward);
    expect(mixed).toEqual(forward);
  });

  it("rounds sub-pixel endpoints to the nearest integer", () => {
    const box = dragToBox(4.125, 3.95, 19.9, 20.1375, 32, 32);
    expect(boxToTuple(box!)).toEqual([4, 4, 20, 20]);
  });

  it("clamps to the image bounds", () => {
    const box = dragToBox(-3.2, -1, 40.7, 35, 32, 32);
    expect(boxToTuple(box!)).toEqual([0, 0, 32, 32]);
  });

  it("returns null when the drag collapses after rounding", () => {
    expect(dragToBox(5.2, 7.8, 5.4, 9, 32, 32)).toBeNull();
    expect(dragToBox(5.2, 7.8, 6, 7.9, 32, 32)).toBeNull();
    expect(dragToBox(10, 10, 10, 10, 32, 32)).toBeNull();
  });

  it("returns null for a drag entirely outside the image", () => {
    expect(dragToBox(-9, -9, -1, -1, 32, 32)).toBeNull();
    expect(dragToBox(40, 40, 50, 50, 32, 32)).toBeNull();
  });
});

describe("overlayStyle", () => {
  it("scales box pixels into display pixels", () => {
    const style = overlayStyle({ xmin: 1, ymin: 2, xmax: 3, ymax: 4 }, 8);
    expect(style).toEqual({
      left: "8px",
      top: "16px",
      width: "16px",
      height: "16px",
    });
  });

  it("is the identity at zoom 1", () => {
    const style = overlayStyle({ xmin: 4, ymin: 4, xmax: 20, ymax: 20 }, 1);
    expect(style).toEqual({
      left: "4px",
      top: "4px",
      width: "16px",
      height: "16px",
    });
  });
});
