import { describe, expect, it } from "vitest";
import * as zlib from "node:zlib";

import { CanvasState, UNLABELED } from "../src/layers.js";
import { buildPalette } from "../src/palette.js";
import { decodePng } from "../src/png.js";

const inflate = (c: Uint8Array) => new Uint8Array(zlib.inflateSync(c));

function paintedState(): CanvasState {
  const base = new Uint8Array(32 * 32 * 3).fill(128);
  const state = new CanvasState(32, 32, base);
  state.strokeLine("mask", 4, 4, 20, 20, 3);
  state.endStroke();
  return state;
}

describe("layer stack", () => {
  it("mask export is strictly binary with 0 at painted holes", () => {
    const state = paintedState();
    const out = state.exportLayers();
    const mask = decodePng(out.mask, inflate);
    const values = new Set(mask.data);
    expect([...values].sort()).toEqual([0, 255]);
    // center of the stroke is a hole
    expect(mask.data[12 * 32 + 12]).toBe(0);
    // far corner untouched
    expect(mask.data[31 * 32 + 31]).toBe(255);
  });

  it("blocks export when the mask is empty", () => {
    const state = new CanvasState(16, 16, new Uint8Array(16 * 16 * 3));
    expect(() => state.exportLayers()).toThrow(/mask is empty/);
  });

  it("omits untouched condition layers", () => {
    const out = paintedState().exportLayers();
    expect(out.semantic).toBeUndefined();
    expect(out.sketch).toBeUndefined();
  });

  it("exports semantic ids matching palette selections", () => {
    const state = paintedState();
    const palette = buildPalette(["sky", "grass", "water"], 2);
    const unknownEntry = palette.find((p) => p.unknown)!;
    expect(unknownEntry.id).toBe(3);

    state.activeCategory = 1; // grass
    state.strokeLine("semantic", 26, 6, 30, 6, 2);
    state.endStroke();
    state.activeCategory = unknownEntry.id;
    state.strokeLine("semantic", 6, 26, 6, 30, 2);
    state.endStroke();

    const out = state.exportLayers();
    const sem = decodePng(out.semantic!, inflate);
    expect(sem.data[6 * 32 + 28]).toBe(1);
    expect(sem.data[28 * 32 + 6]).toBe(unknownEntry.id);
    expect(sem.data[0]).toBe(0); // unpainted falls back to category 0
  });

  it("sketch strokes export as 0/255", () => {
    const state = paintedState();
    state.strokeLine("sketch", 2, 30, 30, 30, 1);
    state.endStroke();
    const sketch = decodePng(state.exportLayers().sketch!, inflate);
    expect([...new Set(sketch.data)].sort()).toEqual([0, 255]);
    expect(sketch.data[30 * 32 + 16]).toBe(255);
  });

  it("undo restores whole strokes", () => {
    const state = paintedState();
    const before = state.hole.slice();
    state.strokeLine("mask", 28, 2, 28, 14, 2);
    state.endStroke();
    expect(Buffer.from(state.hole).equals(Buffer.from(before))).toBe(false);
    expect(state.undo()).toBe(true);
    expect(Buffer.from(state.hole).equals(Buffer.from(before))).toBe(true);
  });

  it("adopt swaps the base bitwise, clears mask, keeps conditions, undoes", () => {
    const state = paintedState();
    state.activeCategory = 2;
    state.strokeLine("semantic", 10, 10, 12, 12, 2);
    state.endStroke();
    const semBefore = state.semantic.slice();
    const baseBefore = state.base.slice();
    const holeBefore = state.hole.slice();

    const result = new Uint8Array(32 * 32 * 3);
    for (let i = 0; i < result.length; i++) result[i] = (i * 7) % 256;
    state.adoptSample(result);

    expect(Buffer.from(state.base).equals(Buffer.from(result))).toBe(true);
    expect(state.maskTouched).toBe(false);
    expect(Buffer.from(state.semantic).equals(Buffer.from(semBefore))).toBe(true);

    expect(state.undoAdopt()).toBe(true);
    expect(Buffer.from(state.base).equals(Buffer.from(baseBefore))).toBe(true);
    expect(Buffer.from(state.hole).equals(Buffer.from(holeBefore))).toBe(true);
  });

  it("rejects adopting wrongly sized pixels", () => {
    const state = paintedState();
    expect(() => state.adoptSample(new Uint8Array(3))).toThrow(/adopted pixels/);
  });

  it("semantic erase returns pixels to unlabeled", () => {
    const state = paintedState();
    state.activeCategory = 1;
    state.strokeLine("semantic", 8, 8, 10, 8, 2);
    state.endStroke();
    expect(state.semanticTouched).toBe(true);
    state.strokeLine("semantic", 8, 8, 10, 8, 3, true);
    state.endStroke();
    expect(state.semantic.every((v) => v === UNLABELED)).toBe(true);
  });
});
