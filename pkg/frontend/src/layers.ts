/**
 * Editable layer stack for the studio: base image, hole mask, semantic
 * category paint, and sketch strokes. All brushes rasterize hard-edged
 * circles directly into byte buffers, so exports are exactly binary with
 * no resampling or anti-aliasing anywhere.
 */

import { RawImage, encodePng } from "./png.js";

export const UNLABELED = 255; // semantic sentinel: pixel never painted

export type LayerName = "mask" | "semantic" | "sketch";

export interface ExportedLayers {
  image: Uint8Array; // RGB PNG
  mask: Uint8Array; // grayscale PNG, 0 = missing, 255 = keep
  semantic?: Uint8Array; // grayscale PNG of category ids
  sketch?: Uint8Array; // grayscale PNG, 0 | 255
}

interface Snapshot {
  layer: LayerName;
  data: Uint8Array;
}

export class CanvasState {
  readonly width: number;
  readonly height: number;
  base: Uint8Array; // RGB bytes
  /** 255 where the user painted a hole (pixel to inpaint). */
  hole: Uint8Array;
  /** category id per pixel, UNLABELED where untouched. */
  semantic: Uint8Array;
  /** 255 on sketch strokes. */
  sketch: Uint8Array;

  activeTool: LayerName = "mask";
  brushSize = 6;
  activeCategory = 0;

  private undoStack: Snapshot[] = [];
  private strokeOpen = false;

  constructor(width: number, height: number, base?: Uint8Array) {
    this.width = width;
    this.height = height;
    this.base = base ? base.slice() : new Uint8Array(width * height * 3);
    this.hole = new Uint8Array(width * height);
    this.semantic = new Uint8Array(width * height).fill(UNLABELED);
    this.sketch = new Uint8Array(width * height);
  }

  private layerBuffer(layer: LayerName): Uint8Array {
    switch (layer) {
      case "mask": return this.hole;
      case "semantic": return this.semantic;
      case "sketch": return this.sketch;
    }
  }

  /** Snapshot the target layer once per stroke so undo restores whole strokes. */
  beginStroke(layer: LayerName): void {
    if (!this.strokeOpen) {
      this.undoStack.push({ layer, data: this.layerBuffer(layer).slice() });
      this.strokeOpen = true;
    }
  }

  endStroke(): void {
    this.strokeOpen = false;
  }

  undo(): boolean {
    const snap = this.undoStack.pop();
    if (!snap) return false;
    this.layerBuffer(snap.layer).set(snap.data);
    this.strokeOpen = false;
    return true;
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  private stamp(buffer: Uint8Array, cx: number, cy: number, radius: number, value: number): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) {
          buffer[y * this.width + x] = value;
        }
      }
    }
  }

  /** Paint a segment on a layer; value semantics depend on the layer. */
  strokeLine(layer: LayerName, x0: number, y0: number, x1: number, y1: number,
             radius: number, erase = false): void {
    const buffer = this.layerBuffer(layer);
    let value: number;
    if (layer === "semantic") {
      value = erase ? UNLABELED : this.activeCategory;
    } else {
      value = erase ? 0 : 255;
    }
    this.beginStroke(layer);
    const steps = Math.max(1, Math.ceil(Math.hypot(x1 - x0, y1 - y0)));
    for (let t = 0; t <= steps; t++) {
      const x = x0 + ((x1 - x0) * t) / steps;
      const y = y0 + ((y1 - y0) * t) / steps;
      this.stamp(buffer, x, y, radius, value);
    }
  }

  get maskTouched(): boolean {
    return this.hole.some((v) => v !== 0);
  }

  get semanticTouched(): boolean {
    return this.semantic.some((v) => v !== UNLABELED);
  }

  get sketchTouched(): boolean {
    return this.sketch.some((v) => v !== 0);
  }

  /**
   * Layers as PNG blobs matching the service contract. The mask flips
   * hole -> keep (0 where painted); untouched condition layers are
   * omitted so the server substitutes placeholder embeddings. Unpainted
   * semantic pixels fall back to category 0.
   */
  exportLayers(): ExportedLayers {
    if (!this.maskTouched) {
      throw new Error("mask is empty: paint the region to inpaint first");
    }
    const keep = new Uint8Array(this.width * this.height);
    for (let i = 0; i < keep.length; i++) {
      keep[i] = this.hole[i] ? 0 : 255;
    }
    const gray = (data: Uint8Array): RawImage => ({
      width: this.width, height: this.height, channels: 1, data,
    });
    const out: ExportedLayers = {
      image: encodePng({ width: this.width, height: this.height, channels: 3, data: this.base }),
      mask: encodePng(gray(keep)),
    };
    if (this.semanticTouched) {
      const ids = this.semantic.slice();
      for (let i = 0; i < ids.length; i++) {
        if (ids[i] === UNLABELED) ids[i] = 0;
      }
      out.semantic = encodePng(gray(ids));
    }
    if (this.sketchTouched) {
      out.sketch = encodePng(gray(this.sketch));
    }
    return out;
  }

  private baseHistory: Uint8Array[] = [];

  /**
   * Make a chosen result the new base: the mask clears (its hole is now
   * filled) while conditions survive for further editing. The previous
   * base and mask are restorable via undoAdopt.
   */
  adoptSample(rgb: Uint8Array): void {
    if (rgb.length !== this.base.length) {
      throw new Error(`adopted pixels ${rgb.length} != base ${this.base.length}`);
    }
    this.baseHistory.push(this.base);
    this.undoStack.push({ layer: "mask", data: this.hole.slice() });
    this.base = rgb.slice();
    this.hole = new Uint8Array(this.width * this.height);
    this.strokeOpen = false;
  }

  /** Undo an adoption: restore the previous base alongside its mask. */
  undoAdopt(): boolean {
    const prev = this.baseHistory.pop();
    if (!prev) return false;
    this.base = prev;
    return this.undo();
  }
}
