/**
 * Browser wiring for the inpainting studio: canvas stack, brush tools,
 * palette, sampler controls, live progress overlay, and a result gallery
 * with adopt-and-continue. All generation happens server-side; this file
 * only shuttles pixels and paints overlays.
 */

import { InpaintClient, ModelInfo, CellRef } from "./api.js";
import { CanvasState, LayerName, UNLABELED } from "./layers.js";
import { buildPalette, PaletteEntry } from "./palette.js";
import { fromBase64, parsePng, unfilterPng } from "./png.js";
import { SessionRunner } from "./session.js";

const SERVER = (window as unknown as { PATCHFILL_SERVER?: string }).PATCHFILL_SERVER
  ?? `${location.protocol}//${location.host}`;

/** Browser inflate for server PNGs via DecompressionStream (zlib wrapper). */
async function inflateBrowser(compressed: Uint8Array): Promise<Uint8Array> {
  const ds = new DecompressionStream("deflate");
  const stream = new Blob([compressed as BlobPart]).stream().pipeThrough(ds);
  const buf = await new Response(stream).arrayBuffer();
  return new Uint8Array(buf);
}

async function decodeServerPng(b64: string) {
  const parsed = parsePng(fromBase64(b64));
  return unfilterPng(parsed, await inflateBrowser(parsed.compressed));
}

interface Elements {
  base: HTMLCanvasElement;
  overlay: HTMLCanvasElement;
  status: HTMLElement;
  progressBar: HTMLProgressElement;
  gallery: HTMLElement;
  paletteBox: HTMLElement;
  tool: HTMLSelectElement;
  brush: HTMLInputElement;
  k1: HTMLInputElement;
  k2: HTMLInputElement;
  nSamples: HTMLInputElement;
  seed: HTMLInputElement;
  fileInput: HTMLInputElement;
  runBtn: HTMLButtonElement;
  pauseBtn: HTMLButtonElement;
  undoBtn: HTMLButtonElement;
}

function grab(): Elements {
  const byId = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;
  return {
    base: byId<HTMLCanvasElement>("canvas-base"),
    overlay: byId<HTMLCanvasElement>("canvas-overlay"),
    status: byId("status"),
    progressBar: byId<HTMLProgressElement>("progress"),
    gallery: byId("gallery"),
    paletteBox: byId("palette"),
    tool: byId<HTMLSelectElement>("tool"),
    brush: byId<HTMLInputElement>("brush-size"),
    k1: byId<HTMLInputElement>("k1"),
    k2: byId<HTMLInputElement>("k2"),
    nSamples: byId<HTMLInputElement>("n-samples"),
    seed: byId<HTMLInputElement>("seed"),
    fileInput: byId<HTMLInputElement>("file-input"),
    runBtn: byId<HTMLButtonElement>("run"),
    pauseBtn: byId<HTMLButtonElement>("pause"),
    undoBtn: byId<HTMLButtonElement>("undo"),
  };
}

class Studio {
  private client = new InpaintClient(SERVER);
  private state!: CanvasState;
  private model!: ModelInfo;
  private palette: PaletteEntry[] = [];
  private runner: SessionRunner | null = null;
  private lastFilled: CellRef[] = [];
  private el: Elements;

  constructor() {
    this.el = grab();
  }

  async start(): Promise<void> {
    this.model = await this.client.modelInfo();
    const size = this.model.r * this.model.grid.h;
    this.state = new CanvasState(this.model.r * this.model.grid.w, size);
    this.palette = buildPalette(
      Array.from({ length: Math.max(0, 16) }, (_, i) => `Class ${i}`),
      4,
    );
    this.buildPaletteUi();
    this.bindCanvas();
    this.bindControls();
    this.resizeCanvases(size, size);
    this.renderBase();
    this.setStatus(`model ${this.model.grid.h}x${this.model.grid.w} grid, r=${this.model.r}; load an image to begin`);
  }

  private setStatus(text: string): void {
    this.el.status.textContent = text;
  }

  private resizeCanvases(w: number, h: number): void {
    for (const c of [this.el.base, this.el.overlay]) {
      c.width = w;
      c.height = h;
    }
  }

  private buildPaletteUi(): void {
    this.el.paletteBox.innerHTML = "";
    for (const entry of this.palette) {
      const btn = document.createElement("button");
      btn.textContent = entry.label;
      btn.style.borderLeft = `12px solid ${entry.color}`;
      btn.title = `category id ${entry.id}`;
      btn.addEventListener("click", () => {
        this.state.activeCategory = entry.id;
        this.setStatus(`semantic brush: ${entry.label} (id ${entry.id})`);
      });
      this.el.paletteBox.appendChild(btn);
    }
  }

  private bindControls(): void {
    this.el.fileInput.addEventListener("change", () => this.loadFile());
    this.el.runBtn.addEventListener("click", () => void this.runSession());
    this.el.pauseBtn.addEventListener("click", () => this.togglePause());
    this.el.undoBtn.addEventListener("click", () => {
      this.state.undo();
      this.renderBase();
    });
    this.el.tool.addEventListener("change", () => {
      this.state.activeTool = this.el.tool.value as LayerName;
    });
    this.el.brush.addEventListener("input", () => {
      this.state.brushSize = Number(this.el.brush.value);
    });
  }

  private bindCanvas(): void {
    let drawing = false;
    let last: [number, number] | null = null;
    const pos = (ev: MouseEvent): [number, number] => {
      const rect = this.el.overlay.getBoundingClientRect();
      return [
        ((ev.clientX - rect.left) / rect.width) * this.el.overlay.width,
        ((ev.clientY - rect.top) / rect.height) * this.el.overlay.height,
      ];
    };
    this.el.overlay.addEventListener("mousedown", (ev) => {
      drawing = true;
      last = pos(ev);
    });
    window.addEventListener("mouseup", () => {
      drawing = false;
      last = null;
      this.state.endStroke();
    });
    this.el.overlay.addEventListener("mousemove", (ev) => {
      if (!drawing || !last) return;
      const [x, y] = pos(ev);
      this.state.strokeLine(
        this.state.activeTool, last[0], last[1], x, y,
        this.state.brushSize, ev.shiftKey,
      );
      last = [x, y];
      this.renderBase();
    });
  }

  private async loadFile(): Promise<void> {
    const file = this.el.fileInput.files?.[0];
    if (!file) return;
    const bitmap = await createImageBitmap(file);
    const size = this.model.r * this.model.grid.h;
    const scratch = document.createElement("canvas");
    scratch.width = size;
    scratch.height = size;
    const ctx = scratch.getContext("2d")!;
    ctx.drawImage(bitmap, 0, 0, size, size);
    const rgba = ctx.getImageData(0, 0, size, size).data;
    const rgb = new Uint8Array(size * size * 3);
    for (let i = 0; i < size * size; i++) {
      rgb[i * 3] = rgba[i * 4];
      rgb[i * 3 + 1] = rgba[i * 4 + 1];
      rgb[i * 3 + 2] = rgba[i * 4 + 2];
    }
    this.state = new CanvasState(size, size, rgb);
    this.state.activeTool = this.el.tool.value as LayerName;
    this.state.brushSize = Number(this.el.brush.value);
    this.renderBase();
    this.setStatus("image loaded; paint a mask, then Run");
  }

  private renderBase(): void {
    const { width, height } = this.state;
    const ctx = this.el.base.getContext("2d")!;
    const img = ctx.createImageData(width, height);
    for (let i = 0; i < width * height; i++) {
      img.data[i * 4] = this.state.base[i * 3];
      img.data[i * 4 + 1] = this.state.base[i * 3 + 1];
      img.data[i * 4 + 2] = this.state.base[i * 3 + 2];
      img.data[i * 4 + 3] = 255;
      if (this.state.hole[i]) {
        img.data[i * 4] = 255;
        img.data[i * 4 + 1] = 64;
        img.data[i * 4 + 2] = 64;
      } else if (this.state.semantic[i] !== UNLABELED) {
        img.data[i * 4 + 1] = Math.min(255, img.data[i * 4 + 1] + 80);
      } else if (this.state.sketch[i]) {
        img.data[i * 4] = img.data[i * 4 + 1] = img.data[i * 4 + 2] = 0;
      }
    }
    ctx.putImageData(img, 0, 0);
  }

  private drawIterationOverlay(filled: CellRef[]): void {
    const ctx = this.el.overlay.getContext("2d")!;
    ctx.clearRect(0, 0, this.el.overlay.width, this.el.overlay.height);
    ctx.strokeStyle = "#ffd400";
    ctx.lineWidth = 1;
    for (const { i, j } of filled) {
      ctx.strokeRect(j * this.model.r + 0.5, i * this.model.r + 0.5,
                     this.model.r - 1, this.model.r - 1);
    }
  }

  private togglePause(): void {
    if (!this.runner) return;
    if (this.runner.state === "paused") {
      this.runner.resume();
      this.el.pauseBtn.textContent = "Pause";
    } else {
      this.runner.pause();
      this.el.pauseBtn.textContent = "Resume";
    }
  }

  private async runSession(): Promise<void> {
    let layers;
    try {
      layers = this.state.exportLayers();
    } catch (err) {
      this.setStatus(String(err));
      return;
    }
    const k1raw = this.el.k1.value.trim().toLowerCase();
    const config = {
      k1: k1raw === "all" ? ("all" as const) : Number(k1raw),
      k2: Number(this.el.k2.value),
      n_samples: Number(this.el.nSamples.value),
      seed: Number(this.el.seed.value),
    };
    this.el.gallery.innerHTML = "";
    this.runner = new SessionRunner(this.client, {
      onCreated: (_id, cells, expected) => {
        this.el.progressBar.max = Math.max(1, expected);
        this.el.progressBar.value = 0;
        this.setStatus(`${cells} masked cells, ${expected} iterations expected`);
      },
      onProgress: (ev) => {
        this.el.progressBar.value = ev.iteration;
        this.lastFilled = ev.filledCells;
        this.drawIterationOverlay(ev.filledCells);
        void this.showPreview(ev.previews[0]);
        this.setStatus(`iteration ${ev.iteration}/${ev.iterationsExpected}: ${ev.filledCells.length} cells filled`);
      },
      onError: (err) => this.setStatus(String(err)),
    });
    const result = await this.runner.run(layers, config);
    this.drawIterationOverlay([]);
    this.setStatus(`done in ${result.iterations} iterations; pick a sample to adopt`);
    await this.populateGallery(result.images);
  }

  private async showPreview(b64: string): Promise<void> {
    const img = await decodeServerPng(b64);
    const ctx = this.el.base.getContext("2d")!;
    const data = ctx.createImageData(img.width, img.height);
    for (let i = 0; i < img.width * img.height; i++) {
      data.data[i * 4] = img.data[i * 3];
      data.data[i * 4 + 1] = img.data[i * 3 + 1];
      data.data[i * 4 + 2] = img.data[i * 3 + 2];
      data.data[i * 4 + 3] = 255;
    }
    ctx.putImageData(data, 0, 0);
  }

  private async populateGallery(imagesB64: string[]): Promise<void> {
    this.el.gallery.innerHTML = "";
    for (const b64 of imagesB64) {
      const decoded = await decodeServerPng(b64);
      const cell = document.createElement("canvas");
      cell.width = decoded.width;
      cell.height = decoded.height;
      cell.className = "gallery-item";
      const ctx = cell.getContext("2d")!;
      const data = ctx.createImageData(decoded.width, decoded.height);
      for (let i = 0; i < decoded.width * decoded.height; i++) {
        data.data[i * 4] = decoded.data[i * 3];
        data.data[i * 4 + 1] = decoded.data[i * 3 + 1];
        data.data[i * 4 + 2] = decoded.data[i * 3 + 2];
        data.data[i * 4 + 3] = 255;
      }
      ctx.putImageData(data, 0, 0);
      cell.title = "click to adopt this sample as the new base";
      cell.addEventListener("click", () => {
        this.state.adoptSample(decoded.data);
        this.renderBase();
        this.setStatus("sample adopted; mask cleared, conditions kept");
      });
      this.el.gallery.appendChild(cell);
    }
  }
}

window.addEventListener("DOMContentLoaded", () => {
  void new Studio().start();
});
