/** Typed client for the inpainting service JSON API. */

import { toBase64 } from "./png.js";
import { ExportedLayers } from "./layers.js";

export interface SamplerOptions {
  k1: number | "all";
  k2: number;
  n_samples: number;
  seed: number;
}

export interface GridInfo {
  h: number;
  w: number;
}

export interface CreateSessionResponse {
  session_id: string;
  grid: GridInfo;
  masked_cells: number;
  iterations_expected: number;
  complete: boolean;
}

export interface CellRef {
  i: number;
  j: number;
}

export interface StepResponse {
  iteration: number;
  filled_cells: CellRef[];
  previews: string[];
  complete: boolean;
}

export interface ResultResponse {
  images: string[];
  token_grids: number[][][];
  iterations: number;
}

export interface ModelInfo {
  r: number;
  D: number;
  K: number;
  K_prime: number;
  grid: GridInfo;
  with_conditions: boolean;
}

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const res = await fetch(url, init);
  const body = await res.json().catch(() => ({}));
  if (!res.ok) {
    const detail = typeof body?.detail === "string" ? body.detail : JSON.stringify(body);
    throw new ApiError(res.status, detail);
  }
  return body as T;
}

export class InpaintClient {
  constructor(private baseUrl: string) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async health(): Promise<{ status: string; model_loaded: boolean }> {
    return request(this.url("/v1/health"));
  }

  async modelInfo(): Promise<ModelInfo> {
    return request(this.url("/v1/model"));
  }

  private sessionBody(layers: ExportedLayers, config: SamplerOptions): string {
    const body: Record<string, unknown> = {
      image: toBase64(layers.image),
      mask: toBase64(layers.mask),
      config,
    };
    if (layers.semantic) body.semantic = toBase64(layers.semantic);
    if (layers.sketch) body.sketch = toBase64(layers.sketch);
    return JSON.stringify(body);
  }

  async createSession(layers: ExportedLayers, config: SamplerOptions): Promise<CreateSessionResponse> {
    return request(this.url("/v1/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: this.sessionBody(layers, config),
    });
  }

  async step(sessionId: string): Promise<StepResponse> {
    return request(this.url(`/v1/sessions/${sessionId}/step`), { method: "POST" });
  }

  async result(sessionId: string): Promise<ResultResponse> {
    return request(this.url(`/v1/sessions/${sessionId}/result`));
  }

  async deleteSession(sessionId: string): Promise<void> {
    await request(this.url(`/v1/sessions/${sessionId}`), { method: "DELETE" });
  }

  async inpaintOneShot(layers: ExportedLayers, config: SamplerOptions): Promise<ResultResponse & { masked_cells: number }> {
    return request(this.url("/v1/inpaint"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: this.sessionBody(layers, config),
    });
  }
}
