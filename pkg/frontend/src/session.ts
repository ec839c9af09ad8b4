/**
 * Stepwise session driver: create, step until complete (pausable between
 * iterations), fetch results. Step requests are strictly sequential; a
 * pause takes effect before the next request goes out.
 */

import { InpaintClient, SamplerOptions, StepResponse, ResultResponse, CellRef } from "./api.js";
import { ExportedLayers } from "./layers.js";

export interface ProgressEvent {
  iteration: number;
  iterationsExpected: number;
  filledCells: CellRef[];
  previews: string[]; // base64 PNG per sample
  complete: boolean;
}

export interface RunnerCallbacks {
  onCreated?: (sessionId: string, maskedCells: number, iterationsExpected: number) => void;
  onProgress?: (event: ProgressEvent) => void;
  onComplete?: (result: ResultResponse) => void;
  onError?: (err: unknown) => void;
}

export type RunnerState = "idle" | "running" | "paused" | "done" | "failed";

export class SessionRunner {
  state: RunnerState = "idle";
  sessionId: string | null = null;
  iterationsExpected = 0;
  maskedCells = 0;
  progress: ProgressEvent[] = [];
  result: ResultResponse | null = null;

  private pauseRequested = false;
  private resumeSignal: (() => void) | null = null;

  constructor(
    private client: InpaintClient,
    private callbacks: RunnerCallbacks = {},
  ) {}

  pause(): void {
    this.pauseRequested = true;
  }

  resume(): void {
    this.pauseRequested = false;
    if (this.resumeSignal) {
      const signal = this.resumeSignal;
      this.resumeSignal = null;
      signal();
    }
  }

  private async waitWhilePaused(): Promise<void> {
    if (!this.pauseRequested) return;
    this.state = "paused";
    await new Promise<void>((resolve) => {
      this.resumeSignal = resolve;
    });
    this.state = "running";
  }

  /** Full create -> step loop -> result cycle. Resolves with the result. */
  async run(layers: ExportedLayers, config: SamplerOptions): Promise<ResultResponse> {
    try {
      this.state = "running";
      const created = await this.client.createSession(layers, config);
      this.sessionId = created.session_id;
      this.iterationsExpected = created.iterations_expected;
      this.maskedCells = created.masked_cells;
      this.callbacks.onCreated?.(created.session_id, created.masked_cells, created.iterations_expected);

      let complete = created.complete;
      while (!complete) {
        await this.waitWhilePaused();
        const step: StepResponse = await this.client.step(created.session_id);
        const event: ProgressEvent = {
          iteration: step.iteration,
          iterationsExpected: this.iterationsExpected,
          filledCells: step.filled_cells,
          previews: step.previews,
          complete: step.complete,
        };
        this.progress.push(event);
        this.callbacks.onProgress?.(event);
        complete = step.complete;
      }

      const result = await this.client.result(created.session_id);
      this.result = result;
      this.state = "done";
      this.callbacks.onComplete?.(result);
      return result;
    } catch (err) {
      this.state = "failed";
      this.callbacks.onError?.(err);
      throw err;
    }
  }
}
