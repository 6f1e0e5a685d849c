/** Per-subject editing session: slider map, debounced edit dispatch, preview
 * state, and append-only history. */

import { ApiClient, ImageRef, StudioConfig } from "./api.js";

export interface HistoryEntry {
  sliders: Record<string, number>;
  image: ImageRef;
}

export interface SessionOptions {
  seed?: number;
  tau?: number;
  debounceMs?: number;
  onToast?: (message: string) => void;
}

export class EditSession {
  sliders: Record<string, number> = {};
  preview: ImageRef | null = null;
  lastJobId: string | null = null;
  /** Completed states only; never mutated in place. */
  readonly history: HistoryEntry[] = [];

  private timer: ReturnType<typeof setTimeout> | null = null;
  private inFlight = false;
  private dirty = false;
  private readonly debounceMs: number;

  constructor(
    public readonly subjectId: string,
    private config: StudioConfig,
    private client: ApiClient,
    private opts: SessionOptions = {},
  ) {
    for (const name of config.directions) this.sliders[name] = 0;
    this.debounceMs = opts.debounceMs ?? 250;
  }

  /** Seed the preview with the subject's base generation. */
  setBase(image: ImageRef): void {
    this.preview = image;
  }

  /** Update one slider and schedule a debounced edit request carrying the
   * full slider map. Rapid updates collapse into a single trailing dispatch;
   * while a request is in flight, nothing new is sent until it settles. */
  commitSlider(direction: string, beta: number): void {
    if (!(direction in this.sliders)) {
      throw new Error(`unknown direction ${direction}`);
    }
    if (!Number.isFinite(beta) || Math.abs(beta) > this.config.beta_max) {
      throw new Error(`beta ${beta} outside [-${this.config.beta_max}, ${this.config.beta_max}]`);
    }
    this.sliders[direction] = beta;
    this.schedule();
  }

  /** Restore the slider map and preview of a past completed state. */
  replay(index: number): void {
    const entry = this.history[index];
    if (!entry) throw new Error(`no history entry ${index}`);
    this.sliders = { ...entry.sliders };
    this.preview = entry.image;
  }

  get busy(): boolean {
    return this.inFlight || this.timer !== null;
  }

  private schedule(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      void this.dispatch();
    }, this.debounceMs);
  }

  private async dispatch(): Promise<void> {
    if (this.inFlight) {
      this.dirty = true;
      return;
    }
    this.inFlight = true;
    const sliders = { ...this.sliders };
    try {
      const submitted = await this.client.postEdit({
        subject_id: this.subjectId,
        directions: sliders,
        seed: this.opts.seed,
        tau: this.opts.tau,
      });
      const job = await this.client.waitJob(submitted.job_id);
      if (job.state === "failed") throw new Error(job.error ?? "edit failed");
      this.lastJobId = job.job_id;
      this.preview = job.result_ref.images[0];
      this.history.push({ sliders, image: this.preview! });
    } catch (err) {
      this.opts.onToast?.(String(err));
    } finally {
      this.inFlight = false;
      if (this.dirty) {
        this.dirty = false;
        this.schedule();
      }
    }
  }
}
