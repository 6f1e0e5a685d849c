/** Two-subject composition canvas: dispatches compose requests, keeps the
 * returned masks as toggleable overlay layers, and scopes per-subject edits
 * to a single subject id. */

import { ApiClient, ImageRef, JobRecord } from "./api.js";

export interface OverlayLayer {
  digest: string;
  visible: boolean;
}

export interface ComposeOptions {
  seed?: number;
  tau?: number;
  onToast?: (message: string) => void;
}

export class ComposeCanvas {
  image: ImageRef | null = null;
  overlays: OverlayLayer[] = [];
  /** Inline guidance shown when the service cannot find enough instances. */
  guidance: string | null = null;

  constructor(
    public readonly subjectIds: string[],
    public prompt: string,
    private client: ApiClient,
    private opts: ComposeOptions = {},
  ) {
    if (subjectIds.length < 1 || subjectIds.length > 2) {
      throw new Error("select one or two subjects");
    }
  }

  async dispatch(): Promise<JobRecord | null> {
    this.guidance = null;
    try {
      const submitted = await this.client.postCompose({
        subject_ids: this.subjectIds,
        prompt: this.prompt,
        seed: this.opts.seed,
        tau: this.opts.tau,
      });
      const job = await this.client.waitJob(submitted.job_id);
      if (job.state === "failed") throw new Error(job.error ?? "compose failed");
      this.image = job.result_ref.image;
      this.overlays = job.result_ref.mask_pngs.map((digest: string) => ({
        digest,
        visible: true,
      }));
      return job;
    } catch (err) {
      const message = String(err);
      if (message.includes("instances")) {
        this.guidance = "Not enough subject regions found; try another prompt or seed.";
      } else {
        this.opts.onToast?.(message);
      }
      return null;
    }
  }

  /** Pure view-state flip; never touches the network. */
  toggleOverlay(index: number): void {
    const layer = this.overlays[index];
    if (!layer) throw new Error(`no overlay ${index}`);
    layer.visible = !layer.visible;
  }

  /** Edit one subject's attribute inside the composition; the request names
   * only that subject. */
  async editSubject(index: number, direction: string, beta: number): Promise<JobRecord | null> {
    const subjectId = this.subjectIds[index];
    if (subjectId === undefined) throw new Error(`no subject slot ${index}`);
    try {
      const submitted = await this.client.postEdit({
        subject_id: subjectId,
        directions: { [direction]: beta },
        seed: this.opts.seed,
        tau: this.opts.tau,
      });
      const job = await this.client.waitJob(submitted.job_id);
      if (job.state === "failed") throw new Error(job.error ?? "edit failed");
      return job;
    } catch (err) {
      this.opts.onToast?.(String(err));
      return null;
    }
  }
}
