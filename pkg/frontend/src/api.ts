/** Typed client for the studio HTTP service. All server interaction in the UI
 * goes through this class; nothing else touches the network. */

export interface StudioConfig {
  directions: string[];
  beta_max: number;
  T: number;
  tau_default: number;
  token_dim: number;
  wplus_shape: number[];
  fingerprint: string;
}

export interface ImageRef {
  png: string;
  raw: string;
}

export interface JobRecord {
  job_id: string;
  kind: string;
  state: "queued" | "running" | "done" | "failed";
  progress: number;
  error: string | null;
  result_ref: any;
}

export interface EditRequestBody {
  subject_id: string;
  directions: Record<string, number>;
  seed?: number;
  tau?: number;
  steps?: number;
}

export interface ComposeRequestBody {
  subject_ids: string[];
  prompt: string;
  seed?: number;
  tau?: number;
  parallel?: boolean;
}

export class ServiceError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (...args) => fetch(...args),
    private pollIntervalMs = 150,
  ) {}

  private async request(method: string, path: string, body?: unknown): Promise<any> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const data = await resp.json();
    if (!resp.ok) {
      throw new ServiceError(resp.status, data.detail ?? data.error ?? resp.statusText);
    }
    return data;
  }

  getConfig(): Promise<StudioConfig> {
    return this.request("GET", "/config");
  }

  postEdit(body: EditRequestBody): Promise<JobRecord> {
    return this.request("POST", "/edit", body);
  }

  postCompose(body: ComposeRequestBody): Promise<JobRecord> {
    return this.request("POST", "/compose", body);
  }

  getJob(jobId: string): Promise<JobRecord> {
    return this.request("GET", `/jobs/${jobId}`);
  }

  /** Poll until the job settles. The first poll happens immediately so mocked
   * services that answer "done" on the first call never hit a timer. */
  async waitJob(jobId: string, timeoutMs = 120000): Promise<JobRecord> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const job = await this.getJob(jobId);
      if (job.state === "done" || job.state === "failed") return job;
      if (Date.now() > deadline) throw new ServiceError(408, `job ${jobId} timed out`);
      await sleep(this.pollIntervalMs);
    }
  }

  artifactUrl(digest: string): string {
    return `${this.baseUrl}/artifacts/${digest}`;
  }
}
