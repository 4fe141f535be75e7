/** Typed client for the backing service; fetch is injectable for tests. */

import {
  ChordPayload,
  ClustersResponse,
  EnsemblePayload,
  JobStatus,
  ProjectionPayload,
  TopicRef,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, public payload: unknown) {
    super(`API error ${status}: ${JSON.stringify(payload)}`);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    const body = await response.json();
    if (!response.ok) throw new ApiError(response.status, body);
    return body as T;
  }

  getEnsemble(): Promise<EnsemblePayload> {
    return this.request("/api/ensemble");
  }

  getProjection(): Promise<ProjectionPayload> {
    return this.request("/api/projection");
  }

  getChord(threshold: number): Promise<ChordPayload> {
    return this.request(`/api/chord?threshold=${encodeURIComponent(threshold)}`);
  }

  postClusters(selections: { id: number; name: string; topics: TopicRef[] }[]):
      Promise<ClustersResponse> {
    return this.request("/api/clusters", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ selections }),
    });
  }

  postTrain(options: object = {}): Promise<{ job_id: string }> {
    return this.request("/api/train", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(options),
    });
  }

  getJob(jobId: string): Promise<JobStatus> {
    return this.request(`/api/jobs/${jobId}`);
  }

  /** Poll until the job reaches a terminal state; resolves on done,
   * rejects on failed. */
  async pollJob(
    jobId: string,
    options: { intervalMs?: number; onProgress?: (job: JobStatus) => void;
               maxPolls?: number } = {},
  ): Promise<JobStatus> {
    const { intervalMs = 500, onProgress, maxPolls = Infinity } = options;
    let polls = 0;
    for (;;) {
      const job = await this.getJob(jobId);
      onProgress?.(job);
      if (job.state === "done") return job;
      if (job.state === "failed") throw new Error(`job ${jobId} failed: ${job.message}`);
      if (++polls >= maxPolls) throw new Error(`job ${jobId} still ${job.state}`);
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}
