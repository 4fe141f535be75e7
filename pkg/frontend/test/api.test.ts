import { describe, expect, it } from "vitest";

import { ApiClient, ApiError, FetchLike } from "../src/api.js";
import { SelectionState } from "../src/state.js";

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function mockServer(m: number): { fetch: FetchLike; calls: string[] } {
  const calls: string[] = [];
  const jobs: Record<string, number> = {};
  const fetch: FetchLike = async (url, init) => {
    calls.push(`${init?.method ?? "GET"} ${url}`);
    if (url.endsWith("/api/clusters")) {
      const body = JSON.parse(String(init?.body));
      const selections = body.selections as { id: number; name: string }[];
      // deterministic pseudo-partition of m sessions across the clusters
      const base = Math.floor(m / selections.length);
      const sizes = selections.map((s, i) =>
        i === 0 ? m - base * (selections.length - 1) : base);
      return jsonResponse(200, {
        version: 1,
        clusters: selections.map((s, i) => ({
          id: s.id, name: s.name, size: sizes[i],
          medoid: { run: 0, topic: i },
        })),
      });
    }
    if (url.endsWith("/api/train")) {
      jobs["job-1"] = 0;
      return jsonResponse(200, { job_id: "job-1" });
    }
    const jobMatch = url.match(/\/api\/jobs\/(.+)$/);
    if (jobMatch) {
      const id = jobMatch[1];
      if (!(id in jobs)) return jsonResponse(404, { error: "unknown_job" });
      jobs[id] += 1;
      const done = jobs[id] >= 3;
      return jsonResponse(200, {
        job_id: id, kind: "train", state: done ? "done" : "running",
        progress: done ? 1 : jobs[id] / 3, message: "",
      });
    }
    return jsonResponse(404, { error: "not_found" });
  };
  return { fetch, calls };
}

describe("ApiClient", () => {
  it("submitted assignment sizes sum to m", async () => {
    const m = 105;
    const server = mockServer(m);
    const api = new ApiClient("", server.fetch);
    const state = new SelectionState();
    state.addTopics(1, [{ run: 0, topic: 0 }]);
    state.addTopics(2, [{ run: 0, topic: 1 }, { run: 1, topic: 0 }]);
    const response = await api.postClusters(state.toSelectionsPayload().selections);
    const total = response.clusters.reduce((acc, c) => acc + c.size, 0);
    expect(total).toBe(m);
    expect(response.clusters.map((c) => c.id)).toEqual([1, 2]);
  });

  it("raises ApiError with the server payload on non-2xx", async () => {
    const api = new ApiClient("", async () =>
      jsonResponse(409, { error: "no_ensemble" }));
    await expect(api.getEnsemble()).rejects.toThrowError(ApiError);
    await expect(api.getEnsemble()).rejects.toMatchObject({
      status: 409,
      payload: { error: "no_ensemble" },
    });
  });

  it("polls a train job to completion", async () => {
    const server = mockServer(10);
    const api = new ApiClient("", server.fetch);
    const { job_id } = await api.postTrain();
    const seen: number[] = [];
    const job = await api.pollJob(job_id, {
      intervalMs: 1,
      onProgress: (j) => seen.push(j.progress),
    });
    expect(job.state).toBe("done");
    expect(seen[seen.length - 1]).toBe(1);
    expect(seen.length).toBeGreaterThanOrEqual(2);
  });

  it("rejects when the job fails", async () => {
    let polled = 0;
    const api = new ApiClient("", async (url) => {
      if (url.includes("/api/jobs/")) {
        polled++;
        return jsonResponse(200, {
          job_id: "x", kind: "train",
          state: polled >= 2 ? "failed" : "running",
          progress: 0.5, message: "boom",
        });
      }
      return jsonResponse(404, {});
    });
    await expect(api.pollJob("x", { intervalMs: 1 })).rejects.toThrow(/boom/);
  });

  it("encodes the chord threshold as a query parameter", async () => {
    const server = mockServer(10);
    const api = new ApiClient("http://svc", server.fetch);
    await api.getChord(0.05).catch(() => undefined);
    expect(server.calls[0]).toBe("GET http://svc/api/chord?threshold=0.05");
  });
});
