/** Payload shapes served by the backing HTTP API. */

export interface TopicRef {
  run: number;
  topic: number;
}

export interface TopActionEntry {
  action: string;
  p: number;
}

export interface EnsembleTopic extends TopicRef {
  top_actions: TopActionEntry[];
  fan_size: number;
}

export interface EnsemblePayload {
  version: number;
  threshold: number;
  total_topics: number;
  topics: EnsembleTopic[];
}

export interface ProjectedPoint extends TopicRef {
  x: number;
  y: number;
}

export interface ProjectionPayload {
  version: number;
  points: ProjectedPoint[];
}

export interface ChordPayload {
  version: number;
  threshold: number;
  refs: TopicRef[];
  fan_sizes: number[];
  shared: number[][];
}

export interface ClusterSummary {
  id: number;
  name: string;
  size: number;
  medoid: TopicRef | null;
}

export interface ClustersResponse {
  version: number;
  clusters: ClusterSummary[];
}

export interface JobStatus {
  job_id: string;
  kind: string;
  state: "queued" | "running" | "done" | "failed";
  progress: number;
  message: string;
}

export function refKey(ref: TopicRef): string {
  return `${ref.run}:${ref.topic}`;
}

export function parseRefKey(key: string): TopicRef {
  const [run, topic] = key.split(":").map(Number);
  return { run, topic };
}
