/** Shared selection state behind all three views.
 *
 * Clusters own disjoint topic sets; the disjointness is enforced at
 * interaction time so an overlapping or empty submission can never be
 * built, mirroring the server-side validation.
 */

import { TopicRef, refKey, parseRefKey } from "./types.js";

export interface ClusterDraft {
  id: number;
  name: string;
  topics: Set<string>;
}

export interface AddResult {
  added: TopicRef[];
  rejected: TopicRef[]; // already owned by another cluster
}

export type Listener = () => void;

export class SelectionState {
  private clusters = new Map<number, ClusterDraft>();
  private owners = new Map<string, number>();
  private listeners: Listener[] = [];
  activeCluster: number | null = null;
  submitted = false;

  onChange(listener: Listener): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  ensureCluster(id: number, name?: string): ClusterDraft {
    let cluster = this.clusters.get(id);
    if (!cluster) {
      cluster = { id, name: name ?? `cluster-${id}`, topics: new Set() };
      this.clusters.set(id, cluster);
    }
    if (this.activeCluster === null) this.activeCluster = id;
    return cluster;
  }

  setActive(id: number): void {
    this.ensureCluster(id);
    this.activeCluster = id;
    this.emit();
  }

  rename(id: number, name: string): void {
    this.ensureCluster(id).name = name;
    this.emit();
  }

  /** Add topics to a cluster; refs owned elsewhere are rejected, keeping
   * cluster topic sets disjoint by construction. */
  addTopics(clusterId: number, refs: TopicRef[]): AddResult {
    const cluster = this.ensureCluster(clusterId);
    const result: AddResult = { added: [], rejected: [] };
    for (const ref of refs) {
      const key = refKey(ref);
      const owner = this.owners.get(key);
      if (owner !== undefined && owner !== clusterId) {
        result.rejected.push(ref);
        continue;
      }
      if (!cluster.topics.has(key)) {
        cluster.topics.add(key);
        this.owners.set(key, clusterId);
        result.added.push(ref);
      }
    }
    this.submitted = false;
    this.emit();
    return result;
  }

  removeTopic(clusterId: number, ref: TopicRef): void {
    const cluster = this.clusters.get(clusterId);
    if (!cluster) return;
    const key = refKey(ref);
    if (cluster.topics.delete(key)) {
      this.owners.delete(key);
      this.submitted = false;
      this.emit();
    }
  }

  dropCluster(id: number): void {
    const cluster = this.clusters.get(id);
    if (!cluster) return;
    for (const key of cluster.topics) this.owners.delete(key);
    this.clusters.delete(id);
    if (this.activeCluster === id) {
      this.activeCluster = this.clusters.size ? [...this.clusters.keys()][0] : null;
    }
    this.emit();
  }

  ownerOf(ref: TopicRef): number | null {
    return this.owners.get(refKey(ref)) ?? null;
  }

  clusterList(): ClusterDraft[] {
    return [...this.clusters.values()].sort((a, b) => a.id - b.id);
  }

  selectedRefs(clusterId: number): TopicRef[] {
    const cluster = this.clusters.get(clusterId);
    if (!cluster) return [];
    return [...cluster.topics].map(parseRefKey);
  }

  /** Submission is allowed only for a nonempty set of nonempty clusters. */
  canSubmit(): boolean {
    const clusters = this.clusterList();
    return clusters.length > 0 && clusters.every((c) => c.topics.size > 0);
  }

  toSelectionsPayload(): { selections: { id: number; name: string; topics: TopicRef[] }[] } {
    if (!this.canSubmit()) {
      throw new Error("selection has empty clusters; submission blocked");
    }
    return {
      selections: this.clusterList().map((c) => ({
        id: c.id,
        name: c.name,
        topics: [...c.topics].map(parseRefKey),
      })),
    };
  }
}
