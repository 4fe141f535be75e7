/** Topic-action matrix model: cell opacity is the probability normalized
 * by its row maximum (absolute values are tiny for wide vocabularies and
 * would render invisibly); the hover value is the served number untouched.
 */

import { EnsemblePayload, EnsembleTopic } from "./types.js";

export const MIN_OPACITY = 0.02;

export interface MatrixModel {
  actions: string[];            // x axis, first-seen order across topics
  topics: EnsembleTopic[];      // y axis
  value(topicIndex: number, action: string): number | undefined;
  opacity(topicIndex: number, action: string): number;
  hoverValue(topicIndex: number, action: string): number | undefined;
}

export function buildMatrix(payload: EnsemblePayload): MatrixModel {
  const actions: string[] = [];
  const seen = new Set<string>();
  const cells: Map<string, number>[] = [];
  const rowMax: number[] = [];

  for (const topic of payload.topics) {
    const row = new Map<string, number>();
    let max = 0;
    for (const entry of topic.top_actions) {
      if (!seen.has(entry.action)) {
        seen.add(entry.action);
        actions.push(entry.action);
      }
      row.set(entry.action, entry.p);
      if (entry.p > max) max = entry.p;
    }
    cells.push(row);
    rowMax.push(max);
  }

  return {
    actions,
    topics: payload.topics,
    value(topicIndex, action) {
      return cells[topicIndex]?.get(action);
    },
    opacity(topicIndex, action) {
      const v = cells[topicIndex]?.get(action);
      const max = rowMax[topicIndex] ?? 0;
      if (v === undefined || max <= 0) return MIN_OPACITY;
      return Math.max(MIN_OPACITY, v / max);
    },
    hoverValue(topicIndex, action) {
      // pass-through: the tooltip shows exactly what the server sent
      return cells[topicIndex]?.get(action);
    },
  };
}
