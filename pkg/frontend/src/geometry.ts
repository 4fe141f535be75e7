/** Scales and brush hit-testing for the projection scatter. */

import { ProjectedPoint, TopicRef } from "./types.js";

export interface Scale {
  (v: number): number;
  invert(v: number): number;
}

export function linearScale(domain: [number, number], range: [number, number]): Scale {
  const [d0, d1] = domain;
  const [r0, r1] = range;
  const span = d1 - d0 || 1;
  const scale = ((v: number) => r0 + ((v - d0) / span) * (r1 - r0)) as Scale;
  scale.invert = (v: number) => d0 + ((v - r0) / (r1 - r0 || 1)) * span;
  return scale;
}

export interface Rect {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export function normalizeRect(rect: Rect): Rect {
  return {
    x0: Math.min(rect.x0, rect.x1),
    y0: Math.min(rect.y0, rect.y1),
    x1: Math.max(rect.x0, rect.x1),
    y1: Math.max(rect.y0, rect.y1),
  };
}

/** Topics whose projected coordinates fall inside the brush rectangle
 * (inclusive edges, data coordinates). */
export function brushSelect(points: ProjectedPoint[], rect: Rect): TopicRef[] {
  const r = normalizeRect(rect);
  return points
    .filter((p) => p.x >= r.x0 && p.x <= r.x1 && p.y >= r.y0 && p.y <= r.y1)
    .map((p) => ({ run: p.run, topic: p.topic }));
}

/** Click-select: nearest point within a pixel-space radius, or null. */
export function clickSelect(
  points: ProjectedPoint[],
  x: number,
  y: number,
  radius: number,
): TopicRef | null {
  let best: ProjectedPoint | null = null;
  let bestDist = radius * radius;
  for (const p of points) {
    const dx = p.x - x;
    const dy = p.y - y;
    const d2 = dx * dx + dy * dy;
    if (d2 <= bestDist) {
      best = p;
      bestDist = d2;
    }
  }
  return best ? { run: best.run, topic: best.topic } : null;
}
