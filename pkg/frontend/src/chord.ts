/** Chord layout: outer fans sized by per-topic action counts, ribbons
 * between fans sized by shared action counts. Pure geometry, no DOM. */

import { ChordPayload, TopicRef } from "./types.js";

export interface Fan {
  ref: TopicRef;
  startAngle: number; // radians
  endAngle: number;
  fanSize: number;
}

export interface Ribbon {
  source: number; // fan indices
  target: number;
  shared: number;
  sourceStart: number;
  sourceEnd: number;
  targetStart: number;
  targetEnd: number;
}

export interface ChordLayout {
  fans: Fan[];
  ribbons: Ribbon[];
  padAngle: number;
}

export const TAU = Math.PI * 2;

/** Fan arc lengths are proportional to fan sizes and sum to the full
 * circle minus one pad per fan; ribbon widths are proportional to the
 * shared count, allocated along each fan's arc. */
export function chordLayout(payload: ChordPayload, padAngle = 0.03): ChordLayout {
  const n = payload.refs.length;
  const sizes = payload.fan_sizes.map((s) => Math.max(s, 0));
  const total = sizes.reduce((a, b) => a + b, 0);
  const available = TAU - padAngle * n;
  const unit = total > 0 ? available / total : 0;

  const fans: Fan[] = [];
  let angle = 0;
  for (let i = 0; i < n; i++) {
    const span = total > 0 ? sizes[i] * unit : available / n;
    fans.push({
      ref: payload.refs[i],
      startAngle: angle,
      endAngle: angle + span,
      fanSize: sizes[i],
    });
    angle += span + padAngle;
  }

  // Ribbon anchors walk along each fan proportionally to its outgoing flow.
  const flowTotal = new Array(n).fill(0);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      if (i !== j) flowTotal[i] += payload.shared[i][j];
    }
  }
  const cursor = fans.map((f) => f.startAngle);
  const ribbons: Ribbon[] = [];
  for (let i = 0; i < n; i++) {
    for (let j = i + 1; j < n; j++) {
      const shared = payload.shared[i][j];
      if (shared <= 0) continue;
      const spanI = flowTotal[i] > 0
        ? ((fans[i].endAngle - fans[i].startAngle) * shared) / flowTotal[i]
        : 0;
      const spanJ = flowTotal[j] > 0
        ? ((fans[j].endAngle - fans[j].startAngle) * shared) / flowTotal[j]
        : 0;
      ribbons.push({
        source: i,
        target: j,
        shared,
        sourceStart: cursor[i],
        sourceEnd: cursor[i] + spanI,
        targetStart: cursor[j],
        targetEnd: cursor[j] + spanJ,
      });
      cursor[i] += spanI;
      cursor[j] += spanJ;
    }
  }
  return { fans, ribbons, padAngle };
}

export function arcPath(cx: number, cy: number, r0: number, r1: number,
                        start: number, end: number): string {
  const large = end - start > Math.PI ? 1 : 0;
  const p = (r: number, a: number) =>
    `${cx + r * Math.sin(a)} ${cy - r * Math.cos(a)}`;
  return [
    `M ${p(r0, start)}`,
    `A ${r0} ${r0} 0 ${large} 1 ${p(r0, end)}`,
    `L ${p(r1, end)}`,
    `A ${r1} ${r1} 0 ${large} 0 ${p(r1, start)}`,
    "Z",
  ].join(" ");
}

export function ribbonPath(cx: number, cy: number, r: number, rib: Ribbon): string {
  const p = (a: number) => `${cx + r * Math.sin(a)} ${cy - r * Math.cos(a)}`;
  const mid = (a: number, b: number) => (a + b) / 2;
  return [
    `M ${p(rib.sourceStart)}`,
    `A ${r} ${r} 0 0 1 ${p(rib.sourceEnd)}`,
    `Q ${cx} ${cy} ${p(rib.targetStart)}`,
    `A ${r} ${r} 0 0 1 ${p(rib.targetEnd)}`,
    `Q ${cx} ${cy} ${p(rib.sourceStart)}`,
    "Z",
  ].join(" ");
}
