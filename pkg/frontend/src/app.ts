/** Single-page expert interface: projection scatter with brushing, the
 * topic-action matrix, and the chord diagram, all bound to one shared
 * SelectionState. Rendering is plain SVG; no framework. */

import { ApiClient } from "./api.js";
import { arcPath, chordLayout, ribbonPath } from "./chord.js";
import { brushSelect, clickSelect, linearScale, Rect } from "./geometry.js";
import { buildMatrix } from "./matrix.js";
import { SelectionState } from "./state.js";
import {
  ChordPayload,
  EnsemblePayload,
  ProjectionPayload,
  TopicRef,
  refKey,
} from "./types.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const PALETTE = ["#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2",
                 "#b279a2", "#eeca3b", "#9d755d"];

function el<K extends keyof SVGElementTagNameMap>(
  tag: K, attrs: Record<string, string | number> = {},
): SVGElementTagNameMap[K] {
  const node = document.createElementNS(SVG_NS, tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, String(v));
  return node;
}

function clusterColor(id: number | null): string {
  if (id === null) return "#9aa0a6";
  return PALETTE[Math.abs(id) % PALETTE.length];
}

export class App {
  private state = new SelectionState();
  private ensemble: EnsemblePayload | null = null;
  private projection: ProjectionPayload | null = null;
  private chord: ChordPayload | null = null;
  private medoids = new Map<number, string>();
  private status: HTMLElement;

  constructor(private api: ApiClient, private root: HTMLElement) {
    this.status = document.createElement("div");
    this.state.onChange(() => this.renderAll());
  }

  async start(): Promise<void> {
    this.root.innerHTML = "";
    this.status.className = "status";
    this.root.appendChild(this.status);
    try {
      this.ensemble = await this.api.getEnsemble();
      this.projection = await this.api.getProjection().catch(() => null);
      this.chord = await this.api.getChord(this.ensemble.threshold);
    } catch (err) {
      this.say(`No ensemble yet: ${(err as Error).message}. Fit one (POST /api/lda) and reload.`);
      return;
    }
    this.state.ensureCluster(1);
    this.buildLayout();
    this.renderAll();
  }

  private say(text: string): void {
    this.status.textContent = text;
  }

  private buildLayout(): void {
    const grid = document.createElement("div");
    grid.className = "grid";
    grid.innerHTML = `
      <div id="panel-projection" class="panel"><h3>Topic projection</h3></div>
      <div id="panel-matrix" class="panel wide"><h3>Topic-action matrix</h3></div>
      <div id="panel-chord" class="panel"><h3>Topic chord</h3></div>
      <div id="panel-clusters" class="panel"><h3>Clusters</h3></div>
    `;
    this.root.appendChild(grid);
  }

  private renderAll(): void {
    if (!this.ensemble) return;
    this.renderProjection();
    this.renderMatrix();
    this.renderChord();
    this.renderClusters();
  }

  // -- projection scatter with rectangular brush ---------------------------

  private renderProjection(): void {
    const panel = document.getElementById("panel-projection");
    if (!panel || !this.projection) {
      if (panel && !this.projection) {
        panel.querySelector("svg")?.remove();
        const note = document.createElement("p");
        note.textContent = "No projection available (fewer than 3 topics).";
        if (!panel.querySelector("p")) panel.appendChild(note);
      }
      return;
    }
    panel.querySelector("svg")?.remove();
    const size = 320;
    const svg = el("svg", { width: size, height: size, class: "plot" });
    const sx = linearScale([-1.05, 1.05], [0, size]);
    const sy = linearScale([-1.05, 1.05], [size, 0]);

    for (const point of this.projection.points) {
      const owner = this.state.ownerOf(point);
      const isMedoid = owner !== null && this.medoids.get(owner) === refKey(point);
      const dot = el("circle", {
        cx: sx(point.x), cy: sy(point.y),
        r: isMedoid ? 8 : 5,
        fill: clusterColor(owner),
        stroke: isMedoid ? "#222" : "none",
        "stroke-width": isMedoid ? 2.5 : 0,
        "data-ref": refKey(point),
      });
      dot.addEventListener("click", () => {
        const hit = clickSelect(this.projection!.points, point.x, point.y, 0.01);
        if (hit && this.state.activeCluster !== null) {
          this.toggleTopic(this.state.activeCluster, hit);
        }
      });
      svg.appendChild(dot);
    }

    // rectangular brush in data coordinates
    let anchor: { x: number; y: number } | null = null;
    let band: SVGRectElement | null = null;
    const toData = (event: MouseEvent) => {
      const bounds = svg.getBoundingClientRect();
      return {
        x: sx.invert(event.clientX - bounds.left),
        y: sy.invert(event.clientY - bounds.top),
      };
    };
    svg.addEventListener("mousedown", (event) => {
      anchor = toData(event);
      band = el("rect", { class: "brush", fill: "rgba(76,120,168,0.15)",
                          stroke: "#4c78a8" });
      svg.appendChild(band);
    });
    svg.addEventListener("mousemove", (event) => {
      if (!anchor || !band) return;
      const cur = toData(event);
      const x0 = Math.min(sx(anchor.x), sx(cur.x));
      const y0 = Math.min(sy(anchor.y), sy(cur.y));
      band.setAttribute("x", String(x0));
      band.setAttribute("y", String(y0));
      band.setAttribute("width", String(Math.abs(sx(cur.x) - sx(anchor.x))));
      band.setAttribute("height", String(Math.abs(sy(cur.y) - sy(anchor.y))));
    });
    svg.addEventListener("mouseup", (event) => {
      if (!anchor) return;
      const cur = toData(event);
      const rect: Rect = { x0: anchor.x, y0: anchor.y, x1: cur.x, y1: cur.y };
      anchor = null;
      band?.remove();
      band = null;
      const refs = brushSelect(this.projection!.points, rect);
      if (refs.length && this.state.activeCluster !== null) {
        const result = this.state.addTopics(this.state.activeCluster, refs);
        if (result.rejected.length) {
          this.say(`${result.rejected.length} topic(s) already belong to another cluster`);
        }
        void this.refreshMedoid(this.state.activeCluster);
      }
    });
    panel.appendChild(svg);
  }

  private toggleTopic(clusterId: number, ref: TopicRef): void {
    const owner = this.state.ownerOf(ref);
    if (owner === clusterId) {
      this.state.removeTopic(clusterId, ref);
    } else if (owner === null) {
      this.state.addTopics(clusterId, [ref]);
    } else {
      this.say(`topic ${refKey(ref)} already belongs to cluster ${owner}`);
      return;
    }
    void this.refreshMedoid(clusterId);
  }

  private async refreshMedoid(clusterId: number): Promise<void> {
    // the medoid comes back with the server's cluster summary; recompute
    // locally as the selected topic with the largest fan overlap instead
    // of waiting for a submit round-trip
    const refs = this.state.selectedRefs(clusterId);
    if (!refs.length || !this.chord) {
      this.medoids.delete(clusterId);
      return;
    }
    const index = new Map(this.chord.refs.map((r, i) => [refKey(r), i]));
    let best = refs[0];
    let bestScore = -1;
    for (const candidate of refs) {
      const ci = index.get(refKey(candidate));
      if (ci === undefined) continue;
      let score = 0;
      for (const other of refs) {
        const oi = index.get(refKey(other));
        if (oi !== undefined && oi !== ci) score += this.chord.shared[ci][oi];
      }
      if (score > bestScore) {
        bestScore = score;
        best = candidate;
      }
    }
    this.medoids.set(clusterId, refKey(best));
    this.renderProjection();
  }

  // -- matrix ---------------------------------------------------------------

  private renderMatrix(): void {
    const panel = document.getElementById("panel-matrix");
    if (!panel || !this.ensemble) return;
    panel.querySelector("svg")?.remove();
    const model = buildMatrix(this.ensemble);
    const cell = 14;
    const left = 70;
    const top = 60;
    const width = left + model.actions.length * cell + 10;
    const height = top + model.topics.length * cell + 10;
    const svg = el("svg", { width, height, class: "plot" });

    model.actions.forEach((action, ai) => {
      const label = el("text", {
        x: left + ai * cell + cell / 2, y: top - 6,
        "font-size": 8, "text-anchor": "start",
        transform: `rotate(-55 ${left + ai * cell + cell / 2} ${top - 6})`,
      });
      label.textContent = action;
      svg.appendChild(label);
    });

    model.topics.forEach((topic, ti) => {
      const owner = this.state.ownerOf(topic);
      const label = el("text", {
        x: left - 6, y: top + ti * cell + cell * 0.75,
        "font-size": 9, "text-anchor": "end", fill: clusterColor(owner),
      });
      label.textContent = `${topic.run}:${topic.topic}`;
      label.addEventListener("click", () => {
        if (this.state.activeCluster !== null) {
          this.toggleTopic(this.state.activeCluster, topic);
        }
      });
      svg.appendChild(label);

      model.actions.forEach((action, ai) => {
        const rect = el("rect", {
          x: left + ai * cell, y: top + ti * cell,
          width: cell - 1, height: cell - 1,
          fill: "#30507a", opacity: model.opacity(ti, action),
        });
        const value = model.hoverValue(ti, action);
        const tip = el("title", {});
        tip.textContent = value === undefined
          ? `${action}: below display floor`
          : `${action}: ${value}`;
        rect.appendChild(tip);
        svg.appendChild(rect);
      });
    });
    panel.appendChild(svg);
  }

  // -- chord ----------------------------------------------------------------

  private renderChord(): void {
    const panel = document.getElementById("panel-chord");
    if (!panel || !this.chord) return;
    panel.querySelector("svg")?.remove();
    const size = 320;
    const svg = el("svg", { width: size, height: size, class: "plot" });
    const cx = size / 2;
    const cy = size / 2;
    const layout = chordLayout(this.chord);
    const maxShared = Math.max(1, ...layout.ribbons.map((r) => r.shared));

    for (const rib of layout.ribbons) {
      svg.appendChild(el("path", {
        d: ribbonPath(cx, cy, 118, rib),
        fill: "rgba(90,110,140,0.45)",
        stroke: "none",
        opacity: 0.25 + 0.75 * (rib.shared / maxShared),
      }));
    }
    layout.fans.forEach((fan) => {
      const owner = this.state.ownerOf(fan.ref);
      const path = el("path", {
        d: arcPath(cx, cy, 120, 140, fan.startAngle, fan.endAngle),
        fill: clusterColor(owner),
      });
      const tip = el("title", {});
      tip.textContent = `${refKey(fan.ref)}: ${fan.fanSize} actions`;
      path.appendChild(tip);
      path.addEventListener("click", () => {
        if (this.state.activeCluster !== null) {
          this.toggleTopic(this.state.activeCluster, fan.ref);
        }
      });
      svg.appendChild(path);
    });
    panel.appendChild(svg);
  }

  // -- cluster sidebar -------------------------------------------------------

  private renderClusters(): void {
    const panel = document.getElementById("panel-clusters");
    if (!panel) return;
    panel.querySelectorAll(".cluster-list, .actions").forEach((n) => n.remove());

    const list = document.createElement("div");
    list.className = "cluster-list";
    for (const cluster of this.state.clusterList()) {
      const row = document.createElement("div");
      row.className = "cluster-row" +
        (cluster.id === this.state.activeCluster ? " active" : "");
      const swatch = `<span class="swatch" style="background:${clusterColor(cluster.id)}"></span>`;
      row.innerHTML = `${swatch} <b>${cluster.id}</b> ${cluster.name} ` +
        `<span class="count">${cluster.topics.size} topics</span>`;
      row.addEventListener("click", () => this.state.setActive(cluster.id));
      list.appendChild(row);
    }
    panel.appendChild(list);

    const actions = document.createElement("div");
    actions.className = "actions";
    const addBtn = document.createElement("button");
    addBtn.textContent = "+ cluster";
    addBtn.addEventListener("click", () => {
      const next = Math.max(0, ...this.state.clusterList().map((c) => c.id)) + 1;
      this.state.setActive(next);
    });
    const submitBtn = document.createElement("button");
    submitBtn.textContent = "Assign sessions";
    submitBtn.disabled = !this.state.canSubmit();
    submitBtn.addEventListener("click", () => void this.submit(false));
    const trainBtn = document.createElement("button");
    trainBtn.textContent = "Assign + train";
    trainBtn.disabled = !this.state.canSubmit();
    trainBtn.addEventListener("click", () => void this.submit(true));
    actions.append(addBtn, submitBtn, trainBtn);
    panel.appendChild(actions);
  }

  private async submit(train: boolean): Promise<void> {
    try {
      const payload = this.state.toSelectionsPayload();
      const response = await this.api.postClusters(payload.selections);
      const total = response.clusters.reduce((a, c) => a + c.size, 0);
      this.say("Assigned: " +
        response.clusters.map((c) => `${c.name}=${c.size}`).join(", ") +
        ` (total ${total})`);
      for (const c of response.clusters) {
        if (c.medoid) this.medoids.set(c.id, refKey(c.medoid));
      }
      this.state.submitted = true;
      this.renderProjection();
      if (train) {
        const { job_id } = await this.api.postTrain();
        await this.api.pollJob(job_id, {
          onProgress: (job) =>
            this.say(`training: ${(job.progress * 100).toFixed(0)}% ${job.message}`),
        });
        this.say("training done");
      }
    } catch (err) {
      this.say(`submit failed: ${(err as Error).message}`);
    }
  }
}

export function mount(): void {
  const root = document.getElementById("app");
  if (root) void new App(new ApiClient(), root).start();
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  mount();
}
