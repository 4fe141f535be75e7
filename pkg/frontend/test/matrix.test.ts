import { describe, expect, it } from "vitest";

import { buildMatrix, MIN_OPACITY } from "../src/matrix.js";
import { EnsemblePayload } from "../src/types.js";

const payload: EnsemblePayload = {
  version: 1,
  threshold: 0.01,
  total_topics: 2,
  topics: [
    {
      run: 0, topic: 0, fan_size: 3,
      top_actions: [
        { action: "login", p: 0.41235678901234567 },
        { action: "search", p: 0.2 },
        { action: "logout", p: 0.05 },
      ],
    },
    {
      run: 0, topic: 1, fan_size: 2,
      top_actions: [
        { action: "delete_user", p: 0.6 },
        { action: "search", p: 0.001 },
      ],
    },
  ],
};

describe("buildMatrix", () => {
  it("keeps action columns in first-seen order", () => {
    const model = buildMatrix(payload);
    expect(model.actions).toEqual(["login", "search", "logout", "delete_user"]);
  });

  it("row-max cell has opacity 1", () => {
    const model = buildMatrix(payload);
    expect(model.opacity(0, "login")).toBe(1.0);
    expect(model.opacity(1, "delete_user")).toBe(1.0);
  });

  it("below-floor and missing cells render at the minimum opacity", () => {
    const model = buildMatrix(payload);
    expect(model.opacity(1, "search")).toBe(Math.max(MIN_OPACITY, 0.001 / 0.6));
    expect(model.opacity(0, "delete_user")).toBe(MIN_OPACITY); // missing cell
    expect(MIN_OPACITY).toBe(0.02);
  });

  it("hover value equals the served probability verbatim", () => {
    const model = buildMatrix(payload);
    expect(model.hoverValue(0, "login")).toBe(payload.topics[0].top_actions[0].p);
    expect(model.hoverValue(0, "login")).toBe(0.41235678901234567);
    expect(model.hoverValue(1, "search")).toBe(0.001);
    expect(model.hoverValue(0, "delete_user")).toBeUndefined();
  });

  it("opacity scales linearly within a row", () => {
    const model = buildMatrix(payload);
    expect(model.opacity(0, "search")).toBeCloseTo(0.2 / 0.41235678901234567, 12);
  });
});
