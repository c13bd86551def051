import { describe, expect, it } from "vitest";

import { buildChart, DEFAULT_SIZE, niceCeiling } from "../src/chart.js";
import type { TrajectoryPoint } from "../src/state.js";

const pt = (doseGy: number, volumeMm3: number, extrapolation = false): TrajectoryPoint => ({
  doseGy,
  volumeMm3,
  extrapolation,
});

describe("chart geometry", () => {
  it("one polyline per model with points at increasing x", () => {
    const geometry = buildChart(
      { a: [pt(0, 3000), pt(20, 2000), pt(40, 1500)], b: [pt(0, 3000), pt(40, 2500)] },
      68.4,
      82,
    );
    expect(geometry.lines.map((l) => l.modelId).sort()).toEqual(["a", "b"]);
    const xs = geometry.lines[0].points.map((p) => p.x);
    expect([...xs].sort((m, n) => m - n)).toEqual(xs);
    expect(geometry.lines[0].path.startsWith("M")).toBe(true);
  });

  it("shades the extrapolation zone between cohort max and slider max", () => {
    const geometry = buildChart({ a: [pt(0, 1000)] }, 68.4, 82);
    expect(geometry.extrapolationZone).not.toBeNull();
    const { x0, x1 } = geometry.extrapolationZone!;
    expect(x1).toBeGreaterThan(x0);
    const plotRight = DEFAULT_SIZE.width - DEFAULT_SIZE.marginRight;
    expect(x1).toBeCloseTo(plotRight, 3);
    expect(buildChart({}, 82, 82).extrapolationZone).toBeNull();
  });

  it("maps larger volumes to smaller y (up the chart)", () => {
    const geometry = buildChart({ a: [pt(0, 3000), pt(60, 300)] }, 68.4, 82);
    const [top, bottom] = geometry.lines[0].points;
    expect(top.volumeMm3).toBeGreaterThan(bottom.volumeMm3);
    expect(top.y).toBeLessThan(bottom.y);
  });

  it("empty models are omitted", () => {
    const geometry = buildChart({ a: [], b: [pt(10, 500)] }, 68.4, 82);
    expect(geometry.lines.map((l) => l.modelId)).toEqual(["b"]);
  });
});

describe("axis scaling", () => {
  it("rounds the volume ceiling to a clean magnitude", () => {
    expect(niceCeiling(3400)).toBe(5000);
    expect(niceCeiling(900)).toBe(1000);
    expect(niceCeiling(120)).toBe(200);
    expect(niceCeiling(0)).toBe(1);
  });
});
