// Pure geometry for the volume-vs-dose chart: maps trajectory points to SVG
// coordinates, one polyline per model, with the extrapolation zone shaded
// beyond the cohort dose maximum.

import { TrajectoryPoint } from "./state.js";

export interface ChartSize {
  width: number;
  height: number;
  marginLeft: number;
  marginBottom: number;
  marginTop: number;
  marginRight: number;
}

export const DEFAULT_SIZE: ChartSize = {
  width: 460,
  height: 260,
  marginLeft: 52,
  marginBottom: 30,
  marginTop: 10,
  marginRight: 10,
};

export interface ChartPoint {
  x: number;
  y: number;
  doseGy: number;
  volumeMm3: number;
  extrapolation: boolean;
}

export interface ChartLine {
  modelId: string;
  path: string;
  points: ChartPoint[];
}

export interface ChartGeometry {
  lines: ChartLine[];
  extrapolationZone: { x0: number; x1: number } | null;
  xTicks: { x: number; label: string }[];
  yTicks: { y: number; label: string }[];
  volumeMax: number;
}

export function niceCeiling(value: number): number {
  if (value <= 0) return 1;
  const magnitude = Math.pow(10, Math.floor(Math.log10(value)));
  const normalized = value / magnitude;
  const factor = normalized <= 1 ? 1 : normalized <= 2 ? 2 : normalized <= 5 ? 5 : 10;
  return factor * magnitude;
}

export function buildChart(
  pointsByModel: Record<string, TrajectoryPoint[]>,
  doseMaxGy: number,
  sliderMaxGy: number,
  size: ChartSize = DEFAULT_SIZE,
): ChartGeometry {
  const plotW = size.width - size.marginLeft - size.marginRight;
  const plotH = size.height - size.marginTop - size.marginBottom;
  const allPoints = Object.values(pointsByModel).flat();
  const volumeMax = niceCeiling(Math.max(1, ...allPoints.map((p) => p.volumeMm3)));

  const xOf = (dose: number) => size.marginLeft + (dose / sliderMaxGy) * plotW;
  const yOf = (vol: number) => size.marginTop + plotH - (vol / volumeMax) * plotH;

  const lines: ChartLine[] = Object.entries(pointsByModel)
    .filter(([, pts]) => pts.length > 0)
    .map(([modelId, pts]) => {
      const points = pts.map((p) => ({
        x: xOf(p.doseGy),
        y: yOf(p.volumeMm3),
        doseGy: p.doseGy,
        volumeMm3: p.volumeMm3,
        extrapolation: p.extrapolation,
      }));
      const path = points
        .map((p, i) => `${i === 0 ? "M" : "L"}${p.x.toFixed(1)},${p.y.toFixed(1)}`)
        .join(" ");
      return { modelId, path, points };
    });

  const xTicks = [];
  for (let dose = 0; dose <= sliderMaxGy; dose += 10) {
    xTicks.push({ x: xOf(dose), label: `${dose}` });
  }
  const yTicks = [0, 0.5, 1].map((frac) => ({
    y: yOf(frac * volumeMax),
    label: `${Math.round(frac * volumeMax)}`,
  }));

  const extrapolationZone =
    sliderMaxGy > doseMaxGy ? { x0: xOf(doseMaxGy), x1: xOf(sliderMaxGy) } : null;

  return { lines, extrapolationZone, xTicks, yTicks, volumeMax };
}
