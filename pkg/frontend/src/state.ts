// Session state and the pure update logic behind the explorer: dose snapping,
// per-model trajectory accumulation, stale-response bookkeeping, and query
// history replay. No DOM and no fetch in here.

import { PredictResponse } from "./api.js";

export const DOSE_STEP_GY = 0.5;
export const RANGE_FACTOR = 1.2; // slider reaches 20% beyond the cohort max

export interface TrajectoryPoint {
  doseGy: number;
  volumeMm3: number;
  extrapolation: boolean;
}

export interface QueryRecord {
  patientId: string;
  modelId: string;
  doseGy: number;
  seed: number;
}

export interface SessionState {
  selectedPatient: string | null;
  selectedModels: string[];
  doseGy: number;
  sliceIndex: number;
  overlayOn: boolean;
  points: Record<string, TrajectoryPoint[]>;
  pending: number;
  lastError: string | null;
  history: QueryRecord[];
}

export function initialState(): SessionState {
  return {
    selectedPatient: null,
    selectedModels: [],
    doseGy: 0,
    sliceIndex: 0,
    overlayOn: true,
    points: {},
    pending: 0,
    lastError: null,
    history: [],
  };
}

export function snapDose(raw: number, doseMaxGy: number): number {
  const upper = sliderMax(doseMaxGy);
  const clamped = Math.min(Math.max(raw, 0), upper);
  return Math.round(clamped / DOSE_STEP_GY) * DOSE_STEP_GY;
}

export function sliderMax(doseMaxGy: number): number {
  return Math.round((doseMaxGy * RANGE_FACTOR) / DOSE_STEP_GY) * DOSE_STEP_GY;
}

export function isExtrapolation(doseGy: number, doseMaxGy: number): boolean {
  return doseGy > doseMaxGy;
}

/** Insert or replace the point for this dose, keeping the list sorted by dose. */
export function addPoint(
  points: Record<string, TrajectoryPoint[]>,
  modelId: string,
  point: TrajectoryPoint,
): Record<string, TrajectoryPoint[]> {
  const existing = points[modelId] ?? [];
  const kept = existing.filter((p) => p.doseGy !== point.doseGy);
  kept.push(point);
  kept.sort((a, b) => a.doseGy - b.doseGy);
  return { ...points, [modelId]: kept };
}

export function recordResponse(state: SessionState, resp: PredictResponse): SessionState {
  const point: TrajectoryPoint = {
    doseGy: resp.dose_gy,
    volumeMm3: resp.volume_mm3,
    extrapolation: resp.extrapolation,
  };
  return {
    ...state,
    points: addPoint(state.points, resp.model_id, point),
    history: [
      ...state.history,
      { patientId: resp.patient_id, modelId: resp.model_id, doseGy: resp.dose_gy, seed: resp.seed },
    ],
    lastError: null,
  };
}

export function recordError(state: SessionState, message: string): SessionState {
  // errors surface in the banner; accumulated points stay intact
  return { ...state, lastError: message };
}

export function selectPatient(state: SessionState, patientId: string): SessionState {
  return {
    ...initialState(),
    selectedPatient: patientId,
    selectedModels: state.selectedModels,
    overlayOn: state.overlayOn,
  };
}

export function toggleModel(state: SessionState, modelId: string, maxModels = 2): SessionState {
  const selected = state.selectedModels.includes(modelId)
    ? state.selectedModels.filter((m) => m !== modelId)
    : [...state.selectedModels, modelId].slice(-maxModels);
  return { ...state, selectedModels: selected };
}

export function volumeAt(state: SessionState, modelId: string, doseGy: number): number | null {
  const match = (state.points[modelId] ?? []).find((p) => p.doseGy === doseGy);
  return match ? match.volumeMm3 : null;
}

/** Re-issuing the stored history must rebuild the identical chart: the
 * service is deterministic per (request, seed), so replay is pure. */
export function replayQueries(history: QueryRecord[], patientId: string): QueryRecord[] {
  return history.filter((q) => q.patientId === patientId);
}

// -- stale-response discipline ----------------------------------------------

export interface QueryGate {
  next(): number;
  isCurrent(seq: number): boolean;
}

/** One in-flight query per control: responses for superseded sequence
 * numbers are discarded. */
export function createQueryGate(): QueryGate {
  let current = 0;
  return {
    next() {
      current += 1;
      return current;
    },
    isCurrent(seq) {
      return seq === current;
    },
  };
}

export type Canceller = () => void;

/** Debounce with an injectable timer so rapid slider motion coalesces. */
export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  waitMs: number,
  setTimer: (cb: () => void, ms: number) => ReturnType<typeof setTimeout> = setTimeout,
  clearTimer: (h: ReturnType<typeof setTimeout>) => void = clearTimeout,
): ((...args: A) => void) & { cancel: Canceller } {
  let handle: ReturnType<typeof setTimeout> | null = null;
  const wrapped = (...args: A) => {
    if (handle !== null) clearTimer(handle);
    handle = setTimer(() => {
      handle = null;
      fn(...args);
    }, waitMs);
  };
  wrapped.cancel = () => {
    if (handle !== null) clearTimer(handle);
    handle = null;
  };
  return wrapped;
}
