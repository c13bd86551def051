// Typed client for the /v1 inference service. Every number shown in the UI
// originates from one of these responses; the fetch implementation is
// injectable so the client logic is testable without a server.

export interface CtvBox {
  row_min: number;
  row_max: number;
  col_min: number;
  col_max: number;
  slice_min: number;
  slice_max: number;
}

export interface PatientInfo {
  patient_id: string;
  age_years: number;
  sex: number;
  histology: number;
  ct_stage: number;
  cn_stage: number;
  n_slices: number;
  ctv_box: CtvBox;
  baseline_volume_mm3: number;
  dose_max_gy: number;
}

export interface SliceRef {
  index: number;
  image_url: string;
  overlay_url: string;
}

export interface PredictResponse {
  patient_id: string;
  model_id: string;
  dose_gy: number;
  seed: number;
  volume_mm3: number;
  extrapolation: boolean;
  latency_ms: number;
  slices: SliceRef[];
}

export interface PredictRequest {
  patient_id: string;
  model_id: string;
  dose_gy: number;
  seed?: number;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export interface Api {
  baseUrl: string;
  listPatients(): Promise<PatientInfo[]>;
  listModels(): Promise<string[]>;
  predict(req: PredictRequest): Promise<PredictResponse>;
  baselineSliceUrl(patientId: string, index: number): string;
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = `${resp.status}`;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = `${resp.status}: ${body.detail}`;
    } catch {
      // non-JSON error body; keep the status code
    }
    throw new Error(`service error ${detail}`);
  }
  return (await resp.json()) as T;
}

export function createApi(baseUrl: string, fetchFn?: FetchLike): Api {
  const doFetch: FetchLike = fetchFn ?? ((input, init) => fetch(input, init));
  const root = baseUrl.replace(/\/$/, "");
  return {
    baseUrl: root,
    async listPatients() {
      const body = await asJson<{ patients: PatientInfo[] }>(await doFetch(`${root}/v1/patients`));
      return body.patients;
    },
    async listModels() {
      const body = await asJson<{ models: string[] }>(await doFetch(`${root}/v1/models`));
      return body.models;
    },
    async predict(req) {
      const resp = await doFetch(`${root}/v1/predict`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ seed: 0, ...req }),
      });
      return asJson<PredictResponse>(resp);
    },
    baselineSliceUrl(patientId, index) {
      return `${root}/v1/slices/baseline/${patientId}/${index}.png`;
    },
  };
}
