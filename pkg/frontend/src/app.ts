// DOM controller: wires the patient/model selectors, the dose slider, the
// slice viewer with CTV overlay toggle, the side-by-side compare panels, and
// the trajectory chart to the /v1 service. All numerics come from service
// responses; this file only routes them.

import { Api, PatientInfo, PredictResponse } from "./api.js";
import { buildChart, DEFAULT_SIZE } from "./chart.js";
import {
  createQueryGate,
  debounce,
  initialState,
  isExtrapolation,
  recordError,
  recordResponse,
  selectPatient,
  SessionState,
  sliderMax,
  snapDose,
  toggleModel,
  volumeAt,
} from "./state.js";

const MODEL_COLORS = ["#2a6fdb", "#d97706", "#059669", "#9333ea"];
const DEBOUNCE_MS = 180;

interface Panels {
  patientSelect: HTMLSelectElement;
  modelList: HTMLElement;
  doseSlider: HTMLInputElement;
  doseReadout: HTMLElement;
  extrapolationBadge: HTMLElement;
  sliceSlider: HTMLInputElement;
  overlayToggle: HTMLInputElement;
  compare: HTMLElement;
  chart: HTMLElement;
  banner: HTMLElement;
  pending: HTMLElement;
}

export class ExplorerApp {
  private state: SessionState = initialState();
  private patients: PatientInfo[] = [];
  private models: string[] = [];
  private gate = createQueryGate();
  private lastResponses: Record<string, PredictResponse> = {};
  private queryDebounced: (() => void) & { cancel: () => void };

  constructor(private api: Api, private el: Panels) {
    this.queryDebounced = debounce(() => void this.runQueries(), DEBOUNCE_MS);
  }

  async start(): Promise<void> {
    try {
      [this.patients, this.models] = await Promise.all([this.api.listPatients(), this.api.listModels()]);
    } catch (err) {
      this.state = recordError(this.state, String(err));
      this.render();
      return;
    }
    this.el.patientSelect.innerHTML = this.patients
      .map((p) => `<option value="${p.patient_id}">${p.patient_id} (cT${p.ct_stage})</option>`)
      .join("");
    this.el.modelList.innerHTML = this.models
      .map(
        (m, i) =>
          `<label style="color:${MODEL_COLORS[i % MODEL_COLORS.length]}">` +
          `<input type="checkbox" data-model="${m}"> ${m}</label>`,
      )
      .join(" ");
    this.el.modelList.querySelectorAll("input[data-model]").forEach((box) =>
      box.addEventListener("change", () => {
        this.state = toggleModel(this.state, (box as HTMLInputElement).dataset.model!);
        this.syncModelBoxes();
        this.queryDebounced();
        this.render();
      }),
    );
    this.el.patientSelect.addEventListener("change", () => {
      this.state = selectPatient(this.state, this.el.patientSelect.value);
      this.lastResponses = {};
      this.configureSliders();
      this.queryDebounced();
      this.render();
    });
    this.el.doseSlider.addEventListener("input", () => {
      const patient = this.currentPatient();
      if (!patient) return;
      this.state = { ...this.state, doseGy: snapDose(Number(this.el.doseSlider.value), patient.dose_max_gy) };
      this.queryDebounced();
      this.render();
    });
    this.el.sliceSlider.addEventListener("input", () => {
      this.state = { ...this.state, sliceIndex: Number(this.el.sliceSlider.value) };
      this.render();
    });
    this.el.overlayToggle.addEventListener("change", () => {
      this.state = { ...this.state, overlayOn: this.el.overlayToggle.checked };
      this.render();
    });
    if (this.patients.length) {
      this.state = selectPatient(this.state, this.patients[0].patient_id);
      this.el.patientSelect.value = this.patients[0].patient_id;
      this.configureSliders();
    }
    if (this.models.length) {
      this.state = toggleModel(this.state, this.models[0]);
      this.syncModelBoxes();
      this.queryDebounced();
    }
    this.render();
  }

  currentPatient(): PatientInfo | undefined {
    return this.patients.find((p) => p.patient_id === this.state.selectedPatient);
  }

  private syncModelBoxes(): void {
    this.el.modelList.querySelectorAll("input[data-model]").forEach((node) => {
      const box = node as HTMLInputElement;
      box.checked = this.state.selectedModels.includes(box.dataset.model!);
    });
  }

  private configureSliders(): void {
    const patient = this.currentPatient();
    if (!patient) return;
    this.el.doseSlider.min = "0";
    this.el.doseSlider.max = String(sliderMax(patient.dose_max_gy));
    this.el.doseSlider.step = "0.5";
    this.el.doseSlider.value = "0";
    this.el.sliceSlider.min = "0";
    this.el.sliceSlider.max = String(patient.n_slices - 1);
    this.el.sliceSlider.value = String(Math.floor((patient.ctv_box.slice_min + patient.ctv_box.slice_max) / 2));
    this.state = { ...this.state, doseGy: 0, sliceIndex: Number(this.el.sliceSlider.value) };
  }

  /** One logical query per control change: every selected model is asked at
   * the current dose; stale responses are dropped by sequence number. */
  async runQueries(): Promise<void> {
    const patient = this.currentPatient();
    if (!patient || this.state.selectedModels.length === 0) return;
    const seq = this.gate.next();
    const dose = this.state.doseGy;
    this.state = { ...this.state, pending: this.state.pending + 1 };
    this.render();
    try {
      const responses = await Promise.all(
        this.state.selectedModels.map((modelId) =>
          this.api.predict({ patient_id: patient.patient_id, model_id: modelId, dose_gy: dose }),
        ),
      );
      if (!this.gate.isCurrent(seq)) return; // superseded while in flight
      for (const resp of responses) {
        this.state = recordResponse(this.state, resp);
        this.lastResponses[resp.model_id] = resp;
      }
    } catch (err) {
      if (this.gate.isCurrent(seq)) this.state = recordError(this.state, String(err));
    } finally {
      this.state = { ...this.state, pending: Math.max(0, this.state.pending - 1) };
      this.render();
    }
  }

  render(): void {
    const patient = this.currentPatient();
    this.el.doseReadout.textContent = `${this.state.doseGy.toFixed(1)} Gy`;
    this.el.pending.style.visibility = this.state.pending > 0 ? "visible" : "hidden";
    this.el.banner.textContent = this.state.lastError ?? "";
    this.el.banner.style.display = this.state.lastError ? "block" : "none";
    const extrapolating = patient ? isExtrapolation(this.state.doseGy, patient.dose_max_gy) : false;
    this.el.extrapolationBadge.style.display = extrapolating ? "inline" : "none";
    this.renderCompare();
    this.renderChart();
  }

  private renderCompare(): void {
    const patient = this.currentPatient();
    if (!patient) {
      this.el.compare.innerHTML = "";
      return;
    }
    const k = this.state.sliceIndex;
    const overlay = this.state.overlayOn;
    const panels = [
      `<figure class="panel">
         <img class="slice" src="${this.api.baselineSliceUrl(patient.patient_id, k)}" alt="baseline slice ${k}">
         <figcaption>baseline &middot; slice ${k} &middot; ${patient.baseline_volume_mm3.toFixed(0)} mm&sup3;</figcaption>
       </figure>`,
    ];
    for (const modelId of this.state.selectedModels) {
      const resp = this.lastResponses[modelId];
      if (!resp || resp.dose_gy !== this.state.doseGy || resp.patient_id !== patient.patient_id) {
        panels.push(`<figure class="panel pending-panel"><figcaption>${modelId}: querying...</figcaption></figure>`);
        continue;
      }
      const slice = resp.slices[Math.min(k, resp.slices.length - 1)];
      const overlayImg = overlay
        ? `<img class="overlay" src="${this.api.baseUrl}${slice.overlay_url}" alt="CTV contour">`
        : "";
      const volume = volumeAt(this.state, modelId, resp.dose_gy);
      panels.push(
        `<figure class="panel">
           <div class="stack">
             <img class="slice" src="${this.api.baseUrl}${slice.image_url}" alt="${modelId} prediction">
             ${overlayImg}
           </div>
           <figcaption>${modelId} @ ${resp.dose_gy.toFixed(1)} Gy &middot; ${
             volume === null ? "?" : volume.toFixed(0)
           } mm&sup3;${resp.extrapolation ? " &middot; extrapolated" : ""}</figcaption>
         </figure>`,
      );
    }
    this.el.compare.innerHTML = panels.join("\n");
  }

  private renderChart(): void {
    const patient = this.currentPatient();
    if (!patient) {
      this.el.chart.innerHTML = "";
      return;
    }
    const geometry = buildChart(this.state.points, patient.dose_max_gy, sliderMax(patient.dose_max_gy));
    const s = DEFAULT_SIZE;
    const zone = geometry.extrapolationZone
      ? `<rect x="${geometry.extrapolationZone.x0}" y="${s.marginTop}" width="${
          geometry.extrapolationZone.x1 - geometry.extrapolationZone.x0
        }" height="${s.height - s.marginTop - s.marginBottom}" fill="#f3e8e8"></rect>`
      : "";
    const lines = geometry.lines
      .map((line, i) => {
        const color = MODEL_COLORS[this.models.indexOf(line.modelId) % MODEL_COLORS.length] ?? "#444";
        const dots = line.points
          .map(
            (p) =>
              `<circle cx="${p.x.toFixed(1)}" cy="${p.y.toFixed(1)}" r="3" fill="${color}">` +
              `<title>${line.modelId}: ${p.volumeMm3.toFixed(0)} mm3 @ ${p.doseGy} Gy</title></circle>`,
          )
          .join("");
        return `<path d="${line.path}" fill="none" stroke="${color}" stroke-width="1.6"></path>${dots}`;
      })
      .join("");
    const xAxis = geometry.xTicks
      .map((t) => `<text x="${t.x}" y="${s.height - 8}" class="tick">${t.label}</text>`)
      .join("");
    const yAxis = geometry.yTicks
      .map((t) => `<text x="4" y="${t.y + 3}" class="tick">${t.label}</text>`)
      .join("");
    this.el.chart.innerHTML = `<svg viewBox="0 0 ${s.width} ${s.height}" width="${s.width}" height="${s.height}">
      ${zone}${lines}${xAxis}${yAxis}
      <text x="${s.width / 2}" y="${s.height - 0}" class="axis-label" dy="-0">dose (Gy)</text>
    </svg>`;
  }
}

export function mount(api: Api, root: Document): ExplorerApp {
  const byId = (id: string) => {
    const node = root.getElementById(id);
    if (!node) throw new Error(`missing element #${id}`);
    return node;
  };
  const app = new ExplorerApp(api, {
    patientSelect: byId("patient-select") as HTMLSelectElement,
    modelList: byId("model-list"),
    doseSlider: byId("dose-slider") as HTMLInputElement,
    doseReadout: byId("dose-readout"),
    extrapolationBadge: byId("extrapolation-badge"),
    sliceSlider: byId("slice-slider") as HTMLInputElement,
    overlayToggle: byId("overlay-toggle") as HTMLInputElement,
    compare: byId("compare"),
    chart: byId("chart"),
    banner: byId("error-banner"),
    pending: byId("pending"),
  });
  void app.start();
  return app;
}
