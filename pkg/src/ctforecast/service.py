"""Local inference server for interactive what-if dose queries.

Versioned HTTP surface under /v1 over immutable loaded checkpoints:

  GET  /v1/patients                     test-split patients with CTV box metadata
  GET  /v1/models                       loaded model ids
  POST /v1/predict                      dose-conditioned prediction + slice refs
  GET  /v1/trajectory                   multi-dose trajectory (query params)
  GET  /v1/slices/baseline/{pid}/{k}.png
  GET  /v1/slices/pred/{key}/{k}.png    rendered grayscale slices
  GET  /v1/overlays/{pid}/{k}.png       CTV contour as a transparent layer

Predictions are memoized per (patient, model, dose, seed): repeated identical
requests return identical bytes, with latency_ms reporting the generation
cost of the cached entry.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from pydantic import BaseModel
from scipy.ndimage import binary_erosion

from .cohort import CohortManifest
from .evaluation import LocalROI, tumor_volume_otsu
from .inference import DoseQuery, dose_response_trajectory
from .pairing import SplitAssignment
from .preprocess import encode_clinical
from .training import ForecasterBase

API_PREFIX = "/v1"


class PredictRequest(BaseModel):
    patient_id: str
    model_id: str
    dose_gy: float
    seed: int = 0


@dataclass
class ServiceState:
    manifest: CohortManifest
    split: SplitAssignment | None
    models: dict[str, ForecasterBase]
    cache: dict = field(default_factory=dict)

    def visible_patients(self) -> list[str]:
        if self.split is None:
            return [p.patient_id for p in self.manifest.patients]
        return self.split.patients("test")


def _slice_png(data2d: np.ndarray) -> bytes:
    from PIL import Image

    img = (np.clip(data2d, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _overlay_png(mask2d: np.ndarray) -> bytes:
    from PIL import Image

    mask = mask2d > 0.5
    edge = mask & ~binary_erosion(mask)
    rgba = np.zeros((*mask.shape, 4), dtype=np.uint8)
    rgba[edge] = (255, 40, 40, 255)
    buf = io.BytesIO()
    Image.fromarray(rgba, mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    manifest: CohortManifest,
    models: dict[str, ForecasterBase],
    split: SplitAssignment | None = None,
) -> FastAPI:
    state = ServiceState(manifest=manifest, split=split, models=models)
    app = FastAPI(title="dose-response explorer service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.service = state

    def _patient(patient_id: str):
        if patient_id not in state.visible_patients():
            raise HTTPException(status_code=404, detail=f"unknown patient {patient_id!r}")
        return manifest.patient(patient_id)

    def _model(model_id: str) -> ForecasterBase:
        if model_id not in state.models:
            raise HTTPException(status_code=404, detail=f"unknown model {model_id!r}")
        return state.models[model_id]

    def _predicted(patient_id: str, model_id: str, dose_gy: float, seed: int):
        """Memoized (volume, otsu mm3, extrapolation flag, generation ms)."""
        key = (patient_id, model_id, float(dose_gy), int(seed))
        if key not in state.cache:
            forecaster = _model(model_id)
            patient = _patient(patient_id)
            baseline = manifest.load_volume(patient.baseline().volume_ref)
            mask = manifest.load_mask(patient.ctv_mask_ref)
            clinical = encode_clinical(patient, forecaster.stats_)
            t0 = time.perf_counter()
            pred = forecaster.predict_volume(baseline, clinical, dose_gy, seed=seed)
            elapsed_ms = (time.perf_counter() - t0) * 1000.0
            roi = LocalROI.from_mask(mask)
            state.cache[key] = (
                pred,
                tumor_volume_otsu(pred, roi),
                dose_gy > forecaster.stats_.dose_max,
                elapsed_ms,
            )
        return state.cache[key]

    @app.get("/")
    def root():
        return {
            "service": "dose-response explorer",
            "api": API_PREFIX,
            "models": sorted(state.models),
            "patients": len(state.visible_patients()),
        }

    @app.get(f"{API_PREFIX}/models")
    def list_models():
        return {"models": sorted(state.models)}

    @app.get(f"{API_PREFIX}/patients")
    def list_patients():
        out = []
        for pid in state.visible_patients():
            patient = manifest.patient(pid)
            mask = manifest.load_mask(patient.ctv_mask_ref)
            roi = LocalROI.from_mask(mask)
            baseline = manifest.load_volume(patient.baseline().volume_ref)
            out.append(
                {
                    "patient_id": pid,
                    "age_years": patient.age_years,
                    "sex": patient.sex,
                    "histology": patient.histology,
                    "ct_stage": patient.ct_stage,
                    "cn_stage": patient.cn_stage,
                    "n_slices": baseline.shape[2],
                    "ctv_box": {
                        "row_min": roi.row_min,
                        "row_max": roi.row_max,
                        "col_min": roi.col_min,
                        "col_max": roi.col_max,
                        "slice_min": roi.slice_min,
                        "slice_max": roi.slice_max,
                    },
                    "baseline_volume_mm3": tumor_volume_otsu(baseline, roi),
                    "dose_max_gy": manifest.cohort_stats.dose_max,
                }
            )
        return {"patients": out}

    @app.post(f"{API_PREFIX}/predict")
    def predict(req: PredictRequest):
        if req.dose_gy < 0:
            raise HTTPException(status_code=422, detail="dose must be >= 0")
        pred, volume_mm3, extrapolation, elapsed_ms = _predicted(
            req.patient_id, req.model_id, req.dose_gy, req.seed
        )
        key = f"{req.patient_id}~{req.model_id}~{req.dose_gy:g}~{req.seed}"
        slices = [
            {
                "index": k,
                "image_url": f"{API_PREFIX}/slices/pred/{key}/{k}.png",
                "overlay_url": f"{API_PREFIX}/overlays/{req.patient_id}/{k}.png",
            }
            for k in range(pred.shape[2])
        ]
        return {
            "patient_id": req.patient_id,
            "model_id": req.model_id,
            "dose_gy": req.dose_gy,
            "seed": req.seed,
            "volume_mm3": volume_mm3,
            "extrapolation": extrapolation,
            "latency_ms": elapsed_ms,
            "slices": slices,
        }

    @app.get(f"{API_PREFIX}/trajectory")
    def trajectory(patient_id: str, model_id: str, doses: str, seed: int = 0):
        try:
            dose_list = [float(tok) for tok in doses.split(",") if tok.strip()]
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=f"unparseable doses {doses!r}: {exc}")
        if not dose_list:
            raise HTTPException(status_code=422, detail="at least one dose is required")
        forecaster = _model(model_id)
        _patient(patient_id)
        try:
            query = DoseQuery(patient_id=patient_id, dose_increments_gy=dose_list, seed=seed)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        traj = dose_response_trajectory(forecaster, manifest, query)
        return {
            "patient_id": patient_id,
            "model_id": model_id,
            "seed": seed,
            "entries": [
                {
                    "dose_gy": e.dose_gy,
                    "volume_mm3": e.otsu_volume_mm3,
                    "extrapolation": e.extrapolation,
                    "seed": e.seed,
                }
                for e in traj.entries
            ],
            "warnings": traj.metadata["warnings"],
        }

    @app.get(API_PREFIX + "/slices/baseline/{patient_id}/{index}.png")
    def baseline_slice(patient_id: str, index: int):
        patient = _patient(patient_id)
        vol = manifest.load_volume(patient.baseline().volume_ref)
        if not (0 <= index < vol.shape[2]):
            raise HTTPException(status_code=404, detail=f"slice {index} out of range")
        return Response(content=_slice_png(vol.data[:, :, index]), media_type="image/png")

    @app.get(API_PREFIX + "/slices/pred/{key}/{index}.png")
    def predicted_slice(key: str, index: int):
        try:
            patient_id, model_id, dose, seed = key.split("~")
        except ValueError:
            raise HTTPException(status_code=404, detail=f"malformed prediction key {key!r}")
        pred, _, _, _ = _predicted(patient_id, model_id, float(dose), int(seed))
        if not (0 <= index < pred.shape[2]):
            raise HTTPException(status_code=404, detail=f"slice {index} out of range")
        return Response(content=_slice_png(pred.data[:, :, index]), media_type="image/png")

    @app.get(API_PREFIX + "/overlays/{patient_id}/{index}.png")
    def overlay(patient_id: str, index: int):
        patient = _patient(patient_id)
        mask = manifest.load_mask(patient.ctv_mask_ref)
        if not (0 <= index < mask.shape[2]):
            raise HTTPException(status_code=404, detail=f"slice {index} out of range")
        return Response(content=_overlay_png(mask.data[:, :, index]), media_type="image/png")

    return app
