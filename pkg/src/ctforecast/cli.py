"""Pipeline entry point.

Stages chain through directories:

  synth -> preprocess -> pairs -> train -> infer -> eval / plot / profile / serve

Each subcommand accepts ``--config FILE`` (JSON, one section per stage) and
``--set key=value`` dotted overrides; explicit flags win over both. Every
stage prints a single machine-readable JSON summary to stdout and exits 0 on
success, 2 on configuration errors, 3 on missing upstream artifacts, and 4 on
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import cohort as cohort_mod
from .errors import CohortValidationError, ConfigError, MissingArtifactError, NumericalFailure
from .evaluation import LocalROI, VolumetricsReport, emit_report, make_entry, render_slice_grid, tumor_volume_otsu
from .inference import DoseQuery, dose_response_trajectory, ensure_stats_match, entry_seed
from .losses import LossConfig
from .pairing import SplitAssignment, enumerate_transitions, export_tuples, load_tuples, split_patients
from .preprocess import NormalizationStats, preprocess_cohort
from .profiling import MacsReport, emit_cost_report, profile_cycle_gan, profile_diffusion, profile_paired_gan
from .training import TrainConfig, load_forecaster, train_model

DEFAULT_DOSES = "10,20,30,40,50,60"


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _stage_config(args, stage: str, defaults: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"unreadable config file {args.config}: {exc}") from exc
        section = doc.get(stage, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {stage!r} must be an object")
        unknown = set(section) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown keys in config section {stage!r}: {sorted(unknown)}")
        cfg.update(section)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.split(".")[-1] if key.startswith(f"{stage}.") else key
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r} for stage {stage!r}")
        cfg[key] = _coerce(value)
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _summary(stage: str, **outputs) -> None:
    print(json.dumps({"stage": stage, "status": "ok", **outputs}, sort_keys=True))


def _require(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"{path} not found; run the {producer!r} stage first")
    return path


def _load_prep_manifest(cohort_dir: str):
    manifest = cohort_mod.load_cohort(_require(os.path.join(cohort_dir, "manifest.json"), "preprocess"))
    if manifest.preprocessing is None:
        raise MissingArtifactError(
            f"{cohort_dir} holds a raw cohort; run the 'preprocess' stage and point at its output"
        )
    return manifest


def _load_pairs(pairs_dir: str):
    split_path = _require(os.path.join(pairs_dir, "split.json"), "pairs")
    stats_path = _require(os.path.join(pairs_dir, "stats.json"), "pairs")
    with open(split_path) as fh:
        split = SplitAssignment(assignment=json.load(fh))
    with open(stats_path) as fh:
        stats = NormalizationStats.from_dict(json.load(fh))
    return split, stats


# ---------------------------------------------------------------------------
# stages


def cmd_synth(args) -> None:
    cfg = _stage_config(
        args,
        "synth",
        {
            "out": None,
            "patients": 12,
            "seed": 0,
            "grid": [64, 64, 12],
            "max_dose_gy": 68.4,
            "followups_mean": 2.38,
            "followups_sd": 1.31,
            "alpha_range": [0.7, 1.4],
            "vessel_fraction": 0.015,
            "noise_sd_hu": 35.0,
        },
    )
    if not cfg["out"]:
        raise ConfigError("synth requires --out")
    config = cohort_mod.PhantomConfig(
        n_patients=int(cfg["patients"]),
        grid=tuple(cfg["grid"]),
        seed=int(cfg["seed"]),
        max_dose_gy=float(cfg["max_dose_gy"]),
        followups_mean=float(cfg["followups_mean"]),
        followups_sd=float(cfg["followups_sd"]),
        alpha_range=tuple(cfg["alpha_range"]),
        vessel_fraction=float(cfg["vessel_fraction"]),
        noise_sd_hu=float(cfg["noise_sd_hu"]),
    )
    manifest = cohort_mod.generate_phantom_cohort(config, cfg["out"], workers=args.workers)
    _summary(
        "synth",
        out=cfg["out"],
        patients=len(manifest.patients),
        scans=sum(len(p.scans) for p in manifest.patients),
        dose_max=manifest.cohort_stats.dose_max,
    )


def cmd_preprocess(args) -> None:
    cfg = _stage_config(args, "preprocess", {"cohort": None, "out": None, "margin": 8, "spacing": [1.0, 1.0, 3.0]})
    if not cfg["cohort"] or not cfg["out"]:
        raise ConfigError("preprocess requires --cohort and --out")
    manifest = cohort_mod.load_cohort(_require(os.path.join(cfg["cohort"], "manifest.json"), "synth"))
    out = preprocess_cohort(manifest, cfg["out"], target_spacing=tuple(cfg["spacing"]), margin=int(cfg["margin"]))
    _summary(
        "preprocess",
        out=cfg["out"],
        in_plane_box=out.preprocessing["in_plane_box"],
        patients=len(out.patients),
    )


def cmd_pairs(args) -> None:
    cfg = _stage_config(args, "pairs", {"cohort": None, "out": None, "seed": 0, "identity": True, "n_histology": None})
    if not cfg["cohort"] or not cfg["out"]:
        raise ConfigError("pairs requires --cohort and --out")
    manifest = _load_prep_manifest(cfg["cohort"])
    split = split_patients(manifest, seed=int(cfg["seed"]))
    n_hist = int(cfg["n_histology"]) if cfg["n_histology"] else manifest.cohort_stats.n_histology
    train_records = [manifest.patient(pid) for pid in split.patients("train")]
    stats = NormalizationStats.from_records(train_records, n_histology=n_hist)
    os.makedirs(cfg["out"], exist_ok=True)
    counts = {}
    for subset in ("train", "val", "test"):
        tuples = enumerate_transitions(manifest, split, subset, include_identity=bool(cfg["identity"]))
        export_tuples(tuples, os.path.join(cfg["out"], f"tuples_{subset}.jsonl"))
        counts[subset] = len(tuples)
    with open(os.path.join(cfg["out"], "split.json"), "w") as fh:
        json.dump(split.assignment, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(cfg["out"], "stats.json"), "w") as fh:
        json.dump(stats.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _summary("pairs", out=cfg["out"], tuples=counts, split={s: len(split.patients(s)) for s in ("train", "val", "test")})


def cmd_train(args) -> None:
    cfg = _stage_config(
        args,
        "train",
        {
            "cohort": None,
            "pairs": None,
            "out": None,
            "family": "diffusion_25d",
            "epochs": 30,
            "batch_size": 16,
            "lr": None,
            "lambda_tumor": 1.0,
            "adversarial_weight": 1.0,
            "l1_weight": 100.0,
            "cycle_weight": 10.0,
            "base_channels": 32,
            "n_res_blocks": 4,
            "embed_dim": 64,
            "context_channels": 16,
            "diffusion_steps": 250,
            "seed": 0,
            "device": "cpu",
        },
    )
    for key in ("cohort", "pairs", "out"):
        if not cfg[key]:
            raise ConfigError(f"train requires --{key}")
    manifest = _load_prep_manifest(cfg["cohort"])
    split, stats = _load_pairs(cfg["pairs"])
    train_tuples = load_tuples(_require(os.path.join(cfg["pairs"], "tuples_train.jsonl"), "pairs"))
    val_tuples = load_tuples(_require(os.path.join(cfg["pairs"], "tuples_val.jsonl"), "pairs"))
    config = TrainConfig(
        family=cfg["family"],
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr=None if cfg["lr"] is None else float(cfg["lr"]),
        loss=LossConfig(
            lambda_tumor=float(cfg["lambda_tumor"]),
            adversarial_weight=float(cfg["adversarial_weight"]),
            l1_weight=float(cfg["l1_weight"]),
            cycle_weight=float(cfg["cycle_weight"]),
        ),
        seed=int(cfg["seed"]),
        device=cfg["device"],
        base_channels=int(cfg["base_channels"]),
        n_res_blocks=int(cfg["n_res_blocks"]),
        embed_dim=int(cfg["embed_dim"]),
        context_channels=int(cfg["context_channels"]),
        diffusion_steps=int(cfg["diffusion_steps"]),
    )
    os.makedirs(cfg["out"], exist_ok=True)
    ckpt = os.path.join(cfg["out"], f"{config.family}.pt")
    _, report = train_model(
        config,
        train_tuples,
        manifest,
        stats,
        val_tuples=val_tuples,
        allowed_patients=set(split.patients("train")),
        checkpoint_path=ckpt,
    )
    report.save(os.path.join(cfg["out"], f"{config.family}.report.json"))
    _summary(
        "train",
        family=config.family,
        checkpoint=ckpt,
        n_samples=report.n_samples,
        val_tumor_l1=report.val_tumor_l1,
        wall_clock_s=report.wall_clock_s,
    )


def cmd_infer(args) -> None:
    cfg = _stage_config(
        args,
        "infer",
        {"cohort": None, "pairs": None, "model": None, "out": None, "doses": DEFAULT_DOSES, "patients": None, "seed": 0},
    )
    for key in ("cohort", "pairs", "model", "out"):
        if not cfg[key]:
            raise ConfigError(f"infer requires --{key}")
    manifest = _load_prep_manifest(cfg["cohort"])
    split, stats = _load_pairs(cfg["pairs"])
    forecaster = load_forecaster(_require(cfg["model"], "train"))
    ensure_stats_match(forecaster.stats_, stats)
    doses = [float(tok) for tok in str(cfg["doses"]).split(",") if tok.strip()]
    patients = cfg["patients"].split(",") if cfg["patients"] else split.patients("test")
    os.makedirs(cfg["out"], exist_ok=True)
    written = []
    for pid in patients:
        query = DoseQuery(patient_id=pid, dose_increments_gy=doses, seed=int(cfg["seed"]))
        traj = dose_response_trajectory(forecaster, manifest, query, out_dir=os.path.join(cfg["out"], "volumes"))
        path = os.path.join(cfg["out"], f"{pid}~{forecaster.family}.json")
        traj.save(path)
        written.append(path)
    _summary("infer", model=forecaster.family, out=cfg["out"], trajectories=written, doses=doses)


def _eval_entries(manifest, split, forecaster, seed: int):
    entries = []
    for pid in split.patients("test"):
        patient = manifest.patient(pid)
        baseline = manifest.load_volume(patient.baseline().volume_ref)
        mask = manifest.load_mask(patient.ctv_mask_ref)
        roi = LocalROI.from_mask(mask)
        from .preprocess import encode_clinical

        clinical = encode_clinical(patient, forecaster.stats_)
        for scan in patient.followups():
            delta = scan.cumulative_dose_gy  # baseline-anchored increment
            real = manifest.load_volume(scan.volume_ref)
            pred = forecaster.predict_volume(baseline, clinical, delta, seed=entry_seed(seed, delta))
            v_real = tumor_volume_otsu(real, roi)
            v_pred = tumor_volume_otsu(pred, roi)
            entries.append(make_entry(forecaster.family, pid, delta, v_pred, v_real))
    return entries


def cmd_eval(args) -> None:
    cfg = _stage_config(args, "eval", {"cohort": None, "pairs": None, "models": None, "out": None, "seed": 0})
    for key in ("cohort", "pairs", "models", "out"):
        if not cfg[key]:
            raise ConfigError(f"eval requires --{key}")
    manifest = _load_prep_manifest(cfg["cohort"])
    split, stats = _load_pairs(cfg["pairs"])
    entries = []
    for path in str(cfg["models"]).split(","):
        forecaster = load_forecaster(_require(path.strip(), "train"))
        ensure_stats_match(forecaster.stats_, stats)
        entries.extend(_eval_entries(manifest, split, forecaster, int(cfg["seed"])))
    report = VolumetricsReport(entries=entries)
    paths = emit_report(report, cfg["out"])
    def mean_or_none(model, **kw):
        try:
            return report.mean_delta_v(model, **kw)
        except ValueError:
            return None

    summary = {}
    for model in report.models():
        defined = [e for e in report.for_model(model) if e.delta_v_percent is not None]
        summary[model] = {
            "mean_delta_v": mean_or_none(model),
            "mean_delta_v_le_40gy": mean_or_none(model, max_delta_gy=40.0),
            "acceptability_rate": float(np.mean([e.acceptable for e in defined])) if defined else None,
            "n": len(defined),
        }
    with open(os.path.join(cfg["out"], "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _summary("eval", out=cfg["out"], files=paths, summary=summary)


def cmd_profile(args) -> None:
    cfg = _stage_config(args, "profile", {"cohort": None, "models": None, "out": None, "eval": None})
    for key in ("cohort", "models", "out"):
        if not cfg[key]:
            raise ConfigError(f"profile requires --{key}")
    manifest = _load_prep_manifest(cfg["cohort"])
    box = manifest.preprocessing["in_plane_box"]
    slice_hw = (box[1] - box[0] + 1, box[3] - box[2] + 1)
    reports: list[MacsReport] = []
    for path in str(cfg["models"]).split(","):
        forecaster = load_forecaster(_require(path.strip(), "train"))
        cond_dim = forecaster.spec_.cond_dim
        if forecaster.family == "paired_gan":
            reports.append(profile_paired_gan(forecaster.generator_, forecaster.discriminator_, slice_hw, cond_dim))
        elif forecaster.family == "cycle_gan":
            reports.append(
                profile_cycle_gan(
                    forecaster.g_forward_, forecaster.g_backward_, forecaster.d_input_, forecaster.d_target_,
                    slice_hw, cond_dim - 1,
                )
            )
        else:
            reports.append(profile_diffusion(forecaster.model_, slice_hw, cond_dim))
    delta_v = None
    if cfg["eval"]:
        with open(_require(os.path.join(cfg["eval"], "summary.json"), "eval")) as fh:
            delta_v = {
                model: doc["mean_delta_v"]
                for model, doc in json.load(fh).items()
                if doc["mean_delta_v"] is not None
            }
    paths = emit_cost_report(reports, delta_v, cfg["out"])
    _summary(
        "profile",
        out=cfg["out"],
        files=paths,
        models=[
            {
                "model": r.model_id,
                "params": r.params,
                "train_gmacs": r.train_gmacs_per_sample,
                "infer_gmacs": r.infer_gmacs_per_output,
                "reduction_percent": r.reduction_percent,
            }
            for r in reports
        ],
    )


def cmd_plot(args) -> None:
    cfg = _stage_config(
        args, "plot", {"cohort": None, "pairs": None, "models": None, "out": None, "max_patients": 2, "seed": 0}
    )
    for key in ("cohort", "pairs", "models", "out"):
        if not cfg[key]:
            raise ConfigError(f"plot requires --{key}")
    manifest = _load_prep_manifest(cfg["cohort"])
    split, stats = _load_pairs(cfg["pairs"])
    forecasters = [load_forecaster(_require(p.strip(), "train")) for p in str(cfg["models"]).split(",")]
    os.makedirs(cfg["out"], exist_ok=True)
    from .preprocess import encode_clinical

    written = []
    for pid in split.patients("test")[: int(cfg["max_patients"])]:
        patient = manifest.patient(pid)
        baseline = manifest.load_volume(patient.baseline().volume_ref)
        mask = manifest.load_mask(patient.ctv_mask_ref)
        roi = LocalROI.from_mask(mask)
        k = (roi.slice_min + roi.slice_max) // 2
        columns = []
        mask_slices = {}
        for scan in patient.followups():
            label = f"{scan.cumulative_dose_gy:g} Gy"
            per_row = {"real": manifest.load_volume(scan.volume_ref).data[:, :, k]}
            for forecaster in forecasters:
                clinical = encode_clinical(patient, forecaster.stats_)
                pred = forecaster.predict_volume(
                    baseline, clinical, scan.cumulative_dose_gy,
                    seed=entry_seed(int(cfg["seed"]), scan.cumulative_dose_gy),
                )
                per_row[forecaster.family] = pred.data[:, :, k]
            columns.append((label, per_row))
            mask_slices[label] = mask.data[:, :, k]
        out_path = os.path.join(cfg["out"], f"qualitative_{pid}.png")
        render_slice_grid(columns, ["real"] + [f.family for f in forecasters], mask_slices, out_path)
        written.append(out_path)
    _summary("plot", out=cfg["out"], files=written)


def cmd_serve(args) -> None:
    cfg = _stage_config(
        args, "serve", {"cohort": None, "pairs": None, "models": None, "host": "127.0.0.1", "port": 8099}
    )
    for key in ("cohort", "pairs", "models"):
        if not cfg[key]:
            raise ConfigError(f"serve requires --{key}")
    manifest = _load_prep_manifest(cfg["cohort"])
    split, stats = _load_pairs(cfg["pairs"])
    models = {}
    for path in str(cfg["models"]).split(","):
        forecaster = load_forecaster(_require(path.strip(), "train"))
        ensure_stats_match(forecaster.stats_, stats)
        models[forecaster.family] = forecaster
    from .service import create_app

    app = create_app(manifest, models, split)
    _summary("serve", host=cfg["host"], port=int(cfg["port"]), models=sorted(models))
    import uvicorn

    uvicorn.run(app, host=cfg["host"], port=int(cfg["port"]), log_level="warning")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctforecast", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file with one section per stage")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--workers", type=int, default=1, help="intra-stage parallelism where supported")

    p = sub.add_parser("synth", help="generate a synthetic phantom cohort")
    common(p)
    p.add_argument("--out", help="output cohort directory")
    p.add_argument("--patients", type=int, help="number of patients")
    p.add_argument("--seed", type=int, help="generation seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize, resample, and crop a cohort")
    common(p)
    p.add_argument("--cohort", help="raw cohort directory (synth output)")
    p.add_argument("--out", help="preprocessed cohort directory")
    p.add_argument("--margin", type=int, help="in-plane crop margin in voxels")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pairs", help="split patients and enumerate training tuples")
    common(p)
    p.add_argument("--cohort", help="preprocessed cohort directory")
    p.add_argument("--out", help="pairs directory")
    p.add_argument("--seed", type=int, help="split seed")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", help="train one model family")
    common(p)
    p.add_argument("--cohort", help="preprocessed cohort directory")
    p.add_argument("--pairs", help="pairs directory")
    p.add_argument("--out", help="model output directory")
    p.add_argument("--family", choices=("paired_gan", "cycle_gan", "diffusion_25d"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--device")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate dose-response trajectories")
    common(p)
    p.add_argument("--cohort", help="preprocessed cohort directory")
    p.add_argument("--pairs", help="pairs directory")
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--out", help="trajectory output directory")
    p.add_argument("--doses", help="comma-separated dose increments in Gy")
    p.add_argument("--patients", help="comma-separated patient ids (default: test split)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="volumetric evaluation against real follow-ups")
    common(p)
    p.add_argument("--cohort", help="preprocessed cohort directory")
    p.add_argument("--pairs", help="pairs directory")
    p.add_argument("--models", help="comma-separated checkpoint paths")
    p.add_argument("--out", help="report output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="analytic MAC/parameter accounting")
    common(p)
    p.add_argument("--cohort", help="preprocessed cohort directory")
    p.add_argument("--models", help="comma-separated checkpoint paths")
    p.add_argument("--out", help="report output directory")
    p.add_argument("--eval", help="eval output directory (adds |dV| to the bubble chart)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plot", help="qualitative slice grids with CTV overlay")
    common(p)
    p.add_argument("--cohort", help="preprocessed cohort directory")
    p.add_argument("--pairs", help="pairs directory")
    p.add_argument("--models", help="comma-separated checkpoint paths")
    p.add_argument("--out", help="output directory")
    p.add_argument("--max-patients", dest="max_patients", type=int)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("serve", help="run the local what-if inference service")
    common(p)
    p.add_argument("--cohort", help="preprocessed cohort directory")
    p.add_argument("--pairs", help="pairs directory")
    p.add_argument("--models", help="comma-separated checkpoint paths")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
        return 0
    except (ConfigError, CohortValidationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
