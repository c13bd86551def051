"""Training loops for the three conditional generators, wrapped as
sklearn-style estimators (constructor params are hyperparameters; ``fit``
trains; ``predict_volume`` produces a dose-conditioned follow-up volume).

Checkpoints bundle the parameter blobs with the generator spec, noise
schedule, frozen normalization statistics, and loss configuration, so a
loaded forecaster is self-contained.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch.utils.data import DataLoader, Dataset

from .cohort import CohortManifest
from .errors import NumericalFailure
from .losses import (
    LossConfig,
    cycle_term,
    discriminator_adversarial,
    generator_adversarial,
    l1_mean,
    noise_l1,
    tumor_l1,
)
from .models import (
    GeneratorSpec,
    NoiseSchedule,
    build_cycle_pair,
    build_diffusion_model,
    build_paired_generator,
    build_patchgan_discriminator,
    cycle_conditioning,
    q_sample,
    sample_residual,
)
from .pairing import TrainingTuple, conditioning_for_tuple, triplet_indices
from .preprocess import NormalizationStats
from .volume import Volume

CHECKPOINT_VERSION = 1
FAMILIES = ("paired_gan", "cycle_gan", "diffusion_25d")


@dataclass
class TrainConfig:
    family: str = "diffusion_25d"
    epochs: int = 30
    batch_size: int = 16
    lr: float | None = None  # family default when None: 2e-4 GANs, 1e-4 diffusion
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    device: str = "cpu"
    base_channels: int = 32
    n_res_blocks: int = 4
    embed_dim: int = 64
    context_channels: int = 16
    diffusion_steps: int = 250
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    val_max_volumes: int = 8

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")

    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-4 if self.family == "diffusion_25d" else 2e-4


@dataclass
class TrainReport:
    family: str
    epochs: int
    n_samples: int
    curves: dict[str, list[float]]
    val_tumor_l1: float | None
    wall_clock_s: float
    checkpoint_path: str | None

    def __post_init__(self):
        for name, curve in self.curves.items():
            if len(curve) != self.epochs:
                raise ValueError(f"curve {name!r} has {len(curve)} entries for {self.epochs} epochs")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")


class SliceSampleDataset(Dataset):
    """Lazy slice-level view over training tuples.

    mode "2d": (input slice, target slice, conditioning, mask slice).
    mode "triplet": the input is 3 stacked consecutive slices instead.
    When `allowed_patients` is given, every access asserts the sample's
    patient belongs to it, so split leakage fails loudly.
    """

    def __init__(self, tuples, manifest: CohortManifest, stats: NormalizationStats, mode: str = "2d", allowed_patients=None):
        if mode not in ("2d", "triplet"):
            raise ValueError(f"mode must be '2d' or 'triplet', got {mode!r}")
        self.tuples = list(tuples)
        self.manifest = manifest
        self.stats = stats
        self.mode = mode
        self.allowed = set(allowed_patients) if allowed_patients is not None else None
        self._volumes: dict[str, np.ndarray] = {}
        self._conditioning = [
            conditioning_for_tuple(t, manifest, stats).astype(np.float32) for t in self.tuples
        ]
        self.index: list[tuple[int, int]] = []
        for ti, tup in enumerate(self.tuples):
            n_slices = self._load(tup.input_ref).shape[2]
            if mode == "triplet" and n_slices < 3:
                raise ValueError(f"tuple for {tup.patient_id} has {n_slices} slices; triplets need >= 3")
            self.index.extend((ti, k) for k in range(n_slices))

    def _load(self, ref: str) -> np.ndarray:
        if ref not in self._volumes:
            self._volumes[ref] = self.manifest.load_volume(ref).data
        return self._volumes[ref]

    def __len__(self) -> int:
        return len(self.index)

    def conditioning_dim(self) -> int:
        return self.stats.encoding_dim + 1

    def __getitem__(self, i: int):
        ti, k = self.index[i]
        tup = self.tuples[ti]
        if self.allowed is not None and tup.patient_id not in self.allowed:
            raise AssertionError(f"data loader touched patient {tup.patient_id} outside the allowed split")
        x = self._load(tup.input_ref)
        y = self._load(tup.target_ref)
        m = self._load(tup.mask_ref)
        h = self._conditioning[ti]
        if self.mode == "2d":
            xin = x[None, :, :, k]
        else:
            lo, _, hi = triplet_indices(x.shape[2])[k]
            xin = np.stack([x[:, :, lo], x[:, :, k], x[:, :, hi]])
        return (
            torch.from_numpy(np.ascontiguousarray(xin)),
            torch.from_numpy(y[None, :, :, k].copy()),
            torch.from_numpy(h.copy()),
            torch.from_numpy(m[None, :, :, k].copy()),
        )


def _batch_tumor_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of per-sample CTV-normalized L1 terms."""
    terms = [tumor_l1(p, t, m) for p, t, m in zip(pred, target, mask)]
    return torch.stack(terms).mean()


def _check_finite(value: torch.Tensor, context: dict) -> None:
    if not torch.isfinite(value).all():
        raise NumericalFailure(f"non-finite loss; diagnostics: {context}")


def _loader(dataset, config: TrainConfig) -> DataLoader:
    gen = torch.Generator().manual_seed(config.seed)
    return DataLoader(dataset, batch_size=config.batch_size, shuffle=True, generator=gen, num_workers=0)


class ForecasterBase(BaseEstimator):
    """Shared estimator plumbing: persistence, prediction, validation."""

    family: str = ""

    def _require_fitted(self):
        if not hasattr(self, "stats_"):
            raise NotFittedError(f"{type(self).__name__} must be fitted or loaded first")

    # -- persistence ---------------------------------------------------

    def _maybe_checkpoint(self, epoch: int, every: int, path) -> None:
        """Periodic snapshot at the configured cadence (0 disables)."""
        if path and every and (epoch + 1) % every == 0:
            stem, ext = os.path.splitext(os.fspath(path))
            self.save(f"{stem}.epoch{epoch + 1:04d}{ext}")

    def _state(self) -> dict:
        raise NotImplementedError

    def _load_state(self, state: dict) -> None:
        raise NotImplementedError

    def save(self, path: str | os.PathLike) -> str:
        self._require_fitted()
        path = os.fspath(path)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "family": self.family,
            "generator_spec": asdict(self.spec_),
            "schedule": self.schedule_.to_dict() if getattr(self, "schedule_", None) else None,
            "stats": self.stats_.to_dict(),
            "loss_config": asdict(self.loss_config_),
            "train_config": asdict(self.config_) if getattr(self, "config_", None) else None,
            "state": self._state(),
        }
        torch.save(payload, path)
        with open(os.path.splitext(path)[0] + ".stats.json", "w") as fh:
            json.dump(self.stats_.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ForecasterBase":
        payload = torch.load(os.fspath(path), map_location="cpu", weights_only=False)
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
        family = payload["family"]
        est = _FORECASTERS[family]()
        est.spec_ = GeneratorSpec(**payload["generator_spec"])
        est.stats_ = NormalizationStats.from_dict(payload["stats"])
        est.loss_config_ = LossConfig(**payload["loss_config"])
        if payload["schedule"]:
            est.schedule_ = NoiseSchedule.from_dict(payload["schedule"])
        if payload.get("train_config"):
            est.config_ = TrainConfig(
                **{**payload["train_config"], "loss": LossConfig(**payload["train_config"]["loss"])}
            )
        est._load_state(payload["state"])
        return est

    # -- prediction ----------------------------------------------------

    def _conditioning_tensor(self, clinical: np.ndarray, dose_gy: float, n: int) -> torch.Tensor:
        from .pairing import build_conditioning

        h = build_conditioning(np.asarray(clinical, dtype=np.float64), dose_gy, self.stats_.dose_max)
        return torch.from_numpy(np.repeat(h[None, :].astype(np.float32), n, axis=0))

    def predict_volume(self, volume: Volume, clinical: np.ndarray, dose_gy: float, seed: int = 0) -> Volume:
        """Slice-wise (or triplet-wise) prediction reassembled into a volume
        with the input's geometry; deterministic given the seed."""
        self._require_fitted()
        pred = self._predict_slices(volume.data, clinical, dose_gy, seed)
        return volume.copy_with(np.clip(pred, 0.0, 1.0).astype(np.float32))

    def _predict_slices(self, data: np.ndarray, clinical, dose_gy, seed) -> np.ndarray:
        raise NotImplementedError

    def validate_tumor_l1(
        self,
        tuples: list[TrainingTuple],
        manifest: CohortManifest,
        max_volumes: int | None = None,
        seed: int = 0,
    ) -> float:
        """Mean CTV-masked L1 between predicted and real target volumes."""
        from .preprocess import encode_clinical

        self._require_fitted()
        chosen = tuples[:max_volumes] if max_volumes else tuples
        if not chosen:
            raise ValueError("validation needs at least one tuple")
        scores = []
        for tup in chosen:
            patient = manifest.patient(tup.patient_id)
            clinical = encode_clinical(patient, self.stats_)
            x = manifest.load_volume(tup.input_ref)
            y = manifest.load_volume(tup.target_ref)
            mask = manifest.load_mask(tup.mask_ref)
            pred = self.predict_volume(x, clinical, tup.dose_increment_gy, seed=seed)
            scores.append(
                tumor_l1(
                    torch.from_numpy(pred.data.astype(np.float64)),
                    torch.from_numpy(y.data.astype(np.float64)),
                    torch.from_numpy(mask.data.astype(np.float64)),
                ).item()
            )
        return float(np.mean(scores))


class PairedGanForecaster(ForecasterBase):
    """Supervised conditional GAN over paired longitudinal slices."""

    family = "paired_gan"

    def __init__(self, epochs=30, batch_size=16, lr=None, lambda_tumor=1.0, adversarial_weight=1.0,
                 l1_weight=100.0, base_channels=32, n_res_blocks=4, embed_dim=64, seed=0, device="cpu",
                 checkpoint_every=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_tumor = lambda_tumor
        self.adversarial_weight = adversarial_weight
        self.l1_weight = l1_weight
        self.base_channels = base_channels
        self.n_res_blocks = n_res_blocks
        self.embed_dim = embed_dim
        self.seed = seed
        self.device = device
        self.checkpoint_every = checkpoint_every

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            family=self.family,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            loss=LossConfig(
                lambda_tumor=self.lambda_tumor,
                adversarial_weight=self.adversarial_weight,
                l1_weight=self.l1_weight,
            ),
            seed=self.seed,
            device=self.device,
            base_channels=self.base_channels,
            n_res_blocks=self.n_res_blocks,
            embed_dim=self.embed_dim,
        )

    def fit(self, tuples, manifest, stats, val_tuples=None, allowed_patients=None, checkpoint_path=None):
        config = self._train_config()
        torch.manual_seed(config.seed)
        dataset = SliceSampleDataset(tuples, manifest, stats, mode="2d", allowed_patients=allowed_patients)
        spec = GeneratorSpec(
            family=self.family,
            cond_dim=dataset.conditioning_dim(),
            in_channels=1,
            base_channels=config.base_channels,
            n_res_blocks=config.n_res_blocks,
            embed_dim=config.embed_dim,
        )
        device = torch.device(config.device)
        gen = build_paired_generator(spec).to(device)
        disc = build_patchgan_discriminator(spec).to(device)
        opt_g = torch.optim.Adam(gen.parameters(), lr=config.resolved_lr(), betas=(0.5, 0.999))
        opt_d = torch.optim.Adam(disc.parameters(), lr=config.resolved_lr(), betas=(0.5, 0.999))
        loader = _loader(dataset, config)
        weights = config.loss
        self.spec_ = spec
        self.stats_ = stats
        self.loss_config_ = weights
        self.config_ = config
        self.generator_ = gen
        self.discriminator_ = disc

        t0 = time.perf_counter()
        curves = {name: [] for name in ("d_adv", "g_adv", "l1", "tumor", "g_total")}
        for epoch in range(config.epochs):
            sums = {name: 0.0 for name in curves}
            n_batches = 0
            for bi, (x, y, h, mask) in enumerate(loader):
                x, y, h, mask = x.to(device), y.to(device), h.to(device), mask.to(device)
                fake = gen(x, h)

                opt_d.zero_grad()
                d_loss = weights.adversarial_weight * discriminator_adversarial(disc(y), disc(fake.detach()))
                d_loss.backward()
                opt_d.step()

                opt_g.zero_grad()
                g_adv = generator_adversarial(disc(fake))
                recon = l1_mean(fake, y)
                tumor = _batch_tumor_l1(fake, y, mask)
                g_total = weights.adversarial_weight * g_adv + weights.l1_weight * recon + weights.lambda_tumor * tumor
                g_total.backward()
                opt_g.step()

                _check_finite(g_total + d_loss, {"epoch": epoch, "batch": bi, "d": d_loss.item(), "g": g_total.item()})
                for name, value in zip(curves, (d_loss, g_adv, recon, tumor, g_total)):
                    sums[name] += value.item()
                n_batches += 1
            for name in curves:
                curves[name].append(sums[name] / max(n_batches, 1))
            self._maybe_checkpoint(epoch, self.checkpoint_every, checkpoint_path)

        gen.eval()
        disc.eval()
        val = None
        if val_tuples:
            val = self.validate_tumor_l1(val_tuples, manifest, max_volumes=config.val_max_volumes)
        saved = self.save(checkpoint_path) if checkpoint_path else None
        self.report_ = TrainReport(
            family=self.family,
            epochs=config.epochs,
            n_samples=len(dataset),
            curves=curves,
            val_tumor_l1=val,
            wall_clock_s=time.perf_counter() - t0,
            checkpoint_path=saved,
        )
        return self

    def _state(self) -> dict:
        return {"generator": self.generator_.state_dict(), "discriminator": self.discriminator_.state_dict()}

    def _load_state(self, state: dict) -> None:
        self.generator_ = build_paired_generator(self.spec_)
        self.generator_.load_state_dict(state["generator"])
        self.generator_.eval()
        self.discriminator_ = build_patchgan_discriminator(self.spec_)
        self.discriminator_.load_state_dict(state["discriminator"])
        self.discriminator_.eval()

    def _predict_slices(self, data: np.ndarray, clinical, dose_gy, seed) -> np.ndarray:
        n = data.shape[2]
        x = torch.from_numpy(np.moveaxis(data, 2, 0)[:, None, :, :].copy())
        h = self._conditioning_tensor(clinical, dose_gy, n)
        with torch.no_grad():
            pred = self.generator_(x, h)
        return np.moveaxis(pred.numpy()[:, 0], 0, 2)


class CycleGanForecaster(ForecasterBase):
    """Cycle-consistent pair of conditioned generators over the same tuples."""

    family = "cycle_gan"

    def __init__(self, epochs=30, batch_size=16, lr=None, lambda_tumor=1.0, adversarial_weight=1.0,
                 l1_weight=100.0, cycle_weight=10.0, base_channels=32, n_res_blocks=4, embed_dim=64,
                 seed=0, device="cpu", checkpoint_every=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_tumor = lambda_tumor
        self.adversarial_weight = adversarial_weight
        self.l1_weight = l1_weight
        self.cycle_weight = cycle_weight
        self.base_channels = base_channels
        self.n_res_blocks = n_res_blocks
        self.embed_dim = embed_dim
        self.seed = seed
        self.device = device
        self.checkpoint_every = checkpoint_every

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            family=self.family,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            loss=LossConfig(
                lambda_tumor=self.lambda_tumor,
                adversarial_weight=self.adversarial_weight,
                l1_weight=self.l1_weight,
                cycle_weight=self.cycle_weight,
            ),
            seed=self.seed,
            device=self.device,
            base_channels=self.base_channels,
            n_res_blocks=self.n_res_blocks,
            embed_dim=self.embed_dim,
        )

    def fit(self, tuples, manifest, stats, val_tuples=None, allowed_patients=None, checkpoint_path=None):
        config = self._train_config()
        torch.manual_seed(config.seed)
        dataset = SliceSampleDataset(tuples, manifest, stats, mode="2d", allowed_patients=allowed_patients)
        spec = GeneratorSpec(
            family=self.family,
            cond_dim=dataset.conditioning_dim(),
            in_channels=1,
            base_channels=config.base_channels,
            n_res_blocks=config.n_res_blocks,
            embed_dim=config.embed_dim,
        )
        device = torch.device(config.device)
        g_f, g_b, d_in, d_tgt = (m.to(device) for m in build_cycle_pair(spec))
        opt_g = torch.optim.Adam(
            list(g_f.parameters()) + list(g_b.parameters()), lr=config.resolved_lr(), betas=(0.5, 0.999)
        )
        opt_d = torch.optim.Adam(
            list(d_in.parameters()) + list(d_tgt.parameters()), lr=config.resolved_lr(), betas=(0.5, 0.999)
        )
        loader = _loader(dataset, config)
        weights = config.loss
        self.spec_ = spec
        self.stats_ = stats
        self.loss_config_ = weights
        self.config_ = config
        self.g_forward_ = g_f
        self.g_backward_ = g_b
        self.d_input_ = d_in
        self.d_target_ = d_tgt

        t0 = time.perf_counter()
        curves = {name: [] for name in ("d_adv", "g_adv", "cycle", "l1", "tumor", "g_total")}
        for epoch in range(config.epochs):
            sums = {name: 0.0 for name in curves}
            n_batches = 0
            for bi, (x, y, h, mask) in enumerate(loader):
                x, y, h, mask = x.to(device), y.to(device), h.to(device), mask.to(device)
                h_fwd = cycle_conditioning(h, 0.0)
                h_bwd = cycle_conditioning(h, 1.0)
                fake_y = g_f(x, h_fwd)
                fake_x = g_b(y, h_bwd)

                opt_d.zero_grad()
                d_loss = weights.adversarial_weight * (
                    discriminator_adversarial(d_tgt(y), d_tgt(fake_y.detach()))
                    + discriminator_adversarial(d_in(x), d_in(fake_x.detach()))
                )
                d_loss.backward()
                opt_d.step()

                opt_g.zero_grad()
                g_adv = generator_adversarial(d_tgt(fake_y)) + generator_adversarial(d_in(fake_x))
                cyc = cycle_term(x, g_b(fake_y, h_bwd)) + cycle_term(y, g_f(fake_x, h_fwd))
                recon = l1_mean(fake_y, y)
                tumor = _batch_tumor_l1(fake_y, y, mask)
                g_total = (
                    weights.adversarial_weight * g_adv
                    + weights.cycle_weight * cyc
                    + weights.l1_weight * recon
                    + weights.lambda_tumor * tumor
                )
                g_total.backward()
                opt_g.step()

                _check_finite(g_total + d_loss, {"epoch": epoch, "batch": bi, "d": d_loss.item(), "g": g_total.item()})
                for name, value in zip(curves, (d_loss, g_adv, cyc, recon, tumor, g_total)):
                    sums[name] += value.item()
                n_batches += 1
            for name in curves:
                curves[name].append(sums[name] / max(n_batches, 1))
            self._maybe_checkpoint(epoch, self.checkpoint_every, checkpoint_path)

        for net in (g_f, g_b, d_in, d_tgt):
            net.eval()
        val = None
        if val_tuples:
            val = self.validate_tumor_l1(val_tuples, manifest, max_volumes=config.val_max_volumes)
        saved = self.save(checkpoint_path) if checkpoint_path else None
        self.report_ = TrainReport(
            family=self.family,
            epochs=config.epochs,
            n_samples=len(dataset),
            curves=curves,
            val_tumor_l1=val,
            wall_clock_s=time.perf_counter() - t0,
            checkpoint_path=saved,
        )
        return self

    def _state(self) -> dict:
        return {
            "g_forward": self.g_forward_.state_dict(),
            "g_backward": self.g_backward_.state_dict(),
            "d_input": self.d_input_.state_dict(),
            "d_target": self.d_target_.state_dict(),
        }

    def _load_state(self, state: dict) -> None:
        g_f, g_b, d_in, d_tgt = build_cycle_pair(self.spec_)
        g_f.load_state_dict(state["g_forward"])
        g_b.load_state_dict(state["g_backward"])
        d_in.load_state_dict(state["d_input"])
        d_tgt.load_state_dict(state["d_target"])
        self.g_forward_ = g_f.eval()
        self.g_backward_ = g_b.eval()
        self.d_input_ = d_in.eval()
        self.d_target_ = d_tgt.eval()

    def _predict_slices(self, data: np.ndarray, clinical, dose_gy, seed) -> np.ndarray:
        n = data.shape[2]
        x = torch.from_numpy(np.moveaxis(data, 2, 0)[:, None, :, :].copy())
        h = cycle_conditioning(self._conditioning_tensor(clinical, dose_gy, n), 0.0)
        with torch.no_grad():
            pred = self.g_forward_(x, h)
        return np.moveaxis(pred.numpy()[:, 0], 0, 2)


class DiffusionForecaster(ForecasterBase):
    """2.5D residual diffusion: noise-prediction objective plus the
    tumor-focused term on the one-step reconstruction."""

    family = "diffusion_25d"

    def __init__(self, epochs=60, batch_size=16, lr=None, lambda_tumor=1.0, base_channels=32,
                 embed_dim=64, context_channels=16, diffusion_steps=250, beta_start=1e-4,
                 beta_end=2e-2, seed=0, device="cpu", checkpoint_every=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_tumor = lambda_tumor
        self.base_channels = base_channels
        self.embed_dim = embed_dim
        self.context_channels = context_channels
        self.diffusion_steps = diffusion_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.seed = seed
        self.device = device
        self.checkpoint_every = checkpoint_every

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            family=self.family,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            loss=LossConfig(lambda_tumor=self.lambda_tumor),
            seed=self.seed,
            device=self.device,
            base_channels=self.base_channels,
            embed_dim=self.embed_dim,
            context_channels=self.context_channels,
            diffusion_steps=self.diffusion_steps,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
        )

    def fit(self, tuples, manifest, stats, val_tuples=None, allowed_patients=None, checkpoint_path=None):
        config = self._train_config()
        torch.manual_seed(config.seed)
        dataset = SliceSampleDataset(tuples, manifest, stats, mode="triplet", allowed_patients=allowed_patients)
        spec = GeneratorSpec(
            family=self.family,
            cond_dim=dataset.conditioning_dim(),
            in_channels=3,
            base_channels=config.base_channels,
            embed_dim=config.embed_dim,
            context_channels=config.context_channels,
        )
        schedule = NoiseSchedule(config.diffusion_steps, config.beta_start, config.beta_end)
        device = torch.device(config.device)
        model = build_diffusion_model(spec, schedule).to(device)
        opt = torch.optim.Adam(model.parameters(), lr=config.resolved_lr())
        loader = _loader(dataset, config)
        draw = torch.Generator().manual_seed(config.seed + 1)
        weights = config.loss
        self.spec_ = spec
        self.schedule_ = schedule
        self.stats_ = stats
        self.loss_config_ = weights
        self.config_ = config
        self.model_ = model

        t0 = time.perf_counter()
        curves = {name: [] for name in ("noise", "tumor", "total")}
        for epoch in range(config.epochs):
            sums = {name: 0.0 for name in curves}
            n_batches = 0
            for bi, (x3, y, h, mask) in enumerate(loader):
                x_center = x3[:, 1:2]
                residual = y - x_center  # in [-1, 1] natively
                t = torch.randint(1, schedule.steps + 1, (x3.shape[0],), generator=draw)
                eps = torch.randn(residual.shape, generator=draw)
                x3, y, h, mask = x3.to(device), y.to(device), h.to(device), mask.to(device)
                residual, t, eps = residual.to(device), t.to(device), eps.to(device)
                noisy = q_sample(residual, t, eps, schedule)

                opt.zero_grad()
                context = model.context(x3)
                eps_hat = model(noisy, context, t, h)
                main = noise_l1(eps_hat, eps)
                abar = schedule.alpha_bar(t).to(eps_hat.dtype).to(device)[:, None, None, None]
                residual_hat = (noisy - (1.0 - abar).sqrt() * eps_hat) / abar.sqrt()
                reconstructed = x3[:, 1:2].to(device) + residual_hat
                tumor = _batch_tumor_l1(reconstructed, y, mask)
                total = main + weights.lambda_tumor * tumor
                total.backward()
                opt.step()

                _check_finite(total, {"epoch": epoch, "batch": bi, "noise": main.item(), "tumor": tumor.item()})
                for name, value in zip(curves, (main, tumor, total)):
                    sums[name] += value.item()
                n_batches += 1
            for name in curves:
                curves[name].append(sums[name] / max(n_batches, 1))
            self._maybe_checkpoint(epoch, self.checkpoint_every, checkpoint_path)

        model.eval()
        val = None
        if val_tuples:
            val = self.validate_tumor_l1(val_tuples, manifest, max_volumes=config.val_max_volumes)
        saved = self.save(checkpoint_path) if checkpoint_path else None
        self.report_ = TrainReport(
            family=self.family,
            epochs=config.epochs,
            n_samples=len(dataset),
            curves=curves,
            val_tumor_l1=val,
            wall_clock_s=time.perf_counter() - t0,
            checkpoint_path=saved,
        )
        return self

    def _state(self) -> dict:
        return {"model": self.model_.state_dict()}

    def _load_state(self, state: dict) -> None:
        self.model_ = build_diffusion_model(self.spec_, self.schedule_)
        self.model_.load_state_dict(state["model"])
        self.model_.eval()

    def _predict_slices(self, data: np.ndarray, clinical, dose_gy, seed) -> np.ndarray:
        n = data.shape[2]
        windows = triplet_indices(n)
        triplets = torch.from_numpy(
            np.stack([np.stack([data[:, :, lo], data[:, :, k], data[:, :, hi]]) for lo, k, hi in windows])
        )
        h = self._conditioning_tensor(clinical, dose_gy, n)
        residual = sample_residual(self.model_, triplets, h, seed=seed)
        centers = torch.from_numpy(np.moveaxis(data, 2, 0)[:, None, :, :].copy())
        pred = (centers + residual).clamp(0.0, 1.0)
        return np.moveaxis(pred.numpy()[:, 0], 0, 2)


_FORECASTERS = {
    "paired_gan": PairedGanForecaster,
    "cycle_gan": CycleGanForecaster,
    "diffusion_25d": DiffusionForecaster,
}


def make_forecaster(config: TrainConfig) -> ForecasterBase:
    common = dict(
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        lambda_tumor=config.loss.lambda_tumor,
        base_channels=config.base_channels,
        embed_dim=config.embed_dim,
        seed=config.seed,
        device=config.device,
        checkpoint_every=config.checkpoint_every,
    )
    if config.family == "paired_gan":
        return PairedGanForecaster(
            adversarial_weight=config.loss.adversarial_weight,
            l1_weight=config.loss.l1_weight,
            n_res_blocks=config.n_res_blocks,
            **common,
        )
    if config.family == "cycle_gan":
        return CycleGanForecaster(
            adversarial_weight=config.loss.adversarial_weight,
            l1_weight=config.loss.l1_weight,
            cycle_weight=config.loss.cycle_weight,
            n_res_blocks=config.n_res_blocks,
            **common,
        )
    return DiffusionForecaster(
        context_channels=config.context_channels,
        diffusion_steps=config.diffusion_steps,
        beta_start=config.beta_start,
        beta_end=config.beta_end,
        **common,
    )


def train_model(
    config: TrainConfig,
    tuples,
    manifest: CohortManifest,
    stats: NormalizationStats,
    val_tuples=None,
    allowed_patients=None,
    checkpoint_path: str | None = None,
) -> tuple[ForecasterBase, TrainReport]:
    """Train one family end to end and return (fitted forecaster, report)."""
    forecaster = make_forecaster(config)
    forecaster.fit(
        tuples,
        manifest,
        stats,
        val_tuples=val_tuples,
        allowed_patients=allowed_patients,
        checkpoint_path=checkpoint_path,
    )
    return forecaster, forecaster.report_


def load_forecaster(path: str | os.PathLike) -> ForecasterBase:
    return ForecasterBase.load(path)
