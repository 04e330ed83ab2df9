"""Progressive adversarial training: schedule, losses, penalty, checkpoints.

The default objective is the Wasserstein critic loss with gradient penalty;
the classic log-sigmoid minimax loss is available as a mode. Each stage
runs a fade-in phase (alpha ramping linearly 0 -> 1 over a configured
number of images seen) followed by a stabilize phase at alpha = 1.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, ResolutionLadder, downsample_area, load_image, save_image
from .networks import Discriminator, GanConfig, Generator

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainSchedule:
    """Per-stage training plan, expressed in images seen (not epochs).

    ``fade_images``, ``stabilize_images``, and ``batch_size`` accept either
    a single value applied to every stage or a per-stage list.
    """

    max_stage: int = 3
    fade_images: int | list[int] = 4000
    stabilize_images: int | list[int] = 4000
    batch_size: int | list[int] = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.0, 0.99)
    adam_eps: float = 1e-8
    lambda_gp: float = 10.0
    n_critic: int = 1
    objective: str = "wasserstein"  # wasserstein | standard
    checkpoint_every: int = 0  # images seen; 0 = stage boundaries only

    def __post_init__(self):
        for name in ("fade_images", "stabilize_images", "batch_size"):
            value = getattr(self, name)
            values = value if isinstance(value, list) else [value]
            if any(v <= 0 for v in values):
                raise ValueError(f"{name} must be positive")
            if isinstance(value, list) and len(value) < self.max_stage:
                raise ValueError(f"per-stage {name} list shorter than max_stage")
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")
        if self.objective not in ("wasserstein", "standard"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def _at(self, value, stage: int) -> int:
        return value[stage - 1] if isinstance(value, list) else value

    def fade_at(self, stage: int) -> int:
        return self._at(self.fade_images, stage)

    def stabilize_at(self, stage: int) -> int:
        return self._at(self.stabilize_images, stage)

    def batch_at(self, stage: int) -> int:
        return self._at(self.batch_size, stage)

    def to_dict(self) -> dict:
        return {
            "max_stage": self.max_stage,
            "fade_images": self.fade_images,
            "stabilize_images": self.stabilize_images,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "betas": list(self.betas),
            "adam_eps": self.adam_eps,
            "lambda_gp": self.lambda_gp,
            "n_critic": self.n_critic,
            "objective": self.objective,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainSchedule":
        doc = dict(doc)
        if "betas" in doc:
            doc["betas"] = tuple(doc["betas"])
        return cls(**doc)


def minimax_losses(
    d_real: torch.Tensor, d_fake: torch.Tensor, mode: str = "wasserstein"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator and core critic losses from raw (pre-sigmoid) scores.

    standard: the log-sigmoid minimax game with the non-saturating
    generator variant. wasserstein: critic maximizes the score gap, so
    d_loss_core = mean(fake) - mean(real) and g_loss = -mean(fake).
    """
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("empty score batch")
    if torch.isnan(d_real).any():
        raise ValueError("NaN in real-side scores")
    if torch.isnan(d_fake).any():
        raise ValueError("NaN in fake-side scores")
    if mode == "wasserstein":
        d_loss = d_fake.mean() - d_real.mean()
        g_loss = -d_fake.mean()
    elif mode == "standard":
        # -log D(x) - log(1 - D(G(z))) via numerically stable softplus.
        d_loss = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
        g_loss = F.softplus(-d_fake).mean()
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return g_loss, d_loss


def interpolate_pairs(
    real: torch.Tensor, fake: torch.Tensor, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Random points on the segments between paired real and fake samples."""
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch {tuple(real.shape)} vs {tuple(fake.shape)}")
    eps_shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    eps = torch.rand(eps_shape, generator=generator, dtype=real.dtype)
    return eps * real + (1.0 - eps) * fake


def gradient_norms(
    critic: Callable[[torch.Tensor], torch.Tensor], points: torch.Tensor
) -> torch.Tensor:
    """Per-sample L2 norm of the critic's input gradient."""
    points = points.detach().requires_grad_(True)
    scores = critic(points)
    grads = torch.autograd.grad(
        scores.sum(), points, create_graph=torch.is_grad_enabled()
    )[0]
    return grads.flatten(1).norm(2, dim=1)


def gradient_penalty_terms(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    lambda_gp: float,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, float]:
    """Penalty plus the mean interpolate gradient norm (for logging)."""
    if lambda_gp < 0:
        raise ValueError(f"lambda_gp must be >= 0, got {lambda_gp}")
    if lambda_gp == 0:
        return torch.zeros((), dtype=real.dtype), float("nan")
    x_hat = interpolate_pairs(real, fake, generator)
    norms = gradient_norms(critic, x_hat)
    penalty = lambda_gp * ((norms - 1.0) ** 2).mean()
    return penalty, float(norms.detach().mean())


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    lambda_gp: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """lambda * E[(||grad D(x_hat)||_2 - 1)^2] on real/fake interpolates."""
    return gradient_penalty_terms(critic, real, fake, lambda_gp, generator)[0]


def config_hash(gan_cfg: GanConfig, schedule: TrainSchedule) -> str:
    blob = json.dumps(
        {"gan": gan_cfg.to_dict(), "schedule": schedule.to_dict()}, sort_keys=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class GanCheckpoint:
    """In-memory checkpoint: parameter arrays plus training metadata."""

    gan_config: GanConfig
    schedule: TrainSchedule
    stage: int
    alpha: float
    images_seen: int
    generator_state: dict[str, np.ndarray]
    discriminator_state: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    checkpoint_id: str = ""

    @property
    def config_hash(self) -> str:
        return config_hash(self.gan_config, self.schedule)

    def save(self, path: str | Path) -> None:
        """Write a single-file zip archive: meta.json + one .npy per array."""
        meta = {
            "version": CHECKPOINT_VERSION,
            "config_hash": self.config_hash,
            "gan_config": self.gan_config.to_dict(),
            "schedule": self.schedule.to_dict(),
            "stage": self.stage,
            "alpha": self.alpha,
            "images_seen": self.images_seen,
            "checkpoint_id": self.checkpoint_id or Path(path).stem,
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("meta.json", json.dumps(meta, indent=2))
            for prefix, state in (
                ("generator", self.generator_state),
                ("discriminator", self.discriminator_state),
                ("optimizer", self.optimizer_state),
            ):
                for name, arr in state.items():
                    buf = io.BytesIO()
                    np.save(buf, arr)
                    zf.writestr(f"{prefix}/{name}.npy", buf.getvalue())

    @classmethod
    def load(cls, path: str | Path, expect_config_hash: str | None = None) -> "GanCheckpoint":
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
                raise ValueError(
                    f"config hash mismatch: checkpoint {meta['config_hash']}, "
                    f"expected {expect_config_hash}; refusing to resume"
                )
            states: dict[str, dict[str, np.ndarray]] = {
                "generator": {}, "discriminator": {}, "optimizer": {}
            }
            for info in zf.infolist():
                if not info.filename.endswith(".npy"):
                    continue
                prefix, name = info.filename.split("/", 1)
                arr = np.load(io.BytesIO(zf.read(info)))
                states[prefix][name[: -len(".npy")]] = arr
        return cls(
            gan_config=GanConfig.from_dict(meta["gan_config"]),
            schedule=TrainSchedule.from_dict(meta["schedule"]),
            stage=meta["stage"],
            alpha=meta["alpha"],
            images_seen=meta["images_seen"],
            generator_state=states["generator"],
            discriminator_state=states["discriminator"],
            optimizer_state=states["optimizer"],
            checkpoint_id=meta.get("checkpoint_id", ""),
        )

    def build_generator(self) -> Generator:
        gen = Generator(self.gan_config, active_stage=self.stage)
        gen.load_state_dict(
            {k: torch.from_numpy(v.copy()) for k, v in self.generator_state.items()}
        )
        return gen

    def build_discriminator(self) -> Discriminator:
        disc = Discriminator(self.gan_config, active_stage=self.stage)
        disc.load_state_dict(
            {k: torch.from_numpy(v.copy()) for k, v in self.discriminator_state.items()}
        )
        return disc


def _module_state(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _optimizer_state(opt_g, opt_d, gen, disc) -> dict[str, np.ndarray]:
    """Flatten Adam moments keyed by parameter name."""
    out: dict[str, np.ndarray] = {}
    for tag, opt, module in (("g", opt_g, gen), ("d", opt_d, disc)):
        names = [n for n, _ in module.named_parameters()]
        state = opt.state_dict()["state"]
        for idx, name in enumerate(names):
            if idx not in state:
                continue
            s = state[idx]
            out[f"{tag}/{name}/step"] = np.asarray(
                s["step"].item() if torch.is_tensor(s["step"]) else s["step"]
            )
            out[f"{tag}/{name}/exp_avg"] = s["exp_avg"].numpy().copy()
            out[f"{tag}/{name}/exp_avg_sq"] = s["exp_avg_sq"].numpy().copy()
    return out


def _restore_optimizer(opt, module, tag: str, flat: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    for idx, (name, param) in enumerate(module.named_parameters()):
        key = f"{tag}/{name}"
        if f"{key}/step" not in flat:
            continue
        sd["state"][idx] = {
            "step": torch.tensor(float(flat[f"{key}/step"])),
            "exp_avg": torch.from_numpy(flat[f"{key}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(flat[f"{key}/exp_avg_sq"].copy()),
        }
    opt.load_state_dict(sd)


class _StageData:
    """Serves seeded-shuffled real batches at a given stage resolution."""

    def __init__(self, manifest: DatasetManifest, seed: int):
        entries = manifest.entries("train")
        if not entries:
            raise ValueError("manifest train split is empty")
        self.paths = [e.image for e in entries]
        self.channels = manifest.channels
        self.rng = np.random.default_rng(seed)
        self.cache = [load_image(p, channels=self.channels) for p in self.paths]
        self._order: list[int] = []

    def batch(self, batch_size: int, resolution: int) -> torch.Tensor:
        out = []
        for _ in range(batch_size):
            if not self._order:
                self._order = list(self.rng.permutation(len(self.cache)))
            arr = self.cache[self._order.pop()]
            out.append(downsample_area(arr, resolution))
        stacked = np.stack(out).transpose(0, 3, 1, 2).astype(np.float32)
        return torch.from_numpy(stacked)


def train(
    manifest: DatasetManifest,
    schedule: TrainSchedule,
    gan_cfg: GanConfig,
    seed: int,
    out_dir: str | Path,
    log_path: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> list[Path]:
    """Run the progressive loop; returns the emitted checkpoint paths.

    A checkpoint is written at every stage boundary and, if
    ``schedule.checkpoint_every`` is set, at that interval of images seen.
    A non-finite loss saves an emergency checkpoint and raises.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    data = _StageData(manifest, seed)
    ladder = ResolutionLadder(schedule.max_stage)
    if manifest.resolution < ladder.max_resolution:
        raise ValueError(
            f"dataset resolution {manifest.resolution} below final stage "
            f"resolution {ladder.max_resolution}"
        )

    start_stage, images_seen = 1, 0
    gen = Generator(gan_cfg)
    disc = Discriminator(gan_cfg)
    opt_g = torch.optim.Adam(
        gen.parameters(), lr=schedule.lr, betas=schedule.betas, eps=schedule.adam_eps
    )
    opt_d = torch.optim.Adam(
        disc.parameters(), lr=schedule.lr, betas=schedule.betas, eps=schedule.adam_eps
    )
    if resume_from is not None:
        ckpt = GanCheckpoint.load(
            resume_from, expect_config_hash=config_hash(gan_cfg, schedule)
        )
        gen = ckpt.build_generator()
        disc = ckpt.build_discriminator()
        opt_g = torch.optim.Adam(
            gen.parameters(), lr=schedule.lr, betas=schedule.betas, eps=schedule.adam_eps
        )
        opt_d = torch.optim.Adam(
            disc.parameters(), lr=schedule.lr, betas=schedule.betas, eps=schedule.adam_eps
        )
        _restore_optimizer(opt_g, gen, "g", ckpt.optimizer_state)
        _restore_optimizer(opt_d, disc, "d", ckpt.optimizer_state)
        start_stage = ckpt.stage
        images_seen = ckpt.images_seen

    log_file = open(log_path, "a") if log_path else None

    def emit(tag: str, stage: int, alpha: float) -> Path:
        ckpt = GanCheckpoint(
            gan_config=gan_cfg,
            schedule=schedule,
            stage=stage,
            alpha=alpha,
            images_seen=images_seen,
            generator_state=_module_state(gen),
            discriminator_state=_module_state(disc),
            optimizer_state=_optimizer_state(opt_g, opt_d, gen, disc),
            checkpoint_id=tag,
        )
        path = out_dir / f"{tag}.ckpt"
        ckpt.save(path)
        return path

    emitted: list[Path] = []
    step = 0
    try:
        for stage in range(start_stage, schedule.max_stage + 1):
            if stage > gen.active_stage:
                gen.grow()
                disc.grow()
                opt_g = torch.optim.Adam(
                    gen.parameters(), lr=schedule.lr,
                    betas=schedule.betas, eps=schedule.adam_eps,
                )
                opt_d = torch.optim.Adam(
                    disc.parameters(), lr=schedule.lr,
                    betas=schedule.betas, eps=schedule.adam_eps,
                )
            res = 2 ** (stage + 1)
            batch_size = schedule.batch_at(stage)
            fade_total = schedule.fade_at(stage)
            phase_plan = (
                [("stabilize", schedule.stabilize_at(stage))]
                if stage == 1
                else [("fade", fade_total),
                      ("stabilize", schedule.stabilize_at(stage))]
            )
            for phase, total in phase_plan:
                seen_in_phase = 0
                while seen_in_phase < total:
                    alpha = (
                        min(seen_in_phase / fade_total, 1.0)
                        if phase == "fade"
                        else 1.0
                    )
                    real = data.batch(batch_size, res)

                    grad_norm_mean = float("nan")
                    for _ in range(schedule.n_critic):
                        z = torch.randn(batch_size, gan_cfg.latent_dim)
                        fake = gen(z, stage, alpha).detach()
                        d_real = disc(real, stage, alpha)
                        d_fake = disc(fake, stage, alpha)
                        _, d_core = minimax_losses(d_real, d_fake, schedule.objective)
                        if schedule.objective == "wasserstein":
                            penalty, grad_norm_mean = gradient_penalty_terms(
                                lambda x: disc(x, stage, alpha),
                                real, fake, schedule.lambda_gp,
                            )
                        else:
                            penalty = torch.zeros(())
                        d_loss = d_core + penalty
                        if not torch.isfinite(d_loss):
                            emitted.append(emit("emergency", stage, alpha))
                            raise RuntimeError(
                                f"non-finite critic loss at step {step}"
                            )
                        opt_d.zero_grad()
                        d_loss.backward()
                        opt_d.step()

                    z = torch.randn(batch_size, gan_cfg.latent_dim)
                    d_fake_g = disc(gen(z, stage, alpha), stage, alpha)
                    # Real-side scores don't enter the generator loss.
                    g_loss, _ = minimax_losses(
                        torch.ones_like(d_fake_g), d_fake_g, schedule.objective
                    )
                    if not torch.isfinite(g_loss):
                        emitted.append(emit("emergency", stage, alpha))
                        raise RuntimeError(f"non-finite generator loss at step {step}")
                    opt_g.zero_grad()
                    g_loss.backward()
                    opt_g.step()

                    seen_in_phase += batch_size
                    images_seen += batch_size
                    step += 1
                    if log_file:
                        log_file.write(json.dumps({
                            "step": step, "stage": stage, "phase": phase,
                            "alpha": round(alpha, 6),
                            "d_loss": float(d_loss.detach()),
                            "g_loss": float(g_loss.detach()),
                            "penalty": float(penalty.detach()),
                            "grad_norm": grad_norm_mean,
                            "images_seen": images_seen,
                        }) + "\n")
                    if (
                        schedule.checkpoint_every
                        and images_seen % schedule.checkpoint_every < batch_size
                    ):
                        emitted.append(
                            emit(f"step_{images_seen:08d}", stage, alpha)
                        )
            emitted.append(emit(f"stage_{stage}", stage, 1.0))
    finally:
        if log_file:
            log_file.close()
    return emitted


def generate(
    checkpoint: GanCheckpoint | str | Path,
    count: int,
    seed: int,
    out_dir: str | Path,
) -> list[Path]:
    """Sample images from a checkpoint's generator, alpha forced to 1.

    Deterministic given the seed; outputs are clamped to [-1, 1] and
    written as PNGs at the checkpoint's stage resolution.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not isinstance(checkpoint, GanCheckpoint):
        checkpoint = GanCheckpoint.load(checkpoint)
    gen = checkpoint.build_generator()
    gen.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = torch.Generator().manual_seed(seed)
    paths = []
    with torch.no_grad():
        for k in range(count):
            z = torch.randn(1, checkpoint.gan_config.latent_dim, generator=rng)
            img = gen(z, checkpoint.stage, 1.0)[0].numpy().transpose(1, 2, 0)
            path = out_dir / f"gen_{k:05d}.png"
            save_image(img, path)
            paths.append(path)
    return paths


def render_batch(
    checkpoint: GanCheckpoint, z: torch.Tensor
) -> np.ndarray:
    """Export-mapped images (N x H x W x C in [-1, 1]) for a fixed latent batch."""
    gen = checkpoint.build_generator()
    gen.eval()
    with torch.no_grad():
        out = gen(z, checkpoint.stage, 1.0).numpy().transpose(0, 2, 3, 1)
    return np.clip(out, -1.0, 1.0)
