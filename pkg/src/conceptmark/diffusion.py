"""Toy pixel-space denoising diffusion model with watermark-bit supervision.

A small UNet predicts the noise added by the forward process.  Training
minimizes the usual noise-prediction MSE plus a weighted binary
cross-entropy between each image's concept secret and the soft bits
decoded from the single-step clean-image estimate, so the model learns
to keep concept watermarks in what it generates.  Latent codecs are
pluggable; the default is the identity (pixel space).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import CarrierBank

CHECKPOINT_MAGIC = "PMCK1"

DEFAULT_T = 200
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


class DiffusionError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process variances; `alpha_bars[t]` is the signal fraction
    kept after t steps, with `alpha_bars[0] == 1`."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise DiffusionError("betas must be a non-empty 1-d array")
        if not ((betas > 0.0) & (betas < 1.0)).all():
            raise DiffusionError("betas must lie strictly in (0, 1)")
        betas.setflags(write=False)
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        if not (np.diff(alpha_bars) < 0).all():
            raise DiffusionError("alpha_bar must decrease strictly")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if ((t < 1) | (t > self.T)).any():
            raise DiffusionError(f"timestep out of range [1, {self.T}]: {t}")


def linear_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, T))


# ---------------------------------------------------------------------------
# latent codecs

class IdentityCodec:
    """Pixel-space 'latent': encode/decode are the identity."""

    bounds = (0.0, 1.0)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return images

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return latents


class TinyAutoencoder(nn.Module):
    """Optional small conv autoencoder behind the same encode/decode
    interface.  Space-to-depth keeps the mapping information-preserving;
    residual conv blocks learn the useful transform.  Frozen when used
    inside diffusion training."""

    bounds = None

    def __init__(self, channels: int = 3, hidden: int = 32):
        super().__init__()
        latent = channels * 4
        self.unshuffle = nn.PixelUnshuffle(2)
        self.shuffle = nn.PixelShuffle(2)
        self.enc = nn.Sequential(nn.Conv2d(latent, hidden, 3, padding=1), nn.SiLU(),
                                 nn.Conv2d(hidden, latent, 3, padding=1))
        self.dec = nn.Sequential(nn.Conv2d(latent, hidden, 3, padding=1), nn.SiLU(),
                                 nn.Conv2d(hidden, latent, 3, padding=1))

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        u = self.unshuffle(images)
        return u + self.enc(u)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return self.shuffle(latents + self.dec(latents))


def train_autoencoder(ae: TinyAutoencoder, images: torch.Tensor, iterations: int = 400,
                      lr: float = 2e-3, batch_size: int = 32, seed: int = 0) -> list:
    """Fit the autoencoder by plain reconstruction MSE; returns the loss trace."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    losses = []
    for _ in range(iterations):
        idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=gen)
        batch = images[idx]
        recon = ae.decode(ae.encode(batch))
        loss = F.mse_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


# ---------------------------------------------------------------------------
# noise-prediction network

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t[:, None].double() * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        groups = math.gcd(8, cin)
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(math.gcd(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Small conv UNet epsilon-predictor with sinusoidal timestep embedding
    and an optional class-condition embedding."""

    def __init__(self, in_channels: int = 3, channels=(32, 64, 96), time_dim: int = 128,
                 num_classes: int | None = None):
        super().__init__()
        c1, c2, c3 = channels
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.time_dim = time_dim
        self.num_classes = num_classes
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.class_emb = nn.Embedding(num_classes, time_dim) if num_classes else None
        self.stem = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, c1, time_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, c2, time_dim)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = ResBlock(c3, c3, time_dim)
        self.up1 = nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1)
        self.dec1 = ResBlock(c2 + c2, c2, time_dim)
        self.up2 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.dec2 = ResBlock(c1 + c1, c1, time_dim)
        self.head = nn.Conv2d(c1, in_channels, 3, padding=1)

    def forward(self, z, t, cond=None):
        if not torch.is_tensor(t):
            t = torch.full((z.shape[0],), int(t), dtype=torch.long, device=z.device)
        emb = timestep_embedding(t, self.time_dim).to(z.dtype)
        emb = self.time_mlp(emb)
        if cond is not None:
            if self.class_emb is None:
                raise DiffusionError("model was built without class conditioning")
            emb = emb + self.class_emb(cond)
        h1 = self.enc1(self.stem(z), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h3 = self.mid(self.down2(h2), emb)
        u1 = self.dec1(torch.cat([self.up1(h3), h2], dim=1), emb)
        u2 = self.dec2(torch.cat([self.up2(u1), h1], dim=1), emb)
        return self.head(u2)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass(frozen=True)
class TrainConfig:
    alpha_bce: float = 2.0
    lr: float = 3.2e-4  # base rate 3.2e-5 scaled 10x for the toy model size
    batch_size: int = 16
    iterations: int = 2000
    strength: float = 0.3
    conditional: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.alpha_bce < 0:
            raise DiffusionError(f"alpha_bce must be >= 0, got {self.alpha_bce}")


# ---------------------------------------------------------------------------
# forward process and losses

def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    arr = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if torch.is_tensor(t):
        return arr[t].reshape(-1, *([1] * (like.ndim - 1)))
    return arr[int(t)]


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Forward-noise z0 to step t: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    schedule.check_t(t.numpy() if torch.is_tensor(t) else t)
    if eps.shape != z0.shape:
        raise DiffusionError(f"noise shape {tuple(eps.shape)} != input shape {tuple(z0.shape)}")
    ab = _gather(schedule.alpha_bars, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def loss_ldm(model, schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor,
             cond=None) -> torch.Tensor:
    """Noise-prediction MSE averaged over all elements."""
    z_t = q_sample(schedule, z0, t, eps)
    return F.mse_loss(model(z_t, t, cond), eps)


def loss_bce(target_bits, soft_bits):
    """Mean binary cross-entropy with soft bits clamped to [1e-7, 1 - 1e-7].

    Accepts torch tensors (differentiable) or numpy arrays; shapes must
    match elementwise.
    """
    if torch.is_tensor(soft_bits):
        target = soft_bits.new_tensor(np.asarray(target_bits, dtype=np.float32)) \
            if not torch.is_tensor(target_bits) else target_bits.to(soft_bits.dtype)
        if target.shape != soft_bits.shape:
            raise DiffusionError(f"bit shape {tuple(target.shape)} != soft shape {tuple(soft_bits.shape)}")
        p_hat = soft_bits.clamp(1e-7, 1.0 - 1e-7)
        return -(target * torch.log(p_hat) + (1.0 - target) * torch.log(1.0 - p_hat)).mean()
    target = np.asarray(target_bits, dtype=np.float64)
    p_hat = np.clip(np.asarray(soft_bits, dtype=np.float64), 1e-7, 1.0 - 1e-7)
    if target.shape != p_hat.shape:
        raise DiffusionError(f"bit shape {target.shape} != soft shape {p_hat.shape}")
    return float(-(target * np.log(p_hat) + (1.0 - target) * np.log(1.0 - p_hat)).mean())


def predicted_x0(schedule: NoiseSchedule, z_t: torch.Tensor, t, eps_hat: torch.Tensor) -> torch.Tensor:
    """Closed-form clean-latent estimate from predicted noise at step t."""
    ab = _gather(schedule.alpha_bars, t, z_t)
    return (z_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


# ---------------------------------------------------------------------------
# codec bridge: soft bits from torch image batches

class SoftDecoder:
    """Torch mirror of the codec's soft decoder for NCHW image batches.

    Precomputes carrier matrices for the full frame and, when a dual
    placement is given, for both halves.
    """

    def __init__(self, bank: CarrierBank, image_shape, placement: str | None = None):
        h, w, c = image_shape
        self.gain = bank.gain
        self.full = self._matrix(bank, (h, w, c))
        self.halves = None
        self.placement = placement
        if placement is not None:
            if placement in ("left-right", "right-left"):
                first = (h, (w + 1) // 2, c)
                second = (h, w - (w + 1) // 2, c)
            else:
                first = ((h + 1) // 2, w, c)
                second = (h - (h + 1) // 2, w, c)
            self.halves = (self._matrix(bank, first), self._matrix(bank, second))

    @staticmethod
    def _matrix(bank: CarrierBank, shape) -> torch.Tensor:
        nchw = bank.resized(tuple(shape)).carriers.transpose(0, 3, 1, 2)
        return torch.tensor(nchw.reshape(bank.b, -1), dtype=torch.float32)

    def soft_bits(self, images: torch.Tensor, carriers: torch.Tensor | None = None) -> torch.Tensor:
        carriers = self.full if carriers is None else carriers
        centered = images - images.mean(dim=(2, 3), keepdim=True)
        corr = centered.reshape(images.shape[0], -1) @ carriers.to(images.dtype).T / carriers.shape[1]
        return torch.sigmoid(self.gain * corr)

    def split(self, images: torch.Tensor):
        h, w = images.shape[2], images.shape[3]
        p = self.placement
        if p in ("left-right", "right-left"):
            cut = (w + 1) // 2
            a, b = images[:, :, :, :cut], images[:, :, :, cut:]
            return (a, b) if p == "left-right" else (b, a)
        cut = (h + 1) // 2
        a, b = images[:, :, :cut, :], images[:, :, cut:, :]
        return (a, b) if p == "top-bottom" else (b, a)

    def soft_bits_dual(self, images: torch.Tensor):
        first, second = self.split(images)
        return self.soft_bits(first, self.halves[0]), self.soft_bits(second, self.halves[1])


# ---------------------------------------------------------------------------
# training

def train_step(model, optimizer, schedule: NoiseSchedule, batch: dict, cfg: TrainConfig,
               decoder: SoftDecoder, latent_codec=None, generator=None) -> dict:
    """One optimization step on a batch; returns the loss breakdown.

    The bit-recovery path decodes the clean-image estimate implied by the
    predicted noise at the sampled step and scores its soft bits against
    the batch secrets.
    """
    latent_codec = latent_codec or IdentityCodec()
    images = batch["images"]
    z0 = latent_codec.encode(images)
    t = torch.randint(1, schedule.T + 1, (images.shape[0],), generator=generator)
    eps = torch.empty_like(z0).normal_(generator=generator)
    z_t = q_sample(schedule, z0, t, eps)
    eps_hat = model(z_t, t, batch.get("cond"))
    ldm = F.mse_loss(eps_hat, eps)
    if cfg.alpha_bce > 0:
        decoded = latent_codec.decode(predicted_x0(schedule, z_t, t, eps_hat))
        if batch.get("secrets2") is not None:
            soft_a, soft_b = decoder.soft_bits_dual(decoded)
            bce = loss_bce(batch["secrets"], soft_a) + loss_bce(batch["secrets2"], soft_b)
        else:
            bce = loss_bce(batch["secrets"], decoder.soft_bits(decoded))
    else:
        bce = ldm.new_zeros(())
    total = ldm + cfg.alpha_bce * bce
    if not torch.isfinite(total):
        raise DiffusionError(
            f"non-finite loss (ldm={float(ldm)}, bce={float(bce)}) "
            f"on batch indices {batch.get('indices')}"
        )
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return {"ldm": float(ldm.detach()), "bce": float(bce.detach()), "total": float(total.detach())}


def dataset_tensors(dataset, registry, registry2=None, conditional: bool = False) -> dict:
    """Train-split tensors: NCHW images, per-image secrets, optional labels."""
    entries = dataset.train()
    images = np.stack([e.image for e in entries]).astype(np.float32).transpose(0, 3, 1, 2)
    secrets = np.stack([registry.secrets[e.concept] for e in entries]).astype(np.float32)
    out = {
        "images": torch.from_numpy(images),
        "secrets": torch.from_numpy(secrets),
        "indices": np.array([e.index for e in entries]),
    }
    if dataset.dual:
        if registry2 is None:
            raise DiffusionError("dual dataset needs the second registry")
        out["secrets2"] = torch.from_numpy(
            np.stack([registry2.secrets[e.concept2] for e in entries]).astype(np.float32)
        )
    if conditional:
        out["cond"] = torch.tensor([e.concept for e in entries], dtype=torch.long)
    return out


def train_model(model, schedule: NoiseSchedule, dataset, bank: CarrierBank, registry,
                cfg: TrainConfig, registry2=None, latent_codec=None, log_path=None,
                progress=None) -> list:
    """Run the full training loop; returns the per-iteration loss history.

    Writes one `iter, ldm, bce, total` line per iteration when `log_path`
    is given.
    """
    tensors = dataset_tensors(dataset, registry, registry2, conditional=cfg.conditional)
    decoder = SoftDecoder(bank, dataset.shape, placement=dataset.placement if dataset.dual else None)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    generator = torch.Generator().manual_seed(cfg.seed)
    n = tensors["images"].shape[0]
    history = []
    log = open(log_path, "w", encoding="ascii") if log_path else None
    try:
        if log:
            log.write("iter, ldm, bce, total\n")
        order = torch.randperm(n, generator=generator)
        cursor = 0
        for it in range(1, cfg.iterations + 1):
            if cursor + cfg.batch_size > n:
                order = torch.randperm(n, generator=generator)
                cursor = 0
            idx = order[cursor : cursor + cfg.batch_size]
            cursor += cfg.batch_size
            batch = {
                "images": tensors["images"][idx],
                "secrets": tensors["secrets"][idx],
                "indices": tensors["indices"][idx.numpy()].tolist(),
            }
            if "secrets2" in tensors:
                batch["secrets2"] = tensors["secrets2"][idx]
            if "cond" in tensors:
                batch["cond"] = tensors["cond"][idx]
            losses = train_step(model, optimizer, schedule, batch, cfg, decoder,
                                latent_codec=latent_codec, generator=generator)
            history.append(losses)
            if log:
                log.write(f"{it}, {losses['ldm']:.6f}, {losses['bce']:.6f}, {losses['total']:.6f}\n")
            if progress and it % 200 == 0:
                progress(it, losses)
    finally:
        if log:
            log.close()
    return history


# ---------------------------------------------------------------------------
# reverse process

@torch.no_grad()
def denoise_from(model, schedule: NoiseSchedule, z_t: torch.Tensor, t, deterministic: bool = True,
                 generator=None, cond=None, clip_bounds=(0.0, 1.0)) -> torch.Tensor:
    """Iterate reverse steps from per-sample step t down to 0.

    `t` may be a scalar or a (batch,) array; samples with smaller t join
    the chain when it reaches their step.  The deterministic variant
    omits the posterior noise (used for reproducible evaluation).
    """
    if not torch.is_tensor(t):
        t = torch.as_tensor(np.broadcast_to(np.asarray(t), (z_t.shape[0],)).copy())
    t = t.long()
    schedule.check_t(t.numpy())
    z = z_t.clone()
    ab = schedule.alpha_bars
    for s in range(int(t.max()), 0, -1):
        active = (t >= s).nonzero(as_tuple=True)[0]
        if active.numel() == 0:
            continue
        zs = z[active]
        eps_hat = model(zs, s, cond[active] if cond is not None else None)
        x0 = predicted_x0(schedule, zs, s, eps_hat)
        if clip_bounds is not None:
            x0 = x0.clamp(*clip_bounds)
        if deterministic:
            zs = math.sqrt(ab[s - 1]) * x0 + math.sqrt(1.0 - ab[s - 1]) * eps_hat
        else:
            beta = schedule.betas[s - 1]
            alpha = schedule.alphas[s - 1]
            mean = (
                math.sqrt(alpha) * (1.0 - ab[s - 1]) / (1.0 - ab[s]) * zs
                + math.sqrt(ab[s - 1]) * beta / (1.0 - ab[s]) * x0
            )
            if s > 1:
                var = (1.0 - ab[s - 1]) / (1.0 - ab[s]) * beta
                noise = torch.empty_like(zs).normal_(generator=generator)
                zs = mean + math.sqrt(var) * noise
            else:
                zs = mean
        z[active] = zs
    return z


@torch.no_grad()
def sample(model, schedule: NoiseSchedule, count: int, image_shape, cond=None, seed: int = 0,
           latent_codec=None, deterministic: bool = False) -> np.ndarray:
    """Ancestral sampling from pure noise; returns (count, h, w, c) in [0, 1]."""
    latent_codec = latent_codec or IdentityCodec()
    h, w, c = (int(v) for v in image_shape)
    generator = torch.Generator().manual_seed(seed)
    probe = latent_codec.encode(torch.zeros(1, c, h, w))
    z = torch.empty((count,) + tuple(probe.shape[1:])).normal_(generator=generator)
    if cond is not None and not torch.is_tensor(cond):
        cond = torch.as_tensor(np.asarray(cond), dtype=torch.long)
    bounds = getattr(latent_codec, "bounds", None)
    z0 = denoise_from(model, schedule, z, schedule.T, deterministic=deterministic,
                      generator=generator, cond=cond, clip_bounds=bounds)
    images = latent_codec.decode(z0).clamp(0.0, 1.0)
    return images.permute(0, 2, 3, 1).numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: Denoiser, schedule: NoiseSchedule, meta: dict | None = None) -> None:
    """Versioned header + schedule + named parameter tensors (LE float32)."""
    meta = dict(meta or {})
    meta.update(
        in_channels=model.in_channels,
        channels=",".join(str(c) for c in model.channels),
        time_dim=model.time_dim,
        num_classes=model.num_classes or 0,
    )
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC}\n".encode("ascii"))
        f.write(("meta " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n").encode("ascii"))

        def put(name, array):
            arr = np.asarray(array, dtype="<f4")
            dims = " ".join(str(d) for d in arr.shape)
            f.write(f"tensor {name} {arr.ndim} {dims}\n".encode("ascii"))
            f.write(arr.tobytes())

        put("schedule.betas", schedule.betas)
        for name, tensor in model.state_dict().items():
            put(f"param.{name}", tensor.detach().cpu().numpy())
        f.write(b"end\n")


def load_checkpoint(path):
    """Returns (model, schedule, meta)."""
    with open(path, "rb") as f:
        if f.readline().decode("ascii").strip() != CHECKPOINT_MAGIC:
            raise DiffusionError(f"not a {CHECKPOINT_MAGIC} checkpoint: {path}")
        meta_line = f.readline().decode("ascii").strip()
        if not meta_line.startswith("meta "):
            raise DiffusionError("checkpoint missing meta line")
        meta = dict(kv.split("=", 1) for kv in meta_line[5:].split())
        tensors = {}
        while True:
            header = f.readline().decode("ascii").strip()
            if header == "end":
                break
            if not header.startswith("tensor "):
                raise DiffusionError(f"corrupt checkpoint near {header!r}")
            parts = header.split()
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(v) for v in parts[3 : 3 + ndim])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            tensors[name] = data
    schedule = NoiseSchedule(betas=tensors.pop("schedule.betas").astype(np.float64))
    num_classes = int(meta["num_classes"]) or None
    model = Denoiser(
        in_channels=int(meta["in_channels"]),
        channels=tuple(int(c) for c in meta["channels"].split(",")),
        time_dim=int(meta["time_dim"]),
        num_classes=num_classes,
    )
    state = {k[6:]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("param.")}
    model.load_state_dict(state)
    return model, schedule, meta
