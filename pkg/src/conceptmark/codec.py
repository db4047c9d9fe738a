"""Spread-spectrum watermark codec.

A bank of pseudorandom zero-mean, unit-RMS carrier patterns is generated
from a seed.  A b-bit secret is converted to a spatial watermark as the
signed sum of the carriers (bit 1 -> +carrier, bit 0 -> -carrier, scaled
by 1/sqrt(b)), added to images at a configurable strength, and recovered
by correlating the image against each carrier.

Everything here is a pure function of its inputs; banks and watermarks
are immutable and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

# Soft-decode gain is calibrated so that bits saturate near 0/1 at the
# default operating strength 0.3: gain * (m/sqrt(b)) = 4 at m = 0.3.
REFERENCE_STRENGTH = 0.3
DEFAULT_STRENGTH = 0.3

BANK_MAGIC = "PMWB1"


class CodecError(ValueError):
    """Raised for invalid codec inputs (shape/length mismatches, bad config)."""


def _as_image(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim not in (3, 4):
        raise CodecError(f"expected image of shape (h, w, c) or batch (n, h, w, c), got {a.shape}")
    return a


@dataclass(frozen=True)
class Secret:
    """A fixed-length bit sequence identifying one concept."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1 or bits.size == 0:
            raise CodecError(f"secret must be a non-empty 1-d bit array, got shape {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise CodecError("secret bits must be exactly 0 or 1")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return int(self.bits.size)

    def __eq__(self, other) -> bool:
        return isinstance(other, Secret) and np.array_equal(self.bits, other.bits)

    def complement(self) -> "Secret":
        return Secret(1 - self.bits)

    def to_string(self) -> str:
        return "".join("1" if v else "0" for v in self.bits)

    @classmethod
    def from_string(cls, s: str) -> "Secret":
        if not s or set(s) - {"0", "1"}:
            raise CodecError(f"secret string must be non-empty and contain only 0/1: {s!r}")
        return cls(np.frombuffer(s.encode("ascii"), dtype=np.uint8) - ord("0"))


@dataclass(frozen=True)
class CarrierBank:
    """b pseudorandom carrier patterns, deterministic in (seed, b, shape).

    Each carrier is exactly zero-mean and unit-RMS over all elements.
    """

    seed: int
    b: int
    shape: tuple
    carriers: np.ndarray = field(repr=False)  # (b, h, w, c)

    def __post_init__(self):
        self.carriers.setflags(write=False)

    @property
    def gain(self) -> float:
        """Fixed logistic gain of the soft decoder."""
        return 4.0 * math.sqrt(self.b) / REFERENCE_STRENGTH

    @property
    def flat(self) -> np.ndarray:
        """Carriers as a (b, h*w*c) matrix."""
        return self.carriers.reshape(self.b, -1)

    def resized(self, shape) -> "CarrierBank":
        """Bank with carriers bilinearly resized (and renormalized) to `shape`."""
        shape = tuple(int(v) for v in shape)
        if shape == self.shape:
            return self
        if len(shape) != 3 or shape[2] != self.shape[2]:
            raise CodecError(f"cannot resize carriers from {self.shape} to {shape}")
        if shape[0] < 8 or shape[1] < 8:
            raise CodecError(f"degenerate target shape {shape}")
        resized = np.stack([_normalize(bilinear_resize(c, shape[:2])) for c in self.carriers])
        return CarrierBank(seed=self.seed, b=self.b, shape=shape, carriers=resized)


@dataclass(frozen=True)
class SpatialWatermark:
    """Image-shaped additive pattern derived from a secret."""

    pattern: np.ndarray
    source_secret: Secret

    def __post_init__(self):
        self.pattern.setflags(write=False)

    @property
    def shape(self) -> tuple:
        return self.pattern.shape


@dataclass(frozen=True)
class EmbedConfig:
    """Embedding strength and clipping behaviour."""

    strength: float = DEFAULT_STRENGTH
    clip: bool = True  # clip-to-[0,1] vs no-clip

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise CodecError(f"strength must be in [0, 1], got {self.strength}")


def _normalize(pattern: np.ndarray) -> np.ndarray:
    out = pattern - pattern.mean()
    rms = np.sqrt((out * out).mean())
    if rms == 0.0:
        raise CodecError("cannot normalize an all-constant pattern")
    return out / rms


def build_carrier_bank(seed: int, b: int, shape) -> CarrierBank:
    """Generate the carrier bank for (seed, b, shape).

    Carrier i depends only on (seed, i), so prefixes of banks with the
    same seed and shape agree.
    """
    shape = tuple(int(v) for v in shape)
    if b < 1:
        raise CodecError(f"bit count must be >= 1, got {b}")
    if len(shape) != 3 or shape[0] < 8 or shape[1] < 8 or shape[2] < 1:
        raise CodecError(f"shape must be (h >= 8, w >= 8, c >= 1), got {shape}")
    carriers = np.empty((b,) + shape, dtype=np.float64)
    for i in range(b):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        carriers[i] = _normalize(rng.standard_normal(shape))
    return CarrierBank(seed=int(seed), b=int(b), shape=shape, carriers=carriers)


def watermark_from_secret(secret: Secret, bank: CarrierBank) -> SpatialWatermark:
    """Signed carrier sum: (1/sqrt(b)) * sum_i (+-carrier_i) per bit."""
    if len(secret) != bank.b:
        raise CodecError(f"secret length {len(secret)} != bank bit count {bank.b}")
    signs = 2.0 * secret.bits.astype(np.float64) - 1.0
    pattern = np.tensordot(signs, bank.carriers, axes=1) / math.sqrt(bank.b)
    return SpatialWatermark(pattern=pattern, source_secret=secret)


def estimate_watermark_by_averaging(
    secret: Secret,
    bank: CarrierBank,
    images,
    cfg: EmbedConfig | None = None,
) -> SpatialWatermark:
    """Recover the watermark as the mean residual (encrypted - original).

    The 100-image default of the dataset-encryption pipeline is a caller
    convention; any non-empty image set works.  With clipping off this
    equals `watermark_from_secret` exactly.
    """
    if cfg is None:
        cfg = EmbedConfig(strength=1.0, clip=True)
    images = _as_image(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise CodecError("need at least one image")
    if images.shape[1:] != bank.shape:
        raise CodecError(f"image shape {images.shape[1:]} != bank shape {bank.shape}")
    wm = watermark_from_secret(secret, bank)
    residual = np.zeros(bank.shape, dtype=np.float64)
    for img in images:
        residual += embed(img, wm, cfg) - img
    return SpatialWatermark(pattern=residual / images.shape[0], source_secret=secret)


def bilinear_resize(arr: np.ndarray, hw) -> np.ndarray:
    """Bilinear resize of an (h, w) or (h, w, c) array using half-pixel centers."""
    h_out, w_out = int(hw[0]), int(hw[1])
    if h_out < 1 or w_out < 1:
        raise CodecError(f"degenerate resize target {hw}")
    h_in, w_in = arr.shape[:2]
    if (h_in, w_in) == (h_out, w_out):
        return arr.astype(np.float64, copy=True)

    def grid(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0.0, n_in - 1.0)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = x - lo
        return lo, hi, frac

    ylo, yhi, fy = grid(h_out, h_in)
    xlo, xhi, fx = grid(w_out, w_in)
    a = np.asarray(arr, dtype=np.float64)
    top = a[ylo][:, xlo] * (1 - fx)[None, :, None] + a[ylo][:, xhi] * fx[None, :, None] \
        if a.ndim == 3 else a[ylo][:, xlo] * (1 - fx) + a[ylo][:, xhi] * fx
    bot = a[yhi][:, xlo] * (1 - fx)[None, :, None] + a[yhi][:, xhi] * fx[None, :, None] \
        if a.ndim == 3 else a[yhi][:, xlo] * (1 - fx) + a[yhi][:, xhi] * fx
    fy = fy[:, None, None] if a.ndim == 3 else fy[:, None]
    return top * (1 - fy) + bot * fy


def resize_watermark(watermark: SpatialWatermark, target) -> SpatialWatermark:
    """Bilinearly resize the pattern to a (h, w) or (h, w, c) target shape."""
    target = tuple(int(v) for v in target)
    hw = target[:2]
    if hw[0] < 8 or hw[1] < 8:
        raise CodecError(f"degenerate target shape {target}")
    if len(target) == 3 and target[2] != watermark.pattern.shape[2]:
        raise CodecError(f"channel mismatch: {watermark.pattern.shape} -> {target}")
    if hw == watermark.pattern.shape[:2]:
        return SpatialWatermark(pattern=watermark.pattern.copy(), source_secret=watermark.source_secret)
    return SpatialWatermark(
        pattern=bilinear_resize(watermark.pattern, hw),
        source_secret=watermark.source_secret,
    )


def embed(image, watermark: SpatialWatermark, cfg: EmbedConfig) -> np.ndarray:
    """Encrypt: image + strength * watermark (resized if needed), then clip."""
    image = _as_image(image)
    hw = image.shape[-3:-1]
    wm = watermark.pattern
    if wm.shape[:2] != hw:
        wm = resize_watermark(watermark, hw + (wm.shape[2],)).pattern
    if wm.shape[2] != image.shape[-1]:
        raise CodecError(f"channel mismatch: watermark {wm.shape} vs image {image.shape}")
    out = image + cfg.strength * wm
    if cfg.clip:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def embed_dual(
    image,
    w_left: SpatialWatermark,
    w_right: SpatialWatermark,
    cfg: EmbedConfig,
    placement: str = "left-right",
) -> np.ndarray:
    """Embed two watermarks into the two halves of one image.

    `placement` picks the axis and order: "left-right", "right-left",
    "top-bottom", "bottom-top".  The first watermark goes to the first
    named half.  Using the same secret twice is allowed; callers that
    care should compare `source_secret`s.
    """
    image = _as_image(image)
    if image.ndim != 3:
        raise CodecError("embed_dual expects a single (h, w, c) image")
    h, w, _ = image.shape
    if placement in ("left-right", "right-left"):
        if w < 16:
            raise CodecError(f"image width must be >= 16 for dual embedding, got {w}")
        split = (w + 1) // 2
        first, second = (w_left, w_right) if placement == "left-right" else (w_right, w_left)
        out = image.copy()
        out[:, :split] = embed(image[:, :split], first, cfg)
        out[:, split:] = embed(image[:, split:], second, cfg)
        return out
    if placement in ("top-bottom", "bottom-top"):
        if h < 16:
            raise CodecError(f"image height must be >= 16 for dual embedding, got {h}")
        split = (h + 1) // 2
        first, second = (w_left, w_right) if placement == "top-bottom" else (w_right, w_left)
        out = image.copy()
        out[:split] = embed(image[:split], first, cfg)
        out[split:] = embed(image[split:], second, cfg)
        return out
    raise CodecError(f"unknown placement {placement!r}")


def split_halves(image, placement: str = "left-right"):
    """Return the two half-views of an image in watermark order."""
    image = _as_image(image)
    h, w = image.shape[-3:-1]
    if placement in ("left-right", "right-left"):
        split = (w + 1) // 2
        a, b = image[..., :, :split, :], image[..., :, split:, :]
        return (a, b) if placement == "left-right" else (b, a)
    if placement in ("top-bottom", "bottom-top"):
        split = (h + 1) // 2
        a, b = image[..., :split, :, :], image[..., split:, :, :]
        return (a, b) if placement == "top-bottom" else (b, a)
    raise CodecError(f"unknown placement {placement!r}")


def _centered(images: np.ndarray) -> np.ndarray:
    # remove per-channel DC content bias before correlating
    return images - images.mean(axis=(-3, -2), keepdims=True)


def decode_soft(image, bank: CarrierBank) -> np.ndarray:
    """Soft bit estimates in (0, 1).

    soft_i = logistic(gain * mean((image - channel_means) * carrier_i)).
    Accepts one (h, w, c) image or a batch (n, h, w, c); carriers are
    resized to the image shape when they differ.  Differentiable in the
    pixels; see `decode_soft_gradient`.
    """
    image = _as_image(image)
    if image.shape[-3:] != bank.shape:
        bank = bank.resized(image.shape[-3:])
    n = bank.flat.shape[1]
    flat = _centered(image).reshape(-1, n) if image.ndim == 4 else _centered(image).reshape(n)
    corr = flat @ bank.flat.T / n
    return expit(bank.gain * corr)


def decode_soft_gradient(image, bank: CarrierBank, bit: int) -> np.ndarray:
    """Analytic gradient of soft bit `bit` with respect to every pixel."""
    image = _as_image(image)
    if image.ndim != 3:
        raise CodecError("gradient is defined for a single image")
    if bank.shape != image.shape:
        bank = bank.resized(image.shape)
    if not 0 <= bit < bank.b:
        raise CodecError(f"bit index {bit} out of range [0, {bank.b})")
    c = bank.carriers[bit]
    n = c.size
    s = float(decode_soft(image, bank)[bit])
    # d corr / d pixel = (carrier - its channel mean) / n
    return s * (1.0 - s) * bank.gain * (c - c.mean(axis=(0, 1), keepdims=True)) / n


def decode_hard(image, bank: CarrierBank):
    """Threshold soft bits at 0.5; exact ties decode to 0.

    Returns a `Secret` for a single image, a (n, b) uint8 array for a batch.
    """
    soft = decode_soft(image, bank)
    bits = (soft > 0.5).astype(np.uint8)
    if bits.ndim == 1:
        return Secret(bits)
    return bits


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB on the [0, 1] scale; inf if identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise CodecError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


# ---------------------------------------------------------------------------
# file formats

def save_bank(path, bank: CarrierBank) -> None:
    """Write a bank file: text header line, then carriers as LE float32."""
    h, w, c = bank.shape
    header = f"{BANK_MAGIC} {bank.b} {h} {w} {c} {bank.seed}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(bank.carriers.astype("<f4").tobytes())


def load_bank(path) -> CarrierBank:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) != 6 or header[0] != BANK_MAGIC:
            raise CodecError(f"not a {BANK_MAGIC} bank file: {path}")
        b, h, w, c, seed = (int(v) for v in header[1:])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != b * h * w * c:
        raise CodecError(f"bank file truncated: expected {b * h * w * c} floats, got {data.size}")
    carriers = data.astype(np.float64).reshape(b, h, w, c)
    return CarrierBank(seed=seed, b=b, shape=(h, w, c), carriers=carriers)


def save_secrets(path, secrets) -> None:
    """One secret per line as a '0'/'1' string."""
    with open(path, "w", encoding="ascii") as f:
        for s in secrets:
            f.write((s.to_string() if isinstance(s, Secret) else Secret(np.asarray(s)).to_string()) + "\n")


def load_secrets(path) -> list:
    out = []
    with open(path, encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(Secret.from_string(line))
    return out
