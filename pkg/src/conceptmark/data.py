"""Procedural concept datasets and encrypted train/held-out splits.

Each concept is a small procedural image family: a base hue, a texture
frequency/orientation, and a shape motif, with per-image jitter.  Images
of one concept share the hue histogram mode; different concepts get
well-separated hues via golden-ratio spacing.  Datasets are encrypted
with the concept's watermark at a configurable strength and written to
disk as binary PPM/PGM files plus a manifest, which is the single source
of truth for evaluation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import codec
from .codebook import ConceptRegistry

GOLDEN = 0.6180339887498949
MOTIFS = ("disc", "square", "stripes", "triangle")

MANIFEST_NAME = "manifest.csv"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ConceptStyle:
    """Procedural family parameters for one concept."""

    hue: float
    saturation: float
    texture_freq: float
    texture_angle: float
    motif: str
    value_base: float = 0.55


def default_style(concept: int, seed: int = 0) -> ConceptStyle:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x57E1, int(concept)]))
    hue = float((0.11 + GOLDEN * concept + 0.02 * rng.random()) % 1.0)
    return ConceptStyle(
        hue=hue,
        saturation=float(0.62 + 0.18 * rng.random()),
        texture_freq=float(2.0 + (concept * 3) % 7 + rng.random()),
        texture_angle=float(rng.uniform(0.0, np.pi)),
        motif=MOTIFS[concept % len(MOTIFS)],
    )


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [v, q, p, p, t, v])
    g = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [t, v, v, q, p, p])
    b = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def synth_concept_image(
    concept: int,
    style: ConceptStyle,
    shape,
    rng: np.random.Generator,
) -> np.ndarray:
    """One image of the concept's family; jitter comes from `rng`."""
    h, w, c = (int(v) for v in shape)
    if c != 3:
        raise DataError(f"procedural concepts are RGB, got {c} channels")
    yy, xx = np.meshgrid(np.linspace(0, 1, h, endpoint=False), np.linspace(0, 1, w, endpoint=False), indexing="ij")
    angle = style.texture_angle + rng.normal(0.0, 0.08)
    phase = rng.uniform(0.0, 2 * np.pi)
    u = xx * np.cos(angle) + yy * np.sin(angle)
    base = style.value_base + rng.uniform(-0.08, 0.08)
    value = base + 0.18 * np.sin(2 * np.pi * style.texture_freq * u + phase)

    cx, cy = rng.uniform(0.25, 0.75, 2)
    size = rng.uniform(0.12, 0.34)
    if style.motif == "disc":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 < size**2
    elif style.motif == "square":
        mask = (np.abs(xx - cx) < size) & (np.abs(yy - cy) < size)
    elif style.motif == "stripes":
        v2 = xx * np.cos(angle + np.pi / 2) + yy * np.sin(angle + np.pi / 2)
        mask = np.sin(2 * np.pi * (style.texture_freq + 2.0) * v2 + phase) > 0.3
    elif style.motif == "triangle":
        mask = (yy - cy > -size) & (yy - cy < size) & (np.abs(xx - cx) < (yy - cy + size) / 2)
    else:
        raise DataError(f"unknown motif {style.motif!r}")
    value = np.where(mask, value + 0.22, value)

    hue = np.full((h, w), style.hue + rng.normal(0.0, 0.004))
    sat = np.full((h, w), np.clip(style.saturation + rng.normal(0.0, 0.03), 0.45, 0.95))
    img = hsv_to_rgb(hue, sat, np.clip(value, 0.08, 0.95))
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class DatasetEntry:
    image: np.ndarray = field(repr=False)  # encrypted pixels in [0, 1]
    concept: int
    concept2: int | None
    split: str  # "train" | "heldout"
    index: int
    path: str = ""


@dataclass(frozen=True)
class EncryptedDataset:
    entries: list
    shape: tuple
    strength: float
    dual: bool = False
    placement: str = "left-right"
    seed: int = 0

    def train(self) -> list:
        return [e for e in self.entries if e.split == "train"]

    def heldout(self) -> list:
        return [e for e in self.entries if e.split == "heldout"]

    def images(self, entries=None) -> np.ndarray:
        entries = self.entries if entries is None else entries
        return np.stack([e.image for e in entries])


def _split_counts(per_concept: int, heldout_fraction: float) -> tuple[int, int]:
    n_held = max(1, int(round(per_concept * heldout_fraction)))
    n_train = per_concept - n_held
    if n_train < 1:
        raise DataError(f"per_concept={per_concept} leaves an empty train split")
    return n_train, n_held


def build_encrypted_dataset(
    bank: codec.CarrierBank,
    registry: ConceptRegistry,
    per_concept: int,
    shape,
    strength: float,
    seed: int = 0,
    dual: bool = False,
    registry2: ConceptRegistry | None = None,
    placement: str = "left-right",
    clip: bool = True,
    heldout_fraction: float = 0.1,
    styles=None,
) -> EncryptedDataset:
    """Synthesize, encrypt, and split a concept dataset.

    Single mode: one watermark per concept, `per_concept` images each.
    Dual mode: concepts are (registry x registry2) pairs; each image
    carries both watermarks, one per half, `per_concept` images per pair.
    """
    if per_concept < 2:
        raise DataError(f"per_concept must be >= 2, got {per_concept}")
    shape = tuple(int(v) for v in shape)
    cfg = codec.EmbedConfig(strength=strength, clip=clip)
    n_train, n_held = _split_counts(per_concept, heldout_fraction)

    def style_for(concept):
        if styles is not None and concept in styles:
            return styles[concept]
        return default_style(concept, seed)

    watermarks = {j: codec.watermark_from_secret(registry.secret(j), bank) for j in range(registry.n_concepts)}
    if dual:
        if registry2 is None:
            raise DataError("dual mode needs a second registry")
        watermarks2 = {j: codec.watermark_from_secret(registry2.secret(j), bank) for j in range(registry2.n_concepts)}
        pairs = [(a, b) for a in range(registry.n_concepts) for b in range(registry2.n_concepts)]
    else:
        pairs = [(a, None) for a in range(registry.n_concepts)]

    entries = []
    index = 0
    for pair_id, (c1, c2) in enumerate(pairs):
        style = style_for(c1)
        if dual:
            # media concept sets hue/texture, content concept sets the motif
            content = default_style(c2, seed + 1)
            style = replace(style, motif=content.motif, texture_freq=content.texture_freq)
        for i in range(per_concept):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A, pair_id, i]))
            img = synth_concept_image(c1, style, shape, rng)
            if dual:
                enc = codec.embed_dual(img, watermarks[c1], watermarks2[c2], cfg, placement=placement)
            else:
                enc = codec.embed(img, watermarks[c1], cfg)
            entries.append(
                DatasetEntry(
                    image=enc,
                    concept=c1,
                    concept2=c2,
                    split="train" if i < n_train else "heldout",
                    index=index,
                )
            )
            index += 1
    return EncryptedDataset(
        entries=entries,
        shape=shape,
        strength=float(strength),
        dual=dual,
        placement=placement,
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# PPM/PGM + manifest persistence

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 (RGB) or P5 (gray) at maxval 255."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if q.ndim == 2 else b"P6"
    if q.ndim == 3 and q.shape[2] != 3:
        raise DataError(f"PPM supports 1 or 3 channels, got shape {image.shape}")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (q.shape[1], q.shape[0]))
        f.write(q.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataError(f"unsupported PPM/PGM variant in {path}")
    c = 3 if magic == b"P6" else 1
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * c, offset=pos)
    img = raw.reshape(h, w, c).astype(np.float64) / 255.0
    return img


def write_dataset(dataset: EncryptedDataset, outdir) -> str:
    """Persist images + manifest; returns the manifest path."""
    outdir = str(outdir)
    img_dir = os.path.join(outdir, "images")
    os.makedirs(img_dir, exist_ok=True)
    lines = [
        f"# shape: {dataset.shape[0]} {dataset.shape[1]} {dataset.shape[2]}",
        f"# dual: {int(dataset.dual)}",
        f"# placement: {dataset.placement}",
        f"# seed: {dataset.seed}",
        "path,concept,concept2,split,strength",
    ]
    for e in dataset.entries:
        rel = os.path.join("images", f"img_{e.index:06d}.ppm")
        write_ppm(os.path.join(outdir, rel), e.image)
        c2 = "" if e.concept2 is None else str(e.concept2)
        lines.append(f"{rel},{e.concept},{c2},{e.split},{dataset.strength:g}")
    manifest = os.path.join(outdir, MANIFEST_NAME)
    with open(manifest, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


def load_dataset(directory) -> EncryptedDataset:
    directory = str(directory)
    manifest = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise DataError(f"no {MANIFEST_NAME} in {directory}")
    meta = {"shape": None, "dual": "0", "placement": "left-right", "seed": "0"}
    entries = []
    strength = None
    with open(manifest, encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = val.strip()
                continue
            if line.startswith("path,"):
                continue
            path, concept, concept2, split, m = line.split(",")
            img = read_ppm(os.path.join(directory, path))
            entries.append(
                DatasetEntry(
                    image=img,
                    concept=int(concept),
                    concept2=int(concept2) if concept2 else None,
                    split=split,
                    index=len(entries),
                    path=path,
                )
            )
            strength = float(m)
    if not entries:
        raise DataError(f"empty manifest: {manifest}")
    shape = tuple(int(v) for v in meta["shape"].split()) if meta["shape"] else entries[0].image.shape
    return EncryptedDataset(
        entries=entries,
        shape=shape,
        strength=strength,
        dual=bool(int(meta["dual"])),
        placement=meta["placement"],
        seed=int(meta["seed"]),
    )
