"""Correlation-based attribution baseline.

Attributes a query image to the concept of its nearest training image
under cosine similarity of a hand-rolled feature: an 8x8 block-averaged
luminance map concatenated with per-channel 16-bin histograms, all
L2-normalized.  Exists to contrast visual-similarity matching with the
watermark decoder: concepts that share color statistics confuse this
baseline while the causal path stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FEATURE_DIM = 8 * 8 + 3 * 16


class BaselineError(ValueError):
    pass


def _block_mean(channel: np.ndarray, out_h: int = 8, out_w: int = 8) -> np.ndarray:
    h, w = channel.shape
    ys = (np.arange(out_h + 1) * h) // out_h
    xs = (np.arange(out_w + 1) * w) // out_w
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            out[i, j] = channel[ys[i] : ys[i + 1], xs[j] : xs[j + 1]].mean()
    return out


def embed_feature(image) -> np.ndarray:
    """112-dim L2-normalized feature: 8x8 luminance + 3x16-bin histograms."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise BaselineError(f"expected (h, w, 3) image, got {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise BaselineError(f"image too small for 8x8 pooling: {image.shape}")
    luma = 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
    parts = [_block_mean(luma).ravel()]
    for ch in range(3):
        hist, _ = np.histogram(np.clip(image[..., ch], 0.0, 1.0), bins=16, range=(0.0, 1.0))
        parts.append(hist / image[..., ch].size)
    vec = np.concatenate(parts)
    return vec / np.linalg.norm(vec)


@dataclass(frozen=True)
class FeatureIndex:
    vectors: np.ndarray = field(repr=False)  # (n, FEATURE_DIM) float32, unit norm
    labels: np.ndarray  # (n,) concept ids

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.labels.shape[0]:
            raise BaselineError("vectors and labels disagree")
        self.vectors.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.vectors.shape[0])


def build_index(images, labels) -> FeatureIndex:
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise BaselineError("cannot build an empty index")
    vectors = np.stack([embed_feature(img) for img in images]).astype(np.float32)
    return FeatureIndex(vectors=vectors, labels=labels)


def nearest_concept(query_image, index: FeatureIndex):
    """(concept id, cosine) of the max-cosine training vector; ties take
    the lowest vector index."""
    if index.n == 0:
        raise BaselineError("empty index")
    q = embed_feature(query_image).astype(np.float32)
    cosines = index.vectors @ q
    best = int(cosines.argmax())
    return int(index.labels[best]), float(cosines[best])


def save_index(path_vectors, path_labels, index: FeatureIndex) -> None:
    """Flat binary of 32-bit floats plus a text sidecar of labels."""
    with open(path_vectors, "wb") as f:
        f.write(index.vectors.astype("<f4").tobytes())
    with open(path_labels, "w", encoding="ascii") as f:
        for label in index.labels:
            f.write(f"{int(label)}\n")


def load_index(path_vectors, path_labels) -> FeatureIndex:
    labels = np.array([int(line) for line in open(path_labels, encoding="ascii") if line.strip()])
    raw = np.fromfile(path_vectors, dtype="<f4")
    if labels.size == 0 or raw.size % labels.size:
        raise BaselineError("index files disagree in length")
    vectors = raw.reshape(labels.size, -1)
    if vectors.shape[1] != FEATURE_DIM:
        raise BaselineError(f"unexpected feature dimension {vectors.shape[1]}")
    return FeatureIndex(vectors=vectors.copy(), labels=labels)
