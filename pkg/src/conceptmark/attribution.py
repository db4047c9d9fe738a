"""Causal concept attribution and its evaluation protocols.

A decoded secret is attributed to the registered concept whose secret
agrees with it in the most bit positions.  A binomial null rule flags
images whose best agreement is consistent with an unwatermarked decode:
chance agreement is b/2 with standard deviation sqrt(b)/2, so anything
below b/2 + 2*sqrt(b) is marked as carrying no registered watermark.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import codec, diffusion
from .codebook import ConceptRegistry
from .codec import CarrierBank, Secret

EVAL_BATCH = 128


class AttributionError(ValueError):
    pass


def default_null_margin(b: int) -> float:
    return 2.0 * math.sqrt(b)


@dataclass(frozen=True)
class AttributionResult:
    predicted: int
    agreement: int
    bit_accuracy: float
    margin: int
    null_flag: bool


@dataclass(frozen=True)
class Row:
    path: str
    truth: int | None
    result: AttributionResult


@dataclass
class EvalReport:
    """Aggregate attribution outcomes over one image set."""

    rows: list
    b: int
    overall_accuracy: float | None = field(init=False)
    mean_bit_accuracy: float = field(init=False)
    per_concept: dict = field(init=False)
    confusion: dict = field(init=False)
    null_rate: float = field(init=False)

    def __post_init__(self):
        n = len(self.rows)
        if n == 0:
            raise AttributionError("empty evaluation set")
        self.mean_bit_accuracy = float(np.mean([r.result.bit_accuracy for r in self.rows]))
        self.null_rate = float(np.mean([r.result.null_flag for r in self.rows]))
        self.per_concept = {}
        self.confusion = {}
        with_truth = [r for r in self.rows if r.truth is not None]
        if with_truth:
            correct = sum(r.result.predicted == r.truth for r in with_truth)
            self.overall_accuracy = correct / len(with_truth)
            for r in with_truth:
                ok, total = self.per_concept.get(r.truth, (0, 0))
                self.per_concept[r.truth] = (ok + (r.result.predicted == r.truth), total + 1)
                key = (r.truth, r.result.predicted)
                self.confusion[key] = self.confusion.get(key, 0) + 1
        else:
            self.overall_accuracy = None
            for r in self.rows:
                key = (-1, r.result.predicted)
                self.confusion[key] = self.confusion.get(key, 0) + 1

    @property
    def n(self) -> int:
        return len(self.rows)


@dataclass
class DualEvalReport:
    media: EvalReport
    content: EvalReport
    combined_accuracy: float | None

    @property
    def n(self) -> int:
        return self.media.n


def agreement(s_hat: Secret, s_j: Secret) -> int:
    """Count of equal bit positions; equals b - HammingDistance."""
    if len(s_hat) != len(s_j):
        raise AttributionError(f"secret lengths differ: {len(s_hat)} vs {len(s_j)}")
    return int((s_hat.bits == s_j.bits).sum())


def agreements_matrix(bits: np.ndarray, secrets: np.ndarray) -> np.ndarray:
    """(n_images, n_concepts) agreement counts via two matmuls."""
    a = bits.astype(np.float32)
    s = secrets.astype(np.float32)
    agree = a @ s.T + (1.0 - a) @ (1.0 - s.T)
    return np.rint(agree).astype(np.int64)


def _result_from_agreements(agrees: np.ndarray, b: int, null_margin: float) -> AttributionResult:
    best = int(agrees.argmax())  # argmax takes the lowest index on ties
    top = int(agrees[best])
    if agrees.size > 1:
        rest = np.delete(agrees, best)
        margin = top - int(rest.max())
    else:
        margin = top
    return AttributionResult(
        predicted=best,
        agreement=top,
        bit_accuracy=top / b,
        margin=margin,
        null_flag=top < b / 2.0 + null_margin,
    )


def attribute(s_hat: Secret, registry: ConceptRegistry, null_margin: float | None = None) -> AttributionResult:
    """Argmax-agreement concept; ties break to the lowest concept index."""
    if len(s_hat) != registry.b:
        raise AttributionError(f"secret length {len(s_hat)} != registry b {registry.b}")
    if null_margin is None:
        null_margin = default_null_margin(registry.b)
    agrees = agreements_matrix(s_hat.bits[None, :], registry.secrets)[0]
    return _result_from_agreements(agrees, registry.b, null_margin)


def attribute_bits(bits: np.ndarray, registry: ConceptRegistry, null_margin: float | None = None) -> list:
    """Vectorized attribution of a (n, b) hard-bit array."""
    if null_margin is None:
        null_margin = default_null_margin(registry.b)
    agrees = agreements_matrix(bits, registry.secrets)
    return [_result_from_agreements(agrees[i], registry.b, null_margin) for i in range(bits.shape[0])]


def attribute_image(image, bank: CarrierBank, registry: ConceptRegistry,
                    null_margin: float | None = None) -> AttributionResult:
    """Decode hard bits, then attribute."""
    decoded = codec.decode_hard(image, bank)
    if isinstance(decoded, Secret):
        return attribute(decoded, registry, null_margin)
    return attribute_bits(decoded, registry, null_margin)


def attribute_dual(image, bank: CarrierBank, registry_media: ConceptRegistry,
                   registry_content: ConceptRegistry, placement: str = "left-right",
                   null_margin: float | None = None):
    """Independent attribution of the two half watermarks."""
    first, second = codec.split_halves(image, placement)
    return (
        attribute_image(first, bank, registry_media, null_margin),
        attribute_image(second, bank, registry_content, null_margin),
    )


# ---------------------------------------------------------------------------
# evaluation protocols

def _rows(entries, results, truths) -> list:
    return [
        Row(path=e.path or f"index:{e.index}", truth=t, result=r)
        for e, r, t in zip(entries, results, truths)
    ]


def evaluate_codec(dataset, bank: CarrierBank, registry: ConceptRegistry,
                   registry2: ConceptRegistry | None = None, entries=None,
                   null_margin: float | None = None):
    """Codec-only attribution of already-encrypted images (no model)."""
    entries = list(dataset.entries if entries is None else entries)
    if not entries:
        raise AttributionError("no entries to evaluate")
    images = np.stack([e.image for e in entries])
    if dataset.dual:
        if registry2 is None:
            raise AttributionError("dual dataset needs both registries")
        first, second = codec.split_halves(images, dataset.placement)
        res_m = attribute_bits(codec.decode_hard(np.ascontiguousarray(first), bank), registry, null_margin)
        res_c = attribute_bits(codec.decode_hard(np.ascontiguousarray(second), bank), registry2, null_margin)
        media = EvalReport(_rows(entries, res_m, [e.concept for e in entries]), registry.b)
        content = EvalReport(_rows(entries, res_c, [e.concept2 for e in entries]), registry2.b)
        both = np.mean([
            (m.result.predicted == m.truth) and (c.result.predicted == c.truth)
            for m, c in zip(media.rows, content.rows)
        ])
        return DualEvalReport(media=media, content=content, combined_accuracy=float(both))
    results = attribute_bits(codec.decode_hard(images, bank), registry, null_margin)
    return EvalReport(_rows(entries, results, [e.concept for e in entries]), registry.b)


def evaluate_heldout(model, schedule: diffusion.NoiseSchedule, dataset, bank: CarrierBank,
                     registry: ConceptRegistry, t_range=None, seed: int = 0,
                     latent_codec=None, registry2: ConceptRegistry | None = None,
                     conditional: bool = False, null_margin: float | None = None):
    """Held-out protocol: forward-noise each already-encrypted held-out
    image to a random step, run the deterministic reverse chain, decode
    the secret, attribute."""
    latent_codec = latent_codec or diffusion.IdentityCodec()
    entries = dataset.heldout()
    if not entries:
        raise AttributionError("dataset has no held-out entries")
    lo, hi = (1, schedule.T) if t_range is None else (int(t_range[0]), int(t_range[1]))
    if not 1 <= lo <= hi <= schedule.T:
        raise AttributionError(f"t_range {t_range} outside [1, {schedule.T}]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE7A1]))
    model.eval()

    decoded_bits = []
    for start in range(0, len(entries), EVAL_BATCH):
        chunk = entries[start : start + EVAL_BATCH]
        images = np.stack([e.image for e in chunk]).astype(np.float32).transpose(0, 3, 1, 2)
        with torch.no_grad():
            z0 = latent_codec.encode(torch.from_numpy(images))
        t = rng.integers(lo, hi + 1, len(chunk))
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        z_t = diffusion.q_sample(schedule, z0, torch.from_numpy(t), torch.from_numpy(eps))
        cond = torch.tensor([e.concept for e in chunk]) if conditional else None
        z_hat = diffusion.denoise_from(
            model, schedule, z_t, t, deterministic=True, cond=cond,
            clip_bounds=getattr(latent_codec, "bounds", None),
        )
        with torch.no_grad():
            out = latent_codec.decode(z_hat).clamp(0.0, 1.0)
        decoded_bits.append(out.permute(0, 2, 3, 1).numpy().astype(np.float64))
    recon = np.concatenate(decoded_bits)

    if dataset.dual:
        if registry2 is None:
            raise AttributionError("dual dataset needs both registries")
        first, second = codec.split_halves(recon, dataset.placement)
        res_m = attribute_bits(codec.decode_hard(np.ascontiguousarray(first), bank), registry, null_margin)
        res_c = attribute_bits(codec.decode_hard(np.ascontiguousarray(second), bank), registry2, null_margin)
        media = EvalReport(_rows(entries, res_m, [e.concept for e in entries]), registry.b)
        content = EvalReport(_rows(entries, res_c, [e.concept2 for e in entries]), registry2.b)
        both = np.mean([
            (m.result.predicted == m.truth) and (c.result.predicted == c.truth)
            for m, c in zip(media.rows, content.rows)
        ])
        return DualEvalReport(media=media, content=content, combined_accuracy=float(both))
    results = attribute_bits(codec.decode_hard(recon, bank), registry, null_margin)
    return EvalReport(_rows(entries, results, [e.concept for e in entries]), registry.b)


def evaluate_sampled(model, schedule: diffusion.NoiseSchedule, registry: ConceptRegistry,
                     per_class: int, conditional: bool, bank: CarrierBank, image_shape,
                     seed: int = 0, latent_codec=None, null_margin: float | None = None) -> EvalReport:
    """Attribution of freshly sampled images.

    Conditional mode scores the attributed concept against the
    conditioning label; unconditional mode reports the attribution
    distribution and null rate (no ground truth).
    """
    n = registry.n_concepts * per_class
    labels = np.repeat(np.arange(registry.n_concepts), per_class) if conditional else None
    rows = []
    for start in range(0, n, EVAL_BATCH):
        count = min(EVAL_BATCH, n - start)
        cond = labels[start : start + count] if conditional else None
        images = diffusion.sample(
            model, schedule, count, image_shape, cond=cond,
            seed=seed + start, latent_codec=latent_codec,
        )
        results = attribute_bits(codec.decode_hard(images, bank), registry, null_margin)
        for i, r in enumerate(results):
            truth = int(labels[start + i]) if conditional else None
            rows.append(Row(path=f"sample:{start + i}", truth=truth, result=r))
    return EvalReport(rows, registry.b)


# ---------------------------------------------------------------------------
# report emission

def _summary_lines(report: EvalReport, prefix: str = "") -> list:
    acc = "n/a" if report.overall_accuracy is None else f"{report.overall_accuracy:.6f}"
    lines = [
        f"summary{prefix}, images, {report.n}",
        f"summary{prefix}, overall_accuracy, {acc}",
        f"summary{prefix}, mean_bit_accuracy, {report.mean_bit_accuracy:.6f}",
        f"summary{prefix}, null_rate, {report.null_rate:.6f}",
    ]
    for concept in sorted(report.per_concept):
        ok, total = report.per_concept[concept]
        lines.append(f"summary{prefix}, concept_{concept}_accuracy, {ok / total:.6f} ({ok}/{total})")
    for (truth, pred), count in sorted(report.confusion.items()):
        if truth != pred:
            lines.append(f"summary{prefix}, confusion, true={truth}, predicted={pred}, count={count}")
    return lines


def report_lines(report, header_comments=()) -> list:
    """Structured-text report: one record per image plus a summary block."""
    now = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    lines = [f"# generated-at: {now}"]
    lines += [f"# {c}" for c in header_comments]
    if isinstance(report, DualEvalReport):
        lines.append("path,true_media,true_content,pred_media,pred_content,"
                     "agree_media,agree_content,margin_media,margin_content,null_media,null_content")
        for m, c in zip(report.media.rows, report.content.rows):
            rm, rc = m.result, c.result
            lines.append(
                f"{m.path},{m.truth},{c.truth},{rm.predicted},{rc.predicted},"
                f"{rm.agreement},{rc.agreement},{rm.margin},{rc.margin},"
                f"{int(rm.null_flag)},{int(rc.null_flag)}"
            )
        lines += _summary_lines(report.media, prefix="_media")
        lines += _summary_lines(report.content, prefix="_content")
        combined = "n/a" if report.combined_accuracy is None else f"{report.combined_accuracy:.6f}"
        lines.append(f"summary, combined_accuracy, {combined}")
    else:
        lines.append("path,true,predicted,agreement,margin,null_flag")
        for r in report.rows:
            truth = "" if r.truth is None else r.truth
            res = r.result
            lines.append(
                f"{r.path},{truth},{res.predicted},{res.agreement},{res.margin},{int(res.null_flag)}"
            )
        lines += _summary_lines(report)
    return lines


def write_report(path, report, header_comments=()) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(report_lines(report, header_comments)) + "\n")
