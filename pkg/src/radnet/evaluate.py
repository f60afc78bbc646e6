"""Slice-to-CT aggregation, confusion counts, metrics and the rater comparison report."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, UsageError
from .io import read_csv, write_csv
from .model import RadnetConfig, RadnetParams, crop, forward, pad_to_multiple
from .sequences import batch_sequences

log = logging.getLogger(__name__)

TRUTH_HEADER = ("volume_id", "label")
SLICE_PRED_HEADER = ("volume_id", "slice_index", "prob", "pred")
REPORT_HEADER = ("rater", "accuracy", "recall", "precision", "f1", "n")


class SlicePredictions(NamedTuple):
    probs: np.ndarray
    preds: np.ndarray
    seg_logits: tuple[np.ndarray, ...] | None


def predict_volume(
    params: RadnetParams,
    cfg: RadnetConfig,
    volume: np.ndarray,
    seq_len: int = 8,
    stride: int | None = None,
    threshold: float = 0.5,
    with_seg: bool = False,
) -> SlicePredictions:
    """Eval-mode predictions for every slice of a normalized ``[Z, H, W]`` volume.

    Each slice takes its prediction from the window in which it sits closest
    to the centre; ties go to the earlier window.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DataError(f"predict_volume expects [Z, H, W], got {volume.shape}")
    Z, H, W = volume.shape
    padded, offset = pad_to_multiple(volume.astype(T.get_dtype(), copy=False))
    probs = np.zeros(Z)
    seg = [np.zeros((Z, H, W), dtype=np.float32) for _ in range(3)] if with_seg else None
    best = np.full(Z, np.inf)
    centre = (seq_len - 1) / 2
    with T.no_grad():
        for window in batch_sequences(Z, seq_len, stride):
            x = T.Tensor(padded[list(window.indices)][:, None])
            out = forward(params, cfg, x, mode="eval")
            p1 = T.softmax_array(out.cls_logits.data.astype(np.float64))[:, 1]
            for pos, z in enumerate(window.indices[:window.n_real]):
                dist = abs(pos - centre)
                if dist < best[z]:
                    best[z] = dist
                    probs[z] = p1[pos]
                    if seg is not None:
                        for s, logits in zip(seg, out.seg_logits):
                            s[z] = crop(logits.data[pos, 0], offset, (H, W))
    preds = (probs >= threshold).astype(np.int64)
    return SlicePredictions(probs, preds, tuple(seg) if seg is not None else None)


def max_run(bits: Sequence[int]) -> int:
    best = run = 0
    for b in bits:
        run = run + 1 if b else 0
        best = max(best, run)
    return best


def aggregate_ct(slice_preds: Sequence[int], min_run: int = 3) -> int:
    """1 iff at least ``min_run`` consecutive slices are predicted positive."""
    if min_run < 1:
        raise UsageError(f"min_run must be >= 1, got {min_run}")
    bits = np.asarray(slice_preds, dtype=np.int64).reshape(-1)
    if bits.size == 0:
        log.warning("aggregate_ct called with no slices; returning 0")
        return 0
    if bits.size < min_run:
        return 0
    # a window sum of min_run equals min_run exactly where a long-enough run sits
    window = np.convolve(bits != 0, np.ones(min_run, dtype=np.int64), mode="valid")
    return int(np.any(window == min_run))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int
    missing: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_pairs(items, what: str) -> dict[str, int]:
    if isinstance(items, Mapping):
        items = items.items()
    out: dict[str, int] = {}
    for vid, label in items:
        if vid in out:
            raise DataError(f"duplicate volume id {vid!r} in {what}")
        if int(label) not in (0, 1):
            raise DataError(f"label for {vid!r} in {what} must be 0 or 1, got {label!r}")
        out[vid] = int(label)
    return out


def confusion(preds, truths) -> ConfusionMatrix:
    """Join predictions and ground truth by volume id.

    Truth ids without a prediction are listed in ``missing`` and not counted.
    """
    pred = _as_pairs(preds, "predictions")
    truth = _as_pairs(truths, "ground truth")
    extra = sorted(set(pred) - set(truth))
    if extra:
        log.warning("ignoring %d predicted ids absent from the ground truth: %s", len(extra), extra[:5])
    tp = fp = fn = tn = 0
    missing = []
    for vid, t in truth.items():
        if vid not in pred:
            missing.append(vid)
            continue
        p = pred[vid]
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    if missing:
        log.warning("%d ground-truth ids have no prediction", len(missing))
    return ConfusionMatrix(tp, fp, fn, tn, tuple(sorted(missing)))


def _ratio(num: int, den: int) -> tuple[Fraction, bool]:
    if den == 0:
        return Fraction(0), True
    return Fraction(num, den), False


@dataclass(frozen=True)
class MetricsRow:
    accuracy: Fraction
    recall: Fraction
    precision: Fraction
    f1: Fraction
    undefined: tuple[str, ...] = ()

    def percent(self) -> dict[str, str]:
        return {name: format_percent(getattr(self, name)) for name in ("accuracy", "recall", "precision", "f1")}


def metrics(cm: ConfusionMatrix) -> MetricsRow:
    """Exact rational metrics; 0/0 ratios are reported as 0 and flagged in ``undefined``."""
    if cm.n == 0:
        raise UsageError("metrics of an empty confusion matrix")
    undefined = []
    accuracy = Fraction(cm.tp + cm.tn, cm.n)
    recall, bad = _ratio(cm.tp, cm.tp + cm.fn)
    if bad:
        undefined.append("recall")
    precision, bad = _ratio(cm.tp, cm.tp + cm.fp)
    if bad:
        undefined.append("precision")
    if precision + recall == 0:
        f1 = Fraction(0)
        undefined.append("f1")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricsRow(accuracy, recall, precision, f1, tuple(undefined))


def format_percent(x: Fraction) -> str:
    """Percent with two decimals, rounding exact halves up."""
    hundredths = math.floor(Fraction(x) * 10000 + Fraction(1, 2))
    return f"{hundredths // 100}.{hundredths % 100:02d}"


class ReportRow(NamedTuple):
    rater: str
    metrics: MetricsRow
    n: int
    missing: tuple[str, ...]


def benchmark_report(model_preds, truth, raters: Mapping[str, object] | None = None,
                     model_name: str = "RADnet") -> list[ReportRow]:
    """One row per rater followed by the model row, each scored against ``truth``."""
    rows = []
    for name, preds in (raters or {}).items():
        cm = confusion(preds, truth)
        rows.append(ReportRow(name, metrics(cm), cm.n, cm.missing))
    cm = confusion(model_preds, truth)
    rows.append(ReportRow(model_name, metrics(cm), cm.n, cm.missing))
    return rows


def write_report(rows: Iterable[ReportRow], path: str | Path) -> None:
    write_csv(path, REPORT_HEADER, [
        (r.rater, *(r.metrics.percent()[k] for k in REPORT_HEADER[1:5]), r.n) for r in rows
    ])


def format_report(rows: Sequence[ReportRow]) -> str:
    names = [r.rater for r in rows]
    width = max(10, *(len(n) for n in names)) + 2
    lines = [f"{'':<11}" + "".join(f"{n:>{width}}" for n in names)]
    for metric, label in (("accuracy", "Accuracy"), ("recall", "Recall"),
                          ("precision", "Precision"), ("f1", "F1 score")):
        cells = "".join(f"{r.metrics.percent()[metric] + '%':>{width}}" for r in rows)
        lines.append(f"{label:<11}{cells}")
    lines.append(f"{'N':<11}" + "".join(f"{r.n:>{width}}" for r in rows))
    return "\n".join(lines)


def read_labels_csv(path: str | Path) -> dict[str, int]:
    return _as_pairs(((r["volume_id"], int(r["label"])) for r in read_csv(path, TRUTH_HEADER)), str(path))


def write_slice_predictions(path: str | Path, predictions: Mapping[str, SlicePredictions]) -> None:
    rows = []
    for vid, sp in predictions.items():
        rows.extend((vid, z, f"{p:.6f}", int(b)) for z, (p, b) in enumerate(zip(sp.probs, sp.preds)))
    write_csv(path, SLICE_PRED_HEADER, rows)


def read_slice_predictions(path: str | Path) -> dict[str, list[int]]:
    """Binary slice predictions per volume, ordered by slice index."""
    per_volume: dict[str, dict[int, int]] = {}
    for row in read_csv(path, SLICE_PRED_HEADER):
        slices = per_volume.setdefault(row["volume_id"], {})
        z = int(row["slice_index"])
        if z in slices:
            raise DataError(f"duplicate slice {z} for {row['volume_id']} in {path}")
        slices[z] = int(row["pred"])
    return {vid: [s[z] for z in sorted(s)] for vid, s in per_volume.items()}


def ct_predictions(slice_preds: Mapping[str, Sequence[int]], min_run: int = 3) -> dict[str, int]:
    return {vid: aggregate_ct(bits, min_run) for vid, bits in slice_preds.items()}


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & truth).sum()) / total
