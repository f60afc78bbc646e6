"""SGD training loop, augmentation, class balancing and RCKPT1 checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .dataset import Case
from .errors import ConfigError, DataError, DivergenceError, FormatError, ShapeError, UsageError
from .evaluate import predict_volume
from .io import dump_header, write_csv
from .model import RadnetConfig, RadnetParams, build_radnet, forward, loss_terms, pad_to_multiple
from .preprocess import bilinear_sample, nearest_sample, window_normalize
from .sequences import SliceSequence, batch_sequences

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "Checkpoint", "lr_at_epoch", "sgd_step", "augment", "apply_transform",
    "batch_sequences", "SliceSequence", "train", "recalibrate_bn", "save_checkpoint", "load_checkpoint",
    "LOG_HEADER",
]

LOG_HEADER = ("epoch", "lr", "total_loss", "cls_loss", "aux1_loss", "aux2_loss", "aux3_loss",
              "train_acc", "val_acc")
CKPT_MAGIC = b"RCKPT1\n"


@dataclass
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    epochs: int = 60
    decay_epochs: tuple[int, int] | None = None
    seq_len: int = 8
    seq_stride: int | None = None
    rotation_max_deg: float = 15.0
    flip_prob: float = 0.5
    seed: int = 0
    balance_classes: bool = True
    recalibrate_bn: bool = True
    seqs_per_batch: int = 2

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.seq_len < 3:
            raise ConfigError("seq_len must be >= 3 so a window can hold a 3-slice run")
        stride = self.stride
        if not 1 <= stride <= self.seq_len:
            raise ConfigError(f"seq_stride must lie in [1, seq_len], got {stride}")
        if self.decay_epochs is not None:
            self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
            if len(self.decay_epochs) != 2 or not 0 < self.decay_epochs[0] <= self.decay_epochs[1]:
                raise ConfigError(f"decay_epochs must be two increasing positive epochs, got {self.decay_epochs}")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if self.rotation_max_deg < 0:
            raise ConfigError("rotation_max_deg must be >= 0")
        if self.seqs_per_batch < 1:
            raise ConfigError("seqs_per_batch must be >= 1")

    @property
    def stride(self) -> int:
        return self.seq_len if self.seq_stride is None else self.seq_stride

    @property
    def boundaries(self) -> tuple[int, int]:
        if self.decay_epochs is not None:
            return self.decay_epochs
        return round(self.epochs / 3), round(2 * self.epochs / 3)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.decay_epochs is not None:
            d["decay_epochs"] = list(self.decay_epochs)
        return d


def lr_at_epoch(e: int, cfg: TrainConfig) -> float:
    """Step schedule: lr0, then lr0/10 and lr0/100 after one and two thirds of training."""
    if not 0 <= e < cfg.epochs:
        raise UsageError(f"epoch {e} outside [0, {cfg.epochs})")
    first, second = cfg.boundaries
    if e < first:
        return cfg.lr0
    if e < second:
        return cfg.lr0 / 10
    return cfg.lr0 / 100


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float) -> tuple[np.ndarray, np.ndarray]:
    """Classical momentum: ``v' = momentum*v - lr*grad``, ``w' = w + v'``."""
    if not (param.shape == grad.shape == velocity.shape):
        raise ShapeError(f"sgd_step: shapes {param.shape}, {grad.shape}, {velocity.shape} differ")
    v = momentum * velocity - lr * grad
    return param + v, v


# ---------------------------------------------------------------------------
# augmentation


def apply_transform(images: np.ndarray, masks: np.ndarray, theta_deg: float,
                    flip: bool) -> tuple[np.ndarray, np.ndarray]:
    """Rotate about the image centre by ``theta_deg`` then optionally mirror left-right.

    Works on single slices ``[H, W]`` or stacks ``[..., H, W]``; images are
    interpolated bilinearly, masks by nearest neighbour, with zero fill.
    """
    if images.shape != masks.shape:
        raise ShapeError(f"image shape {images.shape} != mask shape {masks.shape}")
    out_img, out_mask = images, masks
    if theta_deg != 0:
        H, W = images.shape[-2:]
        cy, cx = (H - 1) / 2, (W - 1) / 2
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        c, s = math.cos(math.radians(theta_deg)), math.sin(math.radians(theta_deg))
        ys = cy + c * (yy - cy) + s * (xx - cx)
        xs = cx - s * (yy - cy) + c * (xx - cx)
        out_img = bilinear_sample(images, ys, xs).astype(images.dtype)
        out_mask = nearest_sample(masks, ys, xs)
    if flip:
        out_img = out_img[..., ::-1]
        out_mask = out_mask[..., ::-1]
    return np.ascontiguousarray(out_img), np.ascontiguousarray(out_mask)


def draw_transform(rng: np.random.Generator, rotation_max_deg: float = 15.0,
                   flip_prob: float = 0.5) -> tuple[float, bool]:
    theta = float(rng.uniform(-rotation_max_deg, rotation_max_deg))
    flip = bool(rng.random() < flip_prob)
    return theta, flip


def augment(slice_: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            rotation_max_deg: float = 15.0, flip_prob: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random rotation/flip, shared by the image and its mask."""
    theta, flip = draw_transform(rng, rotation_max_deg, flip_prob)
    return apply_transform(slice_, mask, theta, flip)


# ---------------------------------------------------------------------------
# training data


class _Prepared(NamedTuple):
    volume_id: str
    images: np.ndarray
    masks: np.ndarray
    labels: np.ndarray


def model_input(case: Case) -> np.ndarray:
    """Normalized ``[Z, H, W]`` float32 voxels (HU volumes are windowed first)."""
    vol = window_normalize(case.volume) if case.volume.kind == "hu" else case.volume
    if vol.kind != "normalized":
        raise DataError(f"{case.volume_id}: cannot train on a {vol.kind!r} volume")
    return vol.voxels.astype(np.float32)


def _prepare(case: Case) -> _Prepared:
    images, _ = pad_to_multiple(model_input(case))
    masks, _ = pad_to_multiple(case.mask.voxels.astype(np.uint8))
    return _Prepared(case.volume_id, images, masks, case.labels)


class StreamItem(NamedTuple):
    case: int
    window: SliceSequence
    loss_mask: np.ndarray


def epoch_stream(windows: Sequence[tuple[int, SliceSequence]], labels: Sequence[np.ndarray],
                 rng: np.random.Generator, balance: bool, seq_len: int) -> list[StreamItem]:
    """All windows once, plus extra copies of minority-class windows when balancing.

    An extra copy contributes loss only on its minority-class slices, so each
    copy moves the slice counts strictly towards 1:1; the final counts differ
    by at most ``seq_len``.
    """
    items = [StreamItem(ci, w, w.pad_mask.copy()) for ci, w in windows]
    if balance:
        pos = sum(int((labels[ci][list(w.indices)] * w.pad_mask).sum()) for ci, w in windows)
        neg = sum(w.n_real for _, w in windows) - pos
        minority = 1 if pos <= neg else 0
        deficit = abs(neg - pos)
        candidates = []
        for ci, w in windows:
            hits = (labels[ci][list(w.indices)] == minority).astype(np.int64) * w.pad_mask
            if hits.any():
                candidates.append((ci, w, hits))
        if deficit and not candidates:
            raise DataError("class balancing needs at least one positive and one negative slice")
        while deficit > 0:
            for k in rng.permutation(len(candidates)):
                if deficit <= 0:
                    break
                ci, w, hits = candidates[k]
                items.append(StreamItem(ci, w, hits.copy()))
                deficit -= int(hits.sum())
    order = rng.permutation(len(items))
    return [items[k] for k in order]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: RadnetParams
    velocity: dict[str, np.ndarray]
    epoch: int
    train_config: TrainConfig
    model_config: RadnetConfig
    rng_state: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    arrays = [(f"param/{k}", t.data) for k, t in ckpt.params.tensors.items()]
    arrays += [(f"buffer/{k}", v) for k, v in ckpt.params.buffers.items()]
    arrays += [(f"velocity/{k}", v) for k, v in ckpt.velocity.items()]
    for name, arr in arrays:
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(payload)})
        chunks.append(payload)
        offset += len(payload)
    header = dump_header({
        "epoch": ckpt.epoch,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "rng_state": ckpt.rng_state,
        "tensors": entries,
    })
    return CKPT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_checkpoint(buf: bytes, path: str | None = None) -> Checkpoint:
    n_magic = len(CKPT_MAGIC)
    if buf[:n_magic] != CKPT_MAGIC:
        raise FormatError("bad RCKPT1 magic or version", offset=0, path=path)
    if len(buf) < n_magic + 8:
        raise FormatError("truncated RCKPT1 header length", offset=n_magic, path=path)
    (hlen,) = struct.unpack_from("<Q", buf, n_magic)
    start = n_magic + 8
    if len(buf) < start + hlen:
        raise FormatError("truncated RCKPT1 header", offset=start, path=path)
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        model_cfg = RadnetConfig(**header["model_config"])
        train_cfg = TrainConfig(**header["train_config"])
        entries = header["tensors"]
        epoch = int(header["epoch"])
        rng_state = header["rng_state"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"invalid RCKPT1 header: {exc}", offset=start, path=path) from None
    data_start = start + hlen
    params, velocity = RadnetParams(), {}
    dtype = T.get_dtype()
    for entry in entries:
        lo = data_start + int(entry["offset"])
        length = int(entry["length"])
        shape = tuple(int(d) for d in entry["shape"])
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {entry['name']} length {length} does not match shape {shape}",
                              offset=lo, path=path)
        if lo + length > len(buf):
            raise FormatError(f"truncated tensor data for {entry['name']}", offset=lo, path=path)
        arr = np.frombuffer(buf, dtype="<f4", count=length // 4, offset=lo).reshape(shape)
        kind, _, name = entry["name"].partition("/")
        if kind == "param":
            params.tensors[name] = T.Tensor(arr.astype(dtype), requires_grad=True)
        elif kind == "buffer":
            params.buffers[name] = arr.astype(dtype)
        elif kind == "velocity":
            velocity[name] = arr.astype(dtype)
        else:
            raise FormatError(f"unknown tensor section {kind!r}", offset=lo, path=path)
    expected = data_start + sum(int(e["length"]) for e in entries)
    if len(buf) != expected:
        raise FormatError(f"checkpoint has {len(buf) - expected} trailing bytes", offset=expected, path=path)
    return Checkpoint(params, velocity, epoch, train_cfg, model_cfg, rng_state)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc.strerror}", path=str(path)) from None
    return decode_checkpoint(buf, path=str(path))


# ---------------------------------------------------------------------------
# training loop


def _check_balanceable(cases: Sequence[Case]) -> None:
    labels = np.concatenate([c.labels for c in cases])
    if not (labels == 1).any() or not (labels == 0).any():
        raise DataError("class balancing needs at least one positive and one negative slice")


def time_major(seqs: Sequence[np.ndarray]) -> np.ndarray:
    """Stack equal-length sequences so row ``t * n + k`` is step t of sequence k."""
    return np.stack(seqs, axis=1).reshape((-1,) + seqs[0].shape[1:])


def recalibrate_bn(params: RadnetParams, mcfg: RadnetConfig, volumes: Sequence[np.ndarray],
                   seq_len: int, stride: int | None = None) -> int:
    """Set every BN running mean/variance to its average over all windows of ``volumes``.

    Each window runs in train mode (batch statistics) with momentum 1/i, so
    after the i-th window the buffers hold the mean of the first i batch
    statistics. Returns the number of windows.
    """
    i = 0
    with T.no_grad():
        for vol in volumes:
            for w in batch_sequences(vol.shape[0], seq_len, stride):
                i += 1
                forward(params, mcfg, T.Tensor(vol[list(w.indices)][:, None]), "train", bn_momentum=1 / i)
    return i


def _slice_accuracy(params, mcfg, cases, tcfg) -> float:
    correct = total = 0
    for case in cases:
        sp = predict_volume(params, mcfg, model_input(case), tcfg.seq_len, tcfg.stride)
        correct += int((sp.preds == case.labels).sum())
        total += case.n_slices
    return correct / total


def train(
    cases: Sequence[Case],
    tcfg: TrainConfig,
    mcfg: RadnetConfig,
    val_cases: Sequence[Case] | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run the epoch loop; returns the final checkpoint and one log row per epoch run.

    ``stop_after`` ends training after that many completed epochs (the
    checkpoint then records it); ``resume`` continues from a checkpoint.
    """
    if not cases:
        raise DataError("empty training set")
    if tcfg.balance_classes:
        _check_balanceable(cases)
    if resume is not None:
        params, velocity = resume.params, resume.velocity
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch
    else:
        params = build_radnet(mcfg, tcfg.seed)
        velocity = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
        start = 0
    end = tcfg.epochs if stop_after is None else min(stop_after, tcfg.epochs)

    prepared = [_prepare(c) for c in cases]
    windows = [(ci, w) for ci, p in enumerate(prepared)
               for w in batch_sequences(p.images.shape[0], tcfg.seq_len, tcfg.stride)]
    labels = [p.labels for p in prepared]
    rows = []
    for epoch in range(start, end):
        lr = lr_at_epoch(epoch, tcfg)
        stream = epoch_stream(windows, labels, rng, tcfg.balance_classes, tcfg.seq_len)
        sums = np.zeros(5)
        correct = counted = 0
        n_steps = 0
        for b in range(0, len(stream), tcfg.seqs_per_batch):
            batch = stream[b:b + tcfg.seqs_per_batch]
            images, masks, labels_b, keep_b = [], [], [], []
            for item in batch:
                p = prepared[item.case]
                idx = list(item.window.indices)
                theta, flip = draw_transform(rng, tcfg.rotation_max_deg, tcfg.flip_prob)
                img, msk = apply_transform(p.images[idx], p.masks[idx], theta, flip)
                images.append(img)
                masks.append(msk)
                labels_b.append(p.labels[idx])
                keep_b.append(item.loss_mask)
            labels_t, keep = time_major(labels_b), time_major(keep_b)
            out = forward(params, mcfg, T.Tensor(time_major(images)[:, None]), mode="train", n_seq=len(batch))
            terms = loss_terms(out, labels_t, time_major(masks)[:, None], keep, mcfg)
            values = [float(terms.total.data), float(terms.cls.data)] + [float(a.data) for a in terms.aux]
            if not all(math.isfinite(v) for v in values):
                raise DivergenceError(f"non-finite loss at epoch {epoch}: {values}")
            T.backward(terms.total)
            for name, t in params.tensors.items():
                grad = t.grad if t.grad is not None else np.zeros_like(t.data)
                t.data, velocity[name] = sgd_step(t.data, grad, velocity[name], lr, tcfg.momentum)
                t.grad = None
            sums += values
            n_steps += 1
            kept = keep.astype(bool)
            pred = out.cls_logits.data.argmax(axis=1)
            correct += int((pred[kept] == labels_t[kept]).sum())
            counted += int(kept.sum())
        means = sums / max(n_steps, 1)
        if tcfg.recalibrate_bn:
            recalibrate_bn(params, mcfg, [p.images for p in prepared], tcfg.seq_len, tcfg.stride)
        row = {
            "epoch": epoch, "lr": lr, "total_loss": means[0], "cls_loss": means[1],
            "aux1_loss": means[2], "aux2_loss": means[3], "aux3_loss": means[4],
            "train_acc": correct / max(counted, 1),
            "val_acc": _slice_accuracy(params, mcfg, val_cases, tcfg) if val_cases else float("nan"),
        }
        rows.append(row)
        log.info("epoch %d lr %.2g loss %.4f cls %.4f train_acc %.3f val_acc %.3f", epoch, lr,
                 row["total_loss"], row["cls_loss"], row["train_acc"], row["val_acc"])
        if on_epoch is not None:
            on_epoch(row)
    ckpt = Checkpoint(params, velocity, end, tcfg, mcfg, rng.bit_generator.state)
    return ckpt, rows


def write_log(rows: Sequence[dict], path: str | Path) -> None:
    def fmt(v):
        return v if isinstance(v, int) else repr(float(v))

    write_csv(path, LOG_HEADER, [[fmt(r[k]) for k in LOG_HEADER] for r in rows])
