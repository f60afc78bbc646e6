"""DenseNet-40 backbone, three auxiliary segmentation heads, and the BiLSTM head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .seqnet import LstmParams, bilstm, init_lstm
from .tensor import Tensor

N_BLOCKS = 3
UPSAMPLE = (2, 4, 8)
# expected foreground fraction of a segmentation map; sets the aux heads' initial bias
AUX_PRIOR = 0.01


@dataclass
class RadnetConfig:
    growth_rate: int = 12
    init_channels: int = 16
    layers_per_block: int = 12
    lstm_hidden: int = 128
    aux_weights: tuple[float, float, float] = (0.25, 0.25, 0.25)
    num_classes: int = 2
    input_size: int = 256

    def __post_init__(self) -> None:
        self.aux_weights = tuple(float(w) for w in self.aux_weights)
        if len(self.aux_weights) != N_BLOCKS:
            raise ConfigError(f"aux_weights needs {N_BLOCKS} entries, got {len(self.aux_weights)}")
        if any(w < 0 for w in self.aux_weights):
            raise ConfigError("aux_weights must be non-negative")
        for name in ("growth_rate", "init_channels", "layers_per_block", "lstm_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_classes != 2:
            raise ConfigError("only binary classification (num_classes = 2) is supported")
        if self.input_size % 8:
            raise ConfigError(f"input_size {self.input_size} must be a multiple of 8")

    @property
    def depth(self) -> int:
        """Weighted layers of the backbone: stem + block convs + transitions + classifier."""
        return 1 + N_BLOCKS * self.layers_per_block + (N_BLOCKS - 1) + 1

    def block_channels(self) -> list[int]:
        out, c = [], self.init_channels
        for _ in range(N_BLOCKS):
            c += self.layers_per_block * self.growth_rate
            out.append(c)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aux_weights"] = list(self.aux_weights)
        return d


@dataclass
class RadnetParams:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def lstm(self, direction: str) -> LstmParams:
        p = f"lstm.{direction}."
        return LstmParams(self.tensors[p + "w_ih"], self.tensors[p + "w_hh"], self.tensors[p + "bias"])

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


class RadnetOutput(NamedTuple):
    cls_logits: Tensor
    seg_logits: tuple[Tensor, Tensor, Tensor]
    pooled: Tensor
    blocks: tuple[Tensor, Tensor, Tensor]


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(T.get_dtype()), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n, dtype=T.get_dtype()), requires_grad=True)


def bilinear_kernel(f: int) -> np.ndarray:
    """``[2f, 2f]`` kernel that makes a stride-f transposed conv (padding f/2) a bilinear upsampler."""
    taps = 1 - np.abs(np.arange(2 * f) - (f - 0.5)) / f
    return np.outer(taps, taps)


def _add_bn(params: RadnetParams, prefix: str, channels: int) -> None:
    dtype = T.get_dtype()
    params.tensors[prefix + ".gamma"] = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
    params.tensors[prefix + ".beta"] = _zeros(channels)
    params.buffers[prefix + ".running_mean"] = np.zeros(channels, dtype=dtype)
    params.buffers[prefix + ".running_var"] = np.ones(channels, dtype=dtype)


def build_radnet(cfg: RadnetConfig, seed: int) -> RadnetParams:
    """He-initialised parameters; deterministic in ``seed``.

    The aux deconvolutions are the exception: bilinear kernels with a
    foreground-prior bias.
    """
    rng = np.random.default_rng(seed)
    params = RadnetParams()
    P = params.tensors
    k, c = cfg.growth_rate, cfg.init_channels
    P["conv0.weight"] = _he(rng, (c, 1, 3, 3), 9)
    for b in range(1, N_BLOCKS + 1):
        for layer in range(1, cfg.layers_per_block + 1):
            prefix = f"block{b}.layer{layer:02d}"
            _add_bn(params, prefix + ".bn", c)
            P[prefix + ".conv.weight"] = _he(rng, (k, c, 3, 3), 9 * c)
            c += k
        if b < N_BLOCKS:
            _add_bn(params, f"trans{b}.bn", c)
            P[f"trans{b}.conv.weight"] = _he(rng, (c, c, 1, 1), c)
    _add_bn(params, "final.bn", c)

    for i, f in enumerate(UPSAMPLE, start=1):
        ch = cfg.block_channels()[i - 1]
        P[f"aux{i}.conv.weight"] = _he(rng, (1, ch, 1, 1), ch)
        P[f"aux{i}.conv.bias"] = _zeros(1)
        # heads start as bilinear upsamplers predicting the foreground prior
        P[f"aux{i}.deconv.weight"] = Tensor(bilinear_kernel(f)[None, None].astype(T.get_dtype()),
                                            requires_grad=True)
        P[f"aux{i}.deconv.bias"] = Tensor(np.full(1, np.log(AUX_PRIOR / (1 - AUX_PRIOR)), dtype=T.get_dtype()),
                                          requires_grad=True)

    lstm_seeds = rng.integers(0, 2**63 - 1, size=2)
    for direction, s in zip(("fwd", "bwd"), lstm_seeds):
        for name, t in init_lstm(c, cfg.lstm_hidden, int(s)).tensors().items():
            P[f"lstm.{direction}.{name}"] = t
    P["classifier.weight"] = _he(rng, (2 * cfg.lstm_hidden, cfg.num_classes), 2 * cfg.lstm_hidden)
    P["classifier.bias"] = _zeros(cfg.num_classes)
    return params


def weighted_layer_names(params: RadnetParams) -> list[str]:
    """Backbone weights that count towards the network depth (aux heads and LSTM excluded)."""
    return [name for name in params.tensors
            if name.endswith(".weight") and not name.startswith(("aux", "lstm"))]


def _bn(params: RadnetParams, prefix: str, x: Tensor, training: bool, momentum: float) -> Tensor:
    return T.batchnorm2d(
        x, params[prefix + ".gamma"], params[prefix + ".beta"],
        params.buffers[prefix + ".running_mean"], params.buffers[prefix + ".running_var"],
        training=training, momentum=momentum,
    )


def forward(params: RadnetParams, cfg: RadnetConfig, seq: Tensor, mode: str = "train",
            bn_momentum: float = 0.1, n_seq: int = 1) -> RadnetOutput:
    """Run a slice sequence ``[L, 1, H, W]`` through the network.

    ``n_seq`` > 1 runs that many sequences as one batch laid out time-major
    (row ``t * n_seq + n`` is step t of sequence n); batchnorm statistics
    then span all of them. ``bn_momentum`` is the running-statistics
    momentum used in train mode.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if seq.data.ndim != 4 or seq.shape[1] != 1:
        raise ShapeError(f"forward expects [L, 1, H, W], got {seq.shape}")
    rows, _, H, W = seq.shape
    if rows < 1:
        raise ShapeError("forward: empty sequence")
    if n_seq < 1 or rows % n_seq:
        raise ShapeError(f"forward: {rows} slices do not split into {n_seq} sequences")
    L = rows // n_seq
    if H % 8 or W % 8:
        raise ShapeError(f"forward: spatial size {H}x{W} must be a multiple of 8 (pad first)")
    training = mode == "train"

    x = T.conv2d(seq, params["conv0.weight"], stride=2, padding=1)
    blocks = []
    for b in range(1, N_BLOCKS + 1):
        for layer in range(1, cfg.layers_per_block + 1):
            prefix = f"block{b}.layer{layer:02d}"
            h = T.relu(_bn(params, prefix + ".bn", x, training, bn_momentum))
            h = T.conv2d(h, params[prefix + ".conv.weight"], stride=1, padding=1)
            x = T.concat_channels([x, h])
        blocks.append(x)
        if b < N_BLOCKS:
            h = T.relu(_bn(params, f"trans{b}.bn", x, training, bn_momentum))
            x = T.avg_pool2d(T.conv2d(h, params[f"trans{b}.conv.weight"]))

    pooled = T.global_avg_pool(T.relu(_bn(params, "final.bn", x, training, bn_momentum)))

    seg = []
    for i, (feat, f) in enumerate(zip(blocks, UPSAMPLE), start=1):
        m = T.conv2d(feat, params[f"aux{i}.conv.weight"], bias=params[f"aux{i}.conv.bias"])
        seg.append(T.conv_transpose2d(m, params[f"aux{i}.deconv.weight"], f,
                                      bias=params[f"aux{i}.deconv.bias"]))

    feat_dim = pooled.shape[1]
    rec = bilstm(T.reshape(pooled, (L, n_seq, feat_dim)), params.lstm("fwd"), params.lstm("bwd"))
    rec = T.reshape(rec, (rows, rec.shape[2]))
    logits = T.matmul_affine(rec, params["classifier.weight"], params["classifier.bias"])
    return RadnetOutput(logits, tuple(seg), pooled, tuple(blocks))


class LossTerms(NamedTuple):
    total: Tensor
    cls: Tensor
    aux: tuple[Tensor, Tensor, Tensor]


def loss_terms(out: RadnetOutput, labels, masks, pad_mask, cfg: RadnetConfig) -> LossTerms:
    labels = np.asarray(labels)
    masks = np.asarray(masks)
    L = out.cls_logits.shape[0]
    if masks.ndim == 3:
        masks = masks[:, None]
    if masks.shape != (L, 1) + out.seg_logits[0].shape[2:]:
        raise ShapeError(f"masks shape {masks.shape} does not match seg maps {out.seg_logits[0].shape}")
    cls = T.loss_softmax_ce(out.cls_logits, labels, pad_mask)
    aux = tuple(T.loss_bce_map(s, masks, pad_mask) for s in out.seg_logits)
    total = cls
    for w, a in zip(cfg.aux_weights, aux):
        if w != 0:
            total = total + T.scale(a, w)
    return LossTerms(total, cls, aux)


def total_loss(out: RadnetOutput, labels, masks, pad_mask, cfg: RadnetConfig) -> Tensor:
    """Classification cross-entropy plus the weighted auxiliary segmentation losses."""
    return loss_terms(out, labels, masks, pad_mask, cfg).total


def pad_offsets(size: int, multiple: int = 8) -> tuple[int, int]:
    extra = (-size) % multiple
    return extra // 2, extra - extra // 2


def pad_to_multiple(arr: np.ndarray, multiple: int = 8) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad the last two axes symmetrically; returns the array and (top, left)."""
    top, bottom = pad_offsets(arr.shape[-2], multiple)
    left, right = pad_offsets(arr.shape[-1], multiple)
    if top == bottom == left == right == 0:
        return arr, (0, 0)
    widths = [(0, 0)] * (arr.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(arr, widths), (top, left)


def crop(arr: np.ndarray, offset: tuple[int, int], size: tuple[int, int]) -> np.ndarray:
    top, left = offset
    return arr[..., top:top + size[0], left:left + size[1]]
