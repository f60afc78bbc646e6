"""LSTM cell and a single bidirectional recurrent layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class LstmParams:
    """Weights of one LSTM direction.

    Gate blocks are stacked in the order (input, forget, cell, output):
    ``w_ih`` is ``[4H, I]``, ``w_hh`` is ``[4H, H]`` and ``bias`` is ``[4H]``.
    """

    w_ih: Tensor
    w_hh: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        four_h, _ = self.w_ih.shape
        if four_h % 4:
            raise ShapeError(f"w_ih rows ({four_h}) must be a multiple of 4")
        h = four_h // 4
        if self.w_hh.shape != (4 * h, h):
            raise ShapeError(f"w_hh shape {self.w_hh.shape} != ({4 * h}, {h})")
        if self.bias.shape != (4 * h,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({4 * h},)")

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "bias": self.bias}


def init_lstm(input_size: int, hidden: int, seed: int, forget_bias: float = 1.0) -> LstmParams:
    """He-normal weights, zero biases except the forget block."""
    rng = np.random.default_rng(seed)
    dtype = T.get_dtype()
    w_ih = rng.standard_normal((4 * hidden, input_size)) * np.sqrt(2.0 / input_size)
    w_hh = rng.standard_normal((4 * hidden, hidden)) * np.sqrt(2.0 / hidden)
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = forget_bias
    return LstmParams(
        T.Tensor(w_ih.astype(dtype), requires_grad=True),
        T.Tensor(w_hh.astype(dtype), requires_grad=True),
        T.Tensor(bias.astype(dtype), requires_grad=True),
    )


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    H = p.hidden_size
    if x.data.ndim != 2 or x.shape[1] != p.input_size:
        raise ShapeError(f"lstm_cell: input shape {x.shape} incompatible with input size {p.input_size}")
    if h.shape != (x.shape[0], H) or c.shape != (x.shape[0], H):
        raise ShapeError(f"lstm_cell: state shapes {h.shape}, {c.shape} != ({x.shape[0]}, {H})")
    gates = T.matmul_affine(x, T.transpose(p.w_ih), p.bias) + T.matmul(h, T.transpose(p.w_hh))
    i = T.sigmoid(T.slice_last(gates, 0, H))
    f = T.sigmoid(T.slice_last(gates, H, 2 * H))
    g = T.tanh(T.slice_last(gates, 2 * H, 3 * H))
    o = T.sigmoid(T.slice_last(gates, 3 * H, 4 * H))
    c_next = f * c + i * g
    h_next = o * T.tanh(c_next)
    return h_next, c_next


def _run(seq: Tensor, p: LstmParams, order: range) -> dict[int, Tensor]:
    B = seq.shape[1]
    h = T.create((B, p.hidden_size))
    c = T.create((B, p.hidden_size))
    states = {}
    for t in order:
        h, c = lstm_cell(T.index(seq, t), h, c, p)
        states[t] = h
    return states


def bilstm(seq: Tensor, p_fwd: LstmParams, p_bwd: LstmParams) -> Tensor:
    """``[L, B, I] -> [L, B, 2H]``; step t holds (forward h_t, backward h_t)."""
    if seq.data.ndim != 3:
        raise ShapeError(f"bilstm expects [L, B, I], got {seq.shape}")
    L = seq.shape[0]
    if L == 0:
        raise ShapeError("bilstm: empty sequence")
    if p_fwd.hidden_size != p_bwd.hidden_size:
        raise ShapeError("bilstm: forward and backward hidden sizes differ")
    fwd = _run(seq, p_fwd, range(L))
    bwd = _run(seq, p_bwd, range(L - 1, -1, -1))
    return T.stack([T.concat([fwd[t], bwd[t]], axis=-1) for t in range(L)])
