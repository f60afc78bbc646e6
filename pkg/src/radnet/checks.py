"""Built-in verification: per-op gradient checks and a quick self-test."""

from __future__ import annotations

import itertools
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .evaluate import ConfusionMatrix, aggregate_ct, metrics
from .model import RadnetConfig, build_radnet, forward, total_loss
from .seqnet import LstmParams, bilstm, lstm_cell

OP_TOL = 1e-6
MODEL_TOL = 1e-4


class CheckResult(NamedTuple):
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _projected(out: T.Tensor, seed: int = 1) -> T.Tensor:
    """``sum(out * R)`` with a fixed signed random ``R``; the same ``R`` on every call."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.5, 1.5, out.shape) * rng.choice([-1.0, 1.0], out.shape)
    return T.tensor_sum(out * T.Tensor(r))


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    n = rng.standard_normal
    proj = _projected

    def away(shape):
        # keep samples off the ReLU kink so central differences stay one-sided
        return rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)

    H = 3
    lstm_shapes = [(4 * H, 4), (4 * H, H), (4 * H,)]
    labels, mask = np.array([0, 1, 1, 0]), np.array([1, 1, 0, 1])
    target = (rng.random((2, 1, 3, 3)) > 0.5).astype(float)
    bn_stats = (np.zeros(2), np.ones(2))

    cases = [
        ("affine", lambda x, w, b: proj(T.matmul_affine(x, w, b)), [n((3, 4)), n((4, 2)), n(2)]),
        ("conv2d", lambda x, k, b: proj(T.conv2d(x, k, stride=1, padding=1, bias=b)),
         [n((2, 3, 5, 5)), n((4, 3, 3, 3)), n(4)]),
        ("conv2d_stride2", lambda x, k: proj(T.conv2d(x, k, stride=2, padding=1)),
         [n((2, 2, 6, 6)), n((3, 2, 3, 3))]),
    ]
    for f in T.UPSAMPLE_FACTORS:
        cases.append((f"conv_transpose2d_x{f}",
                      lambda x, k, b, f=f: proj(T.conv_transpose2d(x, k, f, bias=b)),
                      [n((1, 2, 3, 3)), n((2, 1, 2 * f, 2 * f)), n(1)]))
    cases += [
        ("batchnorm_train", lambda x, g, b: proj(T.batchnorm2d(x, g, b, *(s.copy() for s in bn_stats),
                                                                training=True)),
         [n((3, 2, 3, 3)), rng.uniform(0.5, 1.5, 2), n(2)]),
        ("relu", lambda x: proj(T.relu(x)), [away((3, 4))]),
        ("sigmoid", lambda x: proj(T.sigmoid(x)), [n((3, 4))]),
        ("tanh", lambda x: proj(T.tanh(x)), [n((3, 4))]),
        ("softmax", lambda x: proj(T.softmax(x)), [n((3, 4))]),
        ("avg_pool2d", lambda x: proj(T.avg_pool2d(x)), [n((2, 3, 4, 6))]),
        ("global_avg_pool", lambda x: proj(T.global_avg_pool(x)), [n((2, 3, 4, 6))]),
        ("concat_channels", lambda a, b: proj(T.concat_channels([a, b])), [n((2, 1, 3, 3)), n((2, 3, 3, 3))]),
        ("softmax_cross_entropy", lambda z: T.loss_softmax_ce(z, labels, mask), [n((4, 2))]),
        ("bce_map", lambda z: T.loss_bce_map(z, target, [1, 1]), [n((2, 1, 3, 3))]),
        ("lstm_cell", lambda w, u, b, x, h, c: _lstm_cell_loss(w, u, b, x, h, c),
         [rng.uniform(-1, 1, s) for s in lstm_shapes + [(2, 4), (2, H), (2, H)]]),
        ("bilstm", lambda x, *w: _bilstm_loss(x, *w),
         [rng.uniform(-1, 1, (3, 1, 4))] + [rng.uniform(-1, 1, s) for s in lstm_shapes * 2]),
    ]
    return cases


def _lstm_cell_loss(w, u, b, x, h, c):
    h2, c2 = lstm_cell(x, h, c, LstmParams(w, u, b))
    return T.tensor_sum(h2 * h2) + T.tensor_sum(c2)


def _bilstm_loss(x, *w):
    out = bilstm(x, LstmParams(*w[:3]), LstmParams(*w[3:]))
    return T.tensor_sum(out * out)


def tiny_model_gradcheck(seed: int = 0, max_coords: int | None = None) -> float:
    """Gradient check of the composite loss of a 2-slice 16x16 network over input and all parameters."""
    cfg = RadnetConfig(growth_rate=2, init_channels=4, layers_per_block=2, lstm_hidden=3, input_size=16)
    with T.precision("float64"):
        params = build_radnet(cfg, seed=seed)
    names = list(params.tensors)
    rng = np.random.default_rng(seed)
    x = rng.random((2, 1, 16, 16))
    masks = np.zeros((2, 1, 16, 16))
    masks[0, 0, 5:9, 6:10] = 1

    def fn(xin, *ws):
        params.tensors.update(zip(names, ws))
        return total_loss(forward(params, cfg, xin, "train"), [1, 0], masks, [1, 1], cfg)

    return T.grad_check(fn, [x] + [params.tensors[k].data for k in names], max_coords=max_coords, seed=seed)


def gradcheck_suite(seed: int = 0, model_coords: int | None = 16) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [CheckResult(name, T.grad_check(fn, arrays), OP_TOL) for name, fn, arrays in _op_cases(rng)]
    results.append(CheckResult("radnet_total_loss", tiny_model_gradcheck(seed, model_coords), MODEL_TOL))
    return results


def _max_run_oracle(bits) -> int:
    return max((len(list(g)) for k, g in itertools.groupby(bits) if k), default=0)


def selftest(seed: int = 0) -> list[CheckResult]:
    """Aggregation oracle, metric identities and one tiny-model gradient check."""
    mismatches = 0
    for bits in itertools.product((0, 1), repeat=12):
        for m in (1, 2, 3, 4):
            mismatches += aggregate_ct(bits, m) != int(_max_run_oracle(bits) >= m)
    bad_identity = 0
    rng = np.random.default_rng(seed)
    for tp, fp, fn, tn in rng.integers(0, 50, (2000, 4)):
        if tp + fp + fn + tn == 0:
            continue
        m = metrics(ConfusionMatrix(int(tp), int(fp), int(fn), int(tn)))
        swapped = metrics(ConfusionMatrix(int(tn), int(fn), int(fp), int(tp)))
        bad_identity += m.f1 * (m.precision + m.recall) != 2 * m.precision * m.recall
        bad_identity += swapped.accuracy != m.accuracy
    reference = metrics(ConfusionMatrix(39, 9, 5, 24)).percent()
    bad_reference = reference != {"accuracy": "81.82", "recall": "88.64", "precision": "81.25", "f1": "84.78"}
    return [
        CheckResult("aggregation_oracle", float(mismatches), 0.5),
        CheckResult("metric_identities", float(bad_identity), 0.5),
        CheckResult("metric_reference_row", float(bad_reference), 0.5),
        CheckResult("radnet_total_loss", tiny_model_gradcheck(seed, max_coords=16), MODEL_TOL),
    ]


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max_error':>10}  {'tol':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:>10.3e}  {r.tol:>7.0e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)


__all__ = ["CheckResult", "format_results", "gradcheck_suite", "selftest", "tiny_model_gradcheck"]
