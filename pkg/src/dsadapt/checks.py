"""Self-checks run by ``dsadapt check``: finite-difference gradient oracles.

Each check compares an analytic gradient against central differences in
64-bit arithmetic and reports the worst relative error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import alignment
from .autodiff import Tensor, backward, default_dtype, mse, no_grad, ops
from .networks import build_conv_decoder, build_conv_encoder

FD_STEP = 1e-4
OP_TOL = 1e-4
NETWORK_TOL = 1e-3
BREGMAN_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _rel(a, b, floor):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _fd(f: Callable[[], float], arr: np.ndarray, idx=None, h: float = FD_STEP) -> np.ndarray:
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def op_gradcheck(fn, arrays, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = rng.standard_normal(out.shape) if out.ndim else 1.0
    backward((out * Tensor(w)).sum() if out.ndim else out)

    def f():
        with no_grad():
            o = fn(*[Tensor(t.data) for t in tensors])
        return float((o.data * w).sum())

    return max(_rel(t.grad.reshape(-1), _fd(f, t.data), 1e-3) for t in tensors)


def _op_checks(rng) -> list[CheckResult]:
    x4 = lambda *s: rng.standard_normal(s)  # noqa: E731
    relu_in = x4(5, 4)
    relu_in[np.abs(relu_in) < 0.05] = 0.5
    labels = rng.integers(0, 3, 5)
    rm, rv = x4(3), rng.uniform(0.5, 2, 3)
    cases = {
        "conv2d": (lambda x, k, b: ops.conv2d(x, k, b, 2, 1), [x4(2, 2, 6, 6), x4(3, 2, 3, 3), x4(3)]),
        "conv2d_transpose": (lambda x, k, b: ops.conv2d_transpose(x, k, b, 3, 1), [x4(2, 3, 3, 3), x4(3, 2, 5, 5), x4(2)]),
        "batchnorm2d": (lambda x, g, b: ops.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training=True),
                        [x4(4, 3, 2, 2), rng.uniform(0.5, 1.5, 3), x4(3)]),
        "maxpool2d": (lambda x: ops.maxpool2d(x, 2, 2), [x4(2, 2, 6, 6)]),
        "adaptive_maxpool2d": (lambda x: ops.adaptive_maxpool2d(x, 2, 2), [x4(2, 2, 7, 7)]),
        "dense": (ops.dense, [x4(4, 5), x4(3, 5), x4(3)]),
        "relu": (ops.relu, [relu_in]),
        "tanh": (ops.tanh, [x4(5, 4)]),
        "softmax_cross_entropy": (lambda z: ops.softmax_cross_entropy(z, labels), [x4(5, 3)]),
        "mse": (ops.mse, [x4(3, 4), x4(3, 4)]),
    }
    return [CheckResult(f"op:{name}", op_gradcheck(fn, arrays), OP_TOL) for name, (fn, arrays) in cases.items()]


def bregman_check(instances: int = 100, seed: int = 0) -> CheckResult:
    """Analytic divergence gradients against finite differences on random batches."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        d = int(rng.choice([1, 3, 10]))
        ns, nt = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        ys = rng.standard_normal((ns, d))
        yt = rng.standard_normal((nt, d)) * rng.uniform(0.5, 1.5) + rng.uniform(-1, 1)
        cs = alignment.estimate_diag_covariance(Tensor(ys))
        ct = alignment.estimate_diag_covariance(Tensor(yt))
        gs, gt = alignment.bregman_gradients(Tensor(ys), Tensor(yt))

        def f():
            return alignment.bregman_divergence(Tensor(ys), Tensor(yt), cs, ct).item()

        worst = max(worst, _rel(gs.reshape(-1), _fd(f, ys), 1e-4), _rel(gt.reshape(-1), _fd(f, yt), 1e-4))
    return CheckResult("bregman:gradients", worst, BREGMAN_TOL)


def network_check(seed: int = 0, fraction: float = 0.05) -> CheckResult:
    """Encoder/decoder reconstruction loss, finite differences on a parameter sample."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        enc, dec = build_conv_encoder(3, rng), build_conv_decoder(3, rng)
    x = Tensor(rng.uniform(-1, 1, (3, 1, 28, 28)))

    def f():
        with no_grad():
            return mse(dec(enc(x)), x).item()

    backward(mse(dec(enc(x)), x))
    worst = 0.0
    for p in enc.parameters() + dec.parameters():
        idx = rng.choice(p.data.size, size=max(1, round(fraction * p.data.size)), replace=False)
        analytic = p.grad.reshape(-1)[idx].copy()
        worst = max(worst, _rel(analytic, _fd(f, p.data, idx, h=1e-5), 1e-6))
    return CheckResult("network:encoder_decoder", worst, NETWORK_TOL)


def grl_check(alpha: float = 0.1) -> CheckResult:
    rng = np.random.default_rng(1)
    g_up = rng.standard_normal((4, 3))
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    backward((alignment.grl_forward(x, alpha) * Tensor(g_up)).sum())
    return CheckResult("grl:reversal", float(np.max(np.abs(x.grad + alpha * g_up))), 1e-7)


def run_checks() -> list[CheckResult]:
    rng = np.random.default_rng(0)
    return _op_checks(rng) + [bregman_check(), network_check(), grl_check()]
