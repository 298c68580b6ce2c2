"""Latent-space distribution alignment.

Two penalties are provided:

* a quadratic divergence ``int (p_s - p_t)^2`` between Gaussian kernel
  density estimates of the embedded source and target batches, evaluated in
  closed form as pairwise kernel sums with diagonal bandwidths, and
* a domain-adversarial cross-entropy routed through a gradient reversal layer.

Bandwidths are the per-feature batch variances plus a fixed ridge of 1e-3.
They are treated as constants during differentiation.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, make_op, softmax_cross_entropy

log = logging.getLogger(__name__)

VARIANCE_RIDGE = 1e-3
ALPHA_WARN = 0.1


class BatchSizeError(ValueError):
    pass


@dataclass
class LatentBatch:
    points: Tensor
    domain: str = "source"

    def __post_init__(self):
        if not isinstance(self.points, Tensor):
            self.points = Tensor(self.points)
        if self.points.ndim != 2:
            raise ValueError(f"latent batch must be (n, d), got shape {self.points.shape}")
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class DiagCovariance:
    variances: np.ndarray

    @property
    def inverse(self) -> np.ndarray:
        return 1.0 / self.variances

    def __add__(self, other: DiagCovariance) -> DiagCovariance:
        return DiagCovariance(self.variances + other.variances)


def _as_batch(x, domain: str) -> LatentBatch:
    return x if isinstance(x, LatentBatch) else LatentBatch(x, domain)


def estimate_diag_covariance(batch) -> DiagCovariance:
    """Population variance per latent feature plus the ridge. No gradient flows through it."""
    batch = _as_batch(batch, "source")
    if batch.n < 2:
        raise BatchSizeError(f"covariance estimation needs at least 2 points, got {batch.n}")
    pts = batch.points.data
    return DiagCovariance(pts.var(axis=0) + pts.dtype.type(VARIANCE_RIDGE))


def gaussian_kernel(delta, sigma) -> float:
    """Unnormalized Gaussian ``exp(-0.5 * delta^T sigma^-1 delta)`` for a diagonal ``sigma``."""
    var = sigma.variances if isinstance(sigma, DiagCovariance) else np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    return float(np.exp(-0.5 * np.sum(delta * delta / var)))


def _pairwise(a: np.ndarray, b: np.ndarray, var: np.ndarray):
    """Kernel matrix K[j, k] = G(b_k - a_j) together with the differences b_k - a_j."""
    diff = b[None, :, :] - a[:, None, :]
    k = np.exp(-0.5 * np.einsum("jkd,d->jk", diff * diff, 1.0 / var))
    return k, diff


def _resolve(src: LatentBatch, tgt: LatentBatch, src_cov, tgt_cov):
    if src.dim != tgt.dim:
        raise ValueError(f"latent dimension mismatch: source {src.dim}, target {tgt.dim}")
    cs = src_cov if src_cov is not None else estimate_diag_covariance(src)
    ct = tgt_cov if tgt_cov is not None else estimate_diag_covariance(tgt)
    dt = src.points.dtype
    vs = np.asarray(cs.variances if isinstance(cs, DiagCovariance) else cs, dtype=dt)
    vt = np.asarray(ct.variances if isinstance(ct, DiagCovariance) else ct, dtype=dt)
    return vs + vs, vt + vt, vs + vt


def _terms(ys, yt, var_ss, var_tt, var_st):
    ns, nt = len(ys), len(yt)
    k_ss, d_ss = _pairwise(ys, ys, var_ss)
    k_tt, d_tt = _pairwise(yt, yt, var_tt)
    k_st, d_st = _pairwise(ys, yt, var_st)
    value = k_ss.sum() / ns**2 + k_tt.sum() / nt**2 - 2 * k_st.sum() / (ns * nt)
    return value, (k_ss, d_ss, k_tt, d_tt, k_st, d_st)


def _gradients(ys, yt, var_ss, var_tt, var_st, cache):
    k_ss, d_ss, k_tt, d_tt, k_st, d_st = cache
    ns, nt = len(ys), len(yt)
    cross = 2.0 / (ns * nt)
    # d_ss[i, k] = ys_k - ys_i ; d_st[i, k] = yt_k - ys_i
    g_s = (2.0 / ns**2) * np.einsum("ik,ikd->id", k_ss, d_ss) / var_ss \
        - cross * np.einsum("ik,ikd->id", k_st, d_st) / var_st
    # for target point i the cross differences are ys_k - yt_i = -d_st[k, i]
    g_t = (2.0 / nt**2) * np.einsum("ik,ikd->id", k_tt, d_tt) / var_tt \
        + cross * np.einsum("ki,kid->id", k_st, d_st) / var_st
    return g_s, g_t


def bregman_divergence(src, tgt, src_cov=None, tgt_cov=None) -> Tensor:
    """KDE estimate of the quadratic divergence between two latent batches.

    ``src_cov``/``tgt_cov`` pin the bandwidths; by default they are estimated
    from each batch. The result is differentiable with respect to both
    batches' points.
    """
    src, tgt = _as_batch(src, "source"), _as_batch(tgt, "target")
    var_ss, var_tt, var_st = _resolve(src, tgt, src_cov, tgt_cov)
    ys, yt = src.points.data, tgt.points.data
    value, cache = _terms(ys, yt, var_ss, var_tt, var_st)

    def bw(g):
        g_s, g_t = _gradients(ys, yt, var_ss, var_tt, var_st, cache)
        return (g * g_s).astype(ys.dtype), (g * g_t).astype(yt.dtype)

    return make_op(np.asarray(value, dtype=ys.dtype), (src.points, tgt.points), bw, "bregman")


def bregman_gradients(src, tgt, src_cov=None, tgt_cov=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-point derivatives of the divergence w.r.t. the source and target points."""
    src, tgt = _as_batch(src, "source"), _as_batch(tgt, "target")
    var_ss, var_tt, var_st = _resolve(src, tgt, src_cov, tgt_cov)
    ys, yt = src.points.data, tgt.points.data
    _, cache = _terms(ys, yt, var_ss, var_tt, var_st)
    return _gradients(ys, yt, var_ss, var_tt, var_st, cache)


def normalized_kde_divergence(src, tgt, src_cov=None, tgt_cov=None) -> float:
    """``int (p_s - p_t)^2 dy`` for Gaussian KDEs whose kernels integrate to one.

    Same pairwise sums as :func:`bregman_divergence`, with each kernel scaled
    by its density normalizer. Useful for checking the closed form against
    numerical integration; training uses the unnormalized form.
    """
    src, tgt = _as_batch(src, "source"), _as_batch(tgt, "target")
    var_ss, var_tt, var_st = (v.astype(np.float64) for v in _resolve(src, tgt, src_cov, tgt_cov))
    ys, yt = src.points.data.astype(np.float64), tgt.points.data.astype(np.float64)

    def norm(var):
        return 1.0 / np.sqrt(np.prod(2 * np.pi * var))

    ns, nt = len(ys), len(yt)
    k_ss, _ = _pairwise(ys, ys, var_ss)
    k_tt, _ = _pairwise(yt, yt, var_tt)
    k_st, _ = _pairwise(ys, yt, var_st)
    return float(norm(var_ss) * k_ss.sum() / ns**2 + norm(var_tt) * k_tt.sum() / nt**2
                 - 2 * norm(var_st) * k_st.sum() / (ns * nt))


@dataclass(frozen=True)
class GrlConfig:
    alpha: float = 0.1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.alpha > ALPHA_WARN:
            warnings.warn(f"alpha={self.alpha} exceeds {ALPHA_WARN}; adversarial training tends to destabilize",
                          stacklevel=3)


def grl_forward(latent: Tensor, alpha: float) -> Tensor:
    """Identity forward; the backward pass multiplies the gradient by ``-alpha``."""
    a = float(alpha)
    return make_op(latent.data, (latent,), lambda g: (g * g.dtype.type(-a),), "grl")


def domain_adversarial_terms(src_latent: Tensor, tgt_latent: Tensor, domain_classifier, grl: GrlConfig):
    """Per-domain cross-entropies (source labelled 0, target 1) on reversed-gradient latents."""
    logits_s = domain_classifier(grl_forward(src_latent, grl.alpha))
    logits_t = domain_classifier(grl_forward(tgt_latent, grl.alpha))
    da_s = softmax_cross_entropy(logits_s, np.zeros(src_latent.shape[0], dtype=np.int64))
    da_t = softmax_cross_entropy(logits_t, np.ones(tgt_latent.shape[0], dtype=np.int64))
    return da_s, da_t


def domain_adversarial_loss(src_latent: Tensor, tgt_latent: Tensor, domain_classifier, grl: GrlConfig) -> Tensor:
    """Mean domain cross-entropy over the pooled source and target batch."""
    da_s, da_t = domain_adversarial_terms(src_latent, tgt_latent, domain_classifier, grl)
    ns, nt = src_latent.shape[0], tgt_latent.shape[0]
    return da_s * (ns / (ns + nt)) + da_t * (nt / (ns + nt))
