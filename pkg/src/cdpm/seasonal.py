"""Conditional denoising model for the seasonal component.

A noisy seasonal window is embedded by a convolutional MLP, modulated by
adaptive layer normalization driven by the diffusion-step encoding, decoded
back to channel space, and combined with a Gaussian draw centered on patch
statistics predicted from the historical window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    conv1d,
    expand_patches,
    gelu,
    layer_norm,
    matmul,
    softplus,
    sqrt,
    transpose,
)
from .series import PatchStatistics

LN_EPS = 1e-5
CONV_WIDTH = 3


def step_encoding(k: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of a diffusion step (base-10000 transformer form)."""
    if k < 1:
        raise ValueError(f"step index must be >= 1, got {k}")
    if d_model % 2 != 0:
        raise ValueError(f"d_model must be even, got {d_model}")
    half = d_model // 2
    freqs = 10000.0 ** (2.0 * np.arange(half) / d_model)
    angles = k / freqs
    enc = np.empty(d_model, dtype=np.float64)
    enc[0::2] = np.sin(angles)
    enc[1::2] = np.cos(angles)
    return enc


@dataclass
class CdsmParams:
    """Learnable tensors of the seasonal denoiser.

    The conditioning fields (``mu_*``, ``sg_*``, ``rho2``) are None when the
    model is built without the statistics pathway.
    """

    emb_conv_w: Tensor
    emb_conv_b: Tensor
    emb_w1: Tensor
    emb_b1: Tensor
    emb_w2: Tensor
    emb_b2: Tensor
    adaln0_wa: Tensor
    adaln0_ba: Tensor
    adaln0_wb: Tensor
    adaln0_bb: Tensor
    adaln1_wa: Tensor
    adaln1_ba: Tensor
    adaln1_wb: Tensor
    adaln1_bb: Tensor
    dec_conv_w: Tensor
    dec_conv_b: Tensor
    dec_w1: Tensor
    dec_b1: Tensor
    dec_w2: Tensor
    dec_b2: Tensor
    out_w: Tensor
    out_b: Tensor
    rho1: Tensor
    rho2: Tensor | None = None
    mu_w1: Tensor | None = None
    mu_b1: Tensor | None = None
    mu_w2: Tensor | None = None
    mu_b2: Tensor | None = None
    sg_w1: Tensor | None = None
    sg_b1: Tensor | None = None
    sg_w2: Tensor | None = None
    sg_b2: Tensor | None = None

    @property
    def d_model(self) -> int:
        return self.emb_conv_w.shape[0]

    @property
    def channels(self) -> int:
        return self.emb_conv_w.shape[1]

    @property
    def has_conditioning(self) -> bool:
        return self.mu_w1 is not None

    def named(self, prefix: str = "cdsm"):
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                yield f"{prefix}.{f.name}", t


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_cdsm_params(
    rng: np.random.Generator,
    channels: int,
    d_model: int,
    hist_patches: int,
    target_patches: int,
    stat_hidden: int,
    conditioning: bool = True,
) -> CdsmParams:
    """Deterministic initialization of all seasonal-denoiser weights.

    The AdaLN scale biases start at one (identity modulation), the network
    weight on the output starts at 1.0 and the conditioning weight at 0.1, so
    training begins near a pure denoiser and lets conditioning grow.
    """
    if d_model % 2 != 0:
        raise ValueError(f"d_model must be even, got {d_model}")
    w = CONV_WIDTH
    p = CdsmParams(
        emb_conv_w=_uniform(rng, channels * w, (d_model, channels, w)),
        emb_conv_b=_zeros((d_model, 1)),
        emb_w1=_uniform(rng, d_model, (d_model, d_model)),
        emb_b1=_zeros(d_model),
        emb_w2=_uniform(rng, d_model, (d_model, d_model)),
        emb_b2=_zeros(d_model),
        adaln0_wa=_uniform(rng, d_model, (d_model, d_model)) * 0.0 + Tensor(rng.normal(0.0, 0.02, (d_model, d_model))),
        adaln0_ba=Tensor(np.ones(d_model), requires_grad=True),
        adaln0_wb=Tensor(rng.normal(0.0, 0.02, (d_model, d_model)), requires_grad=True),
        adaln0_bb=_zeros(d_model),
        adaln1_wa=Tensor(rng.normal(0.0, 0.02, (d_model, d_model)), requires_grad=True),
        adaln1_ba=Tensor(np.ones(d_model), requires_grad=True),
        adaln1_wb=Tensor(rng.normal(0.0, 0.02, (d_model, d_model)), requires_grad=True),
        adaln1_bb=_zeros(d_model),
        dec_conv_w=_uniform(rng, d_model * w, (d_model, d_model, w)),
        dec_conv_b=_zeros((d_model, 1)),
        dec_w1=_uniform(rng, d_model, (d_model, d_model)),
        dec_b1=_zeros(d_model),
        dec_w2=_uniform(rng, d_model, (d_model, d_model)),
        dec_b2=_zeros(d_model),
        out_w=_uniform(rng, d_model, (d_model, channels)),
        out_b=_zeros(channels),
        rho1=Tensor(np.asarray(1.0), requires_grad=True),
    )
    if conditioning:
        p.rho2 = Tensor(np.asarray(0.1), requires_grad=True)
        p.mu_w1 = _uniform(rng, hist_patches, (hist_patches, stat_hidden))
        p.mu_b1 = _zeros(stat_hidden)
        p.mu_w2 = _uniform(rng, stat_hidden, (stat_hidden, target_patches))
        p.mu_b2 = _zeros(target_patches)
        p.sg_w1 = _uniform(rng, hist_patches, (hist_patches, stat_hidden))
        p.sg_b1 = _zeros(stat_hidden)
        p.sg_w2 = _uniform(rng, stat_hidden, (stat_hidden, target_patches))
        p.sg_b2 = _zeros(target_patches)
    return p


def _ensure_finite(stage: str, t: Tensor) -> Tensor:
    if not t.all_finite():
        raise RuntimeError(f"non-finite activations after {stage}")
    return t


def embed(x_noisy, params: CdsmParams) -> Tensor:
    """Map a noisy (T, d) window to hidden features (T, d_model)."""
    x = as_tensor(x_noisy)
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise ValueError(
            f"expected (T, {params.channels}) input, got shape {x.shape}"
        )
    h = conv1d(transpose(x), params.emb_conv_w) + params.emb_conv_b
    h = transpose(gelu(h))
    h = gelu(matmul(h, params.emb_w1) + params.emb_b1)
    return matmul(h, params.emb_w2) + params.emb_b2


def adaln(h, k: int, params: CdsmParams, site: int = 0) -> Tensor:
    """Adaptive layer normalization: scale and shift projected from the
    sinusoidal encoding of the diffusion step."""
    h = as_tensor(h)
    enc = Tensor(step_encoding(k, params.d_model)[None, :])
    wa = getattr(params, f"adaln{site}_wa")
    ba = getattr(params, f"adaln{site}_ba")
    wb = getattr(params, f"adaln{site}_wb")
    bb = getattr(params, f"adaln{site}_bb")
    scale = matmul(enc, wa) + ba
    shift = matmul(enc, wb) + bb
    return scale * layer_norm(h, LN_EPS) + shift


def predict_target_stats(hist_stats: PatchStatistics, params: CdsmParams):
    """Predict target-window patch means and variances from historical ones.

    Both maps act per channel with channel-shared weights; the variance head
    ends in a softplus so predicted variances are non-negative.
    """
    if not params.has_conditioning:
        raise ValueError("model was built without the conditioning pathway")
    mu_in = Tensor(hist_stats.means.T)  # (d, P_hist)
    h = gelu(matmul(mu_in, params.mu_w1) + params.mu_b1)
    mu_hat = transpose(matmul(h, params.mu_w2) + params.mu_b2)
    var_in = Tensor(hist_stats.variances.T)
    hs = gelu(matmul(var_in, params.sg_w1) + params.sg_b1)
    sigma2_hat = transpose(softplus(matmul(hs, params.sg_w2) + params.sg_b2))
    return mu_hat, sigma2_hat


def conditional_draw(mu_hat, sigma2_hat, z: np.ndarray, patch_len: int, length: int) -> Tensor:
    """Gaussian draw per patch, broadcast across the patch positions.

    Each patch/channel cell takes mu + sqrt(sigma2) * z and is repeated over
    the patch's positions, truncated to the window length.
    """
    mu_hat = as_tensor(mu_hat)
    sigma2_hat = as_tensor(sigma2_hat)
    if np.any(sigma2_hat.data < 0):
        raise RuntimeError("negative predicted variance reached the sampler")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != mu_hat.shape:
        raise ValueError(f"noise shape {z.shape} does not match stats {mu_hat.shape}")
    values = mu_hat + sqrt(sigma2_hat) * Tensor(z)
    return expand_patches(values, patch_len, length)


@dataclass
class Conditioning:
    """Statistics-based conditioning for one window: predicted target patch
    means/variances and their Gaussian expansion to the window shape."""

    mu_hat: Tensor
    sigma2_hat: Tensor
    grad_sample: Tensor


def build_conditioning(
    hist_stats: PatchStatistics,
    z: np.ndarray,
    params: CdsmParams,
    patch_len: int,
    length: int,
) -> Conditioning:
    mu_hat, sigma2_hat = predict_target_stats(hist_stats, params)
    sample = conditional_draw(mu_hat, sigma2_hat, z, patch_len, length)
    if sample.shape != (length, hist_stats.means.shape[1]):
        raise ValueError(f"conditioning shape {sample.shape} does not match window")
    return Conditioning(mu_hat=mu_hat, sigma2_hat=sigma2_hat, grad_sample=sample)


def denoise(x_noisy, k: int, cond: Conditioning | None, params: CdsmParams) -> Tensor:
    """Clean-series estimate from a noisy window at diffusion step k.

    The network path runs embed -> AdaLN -> conv -> AdaLN -> MLP -> layer
    norm -> projection; the result is a weighted sum of that path and the
    conditioning draw (network alone when conditioning is absent).
    """
    h = _ensure_finite("embed", embed(x_noisy, params))
    h = _ensure_finite("adaln-0", adaln(h, k, params, site=0))
    h = conv1d(transpose(h), params.dec_conv_w) + params.dec_conv_b
    h = _ensure_finite("decoder-conv", transpose(gelu(h)))
    h = _ensure_finite("adaln-1", adaln(h, k, params, site=1))
    h = gelu(matmul(h, params.dec_w1) + params.dec_b1)
    h = _ensure_finite("decoder-mlp", matmul(h, params.dec_w2) + params.dec_b2)
    h = layer_norm(h, LN_EPS)
    net = _ensure_finite("out-projection", matmul(h, params.out_w) + params.out_b)
    if cond is None:
        return params.rho1 * net
    return params.rho1 * net + params.rho2 * cond.grad_sample
