"""Anisotropic directional feature transform.

Pipeline: a 4-level Gaussian detail pyramid, a small network that predicts
K projection angles from the input, a differentiable Radon-style projector
(rotate, bilinear-sample, average over rows), single-level orthonormal
Haar modulation of each projection, back-projection of the modulated
signal to the image plane, and a learned reconstruction head that merges
the enhanced subbands.

Everything is a pure function of (input, params) and differentiable end
to end, including through the predicted angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .errors import ShapeError

# (kernel size, sigma) per pyramid level; sigma scales with support
PYRAMID_KERNELS = ((7, 1.5), (5, 1.0), (3, 0.8), (3, 0.8))
N_LEVELS = 4


@dataclass
class Pyramid:
    """Detail subbands D1..D4, halving spatial size each level; coarse = D4."""

    details: list

    @property
    def coarse(self) -> Tensor:
        return self.details[-1]


def pyramid_decompose(f: Tensor) -> Pyramid:
    """Gaussian detail pyramid: D_k = blur(F_k), F_{k+1} = avgpool2(D_k)."""
    C, H, W = f.shape
    if H < 16 or W < 16:
        raise ShapeError(f"pyramid_decompose needs H,W >= 16, got {(H, W)}")
    details = []
    cur = f
    for size, sigma in PYRAMID_KERNELS:
        d = nn.separable_gaussian(cur, size, sigma)
        details.append(d)
        cur = nn.avgpool2(d)
    return Pyramid(details)


def predict_directions(store: ParamStore, name: str, f: Tensor, k: int,
                       conv_width: int = 16, fc_hidden: int = 64) -> Tensor:
    """Predict K projection angles in (0, pi) from global feature statistics."""
    h = ad.relu(nn.conv(store, f"{name}.conv1", f, conv_width))
    h = ad.relu(nn.conv(store, f"{name}.conv2", h, conv_width))
    h = nn.adaptive_avgpool(h, (8, 8))
    h = ad.reshape(h, (1, conv_width * 64))
    h = ad.relu(nn.dense(store, f"{name}.fc1", h, fc_hidden))
    h = nn.dense(store, f"{name}.fc2", h, k)
    return ad.scale(ad.sigmoid(ad.reshape(h, (k,))), math.pi)


def radon_approx(d: Tensor, theta: Tensor) -> Tensor:
    """Differentiable Radon-style projection of (C,h,w) at each angle.

    For each angle the image content is rotated via a sampling grid
    (clamp-to-edge border), then averaged over rows, leaving a 1-D signal
    per channel indexed by the (normalized) offset axis.  Output (K,C,w).
    """
    C, h, w = d.shape
    if h < 2 or w < 2:
        raise ShapeError(f"radon_approx needs h,w >= 2, got {(h, w)}")
    k = theta.shape[0]
    rows = []
    for i in range(k):
        grid = nn.rotation_grid(theta[i:i + 1], h, w)
        rot = nn.grid_sample(d, grid)
        proj = ad.reduce_mean(rot, axes=1)  # (C,w)
        rows.append(ad.reshape(proj, (1, C, w)))
    return ad.concat(rows, axis=0)


def haar_fwd(p: Tensor):
    """Single-level orthonormal Haar along the last axis.

    Odd lengths are symmetric-padded by repeating the final sample; pass
    the original length to haar_inv to undo it.
    """
    n = p.shape[-1]
    if n < 2:
        raise ShapeError("haar_fwd needs length >= 2 on the last axis")
    if n % 2 == 1:
        last = p[..., n - 1:n]
        p = ad.concat([p, last], axis=-1)
    a = p[..., 0::2]
    b = p[..., 1::2]
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    low = ad.scale(a + b, inv_sqrt2)
    high = ad.scale(a - b, inv_sqrt2)
    return low, high


def haar_inv(low: Tensor, high: Tensor, length: int | None = None) -> Tensor:
    """Exact inverse of haar_fwd; `length` trims the odd-length pad."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    a = ad.scale(low + high, inv_sqrt2)
    b = ad.scale(low - high, inv_sqrt2)
    pair = ad.stack([a, b], axis=len(a.shape))  # (..., m, 2)
    out = ad.reshape(pair, a.shape[:-1] + (2 * a.shape[-1],))
    if length is not None and length != out.shape[-1]:
        out = out[..., :length]
    return out


def backproject(q: Tensor, theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Lift per-direction 1-D signals (K,C,w) back to a (C,h,w) field.

    Each signal is tiled along the rotated-frame row axis and sampled back
    with the opposite rotation; the K fields are averaged.  Adjoint-style
    inverse of radon_approx: it maps constant projections to the same
    constant image.
    """
    k, C, w = q.shape
    if out_w != w:
        raise ShapeError("backproject expects out_w == projection length")
    acc = None
    for i in range(k):
        tiled = ad.broadcast_to(ad.reshape(q[i], (C, 1, w)), (C, out_h, w))
        grid = nn.rotation_grid(theta[i:i + 1], out_h, w, sign=-1.0)
        field = nn.grid_sample(tiled, grid)
        acc = field if acc is None else acc + field
    return ad.scale(acc, 1.0 / k)


def enhance_subband(d: Tensor, theta: Tensor, alpha: Tensor, mask: Tensor) -> Tensor:
    """Frequency-adaptive directional enhancement of one subband.

    mask has shape (K,2): one multiplier per direction for the Haar low
    band and one for the high band, broadcast over channels and offsets.
    Returns d + alpha * backprojected-modulated-projection.
    """
    C, h, w = d.shape
    p = radon_approx(d, theta)          # (K,C,w)
    low, high = haar_fwd(p)
    k = theta.shape[0]
    m_low = ad.reshape(mask[:, 0:1], (k, 1, 1))
    m_high = ad.reshape(mask[:, 1:2], (k, 1, 1))
    q = haar_inv(low * m_low, high * m_high, length=w)
    b = backproject(q, theta, h, w)
    return d + ad.reshape(alpha, (1, 1, 1)) * b


def ast_forward(store: ParamStore, name: str, f: Tensor, k: int) -> Tensor:
    """Full directional transform: pyramid -> angles -> per-scale enhancement
    -> upsample/concat/conv reconstruction. Output matches input shape."""
    C, H, W = f.shape
    pyr = pyramid_decompose(f)
    theta = predict_directions(store, f"{name}.dirs", f, k)
    merged = []
    for lvl, d in enumerate(pyr.details):
        alpha = store.param(f"{name}.alpha{lvl}", (1,), init=0.1)
        mask = store.param(f"{name}.mask{lvl}", (k, 2), init="ones")
        enh = enhance_subband(d, theta, alpha, mask)
        merged.append(enh if enh.shape[1:] == (H, W) else nn.resize_bilinear(enh, H, W))
    coarse = pyr.coarse
    merged.append(nn.resize_bilinear(coarse, H, W))
    cat = ad.concat(merged, axis=0)  # (5C, H, W)
    out = nn.conv(store, f"{name}.psi1", cat, C, k=1)
    out = nn.conv(store, f"{name}.psi2", out, C, k=3)
    return ad.leaky_relu(out, 0.2)
