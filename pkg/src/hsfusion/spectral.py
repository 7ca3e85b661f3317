"""Stage II: spectral recalibration guided by a prior from the LR cube.

A compact per-band prior vector is distilled from the low-resolution
input and drives two attention pathways inside each transformer block:
a spectrally guided channel attention (prior modulates features and
biases the channel-to-channel attention map) and a gradient-masked
windowed spatial attention.  A spatial softmax gate blends the two, and
the whole stage is an outer residual on its input, so a zero-initialized
projection tail leaves the Stage-I estimate untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .errors import ShapeError


@dataclass
class GsrtConfig:
    embed: int = 16
    blocks: int = 1
    window: int = 8
    ffn_expand: int = 2


def extract_spectral_prior(store: ParamStore, x: Tensor) -> Tensor:
    """Distill (C,h,w) down to a per-band summary vector of length C."""
    C, h, w = x.shape
    if h < 8 or w < 8:
        raise ShapeError(f"extract_spectral_prior needs spatial dims >= 8, got {(h, w)}")
    cur = x
    for i in range(3):
        cur = nn.conv(store, f"prior.conv{i}", cur, C, k=3, stride=2)
        cur = ad.relu(nn.layer_norm(store, f"prior.ln{i}", cur))
    return nn.global_avgpool(cur)


def sga_forward(store: ParamStore, name: str, h_in: Tensor, sp: Tensor,
                return_parts: bool = False):
    """Spectrally guided channel attention.

    The prior produces a per-channel modulation in (0,1) applied to the
    normalized features, and a rank-one guidance matrix multiplied into
    the attention logits before the softmax.  Tokens are channels; the
    softmax scale is the pixel count.
    """
    e, H, W = h_in.shape
    n = H * W
    s = ad.sigmoid(nn.mlp_vector(store, f"{name}.smlp", sp, 2 * e, e))
    h_ln = nn.layer_norm(store, f"{name}.ln", h_in)
    f_mod = h_ln * ad.reshape(s, (e, 1, 1))
    g = nn.mlp_vector(store, f"{name}.gmlp", sp, 2 * e, e)
    guide = ad.matmul(ad.reshape(g, (e, 1)), ad.reshape(g, (1, e)))
    q = ad.reshape(nn.conv(store, f"{name}.q", f_mod, e, k=1), (e, n))
    k = ad.reshape(nn.conv(store, f"{name}.k", f_mod, e, k=1), (e, n))
    v = ad.reshape(nn.conv(store, f"{name}.v", f_mod, e, k=1), (e, n))
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(n)) * guide
    att = ad.softmax(logits, axis=-1)
    out = ad.reshape(ad.matmul(att, v), (e, H, W))
    if return_parts:
        return out, {"f_mod": f_mod, "att": att, "s": s, "guide": guide}
    return out


def _window_split(x: Tensor, ws: int):
    """(e,H,W) -> (nWin, ws*ws, e) token batches over non-overlapping windows."""
    e, H, W = x.shape
    nh, nw = H // ws, W // ws
    t = ad.reshape(x, (e, nh, ws, nw, ws))
    t = ad.transpose(t, (1, 3, 2, 4, 0))          # (nh,nw,ws,ws,e)
    return ad.reshape(t, (nh * nw, ws * ws, e)), (nh, nw)


def _window_merge(t: Tensor, dims, ws: int, e: int) -> Tensor:
    nh, nw = dims
    x = ad.reshape(t, (nh, nw, ws, ws, e))
    x = ad.transpose(x, (4, 0, 2, 1, 3))          # (e,nh,ws,nw,ws)
    return ad.reshape(x, (e, nh * ws, nw * ws))


def sda_forward(store: ParamStore, name: str, h_in: Tensor, window: int = 8,
                return_parts: bool = False):
    """Gradient-masked windowed spatial self attention.

    A Laplacian-style difference (3x3 conv minus identity) drives a
    single-channel sigmoid mask that highlights edges; masked features go
    through self-attention over non-overlapping windows.  Inputs whose
    sides are not multiples of the window are reflect-padded, and the
    output is cropped back.
    """
    e, H, W = h_in.shape
    h_ln = nn.layer_norm(store, f"{name}.ln", h_in)
    diff = nn.conv(store, f"{name}.lap", h_ln, e, k=3) - h_ln
    mask = ad.sigmoid(nn.conv(store, f"{name}.mgate", diff, 1, k=1))
    f_mod = h_ln * mask
    ph = (window - H % window) % window
    pw = (window - W % window) % window
    padded = nn.pad2d(f_mod, (0, ph, 0, pw), "reflect") if ph or pw else f_mod
    q = nn.conv(store, f"{name}.q", padded, e, k=1)
    k = nn.conv(store, f"{name}.k", padded, e, k=1)
    v = nn.conv(store, f"{name}.v", padded, e, k=1)
    qw, dims = _window_split(q, window)
    kw, _ = _window_split(k, window)
    vw, _ = _window_split(v, window)
    logits = ad.scale(ad.matmul(qw, ad.transpose(kw, (0, 2, 1))), 1.0 / np.sqrt(e))
    att = ad.softmax(logits, axis=-1)
    out = _window_merge(ad.matmul(att, vw), dims, window, e)
    if ph or pw:
        out = out[:, :H, :W]
    if return_parts:
        return out, {"mask": mask, "att": att}
    return out


def gated_fusion(store: ParamStore, name: str, x_spe: Tensor, x_spa: Tensor,
                 return_parts: bool = False):
    """Blend two branches with a spatially varying two-way softmax gate."""
    if x_spe.shape != x_spa.shape:
        raise ShapeError(f"gated_fusion: shapes differ {x_spe.shape} vs {x_spa.shape}")
    gates = ad.softmax(nn.conv(store, f"{name}.gate",
                               ad.concat([x_spe, x_spa], axis=0), 2, k=1), axis=0)
    g1 = gates[0:1]
    g2 = gates[1:2]
    out = g1 * x_spe + g2 * x_spa
    if return_parts:
        return out, {"g1": g1, "g2": g2}
    return out


def gsrt_forward(store: ParamStore, z_init: Tensor, x_lr: Tensor, cfg: GsrtConfig) -> Tensor:
    """Stage-II forward: embed, run the block stack, project, outer residual."""
    C = z_init.shape[0]
    sp = extract_spectral_prior(store, x_lr)
    h = nn.conv(store, "gsrt.embed", z_init, cfg.embed, k=3)
    for b in range(cfg.blocks):
        x_spe = sga_forward(store, f"gsrt.b{b}.sga", h, sp)
        x_spa = sda_forward(store, f"gsrt.b{b}.sda", h, cfg.window)
        x_att = gated_fusion(store, f"gsrt.b{b}.gate", x_spe, x_spa)
        pre = h + x_att
        f = nn.layer_norm(store, f"gsrt.b{b}.ffn_ln", pre)
        f = nn.conv(store, f"gsrt.b{b}.ffn1", f, cfg.embed * cfg.ffn_expand, k=1)
        f = nn.conv(store, f"gsrt.b{b}.ffn2", ad.gelu(f), cfg.embed, k=1)
        h = pre + f
    proj = nn.conv(store, "gsrt.proj", h, C, k=3, init="zeros")
    return z_init + proj
