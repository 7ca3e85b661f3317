"""Stage I: directional spatial enhancement and cross-modal fusion.

The low-resolution cube is upsampled and embedded, the multispectral
image is embedded, and three encoder stages refine both branches while
extracting a cross-modal correlation tensor per stage.  Three fusion
blocks then merge everything coarse-to-fine into a residual that is added
to the plain upsampled cube, so an untrained (zero-tail) model reproduces
bilinear upsampling exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .errors import ShapeError
from .directional import ast_forward


@dataclass
class VdaeState:
    x: Tensor
    y: Tensor
    t: Tensor


def preprocess(store: ParamStore, x: Tensor, y: Tensor, hidden: int):
    """Upsample/embed the two inputs to a common width.

    Returns (x0_raw, x0, y0): the raw bilinear upsample kept for the
    residual output, plus the two embedded feature maps.
    """
    C, hx, wx = x.shape
    c, H, W = y.shape
    if H % hx != 0 or W % wx != 0 or H // hx != W // wx:
        raise ShapeError(f"preprocess: MSI {H}x{W} is not an integer multiple of LR {hx}x{wx}")
    x0_raw = nn.resize_bilinear(x, H, W) if (hx, wx) != (H, W) else x
    x0 = nn.conv(store, "pre.embed_x", x0_raw, hidden, k=1)
    y0 = nn.conv(store, "pre.embed_y", y, hidden, k=3)
    return x0_raw, x0, y0


def dae_forward(store: ParamStore, name: str, f: Tensor, k: int) -> Tensor:
    """Directional attention encoder: directional transform, then a gated
    global/local split with a residual connection back to the input."""
    C = f.shape[0]
    f_dir = ast_forward(store, f"{name}.ast", f, k)
    gvec = nn.conv(store, f"{name}.glob", ad.reshape(nn.global_avgpool(f_dir), (C, 1, 1)), C, k=1)
    f_glob = ad.broadcast_to(gvec, f_dir.shape)
    loc = nn.conv(store, f"{name}.loc1", f_dir - f_glob, C, k=3)
    loc = ad.tanh(nn.instance_norm(store, f"{name}.loc_in", loc))
    f_loc = nn.conv(store, f"{name}.loc2", loc, C, k=3)
    gate = ad.sigmoid(nn.conv(store, f"{name}.gate", ad.concat([f_glob, f_loc], axis=0), C, k=1))
    one = Tensor(np.ones((1, 1, 1), dtype=gate.data.dtype))
    return gate * f_glob + (one - gate) * f_loc + f


def daci_forward(store: ParamStore, name: str, f_x: Tensor, f_y: Tensor, levels: int) -> Tensor:
    """Multi-scale channel-transposed cross attention between the branches.

    At each scale, queries come from the X branch and keys/values from the
    Y branch (1x1 convs); tokens are channels, so the attention map is
    (h, h) and cost stays independent of image size.  Scale outputs are
    upsampled and combined with learnable coefficients.
    """
    if f_x.shape != f_y.shape:
        raise ShapeError(f"daci_forward: branch shapes differ {f_x.shape} vs {f_y.shape}")
    C, H, W = f_x.shape
    acc = None
    cx, cy = f_x, f_y
    for lvl in range(levels):
        if lvl > 0:
            cx = nn.avgpool2(cx)
            cy = nn.avgpool2(cy)
        _, hl, wl = cx.shape
        n = hl * wl
        q = ad.reshape(nn.conv(store, f"{name}.q{lvl}", cx, C, k=1), (C, n))
        kk = ad.reshape(nn.conv(store, f"{name}.k{lvl}", cy, C, k=1), (C, n))
        v = ad.reshape(nn.conv(store, f"{name}.v{lvl}", cy, C, k=1), (C, n))
        att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(kk)), 1.0 / np.sqrt(n)), axis=-1)
        out = ad.reshape(ad.matmul(att, v), (C, hl, wl))
        if (hl, wl) != (H, W):
            out = nn.resize_bilinear(out, H, W)
        gamma = store.param(f"{name}.gamma{lvl}", (1,), init=1.0 / levels)
        term = ad.reshape(gamma, (1, 1, 1)) * out
        acc = term if acc is None else acc + term
    return acc


def vdae_forward(store: ParamStore, name: str, x_prev: Tensor, y_prev: Tensor,
                 k: int, levels: int, use_dae: bool = True, use_daci: bool = True) -> VdaeState:
    """One encoder stage: shared directional encoder on both branches,
    cross interaction, channel-gated refinement, residual updates.

    Ablations: use_dae=False passes features through untouched;
    use_daci=False replaces the interaction with the branch mean.
    """
    if use_dae:
        f_x = dae_forward(store, f"{name}.dae", x_prev, k)
        f_y = dae_forward(store, f"{name}.dae", y_prev, k)
    else:
        f_x, f_y = x_prev, y_prev
    if use_daci:
        t = daci_forward(store, f"{name}.daci", f_x, f_y, levels)
    else:
        t = ad.scale(f_x + f_y, 0.5)
    t_ref = t * nn.channel_gate(store, f"{name}.tgate", t)
    x_k = f_x + nn.conv(store, f"{name}.proj_x", t_ref, f_x.shape[0], k=1)
    y_k = f_y + nn.conv(store, f"{name}.proj_y", t_ref, f_y.shape[0], k=1)
    return VdaeState(x_k, y_k, t)


def fusion_block(store: ParamStore, name: str, inputs, width: int, out_ch: int,
                 zero_tail: bool = False, enabled: bool = True) -> Tensor:
    """Merge feature maps: concat, bottleneck, channel attention, project.

    With enabled=False the block degrades to a single 1x1 conv of the
    concatenation (the ablated form).  zero_tail zero-initializes the
    final conv so the block starts as an exact no-op contribution.
    """
    shapes = {t.shape[1:] for t in inputs}
    if len(shapes) != 1:
        raise ShapeError(f"fusion_block: spatial dims differ: {sorted(shapes)}")
    cat = ad.concat(list(inputs), axis=0)
    if not enabled:
        return nn.conv(store, f"{name}.lite", cat, out_ch, k=1,
                       init="zeros" if zero_tail else "kaiming")
    h = ad.leaky_relu(nn.conv(store, f"{name}.mix", cat, width, k=1), 0.2)
    h = nn.conv(store, f"{name}.conv1", h, width, k=3)
    h = h * nn.channel_gate(store, f"{name}.ca", h)
    return nn.conv(store, f"{name}.conv2", h, out_ch, k=3,
                   init="zeros" if zero_tail else "kaiming")


@dataclass
class AsseConfig:
    hidden: int = 16
    k_dirs: int = 4
    daci_levels: int = 2
    ratio: int = 4
    use_dae: bool = True
    use_daci: bool = True
    use_fusion: bool = True


def asse_forward(store: ParamStore, x: Tensor, y: Tensor, cfg: AsseConfig):
    """Stage-I forward pass. Returns (z_init, intermediates dict)."""
    C = x.shape[0]
    x0_raw, x0, y0 = preprocess(store, x, y, cfg.hidden)
    states = []
    cur_x, cur_y = x0, y0
    for stage in (1, 2, 3):
        st = vdae_forward(store, f"vdae{stage}", cur_x, cur_y, cfg.k_dirs,
                          cfg.daci_levels, cfg.use_dae, cfg.use_daci)
        states.append(st)
        cur_x, cur_y = st.x, st.y
    s1, s2, s3 = states
    f1 = fusion_block(store, "fuse1", [s3.t, s3.x, s3.y], cfg.hidden, cfg.hidden,
                      enabled=cfg.use_fusion)
    f2 = fusion_block(store, "fuse2", [f1, s2.t, s2.x, s2.y], cfg.hidden, cfg.hidden,
                      enabled=cfg.use_fusion)
    f3 = fusion_block(store, "fuse3", [f2, s1.t, s1.x, s1.y], cfg.hidden, C,
                      zero_tail=True, enabled=cfg.use_fusion)
    z_init = x0_raw + f3
    inter = {"x0_raw": x0_raw, "residual": f3,
             "t": [s.t for s in states], "f": [f1, f2, f3]}
    return z_init, inter
