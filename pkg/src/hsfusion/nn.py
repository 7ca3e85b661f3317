"""Differentiable neural-net building blocks on top of the autodiff engine.

Everything here works on single images laid out channel-first (C, H, W).
Spatial convolutions default to reflect padding so that constant inputs
propagate to constant outputs everywhere, including borders; zero padding
is available through the same API.  Learned layers create their weights
lazily in a ParamStore under a dotted name.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, NonFiniteError, ShapeError

# -- padding ------------------------------------------------------------------


def _reflect_index(n: int, lo: int, hi: int) -> np.ndarray:
    """Source index for each position of a length n+lo+hi reflect-padded axis."""
    idx = np.arange(-lo, n + hi)
    period = 2 * (n - 1) if n > 1 else 1
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def pad2d(x: Tensor, pads, mode: str = "zero") -> Tensor:
    """Pad the last two axes. pads = int or (top, bottom, left, right)."""
    if isinstance(pads, int):
        pads = (pads, pads, pads, pads)
    pt, pb, pl, pr = pads
    if min(pads) < 0:
        raise ShapeError("negative padding")
    C, H, W = x.shape
    if mode == "zero":
        out = Tensor(np.pad(x.data, ((0, 0), (pt, pb), (pl, pr))), (x,), "pad2d")

        def bw(g):
            ad._accum(x, g[:, pt:pt + H, pl:pl + W])

    elif mode == "reflect":
        iy = _reflect_index(H, pt, pb)
        ix = _reflect_index(W, pl, pr)
        out = Tensor(np.ascontiguousarray(x.data[:, iy[:, None], ix[None, :]]), (x,), "pad2d")
        flat_idx = (iy[:, None] * W + ix[None, :]).ravel()

        def bw(g):
            hw = H * W
            buf = np.empty_like(x.data)
            for c in range(C):  # bincount scatter beats np.add.at by ~10x
                buf[c] = np.bincount(flat_idx, weights=g[c].ravel(),
                                     minlength=hw).reshape(H, W)
            ad._accum(x, buf.astype(x.data.dtype, copy=False))

    else:
        raise ConfigError(f"unknown pad mode {mode!r}")
    out._backward = bw if out.requires_grad else None
    return out


# -- convolution ----------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad_mode: str = "zero", pad: int | None = None) -> Tensor:
    """Cross-correlation of (C,H,W) with (O,C,kh,kw) weights.

    pad defaults to kh//2 ('same' for odd kernels at stride 1).  Reflect
    padding is applied as a separate differentiable op before the
    zero-pad-free core.
    """
    O, Cw, kh, kw = w.shape
    C = x.shape[0]
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, weights expect {Cw}")
    p = kh // 2 if pad is None else pad
    if pad_mode == "reflect" and p > 0:
        x = pad2d(x, p, "reflect")
        p = 0
    return _conv2d_core(x, w, b, stride, p)


def _conv2d_core(x: Tensor, w: Tensor, b: Tensor | None, stride: int, p: int) -> Tensor:
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    s = stride
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p > 0 else x.data
    Hp, Wp = xp.shape[1:]
    oh = (Hp - kh) // s + 1
    ow = (Wp - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({Hp},{Wp})")
    cols = np.empty((C, kh, kw, oh, ow), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xp[:, u:u + s * oh:s, v:v + s * ow:s]
    cols2 = cols.reshape(C * kh * kw, oh * ow)
    w2 = w.data.reshape(O, -1)
    out_data = (w2 @ cols2).reshape(O, oh, ow)
    if b is not None:
        out_data = out_data + b.data[:, None, None]
    parents = (x, w, b) if b is not None else (x, w)
    out = Tensor(out_data, parents, "conv2d")

    def bw(g):
        g2 = g.reshape(O, oh * ow)
        if b is not None:
            ad._accum(b, g2.sum(axis=1))
        ad._accum(w, (g2 @ cols2.T).reshape(w.shape))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(C, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, u:u + s * oh:s, v:v + s * ow:s] += dcols[:, u, v]
            ad._accum(x, dxp[:, p:p + H, p:p + W] if p > 0 else dxp)

    out._backward = bw if out.requires_grad else None
    return out


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def separable_gaussian(x: Tensor, size: int, sigma: float) -> Tensor:
    """Gaussian blur as two 1-D passes (x then y) with reflect padding."""
    if size % 2 == 0 or size not in (3, 5, 7):
        raise ConfigError(f"separable_gaussian: size must be odd in {{3,5,7}}, got {size}")
    if sigma <= 0:
        raise ConfigError("separable_gaussian: sigma must be positive")
    k = gaussian_kernel1d(size, sigma)
    p = size // 2
    C, H, W = x.shape
    xp = pad2d(x, (0, 0, p, p), "reflect")
    acc = None
    for u in range(size):
        term = ad.scale(xp[:, :, u:u + W], float(k[u]))
        acc = term if acc is None else acc + term
    yp = pad2d(acc, (p, p, 0, 0), "reflect")
    acc2 = None
    for u in range(size):
        term = ad.scale(yp[:, u:u + H, :], float(k[u]))
        acc2 = term if acc2 is None else acc2 + term
    return acc2


# -- pooling ------------------------------------------------------------------


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2; trailing odd row/col dropped."""
    C, H, W = x.shape
    if H < 2 or W < 2:
        raise ShapeError(f"avgpool2 needs H,W >= 2, got {(H, W)}")
    H2, W2 = H // 2, W // 2
    v = x[:, :2 * H2, :2 * W2]
    v = ad.reshape(v, (C, H2, 2, W2, 2))
    return ad.reduce_mean(v, axes=(2, 4))


_MATRIX_CACHE: dict = {}


def _bin_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-normalized indicator over contiguous floor-partition bins."""
    key = ("bin", n_in, n_out, np.dtype(dtype).name)
    if key in _MATRIX_CACHE:
        return _MATRIX_CACHE[key]
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = ((i + 1) * n_in) // n_out
        m[i, lo:hi] = 1.0 / (hi - lo)
    _MATRIX_CACHE[key] = m
    return m


def adaptive_avgpool(x: Tensor, out_hw=(8, 8)) -> Tensor:
    C, H, W = x.shape
    oh, ow = out_hw
    if H < oh or W < ow:
        raise ShapeError(f"adaptive_avgpool: input {(H, W)} smaller than target {out_hw}")
    Ph = Tensor(_bin_matrix(H, oh, x.data.dtype))
    Pw = Tensor(_bin_matrix(W, ow, x.data.dtype).T)
    return ad.matmul(ad.matmul(Ph, x), Pw)


def global_avgpool(x: Tensor) -> Tensor:
    """(C,H,W) -> (C,) channel means."""
    return ad.reduce_mean(x, axes=(1, 2))


# -- resampling ----------------------------------------------------------------


def _lerp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Bilinear 1-D interpolation matrix, half-pixel-center convention."""
    key = ("lerp", n_in, n_out, np.dtype(dtype).name)
    if key in _MATRIX_CACHE:
        return _MATRIX_CACHE[key]
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        f = src - i0
        m[np.arange(n_out), i0] += 1.0 - f
        m[np.arange(n_out), i1] += f
    _MATRIX_CACHE[key] = m
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with align-corners=false sampling (centers at (i+0.5)*scale-0.5)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("resize_bilinear: output sizes must be >= 1")
    C, H, W = x.shape
    Ry = Tensor(_lerp_matrix(H, out_h, x.data.dtype))
    Rx = Tensor(_lerp_matrix(W, out_w, x.data.dtype).T)
    return ad.matmul(ad.matmul(Ry, x), Rx)


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of (C,H,W) at normalized coords grid (Ho,Wo,2).

    grid[...,0] is the x (width) coordinate, grid[...,1] the y coordinate,
    both in [-1,1] with -1/+1 mapping exactly onto the first/last pixel
    center (so sampling at grid points reproduces pixel values).  Out of
    range coordinates clamp to the border.  Differentiable in x and grid.
    """
    C, H, W = x.shape
    if grid.shape[-1] != 2 or len(grid.shape) != 3:
        raise ShapeError(f"grid must be (Ho,Wo,2), got {grid.shape}")
    if not np.isfinite(grid.data).all():
        raise NonFiniteError("grid_sample: non-finite grid coordinates")
    gx = grid.data[..., 0]
    gy = grid.data[..., 1]
    ix = (gx + 1.0) * 0.5 * (W - 1)
    iy = (gy + 1.0) * 0.5 * (H - 1)
    x0 = np.floor(ix).astype(np.intp)
    y0 = np.floor(iy).astype(np.intp)
    fx = ix - x0
    fy = iy - y0
    zero = np.intp(0)
    x0c = np.minimum(np.maximum(x0, zero), W - 1)
    x1c = np.minimum(np.maximum(x0 + 1, zero), W - 1)
    y0c = np.minimum(np.maximum(y0, zero), H - 1)
    y1c = np.minimum(np.maximum(y0 + 1, zero), H - 1)
    # one fused gather: flat indices of the four corners
    i00 = y0c * W + x0c
    i01 = y0c * W + x1c
    i10 = y1c * W + x0c
    i11 = y1c * W + x1c
    flat = x.data.reshape(C, H * W)
    v00 = flat[:, i00]
    v01 = flat[:, i01]
    v10 = flat[:, i10]
    v11 = flat[:, i11]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out_data = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out = Tensor(out_data, (x, grid), "grid_sample")

    def bw(g):
        if x.requires_grad:
            idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
            dx = np.empty_like(x.data)
            hw = H * W
            for c in range(C):
                wts = np.concatenate([(g[c] * w00).ravel(), (g[c] * w01).ravel(),
                                      (g[c] * w10).ravel(), (g[c] * w11).ravel()])
                dx[c] = np.bincount(idx, weights=wts, minlength=hw).reshape(H, W)
            ad._accum(x, dx)
        if grid.requires_grad:
            dfx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * g
            dfy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * g
            dgx = dfx.sum(axis=0) * 0.5 * (W - 1)
            dgy = dfy.sum(axis=0) * 0.5 * (H - 1)
            ad._accum(grid, np.stack([dgx, dgy], axis=-1))

    out._backward = bw if out.requires_grad else None
    return out


_BASE_GRIDS: dict = {}


def _base_grid(h: int, w: int, dt) -> tuple:
    key = (h, w, np.dtype(dt).name)
    if key not in _BASE_GRIDS:
        bx = np.broadcast_to(np.linspace(-1.0, 1.0, w, dtype=dt)[None, :], (h, w)).copy()
        by = np.broadcast_to(np.linspace(-1.0, 1.0, h, dtype=dt)[:, None], (h, w)).copy()
        _BASE_GRIDS[key] = (bx, by)
    return _BASE_GRIDS[key]


def rotation_grid(theta: Tensor, h: int, w: int, sign: float = 1.0) -> Tensor:
    """Sampling grid that rotates image content about the center.

    theta is a single-element tensor (radians); the grid stays in the
    graph so gradients flow back into the angle.
    """
    bx, by = _base_grid(h, w, theta.data.dtype)
    X = Tensor(bx)
    Y = Tensor(by)
    th = ad.reshape(theta, (1, 1)) if theta.shape != (1, 1) else theta
    c = ad.cos(th)
    s = ad.scale(ad.sin(th), sign)
    xs = c * X + s * Y
    ys = c * Y - s * X
    return ad.stack([xs, ys], axis=2)


def rotation_grid_batch(theta: Tensor, h: int, w: int, sign: float = 1.0) -> Tensor:
    """All K rotation grids stacked row-wise: (K*h, w, 2), one node set."""
    k = theta.shape[0]
    bx, by = _base_grid(h, w, theta.data.dtype)
    X = Tensor(bx[None])          # (1,h,w)
    Y = Tensor(by[None])
    c = ad.reshape(ad.cos(theta), (k, 1, 1))
    s = ad.reshape(ad.scale(ad.sin(theta), sign), (k, 1, 1))
    xs = c * X + s * Y            # (K,h,w)
    ys = c * Y - s * X
    grid = ad.stack([xs, ys], axis=3)
    return ad.reshape(grid, (k * h, w, 2))


def rotated_x_coords(theta: Tensor, h: int, w: int, sign: float = 1.0) -> Tensor:
    """Only the rotated x coordinate per direction: (K,h,w)."""
    k = theta.shape[0]
    bx, by = _base_grid(h, w, theta.data.dtype)
    X = Tensor(bx[None])
    Y = Tensor(by[None])
    c = ad.reshape(ad.cos(theta), (k, 1, 1))
    s = ad.reshape(ad.scale(ad.sin(theta), sign), (k, 1, 1))
    return c * X + s * Y


def interp_rows(q: Tensor, coords: Tensor) -> Tensor:
    """Average over directions of row-constant fields sampled from 1-D signals.

    q is (K,C,w) (a 1-D signal per direction and channel), coords (K,h,w)
    holds normalized x coordinates in [-1,1] (clamp-to-edge outside).  The
    result is mean_k q[k,:,coords[k]] with linear interpolation, shape
    (C,h,w).  Differentiable in q and coords.
    """
    k, C, w = q.shape
    kc, h, wo = coords.shape
    if kc != k:
        raise ShapeError(f"interp_rows: direction counts differ ({k} vs {kc})")
    if not np.isfinite(coords.data).all():
        raise NonFiniteError("interp_rows: non-finite coordinates")
    ix = (coords.data + 1.0) * 0.5 * (w - 1)
    i0 = np.floor(ix).astype(np.intp)
    f = ix - i0
    zero = np.intp(0)
    i0c = np.minimum(np.maximum(i0, zero), w - 1)
    i1c = np.minimum(np.maximum(i0 + 1, zero), w - 1)
    offs = (np.arange(k, dtype=np.intp) * w)[:, None, None]
    g0 = (i0c + offs).reshape(-1)          # (K*h*wo,)
    g1 = (i1c + offs).reshape(-1)
    qt = np.ascontiguousarray(q.data.transpose(1, 0, 2)).reshape(C, k * w)
    v0 = qt[:, g0].reshape(C, k, h, wo)
    v1 = qt[:, g1].reshape(C, k, h, wo)
    out_data = ((1.0 - f) * v0 + f * v1).mean(axis=1)
    out = Tensor(out_data, (q, coords), "interp_rows")

    def bw(g):
        gk = g[:, None] / k                      # (C,1,h,wo)
        if q.requires_grad:
            idx = np.concatenate([g0, g1])
            dq = np.empty((C, k * w), dtype=q.data.dtype)
            for c in range(C):
                wts = np.concatenate([(gk[c] * (1.0 - f)).ravel(),
                                      (gk[c] * f).ravel()])
                dq[c] = np.bincount(idx, weights=wts, minlength=k * w)
            ad._accum(q, dq.reshape(C, k, w).transpose(1, 0, 2))
        if coords.requires_grad:
            dix = ((v1 - v0) * gk).sum(axis=0) * (0.5 * (w - 1))
            ad._accum(coords, dix)

    out._backward = bw if out.requires_grad else None
    return out


def correlate1d(x: Tensor, kernel: np.ndarray, axis: int) -> Tensor:
    """Valid-mode k-tap correlation with a constant kernel along axis 1 or 2.

    One graph node for the whole tap sum (the Gaussian pyramid would
    otherwise spend ~2k nodes per blur).
    """
    kk = np.asarray(kernel, dtype=x.data.dtype)
    taps = len(kk)
    C, H, W = x.shape
    if axis == 2:
        Wo = W - taps + 1
        out_data = np.zeros((C, H, Wo), dtype=x.data.dtype)
        for u in range(taps):
            out_data += kk[u] * x.data[:, :, u:u + Wo]
    elif axis == 1:
        Ho = H - taps + 1
        out_data = np.zeros((C, Ho, W), dtype=x.data.dtype)
        for u in range(taps):
            out_data += kk[u] * x.data[:, u:u + Ho, :]
    else:
        raise ShapeError("correlate1d: axis must be 1 or 2")
    out = Tensor(out_data, (x,), "correlate1d")

    def bw(g):
        dx = np.zeros_like(x.data)
        if axis == 2:
            Wo = W - taps + 1
            for u in range(taps):
                dx[:, :, u:u + Wo] += kk[u] * g
        else:
            Ho = H - taps + 1
            for u in range(taps):
                dx[:, u:u + Ho, :] += kk[u] * g
        ad._accum(x, dx)

    out._backward = bw if out.requires_grad else None
    return out


# -- normalization and linear ----------------------------------------------------


def normalize(x: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance along `axes` (epsilon inside the sqrt)."""
    mu = ad.reduce_mean(x, axes=axes, keepdims=True)
    xc = x - mu
    var = ad.reduce_mean(xc * xc, axes=axes, keepdims=True)
    return xc / ad.power(var + eps, 0.5)


def layer_norm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    """Channel-axis layer norm of (C,H,W) with learnable per-channel affine."""
    C = x.shape[0]
    gamma = store.param(f"{name}.g", (C, 1, 1), init="ones")
    beta = store.param(f"{name}.b", (C, 1, 1), init="zeros")
    return normalize(x, axes=(0,)) * gamma + beta


def instance_norm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    """Per-channel spatial normalization with learnable affine."""
    C = x.shape[0]
    gamma = store.param(f"{name}.g", (C, 1, 1), init="ones")
    beta = store.param(f"{name}.b", (C, 1, 1), init="zeros")
    return normalize(x, axes=(1, 2)) * gamma + beta


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """(N,in) @ (out,in)^T + b."""
    out = ad.matmul(x, ad.transpose(w))
    return out + b if b is not None else out


# -- parameter-creating layers -----------------------------------------------


def conv(store: ParamStore, name: str, x: Tensor, out_ch: int, k: int = 3,
         stride: int = 1, pad_mode: str = "reflect", bias: bool = True,
         init="kaiming") -> Tensor:
    C = x.shape[0]
    w = store.param(f"{name}.w", (out_ch, C, k, k), init=init, fan_in=C * k * k)
    b = store.param(f"{name}.b", (out_ch,), init="zeros") if bias else None
    if k == 1:
        return conv2d(x, w, b, stride=stride, pad_mode="zero", pad=0)
    return conv2d(x, w, b, stride=stride, pad_mode=pad_mode)


def dense(store: ParamStore, name: str, x: Tensor, out_features: int,
          bias: bool = True, init="kaiming") -> Tensor:
    in_f = x.shape[-1]
    w = store.param(f"{name}.w", (out_features, in_f), init=init, fan_in=in_f)
    b = store.param(f"{name}.b", (out_features,), init="zeros") if bias else None
    return linear(x, w, b)


def mlp_vector(store: ParamStore, name: str, v: Tensor, hidden: int, out: int) -> Tensor:
    """Two-layer ReLU MLP on a flat vector (C,) -> (out,)."""
    h = ad.reshape(v, (1, v.shape[0]))
    h = ad.relu(dense(store, f"{name}.fc1", h, hidden))
    h = dense(store, f"{name}.fc2", h, out)
    return ad.reshape(h, (out,))


def channel_gate(store: ParamStore, name: str, x: Tensor, hidden: int | None = None) -> Tensor:
    """Squeeze-excite style gate: GAP -> MLP -> sigmoid, shape (C,1,1)."""
    C = x.shape[0]
    hid = hidden if hidden is not None else max(4, C // 4)
    g = mlp_vector(store, name, global_avgpool(x), hid, C)
    return ad.reshape(ad.sigmoid(g), (C, 1, 1))
