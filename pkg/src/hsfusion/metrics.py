"""Full-reference and no-reference quality metrics for band-first cubes.

All functions take (C,H,W) float arrays.  Conventions pinned here so
numbers are reproducible across implementations:

* PSNR is computed per band and averaged over bands (not global MSE),
  capped at 100 dB.
* SAM is the mean per-pixel spectral angle in degrees; zero-norm pixels
  are skipped (and counted).
* SSIM uses an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
  valid windows only, averaged over bands.
* UIQI uses an 8x8 sliding window with sample (ddof=1) statistics.
* QNR = (1-D_lambda)*(1-D_s) with exponents 1; the spectral term compares
  inter-band UIQI of the fused cube against the LR cube, the spatial term
  compares fused-vs-MSI UIQI at full scale against the spatially degraded
  fused cube vs degraded MSI.  Both terms clamp to [0,1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricUndefined, ShapeError

_PSNR_CAP = 100.0


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Band-averaged peak signal-to-noise ratio in dB, capped at 100."""
    _check_pair(a, b)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    vals = []
    for band in range(a.shape[0]):
        mse = float(np.mean((a[band] - b[band]) ** 2))
        if mse == 0.0:
            vals.append(_PSNR_CAP)
        else:
            vals.append(min(_PSNR_CAP, 10.0 * math.log10(peak * peak / mse)))
    return float(np.mean(vals))


def sam(a: np.ndarray, b: np.ndarray, return_details: bool = False):
    """Mean per-pixel spectral angle in degrees (scale invariant)."""
    _check_pair(a, b)
    av = a.reshape(a.shape[0], -1).astype(np.float64)
    bv = b.reshape(b.shape[0], -1).astype(np.float64)
    na = np.linalg.norm(av, axis=0)
    nb = np.linalg.norm(bv, axis=0)
    valid = (na > 0) & (nb > 0)
    n_skipped = int((~valid).sum())
    if not valid.any():
        raise MetricUndefined("sam: every pixel has a zero-norm spectrum")
    cosv = (av[:, valid] * bv[:, valid]).sum(axis=0) / (na[valid] * nb[valid])
    ang = np.degrees(np.arccos(np.clip(cosv, -1.0, 1.0)))
    mean_deg = float(ang.mean())
    if return_details:
        return mean_deg, n_skipped
    return mean_deg


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    off = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (off / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _valid_filter(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """2-D 'valid' cross-correlation via shifted accumulation."""
    kh, kw = kern.shape
    H, W = img.shape
    oh, ow = H - kh + 1, W - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"window {kern.shape} larger than image {(H, W)}")
    out = np.zeros((oh, ow), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            out += kern[u, v] * img[u:u + oh, v:v + ow]
    return out


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity over bands; 11x11 Gaussian window."""
    _check_pair(a, b)
    win = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    vals = []
    for band in range(a.shape[0]):
        x = a[band].astype(np.float64)
        y = b[band].astype(np.float64)
        mx = _valid_filter(x, win)
        my = _valid_filter(y, win)
        mxx = _valid_filter(x * x, win)
        myy = _valid_filter(y * y, win)
        mxy = _valid_filter(x * y, win)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def _uiqi_band(x: np.ndarray, y: np.ndarray, window: int = 8) -> float:
    """Wang-Bovik Q index over sliding windows with sample statistics."""
    H, W = x.shape
    if H < window or W < window:
        raise ShapeError(f"uiqi window {window} larger than image {(H, W)}")
    n = window * window
    box = np.ones((window, window), dtype=np.float64)
    sx = _valid_filter(x, box)
    sy = _valid_filter(y, box)
    sxx = _valid_filter(x * x, box)
    syy = _valid_filter(y * y, box)
    sxy = _valid_filter(x * y, box)
    mx = sx / n
    my = sy / n
    vx = (sxx - n * mx * mx) / (n - 1)
    vy = (syy - n * my * my) / (n - 1)
    cxy = (sxy - n * mx * my) / (n - 1)
    den = (vx + vy) * (mx * mx + my * my)
    ok = den > 1e-12
    if not ok.any():
        raise MetricUndefined("uiqi: all windows degenerate")
    q = 4 * cxy[ok] * mx[ok] * my[ok] / den[ok]
    return float(q.mean())


def uiqi(a: np.ndarray, b: np.ndarray, window: int = 8) -> float:
    _check_pair(a, b)
    vals = [_uiqi_band(a[band].astype(np.float64), b[band].astype(np.float64), window)
            for band in range(a.shape[0])]
    return float(np.mean(vals))


def ergas(ref: np.ndarray, est: np.ndarray, ratio: float) -> float:
    """Relative dimensionless global error: 100/ratio * sqrt(mean(RMSE_b^2/mu_b^2))."""
    _check_pair(ref, est)
    if ratio <= 0:
        raise MetricUndefined("ergas: ratio must be positive")
    ref = ref.astype(np.float64)
    est = est.astype(np.float64)
    terms = []
    for band in range(ref.shape[0]):
        mu = float(ref[band].mean())
        if mu == 0.0:
            raise MetricUndefined(f"ergas: band {band} of the reference has zero mean")
        mse = float(np.mean((ref[band] - est[band]) ** 2))
        terms.append(mse / (mu * mu))
    return float(100.0 / ratio * math.sqrt(np.mean(terms)))


def _band_groups(n_hsi: int, n_msi: int):
    """Floor-partition of HSI bands into contiguous MSI groups."""
    return [((j * n_hsi) // n_msi, ((j + 1) * n_hsi) // n_msi) for j in range(n_msi)]


def qnr(fused: np.ndarray, lr_hsi: np.ndarray, msi: np.ndarray, ratio: int,
        return_details: bool = False):
    """No-reference quality: spectral and spatial consistency product.

    fused (C,H,W), lr_hsi (C,H/r,W/r), msi (c,H,W).
    """
    from .dataio import degrade_spatial_array  # local import to avoid a cycle

    C = fused.shape[0]
    c = msi.shape[0]
    if lr_hsi.shape[0] != C:
        raise ShapeError("qnr: fused and lr_hsi band counts differ")
    if fused.shape[1:] != msi.shape[1:]:
        raise ShapeError("qnr: fused and msi spatial dims differ")
    # spectral distortion: inter-band similarity structure must survive fusion
    diffs = []
    for i in range(C):
        for j in range(i + 1, C):
            qf = _uiqi_band(fused[i].astype(np.float64), fused[j].astype(np.float64))
            ql = _uiqi_band(lr_hsi[i].astype(np.float64), lr_hsi[j].astype(np.float64))
            diffs.append(abs(qf - ql))
    d_lambda = min(1.0, float(np.mean(diffs)))
    # spatial distortion: band-to-MSI similarity at full scale vs after degradation
    fused_lr = degrade_spatial_array(fused, ratio=ratio)
    msi_lr = degrade_spatial_array(msi, ratio=ratio)
    groups = _band_groups(C, c)
    diffs = []
    for b in range(C):
        j = next(gi for gi, (lo, hi) in enumerate(groups) if lo <= b < hi)
        q_hr = _uiqi_band(fused[b].astype(np.float64), msi[j].astype(np.float64))
        q_lr = _uiqi_band(fused_lr[b].astype(np.float64), msi_lr[j].astype(np.float64))
        diffs.append(abs(q_hr - q_lr))
    d_s = min(1.0, float(np.mean(diffs)))
    score = (1.0 - d_lambda) * (1.0 - d_s)
    if return_details:
        return score, d_lambda, d_s
    return score


def anisotropy_map(img: np.ndarray, sigma: float = 1.5) -> np.ndarray:
    """Structure-tensor anisotropy of the band-mean image, in [0,1].

    Response is (l1-l2)/(l1+l2+eps) of the smoothed gradient outer
    product: ~1 along lines/edges, ~0 in flat or isotropic regions.
    Output shape (1,H,W).
    """
    if img.ndim != 3:
        raise ShapeError(f"anisotropy_map expects (C,H,W), got {img.shape}")
    H, W = img.shape[1:]
    if H < 5 or W < 5:
        raise ShapeError("anisotropy_map needs H,W >= 5")
    g = img.astype(np.float64).mean(axis=0)
    gy, gx = np.gradient(g)
    jxx = _smooth(gx * gx, sigma)
    jyy = _smooth(gy * gy, sigma)
    jxy = _smooth(gx * gy, sigma)
    diff = np.sqrt(((jxx - jyy) * 0.5) ** 2 + jxy ** 2)
    resp = 2.0 * diff / (jxx + jyy + 1e-8)
    return np.clip(resp, 0.0, 1.0)[None]


def _smooth(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with reflect boundary."""
    size = 2 * int(math.ceil(3 * sigma)) + 1
    off = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (off / sigma) ** 2)
    k /= k.sum()
    p = size // 2
    padded = np.pad(img, ((0, 0), (p, p)), mode="reflect")
    out = np.zeros_like(img)
    for u in range(size):
        out += k[u] * padded[:, u:u + img.shape[1]]
    padded = np.pad(out, ((p, p), (0, 0)), mode="reflect")
    out2 = np.zeros_like(img)
    for u in range(size):
        out2 += k[u] * padded[u:u + img.shape[0], :]
    return out2


@dataclass
class MetricReport:
    psnr_db: float
    sam_deg: float
    ssim: float
    uiqi: float
    ergas: float
    qnr: float | None = None
    per_band_psnr: list = field(default_factory=list)

    def lines(self):
        keys = [("psnr_db", self.psnr_db), ("sam_deg", self.sam_deg),
                ("ssim", self.ssim), ("uiqi", self.uiqi), ("ergas", self.ergas)]
        if self.qnr is not None:
            keys.append(("qnr", self.qnr))
        return [f"{k} {v:.6f}" for k, v in keys]


def metric_report(pred: np.ndarray, ref: np.ndarray, ratio: int = 4,
                  lr_hsi: np.ndarray | None = None,
                  msi: np.ndarray | None = None) -> MetricReport:
    per_band = []
    for band in range(pred.shape[0]):
        per_band.append(psnr(pred[band:band + 1], ref[band:band + 1]))
    q = None
    if lr_hsi is not None and msi is not None:
        q = qnr(pred, lr_hsi, msi, ratio)
    return MetricReport(
        psnr_db=psnr(pred, ref),
        sam_deg=sam(pred, ref),
        ssim=ssim(pred, ref),
        uiqi=uiqi(pred, ref),
        ergas=ergas(ref, pred, ratio),
        qnr=q,
        per_band_psnr=per_band,
    )
