"""Synthetic scene generation, Wald-protocol degradation, and cube I/O.

Scenes are abundance-weighted mixtures of smooth random endmember
spectra; abundance maps come from oriented lines, edges, blobs and
checkerboards so the generated cubes carry the directional content the
fusion pipeline is supposed to recover.  Degradation blurs with an even
8x8 Gaussian (reflect padding, output anchored at the top-left of the
kernel's center 2x2) and decimates at block-top-left sample points.

The on-disk container (.hsc) is a short ASCII header (key: value lines,
terminated by a blank line) followed by a raw little-endian float32
payload in band-major order.  Round trips are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError, FormatError, ShapeError

MAGIC = "HSC1"


@dataclass
class HsiCube:
    """Band-first image cube, float32, values nominally in [0,1]."""

    data: np.ndarray  # (C,H,W)
    wavelengths: list | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"HsiCube expects (C,H,W), got {self.data.shape}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape


@dataclass
class SceneSpec:
    seed: int = 0
    bands: int = 31
    height: int = 64
    width: int = 64
    endmembers: int = 5
    structures: tuple = ("lines", "edges", "blobs", "checker")
    orientations: list = field(default_factory=list)

    def __post_init__(self):
        if self.endmembers > self.bands:
            raise ConfigError("endmember count must be <= band count")
        known = {"lines", "edges", "blobs", "checker"}
        bad = set(self.structures) - known
        if bad:
            raise ConfigError(f"unknown structure kinds: {sorted(bad)}")
        for a in self.orientations:
            if not 0.0 <= a < np.pi:
                raise ConfigError(f"orientation {a} outside [0, pi)")


def _smooth_spectrum(rng: np.random.Generator, bands: int) -> np.ndarray:
    """Positive cubic-smoothed noise over the band axis, range [0.2, 1.0]."""
    n_knots = max(4, bands // 5)
    kx = np.linspace(0, bands - 1, n_knots)
    ky = rng.uniform(0.0, 1.0, size=n_knots)
    s = CubicSpline(kx, ky)(np.arange(bands))
    lo, hi = s.min(), s.max()
    if hi - lo < 1e-9:
        return np.full(bands, 0.6)
    return 0.2 + 0.8 * (s - lo) / (hi - lo)


def _structure_field(rng: np.random.Generator, kind: str, h: int, w: int,
                     angle: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    u = xx * np.cos(angle) + yy * np.sin(angle)
    if kind == "lines":
        period = rng.uniform(8.0, 20.0)
        phase = rng.uniform(0, 2 * np.pi)
        score = 0.5 + 0.5 * np.cos(2 * np.pi * u / period + phase)
        return score ** 3
    if kind == "edges":
        offset = rng.uniform(0.3, 0.7) * (u.max() + u.min())
        sharp = rng.uniform(0.5, 1.5)
        return 1.0 / (1.0 + np.exp(-(u - offset) / sharp))
    if kind == "blobs":
        score = np.zeros((h, w))
        for _ in range(3):
            cy = rng.uniform(0.15, 0.85) * h
            cx = rng.uniform(0.15, 0.85) * w
            s = rng.uniform(4.0, 10.0)
            score += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        return score
    if kind == "checker":
        cell = int(rng.integers(6, 13))
        return ((xx // cell + yy // cell) % 2).astype(np.float64)
    raise ConfigError(f"unknown structure kind {kind!r}")


def gen_scene(spec: SceneSpec) -> HsiCube:
    """Deterministic synthetic cube: per-pixel abundances sum to 1."""
    rng = np.random.default_rng(spec.seed)
    spectra = np.stack([_smooth_spectrum(rng, spec.bands)
                        for _ in range(spec.endmembers)])
    scores = []
    for i in range(spec.endmembers):
        kind = spec.structures[i % len(spec.structures)]
        if spec.orientations:
            angle = spec.orientations[i % len(spec.orientations)]
        else:
            angle = rng.uniform(0.0, np.pi)
        scores.append(_structure_field(rng, kind, spec.height, spec.width, angle))
    scores = np.stack(scores) + 0.05
    abundances = scores / scores.sum(axis=0, keepdims=True)
    cube = np.einsum("ec,ehw->chw", spectra, abundances)
    return HsiCube(np.clip(cube, 0.0, 1.0))


# -- degradation ---------------------------------------------------------------


def _even_gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    off = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (off / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def degrade_spatial_array(z: np.ndarray, ksize: int = 8, sigma: float = 3.0,
                          ratio: int = 8) -> np.ndarray:
    """Gaussian blur then stride-`ratio` decimation on a raw (C,H,W) array."""
    C, H, W = z.shape
    if H % ratio or W % ratio:
        raise ShapeError(f"spatial dims {(H, W)} not divisible by ratio {ratio}")
    k = _even_gaussian_kernel(ksize, sigma)
    # even kernel: anchor at the top-left of the center 2x2 -> pad (k/2-1) before, k/2 after
    pb = ksize // 2 - 1
    pa = ksize // 2
    zp = np.pad(z.astype(np.float64), ((0, 0), (pb, pa), (pb, pa)), mode="reflect")
    blurred = np.zeros((C, H, W), dtype=np.float64)
    for u in range(ksize):
        for v in range(ksize):
            blurred += k[u, v] * zp[:, u:u + H, v:v + W]
    return blurred[:, ::ratio, ::ratio]


def degrade_spatial(z: HsiCube, ksize: int = 8, sigma: float = 3.0,
                    ratio: int = 8) -> HsiCube:
    return HsiCube(degrade_spatial_array(z.data, ksize, sigma, ratio))


def degrade_spectral(z: HsiCube, groups: int = 3) -> HsiCube:
    """Band-averaging spectral response over contiguous floor-partition blocks."""
    C = z.bands
    if groups > C:
        raise ConfigError(f"msi band count {groups} exceeds hsi band count {C}")
    out = np.empty((groups,) + z.data.shape[1:], dtype=np.float64)
    for j in range(groups):
        lo = (j * C) // groups
        hi = ((j + 1) * C) // groups
        out[j] = z.data[lo:hi].astype(np.float64).mean(axis=0)
    return HsiCube(out)


# -- container -----------------------------------------------------------------


def write_cube(path, cube: HsiCube) -> None:
    data = np.clip(cube.data, 0.0, 1.0).astype("<f4")
    C, H, W = data.shape
    lines = [MAGIC,
             f"bands: {C}",
             f"height: {H}",
             f"width: {W}",
             "dtype: f32",
             "byteorder: little",
             "range: 0 1"]
    if cube.wavelengths:
        lines.append("wavelengths: " + " ".join(f"{w:g}" for w in cube.wavelengths))
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"\n\n")
    if end < 0:
        raise FormatError("missing header terminator", offset=len(blob))
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    if not header or header[0] != MAGIC:
        raise FormatError(f"bad magic {header[0]!r}" if header else "empty header", offset=0)
    fields = {}
    for line in header[1:]:
        key, _, val = line.partition(":")
        fields[key.strip()] = val.strip()
    try:
        C = int(fields["bands"])
        H = int(fields["height"])
        W = int(fields["width"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"missing or invalid dimension field: {exc}", offset=0) from exc
    if fields.get("dtype", "f32") != "f32":
        raise FormatError(f"unsupported dtype {fields.get('dtype')!r}", offset=0)
    if fields.get("byteorder", "little") != "little":
        raise FormatError(
            f"unsupported byte order {fields.get('byteorder')!r}: only little-endian payloads are readable",
            offset=0)
    payload = blob[end + 2:]
    expect = C * H * W * 4
    if len(payload) != expect:
        raise FormatError(
            f"payload is {len(payload)} bytes, header promises {expect}",
            offset=end + 2 + min(len(payload), expect))
    data = np.frombuffer(payload, dtype="<f4").reshape(C, H, W)
    wl = None
    if "wavelengths" in fields:
        wl = [float(t) for t in fields["wavelengths"].split()]
    return HsiCube(data.copy(), wavelengths=wl)


def make_triple(spec: SceneSpec, ratio: int = 4, msi_bands: int = 3,
                ksize: int = 8, sigma: float = 3.0):
    """Generate (lr_hsi, msi, hr_hsi) from one synthetic scene."""
    z = gen_scene(spec)
    x = degrade_spatial(z, ksize=ksize, sigma=sigma, ratio=ratio)
    y = degrade_spectral(z, groups=msi_bands)
    return x, y, z
