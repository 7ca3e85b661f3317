"""Two-stage fusion model: assembly, configuration, and parameter init.

Parameters materialize lazily during the first forward pass, so
``init_params`` simply runs a dummy forward at the configured sizes.
The config hash pins the architecture for checkpoint compatibility.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError
from .spatial import AsseConfig, asse_forward
from .spectral import GsrtConfig, gsrt_forward


@dataclass
class FusionConfig:
    bands: int = 31
    msi_bands: int = 3
    ratio: int = 4
    hidden: int = 16         # stage-I feature width
    k_dirs: int = 4          # projection directions
    daci_levels: int = 2
    embed: int = 16          # stage-II feature width
    tb: int = 1              # stage-II block count
    window: int = 8
    use_dae: bool = True
    use_daci: bool = True
    use_fusion: bool = True
    use_gsrt: bool = True

    def __post_init__(self):
        if self.msi_bands > self.bands:
            raise ConfigError(f"msi_bands ({self.msi_bands}) must be <= bands ({self.bands})")
        if self.ratio not in (1, 2, 4, 8):
            raise ConfigError(f"ratio must be one of 1,2,4,8, got {self.ratio}")
        if self.hidden < 4:
            raise ConfigError("hidden width must be >= 4")
        if self.daci_levels < 1 or self.tb < 1 or self.k_dirs < 1:
            raise ConfigError("daci_levels, tb and k_dirs must be >= 1")

    def asse(self) -> AsseConfig:
        return AsseConfig(hidden=self.hidden, k_dirs=self.k_dirs,
                          daci_levels=self.daci_levels, ratio=self.ratio,
                          use_dae=self.use_dae, use_daci=self.use_daci,
                          use_fusion=self.use_fusion)

    def gsrt(self) -> GsrtConfig:
        return GsrtConfig(embed=self.embed, blocks=self.tb, window=self.window)

    def hash(self) -> str:
        text = ",".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_ablation(self, no_daci=False, no_dae=False, no_fusion=False, no_gsrt=False):
        return replace(self, use_daci=not no_daci, use_dae=not no_dae,
                       use_fusion=not no_fusion, use_gsrt=not no_gsrt)


def model_forward(store: ParamStore, cfg: FusionConfig, x: Tensor, y: Tensor):
    """Run both stages. Returns (z_hat, z_init, intermediates)."""
    z_init, inter = asse_forward(store, x, y, cfg.asse())
    if cfg.use_gsrt:
        z_hat = gsrt_forward(store, z_init, x, cfg.gsrt())
    else:
        z_hat = z_init
    return z_hat, z_init, inter


def init_params(cfg: FusionConfig, seed: int, patch: int = 32) -> ParamStore:
    """Materialize all parameters deterministically via a dummy forward."""
    store = ParamStore(seed)
    lr = patch // cfg.ratio
    x = Tensor(np.zeros((cfg.bands, lr, lr), dtype=ad.get_dtype()))
    y = Tensor(np.zeros((cfg.msi_bands, patch, patch), dtype=ad.get_dtype()))
    model_forward(store, cfg, x, y)
    return store


def fuse_arrays(store: ParamStore, cfg: FusionConfig, x: np.ndarray, y: np.ndarray):
    """Numpy-in/numpy-out inference wrapper."""
    z_hat, z_init, _ = model_forward(store, cfg, Tensor(x), Tensor(y))
    return z_hat.data, z_init.data
