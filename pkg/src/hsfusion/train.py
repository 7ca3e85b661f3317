"""Supervised two-stage training: loss, Adam, cosine schedule, checkpoints.

Runs are deterministic for a fixed seed: parameter init order, batch
sampling and the single-threaded step order are all seeded, and the
checkpoint stores the optimizer moments plus the sampler RNG state so a
resumed run reproduces an uninterrupted one bit for bit.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, FormatError, NonFiniteError, ShapeError
from .model import FusionConfig, init_params, model_forward

CKPT_MAGIC = "HSCK1"


# -- loss and optimizer --------------------------------------------------------


def loss(z_hat: Tensor, z_init: Tensor, z: Tensor, alpha: float = 0.8,
         beta: float = 0.2) -> Tensor:
    """Weighted L1: alpha*mean|z_hat - z| + beta*mean|z_init - z|."""
    if z_hat.shape != z.shape or z_init.shape != z.shape:
        raise ShapeError("loss: operand shapes differ")
    l1 = ad.reduce_mean(ad.absolute(z_hat - z))
    l2 = ad.reduce_mean(ad.absolute(z_init - z))
    return ad.scale(l1, alpha) + ad.scale(l2, beta)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, t: int = 1) -> None:
    """Bias-corrected Adam update over every parameter in the store.

    Raises NonFiniteError (before touching any state) if a gradient is
    non-finite; t is the 1-indexed step count for bias correction.
    """
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * (g * g)
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def clip_global_norm(store: ParamStore, max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        s = max_norm / norm
        for _, p in store.items():
            if p.grad is not None:
                p.grad = p.grad * s
    return norm


def cosine_lr(t: int, total: int, lr_init: float, lr_min: float = 0.0) -> float:
    """Half-cosine decay from lr_init (t=0) to lr_min (t=total)."""
    if t >= total:
        return lr_min
    if total <= 0:
        return lr_init
    return lr_min + (lr_init - lr_min) * 0.5 * (1.0 + math.cos(math.pi * t / total))


# -- configuration ---------------------------------------------------------------


@dataclass
class TrainConfig:
    alpha: float = 0.8
    beta: float = 0.2
    lr_init: float = 4e-4
    lr_min: float = 1e-6
    steps: int = 400
    batch: int = 2
    patch: int = 32
    seed: int = 0
    eval_interval: int = 100
    grad_clip: float = 1.0
    bands: int = 31
    msi_bands: int = 3
    ratio: int = 4
    hidden: int = 16
    k_dirs: int = 4
    daci_levels: int = 2
    embed: int = 16
    tb: int = 1
    window: int = 8
    no_daci: bool = False
    no_dae: bool = False
    no_fusion: bool = False
    no_gsrt: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.patch % self.ratio:
            raise ConfigError(f"patch {self.patch} not divisible by ratio {self.ratio}")
        if self.patch % self.window:
            raise ConfigError(f"patch {self.patch} not divisible by window {self.window}")

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            bands=self.bands, msi_bands=self.msi_bands, ratio=self.ratio,
            hidden=self.hidden, k_dirs=self.k_dirs, daci_levels=self.daci_levels,
            embed=self.embed, tb=self.tb, window=self.window,
            use_dae=not self.no_dae, use_daci=not self.no_daci,
            use_fusion=not self.no_fusion, use_gsrt=not self.no_gsrt)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls(**parse_kv_file(path, cls))


def parse_kv_file(path, cls) -> dict:
    """Flat key=value config text; '#' starts a comment; types follow the dataclass."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
            t = types[key]
            if t in ("bool", bool):
                if val.lower() not in ("true", "false", "0", "1"):
                    raise ConfigError(f"{path}:{ln}: bad bool {val!r}")
                out[key] = val.lower() in ("true", "1")
            elif t in ("int", int):
                out[key] = int(val)
            else:
                out[key] = float(val)
    return out


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, store: ParamStore, step: int, cfg: TrainConfig,
                    rng: np.random.Generator) -> None:
    """ASCII header (names, shapes, config, RNG state) + raw value/m/v payloads."""
    cfg_items = ",".join(f"{k}={v}" for k, v in sorted(dataclasses.asdict(cfg).items()))
    rng_state = base64.b64encode(json.dumps(rng.bit_generator.state).encode()).decode()
    dtype = "f64" if next(iter(store.items()))[1].data.dtype == np.float64 else "f32"
    lines = [CKPT_MAGIC,
             f"step: {step}",
             f"dtype: {dtype}",
             f"confighash: {cfg.fusion_config().hash()}",
             f"config: {cfg_items}",
             f"rng: {rng_state}"]
    for name, p in store.items():
        dims = " ".join(str(d) for d in p.shape)
        lines.append(f"param: {name} {dims}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for name, p in store.items():
            fh.write(np.ascontiguousarray(p.data).tobytes())
            fh.write(np.ascontiguousarray(store.m[name]).tobytes())
            fh.write(np.ascontiguousarray(store.v[name]).tobytes())


def load_checkpoint(path):
    """Returns (store, step, TrainConfig, rng). Raises FormatError on damage."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"\n\n")
    if end < 0:
        raise FormatError("missing checkpoint header terminator", offset=len(blob))
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    if not header or header[0] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    fields = {}
    params = []
    for line in header[1:]:
        key, _, val = line.partition(":")
        key = key.strip()
        val = val.strip()
        if key == "param":
            parts = val.split()
            params.append((parts[0], tuple(int(d) for d in parts[1:])))
        else:
            fields[key] = val
    step = int(fields["step"])
    dtype = np.float64 if fields.get("dtype") == "f64" else np.float32
    cfg_kwargs = {}
    tcfg_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for item in fields["config"].split(","):
        k, _, v = item.partition("=")
        t = tcfg_types[k]
        if t in ("bool", bool):
            cfg_kwargs[k] = v == "True"
        elif t in ("int", int):
            cfg_kwargs[k] = int(v)
        else:
            cfg_kwargs[k] = float(v)
    cfg = TrainConfig(**cfg_kwargs)
    if fields.get("confighash") != cfg.fusion_config().hash():
        raise ConfigError("checkpoint config hash does not match its stored config")
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(base64.b64decode(fields["rng"]))
    store = ParamStore(0)
    offset = end + 2
    itemsize = np.dtype(dtype).itemsize
    for name, shape in params:
        n = int(np.prod(shape))
        for target in ("data", "m", "v"):
            chunk = blob[offset:offset + n * itemsize]
            if len(chunk) != n * itemsize:
                raise FormatError(f"truncated payload for {name!r}/{target}", offset=offset)
            arr = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
            if target == "data":
                t = Tensor(arr, op="param", requires_grad=True)
                store._params[name] = t
            elif target == "m":
                store.m[name] = arr
            else:
                store.v[name] = arr
            offset += n * itemsize
    if offset != len(blob):
        raise FormatError("trailing bytes after parameter payloads", offset=offset)
    return store, step, cfg, rng


def checkpoint_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    store: ParamStore
    cfg: TrainConfig
    step: int
    log: list = field(default_factory=list)
    final_loss: float = float("nan")


def _sample_batch(rng: np.random.Generator, triples, cfg: TrainConfig):
    """Seeded random crops; offsets snap to the resolution ratio."""
    out = []
    for _ in range(cfg.batch):
        idx = int(rng.integers(len(triples)))
        x, y, z = triples[idx]
        C, H, W = z.data.shape
        p, r = cfg.patch, cfg.ratio
        oy = int(rng.integers(0, (H - p) // r + 1)) * r
        ox = int(rng.integers(0, (W - p) // r + 1)) * r
        zc = z.data[:, oy:oy + p, ox:ox + p]
        yc = y.data[:, oy:oy + p, ox:ox + p]
        xc = x.data[:, oy // r:(oy + p) // r, ox // r:(ox + p) // r]
        out.append((xc, yc, zc))
    return out


def evaluate(store: ParamStore, fcfg: FusionConfig, triples):
    """Mean PSNR/SAM of the final output over full-size scenes."""
    ps, sa = [], []
    for x, y, z in triples:
        z_hat, _, _ = model_forward(store, fcfg, Tensor(x.data), Tensor(y.data))
        pred = np.clip(z_hat.data, 0.0, 1.0)
        ps.append(metrics.psnr(pred, z.data))
        sa.append(metrics.sam(pred, z.data))
    return float(np.mean(ps)), float(np.mean(sa))


def _snapshot(store: ParamStore):
    return {name: (p.data.copy(), store.m[name].copy(), store.v[name].copy())
            for name, p in store.items()}


def _restore(store: ParamStore, snap) -> None:
    for name, (d, m, v) in snap.items():
        store._params[name].data = d
        store.m[name] = m
        store.v[name] = v


def train(cfg: TrainConfig, train_triples, val_triples=(), ckpt_path=None,
          log_path=None, resume=None) -> TrainResult:
    """Run (or resume) the two-stage supervised loop.

    On a non-finite loss or gradient the step is rolled back, the last
    good state is checkpointed (when a path is given) and NonFiniteError
    propagates.
    """
    fcfg = cfg.fusion_config()
    if resume is not None:
        store, start_step, rng = resume
    else:
        store = init_params(fcfg, cfg.seed, patch=cfg.patch)
        rng = np.random.default_rng(cfg.seed + 1)
        start_step = 0
    log: list[str] = []
    final_loss = float("nan")
    horizon = max(cfg.steps - 1, 1)
    for t in range(start_step + 1, cfg.steps + 1):
        lr = cosine_lr(t - 1, horizon, cfg.lr_init, cfg.lr_min)
        batch = _sample_batch(rng, train_triples, cfg)
        snap = _snapshot(store)
        store.zero_grad()
        total = None
        for xc, yc, zc in batch:
            z_hat, z_init, _ = model_forward(store, fcfg, Tensor(xc), Tensor(yc))
            item = loss(z_hat, z_init, Tensor(zc), cfg.alpha, cfg.beta)
            total = item if total is None else total + item
        total = ad.scale(total, 1.0 / cfg.batch)
        final_loss = float(total.data.reshape(()))
        try:
            if not np.isfinite(final_loss):
                raise NonFiniteError(f"non-finite loss at step {t}")
            total.backward()
            clip_global_norm(store, cfg.grad_clip)
            adam_step(store, lr, t=t)
        except NonFiniteError:
            _restore(store, snap)
            if ckpt_path:
                save_checkpoint(ckpt_path, store, t - 1, cfg, rng)
                _write_log(log_path, log)
            raise
        if val_triples and (t % cfg.eval_interval == 0 or t == cfg.steps):
            p, s = evaluate(store, fcfg, val_triples)
            log.append(f"{t} {final_loss:.6f} {p:.4f} {s:.4f}")
    if ckpt_path:
        save_checkpoint(ckpt_path, store, cfg.steps, cfg, rng)
    _write_log(log_path, log)
    return TrainResult(store=store, cfg=cfg, step=cfg.steps, log=log, final_loss=final_loss)


def _write_log(log_path, log) -> None:
    if log_path:
        with open(log_path, "a") as fh:
            for line in log:
                fh.write(line + "\n")
