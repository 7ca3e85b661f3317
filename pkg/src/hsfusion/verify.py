"""Named gradient-check suites for the CLI and the acceptance tests.

Each scope builds a tiny f64 configuration, projects the module output to
a scalar with fixed random weights (so no symmetric cancellation can hide
a wrong gradient), and compares reverse-mode gradients of parameters and
inputs against central finite differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor, grad_check, precision
from .errors import ConfigError
from .model import FusionConfig, model_forward
from .spatial import AsseConfig, asse_forward, dae_forward, fusion_block
from .spectral import GsrtConfig, gsrt_forward
from .directional import ast_forward

SCOPES = ("primitives", "ast", "asse", "hpsc", "full")


def _project(t: Tensor, seed: int) -> Tensor:
    """Fixed random scalar projection (same weights on every call)."""
    w = Tensor(np.random.default_rng(seed).normal(size=t.shape))
    return ad.reduce_sum(t * w)


def _check_store_function(build, input_shapes, tol, eps, n_coords=96, seed=0):
    """Gradcheck a store-using forward over its parameters and inputs.

    build(store, *inputs) -> scalar Tensor.  Parameters are materialized
    by one forward pass and then re-randomized (zero-initialized residual
    tails would otherwise hide upstream gradients), every tensor is made
    a differentiable leaf, and at least one coordinate per tensor plus
    `n_coords` uniform extras are verified against central differences.

    Coordinates whose analytic and numeric gradients are both below the
    resolution of the difference quotient (cancellation noise of order
    ulp(f)/eps) cannot be measured at this eps and are counted as
    below-resolution skips rather than failures; every measurable
    coordinate is held to `tol`.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    inputs = [Tensor(rng.normal(size=s) * 0.5, requires_grad=True) for s in input_shapes]
    build(store, *inputs)  # materialize parameters
    for name, p in store.items():
        base = 1.0 if name.endswith(".g") else 0.0
        p.data = base + rng.normal(size=p.shape) * 0.3

    leaves = inputs + [p for _, p in store.items()]
    for t in leaves:
        t.requires_grad = True
        t.grad = None
        t.data = np.ascontiguousarray(t.data)

    out = build(store, *inputs)
    f0 = float(out.data.reshape(()))
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    sizes = np.array([t.size for t in leaves])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    picks = {int(offsets[ti] + rng.integers(leaves[ti].size)) for ti in range(len(leaves))}
    picks.update(rng.choice(total, size=min(n_coords, total), replace=False).tolist())

    max_rel = 0.0
    worst = None
    n_skipped = 0
    n_below = 0
    n_checked = 0
    for flat_idx in sorted(picks):
        ti = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        ci = flat_idx - int(offsets[ti])
        flat = leaves[ti].data.reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + eps
        fp = float(build(store, *inputs).data.reshape(()))
        flat[ci] = orig - eps
        fm = float(build(store, *inputs).data.reshape(()))
        flat[ci] = orig
        num = (fp - fm) / (2 * eps)
        d_plus = (fp - f0) / eps
        d_minus = (f0 - fm) / eps
        if abs(d_plus - d_minus) > 1e-2 * max(1.0, abs(d_plus), abs(d_minus)):
            n_skipped += 1  # kink: one-sided slopes disagree
            continue
        ana = float(analytic[ti].reshape(-1)[ci])
        # measurable iff gradient magnitude exceeds the cancellation noise
        # of the quotient (a few hundred ulp of |f| over 2*eps) by 1/tol
        noise_est = max(1.0, abs(f0), abs(fp), abs(fm)) * 5e-13 / (2 * eps)
        if max(abs(ana), abs(num)) < noise_est / tol:
            n_below += 1
            continue
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        n_checked += 1
        if rel > max_rel:
            max_rel = rel
            worst = (ti, ci, ana, num)
    return {"max_rel_err": max_rel, "pass": bool(max_rel < tol),
            "n_checked": n_checked, "n_skipped": n_skipped,
            "n_below_resolution": n_below, "worst": worst}


def check_primitives(tol: float = 1e-4, eps: float = 1e-4, seed: int = 0) -> dict:
    """Gradcheck every registered primitive on small random tensors."""
    rng = np.random.default_rng(seed)
    worst = {"max_rel_err": 0.0, "pass": True, "n_skipped": 0, "failures": []}

    def run(name, f, shapes, scale=1.0):
        arrays = [rng.normal(size=s) * scale for s in shapes]
        rep = grad_check(f, arrays, eps=eps, tol=tol, seed=seed)
        worst["max_rel_err"] = max(worst["max_rel_err"], rep["max_rel_err"])
        worst["n_skipped"] += rep["n_skipped"]
        if not rep["pass"]:
            worst["pass"] = False
            worst["failures"].append((name, rep["max_rel_err"]))

    pr = lambda t: _project(t, 123)
    run("add", lambda a, b: pr(a + b), [(3, 4), (3, 4)])
    run("add_bcast", lambda a, b: pr(a + b), [(3, 4), (3, 1)])
    run("sub", lambda a, b: pr(a - b), [(3, 4), (1, 4)])
    run("mul", lambda a, b: pr(a * b), [(3, 4), (3, 4)])
    run("div", lambda a, b: pr(a / (b + 3.0)), [(3, 4), (3, 4)], 0.5)
    run("scale", lambda a: pr(ad.scale(a, -2.5)), [(3, 4)])
    run("exp", lambda a: pr(ad.exp(a)), [(3, 4)], 0.5)
    run("sigmoid", lambda a: pr(ad.sigmoid(a)), [(3, 4)])
    run("tanh", lambda a: pr(ad.tanh(a)), [(3, 4)])
    run("relu", lambda a: pr(ad.relu(a)), [(3, 4)])
    run("leaky_relu", lambda a: pr(ad.leaky_relu(a, 0.2)), [(3, 4)])
    run("gelu", lambda a: pr(ad.gelu(a)), [(3, 4)])
    run("abs", lambda a: pr(ad.absolute(a)), [(3, 4)])
    run("sin", lambda a: pr(ad.sin(a)), [(3, 4)])
    run("cos", lambda a: pr(ad.cos(a)), [(3, 4)])
    run("pow", lambda a: pr(ad.power(ad.absolute(a) + 1.0, 0.5)), [(3, 4)])
    run("matmul", lambda a, b: pr(ad.matmul(a, b)), [(3, 5), (5, 4)])
    run("matmul_batch", lambda a, b: pr(ad.matmul(a, b)), [(2, 3, 5), (2, 5, 4)])
    run("sum", lambda a: pr(ad.reduce_sum(a, axes=1)), [(3, 4)])
    run("mean", lambda a: pr(ad.reduce_mean(a, axes=(0,), keepdims=True)), [(3, 4)])
    run("max", lambda a: pr(ad.reduce_max(a, axes=1)), [(3, 4)])
    run("softmax", lambda a: pr(ad.softmax(a, axis=-1)), [(3, 4)])
    run("reshape", lambda a: pr(ad.reshape(a, (4, 3))), [(3, 4)])
    run("transpose", lambda a: pr(ad.transpose(a, (1, 0))), [(3, 4)])
    run("getitem", lambda a: pr(a[1:, ::2]), [(3, 4)])
    run("concat", lambda a, b: pr(ad.concat([a, b], axis=1)), [(3, 2), (3, 3)])
    run("pad_zero", lambda a: pr(nn.pad2d(a, 1, "zero")), [(2, 3, 3)])
    run("pad_reflect", lambda a: pr(nn.pad2d(a, 1, "reflect")), [(2, 3, 3)])
    run("conv2d", lambda x, w, b: pr(nn.conv2d(x, w, b)), [(2, 5, 5), (3, 2, 3, 3), (3,)])
    run("conv2d_s2", lambda x, w, b: pr(nn.conv2d(x, w, b, stride=2)), [(2, 6, 6), (3, 2, 3, 3), (3,)])
    run("conv2d_reflect", lambda x, w, b: pr(nn.conv2d(x, w, b, pad_mode="reflect")),
        [(2, 5, 5), (3, 2, 3, 3), (3,)])
    run("sep_gauss", lambda x: pr(nn.separable_gaussian(x, 5, 1.0)), [(2, 6, 6)])
    run("avgpool2", lambda x: pr(nn.avgpool2(x)), [(2, 6, 6)])
    run("adaptive_pool", lambda x: pr(nn.adaptive_avgpool(x, (3, 3))), [(2, 7, 9)])
    run("global_pool", lambda x: pr(nn.global_avgpool(x)), [(2, 5, 5)])
    run("resize", lambda x: pr(nn.resize_bilinear(x, 7, 6)), [(2, 4, 5)])
    run("normalize", lambda x: pr(nn.normalize(x, axes=(0,))), [(3, 4, 4)])
    rng2 = np.random.default_rng(seed + 1)
    grid0 = rng2.uniform(-0.85, 0.85, size=(4, 4, 2))
    run("grid_sample", lambda x, g: pr(nn.grid_sample(x, g)), [(2, 5, 5), grid0.shape])
    return worst


def check_ast(tol: float = 1e-3, eps: float = 1e-4, seed: int = 0) -> dict:

    def build(store, f):
        return _project(ast_forward(store, "ast", f, k=4), seed + 7)

    return _check_store_function(build, [(2, 16, 16)], tol, eps, n_coords=96, seed=seed)


def check_asse(tol: float = 1e-3, eps: float = 1e-4, seed: int = 0) -> dict:
    cfg = AsseConfig(hidden=4, k_dirs=2, daci_levels=1, ratio=2)

    def build(store, x, y):
        z, _ = asse_forward(store, x, y, cfg)
        return _project(z, seed + 8)

    return _check_store_function(build, [(3, 8, 8), (2, 16, 16)], tol, eps,
                                 n_coords=80, seed=seed)


def check_hpsc(tol: float = 1e-3, eps: float = 1e-4, seed: int = 0) -> dict:
    cfg = GsrtConfig(embed=8, blocks=1, window=8)

    def build(store, z, x):
        return _project(gsrt_forward(store, z, x, cfg), seed + 9)

    return _check_store_function(build, [(4, 16, 16), (4, 8, 8)], tol, eps,
                                 n_coords=96, seed=seed)


def check_full(tol: float = 1e-3, eps: float = 1e-4, seed: int = 0) -> dict:
    cfg = FusionConfig(bands=4, msi_bands=2, ratio=2, hidden=8, k_dirs=4,
                       daci_levels=1, embed=8, tb=1, window=8)

    def build(store, x, y):
        z_hat, z_init, _ = model_forward(store, cfg, x, y)
        return _project(z_hat, seed + 10) + _project(z_init, seed + 11)

    return _check_store_function(build, [(4, 8, 8), (2, 16, 16)], tol, eps,
                                 n_coords=80, seed=seed)


def run_scope(scope: str, tol: float | None = None, seed: int = 0) -> dict:
    if scope not in SCOPES:
        raise ConfigError(f"unknown gradcheck scope {scope!r}; use one of {SCOPES}")
    with precision("f64"):
        if scope == "primitives":
            return check_primitives(tol=tol or 1e-4, seed=seed)
        fn = {"ast": check_ast, "asse": check_asse, "hpsc": check_hpsc,
              "full": check_full}[scope]
        return fn(tol=tol or 1e-3, seed=seed)
