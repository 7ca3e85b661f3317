"""Command-line surface: gen / train / fuse / eval / gradcheck / ablate / anisotropy.

Exit codes are pinned for CI: 0 success, 1 runtime error, 2 usage or
configuration error.  All artifacts are deterministic given the same
flags and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics, verify
from .autodiff import Tensor
from .errors import ConfigError, FormatError, MetricUndefined, NonFiniteError, ShapeError
from .model import model_forward
from .train import TrainConfig, evaluate, load_checkpoint, train

BLUR_KSIZE = 8
BLUR_SIGMA = 3.0


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hsfusion",
                                 description="two-stage hyperspectral/multispectral fusion")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate synthetic scene triples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--bands", type=int, default=31)
    g.add_argument("--msi-bands", type=int, default=3)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--ratio", type=int, default=4)
    g.add_argument("--endmembers", type=int, default=5)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="flat key=value training config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", default=None, help="metric log path (default: <out>.log)")

    f = sub.add_parser("fuse", help="fuse one LR-HSI/MSI pair with a checkpoint")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--lr-hsi", required=True)
    f.add_argument("--msi", required=True)
    f.add_argument("--out", required=True, help="output path for the final cube; "
                   "the stage-one cube is written next to it with an _init suffix")
    f.add_argument("--config", default=None,
                   help="optional config to validate against the checkpoint")

    e = sub.add_parser("eval", help="compute quality metrics")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--lr-hsi", default=None)
    e.add_argument("--msi", default=None)
    e.add_argument("--ratio", type=int, default=4)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--scope", required=True, choices=verify.SCOPES)
    gc.add_argument("--tol", type=float, default=None)
    gc.add_argument("--seed", type=int, default=0)

    ab = sub.add_parser("ablate", help="train the module-toggle matrix and report")
    ab.add_argument("--data", required=True)
    ab.add_argument("--matrix", default=None, help="output path for the table (default stdout)")
    ab.add_argument("--config", default=None)

    an = sub.add_parser("anisotropy", help="structure-tensor anisotropy map of a cube")
    an.add_argument("--in", dest="inp", required=True)
    an.add_argument("--out", required=True)
    return ap


# -- dataset handling ---------------------------------------------------------


def cmd_gen(args) -> int:
    if args.msi_bands > args.bands:
        raise ConfigError(f"--msi-bands ({args.msi_bands}) must be <= --bands ({args.bands})")
    if args.size % args.ratio:
        raise ConfigError(f"--size ({args.size}) must be divisible by --ratio ({args.ratio})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = []
    for i in range(args.count):
        spec = dataio.SceneSpec(seed=args.seed + i, bands=args.bands,
                                height=args.size, width=args.size,
                                endmembers=args.endmembers)
        x, y, z = dataio.make_triple(spec, ratio=args.ratio, msi_bands=args.msi_bands,
                                     ksize=BLUR_KSIZE, sigma=BLUR_SIGMA)
        names = {}
        for tag, cube in (("hr", z), ("lr", x), ("msi", y)):
            name = f"scene{i:03d}_{tag}.hsc"
            dataio.write_cube(out / name, cube)
            names[tag] = name
        scenes.append(names)
    manifest = {
        "seed": args.seed, "count": args.count, "bands": args.bands,
        "msi_bands": args.msi_bands, "size": args.size, "ratio": args.ratio,
        "endmembers": args.endmembers,
        "blur_ksize": BLUR_KSIZE, "blur_sigma": BLUR_SIGMA,
        "scenes": scenes,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {3 * args.count} cubes + manifest to {out}")
    return 0


def load_dataset(data_dir):
    """Read (lr, msi, hr) triples and the manifest from a gen output dir."""
    root = Path(data_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    triples = []
    for entry in manifest["scenes"]:
        x = dataio.read_cube(root / entry["lr"])
        y = dataio.read_cube(root / entry["msi"])
        z = dataio.read_cube(root / entry["hr"])
        triples.append((x, y, z))
    return triples, manifest


def _split(triples):
    """Deterministic held-out split: the last 1/8 of scenes (at least one)."""
    n_val = max(1, len(triples) // 8) if len(triples) > 1 else 0
    if n_val == 0:
        return triples, triples
    return triples[:-n_val], triples[-n_val:]


def _train_config(args, manifest) -> TrainConfig:
    kwargs = {}
    if args.config:
        from .train import parse_kv_file
        kwargs = parse_kv_file(args.config, TrainConfig)
    kwargs.setdefault("bands", manifest["bands"])
    kwargs.setdefault("msi_bands", manifest["msi_bands"])
    kwargs.setdefault("ratio", manifest["ratio"])
    return TrainConfig(**kwargs)


def cmd_train(args) -> int:
    triples, manifest = load_dataset(args.data)
    cfg = _train_config(args, manifest)
    tr, va = _split(triples)
    log_path = args.log or (args.out + ".log")
    Path(log_path).unlink(missing_ok=True)
    result = train(cfg, tr, va, ckpt_path=args.out, log_path=log_path)
    print(f"trained {result.step} steps; final loss {result.final_loss:.6f}")
    for line in result.log[-3:]:
        print("log:", line)
    return 0


def cmd_fuse(args) -> int:
    store, step, cfg, _ = load_checkpoint(args.ckpt)
    if args.config:
        from .train import parse_kv_file
        wanted = TrainConfig(**parse_kv_file(args.config, TrainConfig))
        if wanted.fusion_config().hash() != cfg.fusion_config().hash():
            raise ConfigError("architecture flags do not match the checkpoint config hash")
    x = dataio.read_cube(args.lr_hsi)
    y = dataio.read_cube(args.msi)
    z_hat, z_init, _ = model_forward(store, cfg.fusion_config(),
                                     Tensor(x.data), Tensor(y.data))
    out = Path(args.out)
    init_path = out.with_name(out.stem + "_init" + (out.suffix or ".hsc"))
    dataio.write_cube(out, dataio.HsiCube(z_hat.data))
    dataio.write_cube(init_path, dataio.HsiCube(z_init.data))
    print(f"wrote {out} and {init_path}")
    return 0


def cmd_eval(args) -> int:
    pred = dataio.read_cube(args.pred)
    ref = dataio.read_cube(args.ref)
    lr = dataio.read_cube(args.lr_hsi) if args.lr_hsi else None
    msi = dataio.read_cube(args.msi) if args.msi else None
    if (lr is None) != (msi is None):
        raise ConfigError("qnr needs both --lr-hsi and --msi")
    report = metrics.metric_report(pred.data, ref.data, ratio=args.ratio,
                                   lr_hsi=None if lr is None else lr.data,
                                   msi=None if msi is None else msi.data)
    for line in report.lines():
        print(line)
    return 0


def cmd_gradcheck(args) -> int:
    rep = verify.run_scope(args.scope, tol=args.tol, seed=args.seed)
    status = "PASS" if rep["pass"] else "FAIL"
    print(f"{args.scope}: {status} worst_rel_err={rep['max_rel_err']:.3e} "
          f"checked={rep.get('n_checked', 'all')} kink_skips={rep.get('n_skipped', 0)}")
    if not rep["pass"]:
        if rep.get("failures"):
            for name, err in rep["failures"]:
                print(f"  failed primitive: {name} rel_err={err:.3e}")
        if rep.get("worst"):
            ti, ci, ana, num = rep["worst"]
            print(f"  worst coordinate: tensor {ti} coord {ci} analytic={ana:.6e} numeric={num:.6e}")
        return 1
    return 0


ABLATION_ROWS = [
    # (daci, dae, fusion, gsrt) module toggles, matching the 6-row study
    (False, False, False, False),
    (True, False, False, False),
    (True, True, False, False),
    (True, True, True, False),
    (False, True, True, True),
    (True, True, True, True),
]


def cmd_ablate(args) -> int:
    triples, manifest = load_dataset(args.data)
    base = _train_config(args, manifest)
    tr, va = _split(triples)
    lines = ["DACI DAE Fusion GSRT PSNR SAM"]
    results = []
    for daci, dae, fusion, gsrt in ABLATION_ROWS:
        cfg = TrainConfig(**{**base.__dict__, "no_daci": not daci, "no_dae": not dae,
                             "no_fusion": not fusion, "no_gsrt": not gsrt})
        res = train(cfg, tr, va)
        p, s = evaluate(res.store, cfg.fusion_config(), va)
        results.append((daci, dae, fusion, gsrt, p, s))
        mark = lambda b: "y" if b else "n"
        lines.append(f"{mark(daci)} {mark(dae)} {mark(fusion)} {mark(gsrt)} {p:.4f} {s:.4f}")
    text = "\n".join(lines) + "\n"
    if args.matrix:
        with open(args.matrix, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_anisotropy(args) -> int:
    cube = dataio.read_cube(args.inp)
    amap = metrics.anisotropy_map(cube.data)
    dataio.write_cube(args.out, dataio.HsiCube(amap))
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "anisotropy": cmd_anisotropy,
}


def main(argv=None) -> int:
    ap = _build_parser()
    args = ap.parse_args(argv)
    try:
        return _COMMANDS[args.cmd](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, FormatError, MetricUndefined, NonFiniteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
