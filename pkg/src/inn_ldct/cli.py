"""Command-line entry point: ``inn-ldct <command> [flags]``.

Exit codes: 0 success, 1 a check or threshold failed, 2 usage/config
error, 3 I/O or file-format error. Every command prints its resolved
configuration as one JSON line before doing any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .container import FormatError
from .experiments import DeskSetup, box_filter, desk_config, run_ablation
from .metrics import emit_report, evaluate_slices
from .model import DenoiserModel, ModelConfig, randomize_projections
from .trainer import ConfigError, TrainConfig, TrainingError, denoise_volume, loss_forward, loss_reverse, train
from .volume import (
    NoiseSpec,
    Volume,
    add_noise,
    denormalize,
    make_phantom,
    normalize,
    read_volume,
    sidecar_path,
    write_phantom,
    write_volume,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("inn_ldct")


class UsageError(Exception):
    pass


def _ints(text: str, n: int, name: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{name}: expected {n} comma-separated integers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{name}: expected {n} comma-separated integers, got {text!r}")
    return vals


def _echo(cmd: str, resolved: dict) -> None:
    print(json.dumps({"command": cmd, "config": resolved}, sort_keys=True, default=str), flush=True)


def _writable(path) -> None:
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d) or not os.access(d, os.W_OK):
        raise UsageError(f"cannot write {path}: directory {d} does not exist or is not writable")


# --- config resolution -------------------------------------------------------

# flag dest -> TrainConfig field
_TRAIN_FLAGS = {
    "arch": "arch", "iters": "total_iters", "seed": "seed", "lr0": "lr0", "batch_size": "batch_size",
    "patch_size": "patch_size", "channels": "channels", "blocks": "blocks", "w_r": "w_r",
    "lr_halve_every": "lr_halve_every", "log_every": "log_every", "grad_clip": "grad_clip",
    "warmup_iters": "warmup_iters", "decoder_init": "decoder_init",
}


def resolve_train_config(args, base: dict | None = None) -> TrainConfig:
    """Defaults (or ``base``), then the config file, then explicit flags."""
    d: dict = dict(base or {})
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {args.config}: expected a JSON object")
        d.update(loaded)
    for flag, key in _TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    cfg = TrainConfig.from_dict(d)
    return cfg


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON document with TrainConfig fields")
    p.add_argument("--arch", choices=("M1", "M2", "M3"))
    p.add_argument("--iters", type=int, help="total_iters")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lr-halve-every", dest="lr_halve_every", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--w-r", dest="w_r", type=float)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, help="global gradient-norm clip")
    p.add_argument("--warmup-iters", dest="warmup_iters", type=int)
    p.add_argument("--decoder-init", dest="decoder_init", choices=("random", "left_inverse"))


# --- commands ----------------------------------------------------------------

def cmd_gen_phantom(args) -> int:
    dims = _ints(args.dims, 3, "--dims")
    _echo("gen-phantom", {"dims": dims, "seed": args.seed, "kind": args.kind, "out": args.out})
    _writable(args.out)
    if dims[0] < 3:
        print("warning: need >=3 slices for training use (generating anyway)", file=sys.stderr)
    try:
        ph = make_phantom(args.kind, dims, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    side = write_phantom(ph, args.out)
    print(f"wrote {args.out} dims={list(ph.volume.dims)} organ_end_slices={ph.organ_end_slices} sidecar={side}")
    return EXIT_OK


def cmd_add_noise(args) -> int:
    spec = NoiseSpec(args.kind, sigma=args.sigma, a=args.a, b=args.b, seed=args.seed)
    _echo("add-noise", {**dataclasses.asdict(spec), "space": args.space, "in": args.input, "out": args.out})
    _writable(args.out)
    v = read_volume(args.input)
    if args.space == "normalized" and v.unit == "HU":
        v = normalize(v)
    noisy = add_noise(v, spec)
    write_volume(noisy, args.out)
    print(f"wrote {args.out} unit={noisy.unit}")
    return EXIT_OK


def _load_volumes(pattern: str) -> list[Volume]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise UsageError(f"--data {pattern!r} matched no files")
    return [read_volume(p) for p in paths]


def cmd_train(args) -> int:
    state = bundle = None
    if args.resume:
        bundle, cfg_ck, state = load_checkpoint(args.resume)
        if not args.config:
            args.config = None
            base = cfg_ck.to_dict()
            for flag, key in _TRAIN_FLAGS.items():
                if getattr(args, flag, None) is not None:
                    base[key] = getattr(args, flag)
            cfg = TrainConfig.from_dict(base)
        else:
            cfg = resolve_train_config(args)
        if cfg.model_config() != bundle.cfg or cfg.arch != bundle.arch:
            raise ConfigError("resume: config architecture differs from the checkpoint's")
    else:
        cfg = resolve_train_config(args)
    _echo("train", {**cfg.to_dict(), "data": args.data, "out": args.out, "resume": args.resume})
    _writable(args.out)
    volumes = _load_volumes(args.data)
    log_path = args.log or os.path.splitext(args.out)[0] + ".log.jsonl"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            bundle, state, records = train(cfg, volumes, bundle=bundle, state=state, log_path=log_path)
        finally:
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
    save_checkpoint(args.out, bundle, cfg, state)
    last = records[-1] if records else {}
    print(f"wrote {args.out} iteration={state.iteration} loss_f={last.get('loss_f')} loss_r={last.get('loss_r')}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    _echo("denoise", {"ckpt": args.ckpt, "in": args.input, "out": args.out, "batch": args.batch})
    _writable(args.out)
    bundle, cfg, _ = load_checkpoint(args.ckpt)
    v = read_volume(args.input)
    out = denoise_volume(bundle, v, cfg.window, args.batch)
    write_volume(out, args.out)
    print(f"wrote {args.out} dims={list(out.dims)} unit={out.unit}")
    return EXIT_OK


def _as_normalized(v: Volume, window) -> np.ndarray:
    return (v if v.unit == "normalized" else normalize(v, window)).values


def cmd_eval(args) -> int:
    window = (-1024.0, 3071.0)
    _echo("eval", {"clean": args.clean, "est": args.est, "noisy": args.noisy, "out": args.out,
                   "slices": args.slices, "window": window})
    clean = _as_normalized(read_volume(args.clean), window)
    noisy = _as_normalized(read_volume(args.noisy), window) if args.noisy else None
    indices = None
    if args.slices == "organ_end":
        with open(sidecar_path(args.clean)) as fh:
            indices = json.load(fh)["organ_end_slices"]
    entries = []
    for item in args.est:
        name, _, path = item.rpartition("=")
        est = _as_normalized(read_volume(path), window)
        if est.shape != clean.shape:
            raise UsageError(f"{path}: dims {est.shape} differ from clean {clean.shape}")
        entries.append(evaluate_slices(name or os.path.basename(path), est, clean, noisy, indices))
    if noisy is not None and args.baselines:
        entries.insert(0, evaluate_slices("box3x3", box_filter(noisy), clean, noisy, indices))
        entries.insert(0, evaluate_slices("noisy", noisy, clean, noisy, indices))
    csv_path, json_path = emit_report(entries, args.out, {"window": list(window), "clean": args.clean,
                                                          "slices": args.slices})
    for e in entries:
        s = e.summary()
        print(f"{e.name:>10s}  PSNR {s['psnr_mean']:.4f} +- {s['psnr_std']:.4f}  SSIM {s['ssim_mean']:.4f} +- {s['ssim_std']:.4f}")
    print(f"wrote {csv_path} {json_path}")
    return EXIT_OK


def _core_source(args):
    if args.ckpt:
        bundle, _, _ = load_checkpoint(args.ckpt)
        if bundle.arch != "M3":
            raise UsageError(f"{args.ckpt}: arch {bundle.arch} has no invertible core")
        return bundle.nets["inn"]
    cfg = ModelConfig(channels=args.channels, blocks=args.blocks)
    model = DenoiserModel(cfg, seed=args.seed)
    if args.random_projections:
        randomize_projections(model.parameters(), np.random.default_rng(args.seed), 0.01)
    return model


def _with_dtype(model: DenoiserModel, dtype: str) -> DenoiserModel:
    """Same weights in another precision."""
    out = DenoiserModel(dataclasses.replace(model.cfg, dtype=dtype), seed=0)
    src = model.parameters()
    for name, p in out.parameters().items():
        p.data = src[name].data.astype(dtype)
    return out


def cmd_check_invert(args) -> int:
    c, h, w = _ints(args.shape, 3, "--shape")
    tol = args.tol if args.tol is not None else (1e-4 if args.dtype == "float32" else 1e-10)
    _echo("check-invert", {"ckpt": args.ckpt, "trials": args.trials, "shape": [c, h, w], "seed": args.seed,
                           "tol": tol, "dtype": args.dtype})
    model = _core_source(args)
    if c != model.cfg.channels:
        raise UsageError(f"--shape C={c} but the core expects C={model.cfg.channels}")
    if args.dtype != model.cfg.dtype:
        model = _with_dtype(model, args.dtype)
    dt = np.dtype(args.dtype)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    try:
        with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
            for _ in range(args.trials):
                x = T.Tensor(rng.standard_normal((1, c, h, w)).astype(dt))
                back = model.core_inverse(model.core_forward(x))
                worst = max(worst, float(np.abs(back.data - x.data).max()))
    except (T.NonFiniteError, FloatingPointError) as exc:
        print(f"FAIL: non-finite values during roundtrip ({exc})")
        return EXIT_FAIL
    ok = worst <= tol
    print(f"{'PASS' if ok else 'FAIL'}: max roundtrip error {worst:.3e} over {args.trials} trials "
          f"({args.dtype}, tol {tol:g})")
    return EXIT_OK if ok else EXIT_FAIL


def composite_grad_check(channels=8, blocks=2, size=8, seed=0, per_tensor=None, eps=1e-4, proj_std=0.01,
                         skipped=None):
    """Finite-difference check of L_f + L_r on a small f64 invertible model.

    Projections get small random weights so every subnet carries gradient;
    larger scales make the loss so steep that difference quotients stop
    resolving it in f64.
    """
    cfg = ModelConfig(channels=channels, blocks=blocks, dtype="float64")
    model = DenoiserModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    randomize_projections(model.parameters(), rng, proj_std)
    y = T.Tensor(rng.uniform(0, 1, size=(1, 1, size, size)))
    target = T.Tensor(rng.uniform(0, 1, size=(1, 1, size, size)))

    def loss():
        x_hat = model.forward(y)
        return T.add(loss_forward(x_hat, target), loss_reverse(model.reverse(x_hat), y))

    return T.grad_check_params(loss, model.parameters(), eps=eps, per_tensor=per_tensor, rng=rng, skipped=skipped)


def cmd_grad_check(args) -> int:
    _echo("grad-check", {"channels": args.channels, "blocks": args.blocks, "size": args.size, "seed": args.seed,
                         "per_tensor": args.per_tensor, "eps": args.eps, "tol": args.tol})
    skipped: dict[str, int] = {}
    errs = composite_grad_check(args.channels, args.blocks, args.size, args.seed, args.per_tensor, args.eps,
                                skipped=skipped)
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    ok = worst <= args.tol
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} at {name} over {len(errs)} tensors"
          f" ({sum(skipped.values())} entries skipped at leaky-ReLU kinks)")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_ablate(args) -> int:
    cfg = resolve_train_config(args, desk_config().to_dict())
    setup = DeskSetup(dims=_ints(args.dims, 3, "--dims"), sigma=args.sigma, kind=args.kind)
    _echo("ablate", {**cfg.to_dict(), "setup": dataclasses.asdict(setup), "out": args.out})
    os.makedirs(args.out, exist_ok=True)
    res = run_ablation(cfg, setup, args.out, archs=tuple(args.archs.split(",")))
    noisy_psnr = res["entries"][0].summary()["psnr_mean"]
    for e in res["entries"]:
        s = e.summary()
        print(f"{e.name:>8s}  PSNR {s['psnr_mean']:.4f} +- {s['psnr_std']:.4f}  SSIM {s['ssim_mean']:.4f} +- {s['ssim_std']:.4f}")
    beaten = all(e.summary()["psnr_mean"] > noisy_psnr for e in res["entries"][2:])
    print(f"all trained models beat the noisy input: {beaten}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inn-ldct", description="Self-supervised invertible CT denoising toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write a synthetic phantom volume and its organ-end sidecar")
    p.add_argument("--dims", required=True, help="z,y,x")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", default="ellipses", choices=("ellipses", "shepp_logan_like"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_phantom)

    p = sub.add_parser("add-noise", help="add per-slice independent noise to a volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="gaussian", choices=("gaussian", "signal_dependent"))
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--space", default="normalized", choices=("normalized", "native"),
                   help="normalized: window to [0,1] first (default); native: the file's own unit")
    p.set_defaults(fn=cmd_add_noise)

    p = sub.add_parser("train", help="train M1/M2/M3 on RVOL volumes")
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="glob of RVOL files")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--log", help="JSON-lines log path (default: next to the checkpoint)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("denoise", help="denoise every slice of a volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=4)
    p.set_defaults(fn=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM report of estimates against a clean volume")
    p.add_argument("--clean", required=True)
    p.add_argument("--est", required=True, action="append", help="[name=]path, repeatable")
    p.add_argument("--noisy")
    p.add_argument("--baselines", action="store_true", help="add noisy-input and 3x3 box-filter rows")
    p.add_argument("--slices", default="all", choices=("all", "organ_end"))
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check-invert", help="max roundtrip error of the invertible core")
    p.add_argument("--ckpt")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--shape", default="64,8,8", help="C,H,W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, help="default 1e-4 for float32, 1e-10 for float64")
    p.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    p.add_argument("--channels", type=int, default=64, help="fresh model width when no --ckpt")
    p.add_argument("--blocks", type=int, default=12)
    p.add_argument("--random-projections", action="store_true", help="fresh model with projections drawn at std 0.01")
    p.set_defaults(fn=cmd_check_invert)

    p = sub.add_parser("grad-check", help="finite-difference check of L_f + L_r on a tiny f64 model")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-tensor", dest="per_tensor", type=int, default=None,
                   help="check this many random entries per tensor (default: all)")
    p.add_argument("--eps", type=float, default=1e-4, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("ablate", help="train M1, M2, M3 on one phantom and compare on a held-out one")
    _add_train_flags(p)
    p.add_argument("--dims", default="32,64,64")
    p.add_argument("--sigma", type=float, default=0.08)
    p.add_argument("--kind", default="ellipses", choices=("ellipses", "shepp_logan_like"))
    p.add_argument("--archs", default="M1,M2,M3")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
