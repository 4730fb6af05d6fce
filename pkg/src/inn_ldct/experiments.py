"""Desk-scale training/evaluation harness shared by the CLI, demos and tests.

Training and held-out phantoms differ in geometry and noise seed. Noise is
added in normalized units (no clamping), so ``sigma=0.08`` means 8% of the
[-1024, 3071] HU window.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .metrics import MetricReport, emit_report, evaluate_slices
from .trainer import TrainConfig, cycle_residual, denoise_array, train
from .volume import NoiseSpec, Volume, add_noise, make_phantom, normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskSetup:
    dims: tuple[int, int, int] = (32, 64, 64)
    kind: str = "ellipses"
    sigma: float = 0.08
    train_seed: int = 0
    test_seed: int = 1
    noise_seed: int = 100


def desk_config(**overrides) -> TrainConfig:
    """The desk-scale training recipe (C=32, 12 blocks, 48px patches, batch 8).

    Constant lr after a 30-step warmup, global gradient clipping, and decoders
    started as left inverses of their encoders.
    """
    base = dict(
        arch="M3", channels=32, blocks=12, patch_size=48, batch_size=8, patches_per_slice=10,
        total_iters=300, lr0=2e-4, lr_halve_every=10**6, grad_clip=1.0, warmup_iters=30,
        decoder_init="left_inverse", seed=0, log_every=10,
    )
    base.update(overrides)
    return TrainConfig(**base)


def make_desk_data(setup: DeskSetup = DeskSetup()) -> dict:
    out = {}
    for split, seed, nseed in (("train", setup.train_seed, setup.noise_seed),
                               ("test", setup.test_seed, setup.noise_seed + 1)):
        ph = make_phantom(setup.kind, setup.dims, seed)
        clean = normalize(ph.volume)
        noisy = add_noise(clean, NoiseSpec("gaussian", sigma=setup.sigma, seed=nseed))
        out[split] = {"clean": clean.values, "noisy": noisy.values, "organ_end_slices": ph.organ_end_slices}
    return out


def box_filter(vol: np.ndarray, size: int = 3) -> np.ndarray:
    """Per-slice size x size mean filter with reflect padding."""
    p = size // 2
    padded = np.pad(vol.astype(np.float64), ((0, 0), (p, p), (p, p)), mode="reflect")
    h, w = vol.shape[1:]
    acc = np.zeros(vol.shape, dtype=np.float64)
    for dy in range(size):
        for dx in range(size):
            acc += padded[:, dy:dy + h, dx:dx + w]
    return (acc / (size * size)).astype(np.float32)


def evaluate_estimate(name: str, estimate: np.ndarray, split: dict, metadata: dict | None = None) -> dict:
    """Whole-volume and organ-end-slice reports for one estimate of the test volume."""
    full = evaluate_slices(name, estimate, split["clean"], split["noisy"], metadata=metadata)
    ends = split["organ_end_slices"]
    end = evaluate_slices(name, estimate, split["clean"], split["noisy"], indices=ends, metadata=metadata) if ends else None
    return {"all": full, "organ_end": end}


def train_and_evaluate(cfg: TrainConfig, data: dict, out_dir: str | None = None) -> dict:
    """Train one arch on the training phantom, evaluate on the held-out one."""
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, f"train_{cfg.arch}.jsonl")
        if os.path.exists(log_path):
            os.remove(log_path)
    vol = Volume(data["train"]["noisy"], unit="normalized")
    bundle, state, records = train(cfg, [vol], log_path=log_path)
    ckpt = None
    if out_dir:
        ckpt = os.path.join(out_dir, f"{cfg.arch}.innc")
        save_checkpoint(ckpt, bundle, cfg, state)
    test = data["test"]
    estimate = denoise_array(bundle, test["noisy"])
    rep = evaluate_estimate(cfg.arch, estimate, test, {"arch": cfg.arch, "seed": cfg.seed, "iters": cfg.total_iters})
    # cycle residual on interior training slices, full size
    y = data["train"]["noisy"][1:-1, None]
    rho = cycle_residual(bundle, y[: min(len(y), 8)])
    return {"bundle": bundle, "state": state, "records": records, "checkpoint": ckpt,
            "estimate": estimate, "reports": rep, "cycle_residual": rho}


def baseline_entries(test: dict) -> list[MetricReport]:
    """Reference rows: the noisy input itself and a 3x3 box filter."""
    return [
        evaluate_estimate("noisy", test["noisy"], test)["all"],
        evaluate_estimate("box3x3", box_filter(test["noisy"]), test)["all"],
    ]


def run_ablation(cfg: TrainConfig, setup: DeskSetup, out_dir: str, archs=("M1", "M2", "M3"),
                 done: dict | None = None) -> dict:
    """Train each arch under identical seeds and data; write the comparison report.

    ``done`` maps arch -> an earlier ``train_and_evaluate`` result for the same
    config and setup, which is reused instead of retrained.
    """
    data = make_desk_data(setup)
    test = data["test"]
    results = dict(done or {})
    entries = baseline_entries(test)
    for arch in archs:
        if arch not in results:
            results[arch] = train_and_evaluate(dataclasses.replace(cfg, arch=arch), data, out_dir)
        entries.append(results[arch]["reports"]["all"])
    end_entries = [results[a]["reports"]["organ_end"] for a in archs if results[a]["reports"]["organ_end"]]
    meta = {
        "config": cfg.to_dict(),
        "setup": dataclasses.asdict(setup),
        "row_order": [e.name for e in entries],
        "seeds": {"train": cfg.seed, "phantom_train": setup.train_seed, "phantom_test": setup.test_seed,
                  "noise": setup.noise_seed},
        "window": [-1024.0, 3071.0],
        "cycle_residual": {a: results[a]["cycle_residual"] for a in archs},
        "organ_end_slices": test["organ_end_slices"],
        "organ_end": {e.name: e.summary() for e in end_entries},
    }
    meta = json.loads(json.dumps(meta, default=float))
    emit_report(entries, out_dir, meta)
    return {"data": data, "results": results, "entries": entries, "metadata": meta}
