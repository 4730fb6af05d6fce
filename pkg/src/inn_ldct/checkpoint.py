"""INNC checkpoint files: model weights, Adam moments and the training config.

Layout: ``b"INNC"``, version u32 LE, header length u32 LE, a sorted UTF-8
JSON header with a tensor index, then raw little-endian f32 tensors in
index order. Nothing time-dependent is stored, so equal states give equal bytes.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from .container import FormatError, HeaderError, PayloadSizeError, pack, unpack
from .model import ModelBundle, build_model
from .trainer import TrainConfig, TrainState

INNC_MAGIC = b"INNC"
INNC_VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointMismatchError(FormatError):
    """The checkpoint's tensors do not match the architecture it names."""


class ChecksumError(FormatError):
    """Payload bytes differ from the digest recorded at save time."""


def _tensors(bundle: ModelBundle, state: TrainState | None) -> dict[str, np.ndarray]:
    out = {f"model/{k}": p.data for k, p in bundle.parameters().items()}
    if state is not None:
        out.update({f"adam_m/{k}": v for k, v in state.m.items()})
        out.update({f"adam_v/{k}": v for k, v in state.v.items()})
    return out


def checkpoint_bytes(bundle: ModelBundle, cfg: TrainConfig, state: TrainState | None = None) -> bytes:
    tensors = _tensors(bundle, state)
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_F32)
        index.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "byte_offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    mc = bundle.cfg
    header = {
        "arch": bundle.arch,
        "channels": mc.channels,
        "blocks": mc.blocks,
        "r": mc.r,
        "s_max": mc.s_max,
        "growth": mc.growth,
        "dense_layers": mc.dense_layers,
        "baseline_depth": bundle.depth,
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "config": cfg.to_dict(),
        "train_state": {
            "iteration": 0 if state is None else state.iteration,
            "running": {} if state is None else dict(state.running),
        },
    }
    return pack(INNC_MAGIC, INNC_VERSION, header, payload)


def save_checkpoint(path, bundle: ModelBundle, cfg: TrainConfig, state: TrainState | None = None) -> str:
    blob = checkpoint_bytes(bundle, cfg, state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return str(path)


def parse_checkpoint(blob: bytes) -> tuple[ModelBundle, TrainConfig, TrainState]:
    _, header, payload = unpack(blob, INNC_MAGIC, (INNC_VERSION,))
    try:
        cfg = TrainConfig.from_dict(header["config"])
        index = header["tensors"]
        ts = header["train_state"]
        arch = header["arch"]
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"bad checkpoint header: {exc}") from exc
    if arch != cfg.arch:
        raise CheckpointMismatchError(f"header arch {arch!r} disagrees with config arch {cfg.arch!r}")
    expected = sum(int(np.prod(t["shape"], dtype=np.int64)) * _F32.itemsize for t in index)
    if expected != len(payload):
        raise PayloadSizeError(f"payload size mismatch: index needs {expected} bytes, file has {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ChecksumError("payload checksum mismatch: checkpoint is corrupted")
    arrays = {}
    for t in index:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if t.get("dtype") != "f32":
            raise HeaderError(f"tensor {t['name']!r}: unsupported dtype {t.get('dtype')!r}")
        off = int(t["byte_offset"])
        if off < 0 or off + n * 4 > len(payload):
            raise PayloadSizeError(f"tensor {t['name']!r} runs past the payload")
        arrays[t["name"]] = np.frombuffer(payload, dtype=_F32, count=n, offset=off).reshape(t["shape"])

    bundle = build_model(cfg.arch, cfg.model_config(), seed=cfg.seed)
    params = bundle.parameters()
    stored = {k[len("model/"):] for k in arrays if k.startswith("model/")}
    if stored != set(params):
        missing = sorted(set(params) - stored)[:3]
        extra = sorted(stored - set(params))[:3]
        raise CheckpointMismatchError(f"tensor names do not match arch {arch}: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        src = arrays[f"model/{name}"]
        if src.shape != p.shape:
            raise CheckpointMismatchError(f"{name}: shape {src.shape} != expected {p.shape}")
        p.data = src.astype(p.dtype, copy=True)
    state = TrainState(iteration=int(ts["iteration"]), running=dict(ts.get("running", {})))
    for key, target in (("adam_m/", state.m), ("adam_v/", state.v)):
        for name, arr in arrays.items():
            if name.startswith(key):
                target[name[len(key):]] = arr.astype(np.float32, copy=True)
    return bundle, cfg, state


def load_checkpoint(path) -> tuple[ModelBundle, TrainConfig, TrainState]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
