"""Losses, Adam, the step-halving schedule and the training loop.

The batch sequence is a pure function of ``(seed, iteration)``: patch
``j`` of the run comes from slice draw ``j // patches_per_slice``, and each
slice draw has its own seeded stream. Resuming from a checkpoint therefore
needs only the iteration counter.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ARCHS, DECODER_INITS, ModelBundle, ModelConfig, build_model
from .tensor import Tensor
from .volume import DEFAULT_WINDOW, Volume, denormalize, make_n2n_pair, normalize, slice_triple

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "M3"
    batch_size: int = 16
    lr0: float = 1e-4
    lr_halve_every: int = 6000
    total_iters: int = 5000
    patch_size: int = 120
    patches_per_slice: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    w_f: float = 1.0
    w_r: float | None = None  # None -> 1.0 for M2/M3; ignored for M1
    channels: int = 64
    blocks: int = 12
    r: int = 2
    s_max: float = 2.0
    init_gain: float = 1.0
    decoder_init: str = "random"
    grad_clip: float | None = None  # global L2 norm; None disables
    warmup_iters: int = 0
    window: tuple[float, float] = DEFAULT_WINDOW
    log_every: int = 100

    def __post_init__(self):
        self.window = tuple(float(v) for v in self.window)
        if self.arch not in ARCHS:
            raise ConfigError(f"arch: unknown value {self.arch!r}; expected one of {ARCHS}")
        for name in ("batch_size", "lr_halve_every", "patch_size", "patches_per_slice",
                     "channels", "blocks", "r", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.warmup_iters < 0:
            raise ConfigError(f"warmup_iters: must be >= 0, got {self.warmup_iters}")
        if self.total_iters < 0:
            raise ConfigError(f"total_iters: must be >= 0, got {self.total_iters}")
        for name in ("lr0", "s_max", "adam_eps", "init_gain"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name}: must lie in [0, 1), got {getattr(self, name)}")
        if self.decoder_init not in DECODER_INITS:
            raise ConfigError(f"decoder_init: unknown value {self.decoder_init!r}; expected one of {DECODER_INITS}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip: must be positive or null, got {self.grad_clip}")
        if self.w_f < 0 or (self.w_r is not None and self.w_r < 0):
            raise ConfigError("loss weights must be non-negative")
        if not self.window[0] < self.window[1]:
            raise ConfigError(f"window: degenerate {self.window}")
        if self.patch_size % self.r:
            raise ConfigError(f"patch_size: {self.patch_size} must be a multiple of r={self.r}")

    @property
    def reverse_weight(self) -> float:
        if self.arch == "M1":
            return 0.0
        return 1.0 if self.w_r is None else float(self.w_r)

    def model_config(self) -> ModelConfig:
        return ModelConfig(channels=self.channels, blocks=self.blocks, r=self.r, s_max=self.s_max,
                           init_gain=self.init_gain, decoder_init=self.decoder_init)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["window"] = list(self.window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainState:
    iteration: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    running: dict[str, float] = field(default_factory=dict)


# --- losses ------------------------------------------------------------------

def _batch_sq_error(a: Tensor, b: Tensor, name: str) -> Tensor:
    if a.shape != b.shape:
        raise T.ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    d = T.sub(b, a)
    return T.scale(T.sum_all(T.mul(d, d)), 1.0 / a.shape[0])


def loss_forward(x_hat: Tensor, target: Tensor) -> Tensor:
    """(1/k) * sum_i ||target_i - x_hat_i||^2, squared norm over all pixels of a sample."""
    return _batch_sq_error(x_hat, target, "loss_forward")


def loss_reverse(y_hat: Tensor, y: Tensor) -> Tensor:
    """(1/k) * sum_i ||Y_i - Y_hat_i||^2."""
    return _batch_sq_error(y_hat, y, "loss_reverse")


# --- optimizer ---------------------------------------------------------------

def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Halve every ``lr_halve_every`` steps, after an optional linear warmup."""
    lr = cfg.lr0 * 2.0 ** (-(iteration // cfg.lr_halve_every))
    if iteration < cfg.warmup_iters:
        lr *= (iteration + 1) / cfg.warmup_iters
    return lr


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()
                          if p.grad is not None))
    if total > max_norm:
        k = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * k).astype(p.grad.dtype)
    return total


def adam_step(params: dict[str, Tensor], state: TrainState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; bumps ``state.iteration``."""
    t = state.iteration + 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            norm = float(np.sqrt(np.nansum(np.where(np.isfinite(g), g, 0.0) ** 2)))
            raise FloatingPointError(
                f"non-finite gradient at iteration {state.iteration}: parameter {name}, "
                f"finite-part grad norm {norm:.4g}, {int((~np.isfinite(g)).sum())} bad entries"
            )
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data -= step.astype(p.dtype)
    state.iteration = t


# --- data --------------------------------------------------------------------

class PatchStream:
    """Deterministic stream of (input, target) patch batches over interior slices."""

    def __init__(self, volumes: list[np.ndarray], patch_size: int, patches_per_slice: int,
                 batch_size: int, seed: int, multiple_of: int = 1):
        self.volumes = volumes
        self.slots = [(vi, i) for vi, v in enumerate(volumes) for i in range(1, v.shape[0] - 1)]
        if not self.slots:
            raise TrainingError("empty training set: every volume needs at least 3 slices")
        for v in volumes:
            if patch_size > min(v.shape[1:]):
                raise TrainingError(f"patch size {patch_size} exceeds slice dims {v.shape[1:]}")
        if patch_size % multiple_of:
            raise TrainingError(f"patch size {patch_size} is not a multiple of {multiple_of}")
        self.size = patch_size
        self.pps = patches_per_slice
        self.k = batch_size
        self.seed = seed

    def _draw(self, j: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 7, j]))
        vi, i = self.slots[int(rng.integers(len(self.slots)))]
        inp, tgt = make_n2n_pair(slice_triple(self.volumes[vi], i))
        h, w = inp.shape
        s = self.size
        crops = []
        for _ in range(self.pps):
            y0 = int(rng.integers(0, h - s + 1))
            x0 = int(rng.integers(0, w - s + 1))
            crops.append((inp[y0:y0 + s, x0:x0 + s], tgt[y0:y0 + s, x0:x0 + s]))
        return crops

    def batch(self, iteration: int) -> tuple[np.ndarray, np.ndarray]:
        """Stacked [k,1,s,s] input and target arrays for ``iteration``."""
        lo, hi = iteration * self.k, (iteration + 1) * self.k
        cache: dict[int, list] = {}
        inp, tgt = [], []
        for j in range(lo, hi):
            d = j // self.pps
            if d not in cache:
                cache[d] = self._draw(d)
            a, b = cache[d][j % self.pps]
            inp.append(a)
            tgt.append(b)
        return np.stack(inp)[:, None], np.stack(tgt)[:, None]


def as_training_arrays(volumes, window) -> list[np.ndarray]:
    out = []
    for v in volumes:
        if isinstance(v, Volume):
            v = v if v.unit == "normalized" else normalize(v, window)
            out.append(v.values)
        else:
            out.append(np.asarray(v, dtype=np.float32))
    return out


# --- training ----------------------------------------------------------------

def train_step(bundle: ModelBundle, cfg: TrainConfig, y: np.ndarray, target: np.ndarray) -> dict[str, float]:
    """One forward/backward pass; gradients are left on the parameters."""
    params = bundle.parameters()
    for p in params.values():
        p.grad = None
    dt = np.dtype(bundle.cfg.dtype)
    Y = Tensor(y.astype(dt))
    x_hat, y_hat = bundle.forward_pair(Y)
    lf = loss_forward(x_hat, Tensor(target.astype(dt)))
    total = T.scale(lf, cfg.w_f)
    out = {"loss_f": lf.item()}
    if y_hat is not None:
        lr_ = loss_reverse(y_hat, Y)
        total = T.add(total, T.scale(lr_, cfg.reverse_weight))
        out["loss_r"] = lr_.item()
    out["y_energy"] = float(np.sum(y.astype(np.float64) ** 2) / y.shape[0])
    T.backward(total)
    return out


def train(cfg: TrainConfig, volumes, bundle: ModelBundle | None = None, state: TrainState | None = None,
          log_path=None, stop_at: int | None = None):
    """Run (or resume) training; returns ``(bundle, state, log_records)``.

    ``stop_at`` ends the run early at that iteration (resume tests).
    """
    if cfg.arch == "M1" and cfg.w_r is not None:
        warnings.warn("reverse loss ignored for M1", stacklevel=2)
    arrays = as_training_arrays(volumes, cfg.window)
    if not arrays:
        raise TrainingError("empty training set: no volumes given")
    stream = PatchStream(arrays, cfg.patch_size, cfg.patches_per_slice, cfg.batch_size, cfg.seed, cfg.r)
    if bundle is None:
        bundle = build_model(cfg.arch, cfg.model_config(), seed=cfg.seed)
    state = state or TrainState()
    params = bundle.parameters()
    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    records = []
    sums: dict[str, float] = {}
    count = 0
    t0 = time.perf_counter()
    fh = open(log_path, "a") if log_path else None
    try:
        while state.iteration < end:
            it = state.iteration
            lr = lr_schedule(it, cfg)
            y, target = stream.batch(it)
            try:
                stats = train_step(bundle, cfg, y, target)
            except T.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at iteration {it}: {exc}") from exc
            if cfg.grad_clip is not None:
                stats["grad_norm"] = clip_grad_norm(params, cfg.grad_clip)
            adam_step(params, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            for key, val in stats.items():
                sums[key] = sums.get(key, 0.0) + val
            count += 1
            if state.iteration % cfg.log_every == 0 or state.iteration == end:
                state.running = {key: val / count for key, val in sums.items()}
                rec = {
                    "iter": state.iteration,
                    "lr": lr,
                    "loss_f": state.running["loss_f"],
                    "loss_r": state.running.get("loss_r"),
                    "secs": round(time.perf_counter() - t0, 3),
                }
                records.append(rec)
                log.info("iter %d lr %.3g L_f %.5g L_r %s", rec["iter"], lr, rec["loss_f"], rec["loss_r"])
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                sums, count = {}, 0
    finally:
        if fh:
            fh.close()
    return bundle, state, records


# --- inference ---------------------------------------------------------------

def denoise_array(bundle: ModelBundle, slices: np.ndarray, batch: int = 4) -> np.ndarray:
    """Run the test-time network over normalized [z, y, x] slices, full-size."""
    r = bundle.cfg.r
    nz, h, w = slices.shape
    ph, pw = (-h) % r, (-w) % r
    dt = np.dtype(bundle.cfg.dtype)
    out = np.empty((nz, h, w), dtype=np.float32)
    with T.no_grad():
        for z0 in range(0, nz, batch):
            chunk = slices[z0:z0 + batch].astype(dt)
            if ph or pw:
                chunk = np.pad(chunk, ((0, 0), (0, ph), (0, pw)), mode="reflect")
            res = bundle.denoise(Tensor(chunk[:, None])).data[:, 0, :h, :w]
            out[z0:z0 + batch] = res
    return out


def denoise_volume(bundle: ModelBundle, v: Volume, window=DEFAULT_WINDOW, batch: int = 4) -> Volume:
    """Denoise every slice, boundary slices included; output keeps the input's unit."""
    norm = v if v.unit == "normalized" else normalize(v, window)
    den = Volume(denoise_array(bundle, norm.values, batch), v.spacing, "normalized")
    return den if v.unit == "normalized" else denormalize(den, window)


def cycle_residual(bundle: ModelBundle, y: np.ndarray) -> float:
    """L_r / ((1/k) sum ||Y||^2) on a batch [k,1,h,w]; NaN for M1."""
    if bundle.arch == "M1":
        return math.nan
    dt = np.dtype(bundle.cfg.dtype)
    with T.no_grad():
        Y = Tensor(y.astype(dt))
        _, y_hat = bundle.forward_pair(Y)
        lr_ = loss_reverse(y_hat, Y).item()
    return lr_ / float(np.sum(y.astype(np.float64) ** 2) / y.shape[0])
