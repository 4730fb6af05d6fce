"""Invertible coupling network and the non-invertible ablation baselines.

Channel plan of the default model (C=64, r=2)::

    Y [N,1,H,W] --enc_Y--> [N,64,H,W] --unshuffle--> [N,256,H/2,W/2]
      --12 coupling blocks (128/128 split)--> --shuffle--> [N,64,H,W] --dec_Y--> X_hat

The reverse path runs ``dec_X . core^-1 . enc_X`` through the *same*
coupling parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCHS = ("M1", "M2", "M3")
DECODER_INITS = ("random", "left_inverse")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    blocks: int = 12
    r: int = 2
    s_max: float = 2.0
    growth: int = 32
    dense_layers: int = 4
    init_gain: float = 1.0
    decoder_init: str = "random"
    dtype: str = "float32"

    def __post_init__(self):
        if self.decoder_init not in DECODER_INITS:
            raise ValueError(f"decoder_init must be one of {DECODER_INITS}, got {self.decoder_init!r}")

    @property
    def core_channels(self) -> int:
        return self.channels * self.r * self.r


class Conv2d:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype, k: int = 3, zero: bool = False,
                 gain: float = 1.0):
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = gain * rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.k = k

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.k // 2)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class SubNet:
    """Dense block: each conv sees the concat of the input and all earlier outputs.

    The final projection is zero-initialized so a fresh subnet outputs 0.
    """

    def __init__(self, cin: int, cout: int, rng, dtype, growth: int = 32, layers: int = 4, alpha: float = 0.2,
                 gain: float = 1.0):
        self.layers = [Conv2d(cin + growth * j, growth, rng, dtype, gain=gain) for j in range(layers)]
        self.proj = Conv2d(cin + growth * layers, cout, rng, dtype, zero=True)
        self.alpha = alpha

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.layers:
            h = conv(feats[0] if len(feats) == 1 else T.channel_concat(feats))
            feats.append(T.leaky_relu(h, self.alpha))
        return self.proj(T.channel_concat(feats))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for j, conv in enumerate(self.layers):
            out.update(conv.parameters(f"{prefix}.conv{j}"))
        out.update(self.proj.parameters(f"{prefix}.proj"))
        return out


def left_inverse_decoder(enc: Conv2d, dec: Conv2d) -> None:
    """Set ``dec`` so that ``dec . enc`` is the identity on single-channel images.

    Both are 3x3 convs, so the composite is one 5x5 kernel. The decoder
    weights are the minimum-norm solution making that kernel a centred delta;
    the decoder bias cancels whatever the encoder bias contributes.
    """
    w = enc.weight.data.astype(np.float64)[:, 0]
    c = w.shape[0]
    A = np.zeros((25, c * 9))
    for ay in range(3):
        for ax in range(3):
            for by in range(3):
                for bx in range(3):
                    A[(ay + by) * 5 + ax + bx, np.arange(c) * 9 + ay * 3 + ax] += w[:, by, bx]
    target = np.zeros(25)
    target[12] = 1.0
    d = np.linalg.lstsq(A, target, rcond=None)[0].reshape(1, c, 3, 3)
    dec.weight.data = d.astype(dec.weight.dtype)
    b = enc.bias.data.astype(np.float64)
    dec.bias.data = np.array([-(d[0].sum(axis=(1, 2)) * b).sum()], dtype=dec.bias.dtype)


def subnet_param_count(cin: int, cout: int, growth: int = 32, layers: int = 4, k: int = 3) -> int:
    n = sum((cin + growth * j) * growth * k * k + growth for j in range(layers))
    return n + (cin + growth * layers) * cout * k * k + cout


def soft_clamp(x: Tensor, s_max: float) -> Tensor:
    """s_max * tanh(x / s_max): zero at zero, bounded in (-s_max, s_max)."""
    return T.scale(T.tanh(T.scale(x, 1.0 / s_max)), s_max)


class CouplingBlock:
    """Affine coupling with an additive first half.

    forward:  n1 = m1 + phi1(m2);  n2 = m2 * exp(clamp(phi2(n1))) + phi3(n1)
    inverse:  m2 = (n2 - phi3(n1)) * exp(-clamp(phi2(n1)));  m1 = n1 - phi1(m2)
    """

    def __init__(self, channels: int, rng, dtype, s_max: float = 2.0, growth: int = 32, layers: int = 4,
                 gain: float = 1.0):
        if channels % 2:
            raise ValueError(f"coupling block needs an even channel count, got {channels}")
        half = channels // 2
        self.phi1 = SubNet(half, half, rng, dtype, growth, layers, gain=gain)
        self.phi2 = SubNet(half, half, rng, dtype, growth, layers, gain=gain)
        self.phi3 = SubNet(half, half, rng, dtype, growth, layers, gain=gain)
        self.s_max = s_max

    def forward(self, m: Tensor) -> Tensor:
        m1, m2 = T.channel_split(m)
        n1 = T.add(m1, self.phi1(m2))
        s = soft_clamp(self.phi2(n1), self.s_max)
        n2 = T.add(T.mul(m2, T.exp(s)), self.phi3(n1))
        return T.channel_concat(n1, n2)

    def inverse(self, n: Tensor) -> Tensor:
        n1, n2 = T.channel_split(n)
        s = soft_clamp(self.phi2(n1), self.s_max)
        m2 = T.mul(T.sub(n2, self.phi3(n1)), T.exp(T.scale(s, -1.0)))
        m1 = T.sub(n1, self.phi1(m2))
        return T.channel_concat(m1, m2)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.phi1.parameters(f"{prefix}.phi1")
        out.update(self.phi2.parameters(f"{prefix}.phi2"))
        out.update(self.phi3.parameters(f"{prefix}.phi3"))
        return out

    def subnets(self) -> list[SubNet]:
        return [self.phi1, self.phi2, self.phi3]


class InvertibleCore:
    """``shuffle . B_n . ... . B_1 . unshuffle`` and its exact inverse."""

    def __init__(self, channels: int, n_blocks: int, r: int, rng, dtype, s_max=2.0, growth=32, layers=4, gain=1.0):
        self.r = r
        cc = channels * r * r
        self.blocks = [CouplingBlock(cc, rng, dtype, s_max, growth, layers, gain) for _ in range(n_blocks)]

    def _check(self, x: Tensor) -> None:
        h, w = x.shape[2:]
        if self.r > 1 and (h % self.r or w % self.r):
            raise T.ShapeError(
                f"invertible core: spatial dims ({h}, {w}) must be divisible by r={self.r}; pad the input"
            )

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        if self.r > 1:
            x = T.pixel_unshuffle(x, self.r)
        for block in self.blocks:
            x = block.forward(x)
        return T.pixel_shuffle(x, self.r) if self.r > 1 else x

    def inverse(self, y: Tensor, order: Iterable[int] | None = None) -> Tensor:
        self._check(y)
        if self.r > 1:
            y = T.pixel_unshuffle(y, self.r)
        idx = range(len(self.blocks) - 1, -1, -1) if order is None else order
        for i in idx:
            y = self.blocks[i].inverse(y)
        return T.pixel_shuffle(y, self.r) if self.r > 1 else y

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            out.update(block.parameters(f"{prefix}.block{i:02d}"))
        return out


class DenoiserModel:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        dt = np.dtype(cfg.dtype)
        self.cfg = cfg
        c = cfg.channels
        self.enc_Y = Conv2d(1, c, rng, dt)
        self.enc_X = Conv2d(1, c, rng, dt)
        self.dec_Y = Conv2d(c, 1, rng, dt)
        self.dec_X = Conv2d(c, 1, rng, dt)
        self.core = InvertibleCore(c, cfg.blocks, cfg.r, rng, dt, cfg.s_max, cfg.growth, cfg.dense_layers,
                                   cfg.init_gain)
        if cfg.decoder_init == "left_inverse":
            left_inverse_decoder(self.enc_Y, self.dec_Y)
            left_inverse_decoder(self.enc_X, self.dec_X)

    def core_forward(self, x: Tensor) -> Tensor:
        return self.core.forward(x)

    def core_inverse(self, y: Tensor) -> Tensor:
        return self.core.inverse(y)

    def forward(self, Y: Tensor) -> Tensor:
        """Noisy slice -> denoised estimate."""
        _check_image(Y)
        return self.dec_Y(self.core.forward(self.enc_Y(Y)))

    def reverse(self, X: Tensor) -> Tensor:
        """Denoised estimate -> reconstructed noisy slice."""
        _check_image(X)
        return self.dec_X(self.core.inverse(self.enc_X(X)))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in ("enc_Y", "enc_X", "dec_Y", "dec_X"):
            out.update(getattr(self, name).parameters(name))
        out.update(self.core.parameters("core"))
        return out


def denoiser_param_count(cfg: ModelConfig) -> int:
    c, half = cfg.channels, cfg.core_channels // 2
    encdec = 2 * (9 * c + c) + 2 * (9 * c + 1)
    return encdec + 3 * cfg.blocks * subnet_param_count(half, half, cfg.growth, cfg.dense_layers)


class BaselineModel:
    """Feed-forward stand-in for the invertible core: residual dense blocks, no inverse."""

    def __init__(self, cfg: ModelConfig, depth: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        dt = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.depth = depth
        c, cc = cfg.channels, cfg.core_channels
        self.enc = Conv2d(1, c, rng, dt)
        self.blocks = [SubNet(cc, cc, rng, dt, cfg.growth, cfg.dense_layers, gain=cfg.init_gain) for _ in range(depth)]
        self.dec = Conv2d(c, 1, rng, dt)
        if cfg.decoder_init == "left_inverse":
            left_inverse_decoder(self.enc, self.dec)

    def forward(self, Y: Tensor) -> Tensor:
        _check_image(Y)
        r = self.cfg.r
        x = self.enc(Y)
        if r > 1:
            h, w = x.shape[2:]
            if h % r or w % r:
                raise T.ShapeError(f"baseline: spatial dims ({h}, {w}) must be divisible by r={r}; pad the input")
            x = T.pixel_unshuffle(x, r)
        for block in self.blocks:
            x = T.add(x, block(x))
        if r > 1:
            x = T.pixel_shuffle(x, r)
        return self.dec(x)

    def parameters(self) -> dict[str, Tensor]:
        out = self.enc.parameters("enc")
        for i, block in enumerate(self.blocks):
            out.update(block.parameters(f"blocks.{i:02d}"))
        out.update(self.dec.parameters("dec"))
        return out


def baseline_param_count(cfg: ModelConfig, depth: int) -> int:
    c, cc = cfg.channels, cfg.core_channels
    return (9 * c + c) + (9 * c + 1) + depth * subnet_param_count(cc, cc, cfg.growth, cfg.dense_layers)


def matched_depth(cfg: ModelConfig, tolerance: float = 0.10) -> int:
    """Baseline depth whose parameter count is closest to the invertible model's."""
    target = denoiser_param_count(cfg)
    per_block = subnet_param_count(cfg.core_channels, cfg.core_channels, cfg.growth, cfg.dense_layers)
    best = max(1, round(target / per_block))
    candidates = [d for d in (best - 1, best, best + 1) if d >= 1]
    depth = min(candidates, key=lambda d: abs(baseline_param_count(cfg, d) - target))
    mismatch = abs(baseline_param_count(cfg, depth) - target) / target
    if mismatch > tolerance:
        raise ValueError(
            f"no baseline depth matches {target} parameters within {tolerance:.0%} (best {depth}: {mismatch:.1%})"
        )
    return depth


class ModelBundle:
    """One trainable unit per ablation arch.

    M3 holds the invertible model under ``"inn"``; M1 holds ``"F"``;
    M2 holds independent ``"F"`` and ``"R"``. ``F``/``inn`` is the test-time map.
    """

    def __init__(self, arch: str, cfg: ModelConfig, nets: dict, depth: int | None = None):
        self.arch = arch
        self.cfg = cfg
        self.nets = nets
        self.depth = depth

    @property
    def test_net(self):
        return self.nets["inn"] if self.arch == "M3" else self.nets["F"]

    def denoise(self, Y: Tensor) -> Tensor:
        return self.test_net.forward(Y)

    def forward_pair(self, Y: Tensor) -> tuple[Tensor, Tensor | None]:
        """Returns (X_hat, Y_hat); Y_hat is None for M1."""
        if self.arch == "M3":
            net = self.nets["inn"]
            x_hat = net.forward(Y)
            return x_hat, net.reverse(x_hat)
        x_hat = self.nets["F"].forward(Y)
        if self.arch == "M1":
            return x_hat, None
        return x_hat, self.nets["R"].forward(x_hat)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key in sorted(self.nets):
            for name, p in self.nets[key].parameters().items():
                out[f"{key}.{name}"] = p
        return out

    def param_count(self, net: str | None = None) -> int:
        params = self.parameters() if net is None else self.nets[net].parameters()
        return int(sum(p.data.size for p in params.values()))


def build_model(arch: str, cfg: ModelConfig = ModelConfig(), seed: int = 0, w_r: float | None = None) -> ModelBundle:
    """Construct the model bundle for an ablation arch.

    Baselines are sized so that each of their networks has within 10% of
    the invertible model's parameter count.
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    if arch == "M3":
        return ModelBundle(arch, cfg, {"inn": DenoiserModel(cfg, seed)})
    if arch == "M1" and w_r is not None:
        warnings.warn("reverse loss ignored for M1", stacklevel=2)
    depth = matched_depth(cfg)
    target = denoiser_param_count(cfg)
    nets = {"F": BaselineModel(cfg, depth, seed)}
    if arch == "M2":
        nets["R"] = BaselineModel(cfg, depth, seed + 1)
    bundle = ModelBundle(arch, cfg, nets, depth)
    for key in nets:
        assert abs(bundle.param_count(key) - target) <= 0.10 * target
    return bundle


def randomize_projections(params: dict[str, Tensor], rng: np.random.Generator, std: float = 0.05) -> None:
    """Overwrite zero-initialized subnet projections with small random weights (test helper)."""
    for name, p in params.items():
        if ".proj." in name:
            p.data[...] = rng.normal(0.0, std, size=p.shape).astype(p.dtype)


def _check_image(x: Tensor) -> None:
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise T.ShapeError(f"expected single-channel images [N,1,H,W], got {x.shape}")
