"""Volumes, synthetic phantoms, noise and the neighbour-average training pairs.

A noisy slice ``Y_i`` is paired with ``(Y_{i-1} + Y_{i+1}) / 2``: with
independent noise per slice the target is a second noisy observation of
the same anatomy (plus a small inter-slice offset), so regressing one onto
the other behaves like training against the clean slice.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .container import HeaderError, PayloadSizeError, pack, unpack

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
DEFAULT_WINDOW = (-1024.0, 3071.0)


@dataclass
class Volume:
    """z-major stack of slices. ``unit`` is ``"HU"`` or ``"normalized"``."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    unit: str = "HU"

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"volume must be 3-D (z, y, x), got shape {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if not np.isfinite(self.values).all():
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)


# --- normalization -----------------------------------------------------------

def _check_window(window) -> tuple[float, float]:
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"degenerate window [{lo}, {hi}]")
    return lo, hi


def normalize(v: Volume, window=DEFAULT_WINDOW) -> Volume:
    """Clamp to ``window`` and map affinely onto [0, 1]."""
    lo, hi = _check_window(window)
    x = np.clip(v.values.astype(np.float64), lo, hi)
    return Volume(((x - lo) / (hi - lo)).astype(np.float32), v.spacing, "normalized")


def denormalize(v: Volume, window=DEFAULT_WINDOW) -> Volume:
    lo, hi = _check_window(window)
    x = v.values.astype(np.float64) * (hi - lo) + lo
    return Volume(x.astype(np.float32), v.spacing, "HU")


# --- phantoms ----------------------------------------------------------------

MATERIALS = {
    "air": -1000.0,
    "lung": -800.0,
    "fat": -100.0,
    "water": 0.0,
    "kidney": 30.0,
    "muscle": 40.0,
    "liver": 60.0,
    "vessel": 250.0,
    "bone": 700.0,
}
PHANTOM_HU_RANGE = (-1010.0, 710.0)  # materials plus the +-10 HU texture field


@dataclass
class Phantom:
    volume: Volume
    organ_end_slices: list[int]
    structures: list[dict] = field(default_factory=list)
    kind: str = "ellipses"
    seed: int = 0

    def sidecar(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "dims": list(self.volume.dims),
            "hu_range": list(PHANTOM_HU_RANGE),
            "organ_end_slices": list(self.organ_end_slices),
            "structures": self.structures,
        }


def _grid(dims):
    z, y, x = dims
    zz = np.linspace(-1.0, 1.0, z)
    yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, y), np.linspace(-1.0, 1.0, x), indexing="ij")
    return zz, yy, xx


def _ellipse_mask(yy, xx, cy, cx, ay, ax, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    w = -s * dx + c * dy
    return (u / ax) ** 2 + (w / ay) ** 2 <= 1.0


def _end_slices(z0: int, z1: int, nz: int) -> list[int]:
    """Slices whose neighbour average straddles an abrupt start/stop at z0 or z1."""
    cand = {z0 - 1, z0, z1, z1 + 1}
    return sorted(i for i in cand if 1 <= i <= nz - 2)


def _paint(vol, zz, yy, xx, s):
    """Paint one structure into ``vol``; ellipsoids shrink as sqrt(1 - (z/c)^2)."""
    nz = vol.shape[0]
    z0, z1 = s.get("z_range", (0, nz - 1))
    for k in range(z0, z1 + 1):
        z = zz[k]
        if "c" in s:
            f2 = 1.0 - ((z - s["cz"]) / s["c"]) ** 2
            if f2 <= 0:
                continue
            f = np.sqrt(f2)
        else:
            f = 1.0
        cy = s["cy"] + s.get("drift_y", 0.0) * z
        cx = s["cx"] + s.get("drift_x", 0.0) * z
        m = _ellipse_mask(yy, xx, cy, cx, s["ay"] * f, s["ax"] * f, s.get("theta", 0.0))
        vol[k][m] = MATERIALS[s["material"]]


def _ellipses_structures(rng, nz):
    body_ay, body_ax = rng.uniform(0.62, 0.72), rng.uniform(0.82, 0.9)
    st = [
        dict(name="body", material="muscle", cy=0.0, cx=0.0, ay=body_ay, ax=body_ax),
        dict(name="fat", material="fat", cy=0.02, cx=0.0, ay=body_ay - 0.08, ax=body_ax - 0.08),
        dict(name="abdomen", material="muscle", cy=0.04, cx=0.0, ay=body_ay - 0.16, ax=body_ax - 0.18),
        dict(name="spine", material="bone", cy=body_ay - 0.3, cx=0.0, ay=0.12, ax=0.11),
    ]
    organs = [("liver", "liver"), ("kidney_l", "kidney"), ("kidney_r", "kidney"), ("lung_base", "lung")]
    for name, mat in organs:
        st.append(dict(
            name=name, material=mat,
            cy=rng.uniform(-0.3, 0.15), cx=rng.uniform(-0.45, 0.45),
            ay=rng.uniform(0.12, 0.25), ax=rng.uniform(0.12, 0.3),
            theta=rng.uniform(0, np.pi), c=rng.uniform(1.6, 2.4), cz=rng.uniform(-0.3, 0.3),
            drift_y=rng.uniform(-0.05, 0.05), drift_x=rng.uniform(-0.05, 0.05),
        ))
    # abrupt starts/stops along z: the organ-end cases
    for j in range(2 if nz >= 6 else 0):
        z0 = int(rng.integers(2, max(3, nz // 3)))
        lo = max(z0 + 2, nz // 2)
        z1 = int(rng.integers(lo, max(nz - 2, lo + 1)))
        st.append(dict(
            name=f"vessel{j}", material="vessel" if j == 0 else "bone",
            cy=rng.uniform(-0.3, 0.2), cx=rng.uniform(-0.4, 0.4),
            ay=rng.uniform(0.12, 0.2), ax=rng.uniform(0.12, 0.2), z_range=(z0, z1),
        ))
    return st


def _shepp_logan_structures(rng, nz):
    # 2-D Shepp-Logan layout extruded along z with slowly shrinking sections;
    # the small lesions are short cylinders with flat ends.
    j = lambda: rng.uniform(-0.02, 0.02)  # noqa: E731
    st = [
        dict(name="skull", material="bone", cy=0.0, cx=0.0, ay=0.92, ax=0.69, c=3.0, cz=0.0),
        dict(name="brain", material="muscle", cy=-0.0184, cx=0.0, ay=0.874, ax=0.6624, c=3.0, cz=0.0),
        dict(name="ventricle_r", material="water", cy=0.0 + j(), cx=0.22, ay=0.41, ax=0.11, theta=-np.pi / 10, c=1.8, cz=0.1),
        dict(name="ventricle_l", material="water", cy=0.0 + j(), cx=-0.22, ay=0.31, ax=0.16, theta=np.pi / 10, c=1.8, cz=0.1),
        dict(name="gland", material="liver", cy=0.35 + j(), cx=0.0, ay=0.25, ax=0.21, c=1.7, cz=-0.1),
    ]
    lesions = [(0.1, 0.0, 0.046), (-0.1, 0.0, 0.046), (-0.605, -0.08, 0.046), (-0.605, 0.06, 0.023)]
    for k, (cy, cx, a) in enumerate(lesions if nz >= 6 else []):
        z0 = int(rng.integers(2, max(3, nz // 3)))
        lo = max(z0 + 2, nz // 2)
        z1 = int(rng.integers(lo, max(nz - 2, lo + 1)))
        st.append(dict(
            name=f"lesion{k}", material="vessel",
            cy=cy, cx=cx, ay=max(a, 0.08), ax=max(a, 0.08), z_range=(z0, z1),
        ))
    return st


def make_phantom(kind: str = "ellipses", dims=(32, 64, 64), seed: int = 0) -> Phantom:
    """Piecewise-smooth HU phantom, slowly varying along z except at declared organ ends."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims[1:]) < 8 or dims[0] < 1:
        raise ValueError(f"phantom needs >= 1 slice of at least 8x8 pixels, got {dims}")
    rng = np.random.default_rng(seed)
    nz = dims[0]
    if kind == "ellipses":
        structures = _ellipses_structures(rng, nz)
        outer = structures[0]
    elif kind == "shepp_logan_like":
        structures = _shepp_logan_structures(rng, nz)
        outer = structures[0]
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")

    zz, yy, xx = _grid(dims)
    vol = np.full(dims, MATERIALS["air"], dtype=np.float64)
    ends: set[int] = set()
    for s in structures:
        _paint(vol, zz, yy, xx, s)
        if "z_range" in s:
            ends.update(_end_slices(*s["z_range"], nz))

    # gentle texture inside the body keeps regions smooth rather than flat
    phase = rng.uniform(0, 2 * np.pi, size=3)
    tex = 10.0 * np.sin(2.1 * yy + phase[0]) * np.cos(1.7 * xx + phase[1])
    for k in range(nz):
        inside = _ellipse_mask(yy, xx, outer["cy"], outer["cx"], outer["ay"], outer["ax"])
        vol[k][inside] += tex[inside] * np.cos(0.5 * zz[k] + phase[2])

    for s in structures:
        if "z_range" in s:
            s["z_range"] = [int(v) for v in s["z_range"]]
        for key, val in list(s.items()):
            if isinstance(val, (np.floating, float)):
                s[key] = float(val)
    return Phantom(Volume(vol.astype(np.float32)), sorted(ends), structures, kind, seed)


# --- noise -------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """``gaussian``: eta ~ N(0, sigma^2). ``signal_dependent``: eta ~ N(0, (a + b*x)^2).

    For the signal-dependent model ``a + b*x`` is clipped at zero, ``x``
    being the clean value in the volume's own unit.
    """

    kind: str = "gaussian"
    sigma: float = 0.0
    a: float = 0.0
    b: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "signal_dependent"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        for name in ("sigma", "a", "b"):
            if getattr(self, name) < 0:
                raise ValueError(f"noise parameter {name} must be non-negative, got {getattr(self, name)}")


def slice_rng(seed: int, z: int) -> np.random.Generator:
    """Independent stream for slice ``z``; never shared across slices."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(z)]))


def add_noise(v: Volume, spec: NoiseSpec) -> Volume:
    out = v.values.astype(np.float64)
    for z in range(out.shape[0]):
        if spec.kind == "gaussian":
            if spec.sigma == 0:
                continue
            std = spec.sigma
        else:
            std = np.maximum(spec.a + spec.b * out[z], 0.0)
            if not np.any(std):
                continue
        out[z] += std * slice_rng(spec.seed, z).standard_normal(out.shape[1:])
    return Volume(out.astype(np.float32), v.spacing, v.unit)


# --- training pairs ----------------------------------------------------------

@dataclass(frozen=True)
class SliceTriple:
    prev: np.ndarray
    cur: np.ndarray
    next: np.ndarray
    index: int


def slice_triple(v: Volume | np.ndarray, i: int) -> SliceTriple:
    values = v.values if isinstance(v, Volume) else v
    nz = values.shape[0]
    if not 1 <= i <= nz - 2:
        raise IndexError(f"slice {i} has no two neighbours in a {nz}-slice volume (boundary slices are not paired)")
    return SliceTriple(values[i - 1], values[i], values[i + 1], i)


def make_n2n_pair(t: SliceTriple) -> tuple[np.ndarray, np.ndarray]:
    """(Y_i, (Y_{i-1} + Y_{i+1}) / 2), both float32."""
    prev = t.prev.astype(np.float32)
    nxt = t.next.astype(np.float32)
    return t.cur.astype(np.float32), (prev + nxt) * np.float32(0.5)


def sample_patches(pair, n_patches: int, size: int, rng: np.random.Generator, multiple_of: int = 1):
    """Random co-located square crops from an (input, target) slice pair."""
    inp, tgt = pair
    h, w = inp.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds slice dims {inp.shape}")
    if size % multiple_of:
        raise ValueError(f"patch size {size} is not a multiple of {multiple_of}")
    out = []
    for _ in range(n_patches):
        y0 = int(rng.integers(0, h - size + 1))
        x0 = int(rng.integers(0, w - size + 1))
        out.append((inp[y0:y0 + size, x0:x0 + size].copy(), tgt[y0:y0 + size, x0:x0 + size].copy()))
    return out


# --- RVOL I/O ----------------------------------------------------------------

def volume_bytes(v: Volume) -> bytes:
    header = {"dims": list(v.dims), "spacing": list(v.spacing), "dtype": "f32", "unit": v.unit}
    return pack(RVOL_MAGIC, RVOL_VERSION, header, v.values.astype("<f4").tobytes())


def parse_volume(blob: bytes) -> Volume:
    _, header, payload = unpack(blob, RVOL_MAGIC, (RVOL_VERSION,))
    try:
        dims = [int(d) for d in header["dims"]]
        spacing = [float(s) for s in header["spacing"]]
        dtype, unit = header["dtype"], header.get("unit", "HU")
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"malformed RVOL header: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3:
        raise HeaderError(f"malformed RVOL header: dims {dims}, spacing {spacing}")
    if dtype != "f32":
        raise HeaderError(f"unsupported RVOL dtype {dtype!r}")
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise PayloadSizeError(
            f"payload size mismatch: header dims {dims} need {expected} bytes, payload has {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume(values, tuple(spacing), unit)


def write_volume(v: Volume, path) -> None:
    with open(path, "wb") as fh:
        fh.write(volume_bytes(v))


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        return parse_volume(fh.read())


def sidecar_path(path) -> str:
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".organs.json"


def write_phantom(p: Phantom, path) -> str:
    """Write the RVOL file and its organ-end sidecar; returns the sidecar path."""
    write_volume(p.volume, path)
    side = sidecar_path(path)
    with open(side, "w") as fh:
        json.dump(p.sidecar(), fh, indent=2, sort_keys=True)
    return side
