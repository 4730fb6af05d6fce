import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inn_ldct.container import (
    BadMagicError,
    HeaderError,
    PayloadSizeError,
    TruncatedFileError,
    UnsupportedVersionError,
    pack,
)
from inn_ldct.volume import (
    MATERIALS,
    PHANTOM_HU_RANGE,
    NoiseSpec,
    Volume,
    add_noise,
    denormalize,
    make_n2n_pair,
    make_phantom,
    normalize,
    parse_volume,
    read_volume,
    sample_patches,
    sidecar_path,
    slice_triple,
    volume_bytes,
    write_phantom,
    write_volume,
)


def test_normalize_window_points():
    v = Volume(np.array([-1024.0, 3071.0, 1023.5, -2000.0, 5000.0]).reshape(1, 1, 5))
    n = normalize(v).values.ravel()
    assert n.tolist() == [0.0, 1.0, 0.5, 0.0, 1.0]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_normalize_roundtrip(seed):
    x = np.random.default_rng(seed).uniform(-1500, 3500, size=(2, 3, 4)).astype(np.float32)
    back = denormalize(normalize(Volume(x))).values
    np.testing.assert_allclose(back, np.clip(x, -1024, 3071), rtol=0, atol=5e-4)


def test_degenerate_window():
    with pytest.raises(ValueError, match="degenerate"):
        normalize(Volume(np.zeros((1, 2, 2))), (5.0, 5.0))


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.full((1, 2, 2), np.inf))


# --- phantoms ---

@pytest.mark.parametrize("kind", ["ellipses", "shepp_logan_like"])
def test_phantom_deterministic_and_in_range(kind):
    a = make_phantom(kind, (16, 48, 40), seed=3)
    b = make_phantom(kind, (16, 48, 40), seed=3)
    assert a.volume.values.tobytes() == b.volume.values.tobytes()
    assert a.organ_end_slices == b.organ_end_slices
    lo, hi = PHANTOM_HU_RANGE
    assert a.volume.values.min() >= lo and a.volume.values.max() <= hi
    assert a.volume.dims == (16, 48, 40)
    c = make_phantom(kind, (16, 48, 40), seed=4)
    assert c.volume.values.tobytes() != a.volume.values.tobytes()


@pytest.mark.parametrize("kind", ["ellipses", "shepp_logan_like"])
@pytest.mark.parametrize("seed", [0, 1, 2, 7])
def test_phantom_smooth_along_z_except_organ_ends(kind, seed):
    p = make_phantom(kind, (32, 64, 64), seed)
    v = p.volume.values.astype(np.float64)
    rng_ = v.max() - v.min()
    ends = set(p.organ_end_slices)
    assert ends, "generator must declare at least one organ end"
    big = []
    for i in range(1, v.shape[0] - 1):
        d = np.abs(v[i] - v[i - 1]).mean() / rng_
        if i not in ends and i - 1 not in ends:
            assert d <= 0.02, (i, d)
        big.append(d)
    assert max(big) > 0.0


def test_phantom_sidecar_lists_interior_ends(tmp_path):
    p = make_phantom("ellipses", (32, 64, 64), 0)
    assert all(1 <= i <= 30 for i in p.organ_end_slices)
    side = write_phantom(p, tmp_path / "p.rvol")
    assert side == sidecar_path(tmp_path / "p.rvol") and side.endswith("p.organs.json")
    doc = json.loads(open(side).read())
    assert doc["organ_end_slices"] == p.organ_end_slices and doc["dims"] == [32, 64, 64]


def test_phantom_materials_present():
    v = make_phantom("ellipses", (8, 64, 64), 0).volume.values
    assert np.isclose(v, MATERIALS["air"]).any()


def test_phantom_bad_args():
    with pytest.raises(ValueError):
        make_phantom("ellipses", (8, 4, 64))
    with pytest.raises(ValueError):
        make_phantom("cube", (8, 8, 8))


# --- noise ---

def test_zero_sigma_is_identity():
    v = make_phantom("ellipses", (4, 16, 16), 0).volume
    assert add_noise(v, NoiseSpec("gaussian", sigma=0.0, seed=1)).values.tobytes() == v.values.tobytes()


def test_gaussian_std_monte_carlo():
    v = Volume(np.full((64, 64, 64), 0.3))
    eta = add_noise(v, NoiseSpec("gaussian", sigma=0.1, seed=11)).values.astype(np.float64) - 0.3
    assert 0.097 <= eta.std() <= 0.103


def test_slice_noise_uncorrelated():
    v = Volume(np.zeros((64, 64, 64)))
    eta = add_noise(v, NoiseSpec("gaussian", sigma=1.0, seed=5)).values.astype(np.float64)
    c = np.corrcoef(eta[:-1].ravel(), eta[1:].ravel())[0, 1]
    assert abs(c) <= 0.01


def test_signal_dependent_variance_grows():
    x = np.zeros((4, 64, 64))
    x[:, :, 32:] = 1.0
    eta = add_noise(Volume(x), NoiseSpec("signal_dependent", a=0.01, b=0.05, seed=0)).values - x
    assert eta[:, :, 32:].std() > 3 * eta[:, :, :32].std()


def test_noise_rejects_negative():
    with pytest.raises(ValueError):
        NoiseSpec("gaussian", sigma=-0.1)
    with pytest.raises(ValueError):
        NoiseSpec("signal_dependent", a=0.1, b=-1.0)


# --- pairs ---

def test_boundary_slices_have_no_triple():
    v = Volume(np.zeros((5, 4, 4)))
    for bad in (0, 4, -1, 5):
        with pytest.raises(IndexError):
            slice_triple(v, bad)
    assert slice_triple(v, 1).index == 1


def test_n2n_pair_constant_and_linear_in_z():
    z = np.arange(7, dtype=np.float32)[:, None, None]
    for vals in (np.full((7, 5, 5), 0.25, np.float32), np.broadcast_to(0.125 * z, (7, 5, 5)).astype(np.float32)):
        for i in range(1, 6):
            inp, tgt = make_n2n_pair(slice_triple(Volume(vals), i))
            assert inp.dtype == tgt.dtype == np.float32
            assert np.array_equal(inp, tgt)


def test_n2n_algebra_on_random_arrays():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 8, 8)).astype(np.float32)
    eta = rng.normal(size=(3, 8, 8)).astype(np.float32)
    inp, tgt = make_n2n_pair(slice_triple(x + eta, 1))
    d1, d2 = x[0] - x[1], x[2] - x[1]
    rhs = x[1] + (d1 + d2) / 2 + (eta[0] + eta[2]) / 2
    np.testing.assert_allclose(tgt, rhs, atol=1e-5)


def test_patches_colocated_and_seeded():
    rng = np.random.default_rng
    inp = np.arange(100, dtype=np.float32).reshape(10, 10)
    pair = (inp, inp + 1000)
    a = sample_patches(pair, 10, 4, rng(3), multiple_of=2)
    b = sample_patches(pair, 10, 4, rng(3), multiple_of=2)
    assert len(a) == 10
    for (pi, pt), (qi, qt) in zip(a, b):
        assert np.array_equal(pi, qi) and np.array_equal(pt - 1000, pi)
    (whole, _), = sample_patches(pair, 1, 10, rng(0))
    assert np.array_equal(whole, inp)
    with pytest.raises(ValueError):
        sample_patches(pair, 1, 11, rng(0))
    with pytest.raises(ValueError):
        sample_patches(pair, 1, 5, rng(0), multiple_of=2)


# --- RVOL ---

def test_rvol_roundtrip_bit_exact(tmp_path):
    v = Volume(np.random.default_rng(1).normal(size=(3, 5, 7)) * 500, spacing=(2.5, 0.7, 0.7))
    path = tmp_path / "v.rvol"
    write_volume(v, path)
    w = read_volume(path)
    assert w.values.tobytes() == v.values.tobytes() and w.spacing == v.spacing and w.unit == "HU"
    assert volume_bytes(w) == path.read_bytes()


def test_rvol_header_layout():
    blob = volume_bytes(Volume(np.zeros((1, 2, 3))))
    magic, ver, hlen = struct.unpack("<4sII", blob[:12])
    assert magic == b"RVOL" and ver == 1
    header = json.loads(blob[12:12 + hlen])
    assert header == {"dims": [1, 2, 3], "spacing": [1.0, 1.0, 1.0], "dtype": "f32", "unit": "HU"}
    assert len(blob) == 12 + hlen + 4 * 6


def test_rvol_errors_are_distinct():
    blob = volume_bytes(Volume(np.ones((2, 3, 3))))
    with pytest.raises(BadMagicError, match="bad magic"):
        parse_volume(b"XVOL" + blob[4:])
    with pytest.raises(UnsupportedVersionError):
        parse_volume(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(TruncatedFileError):
        parse_volume(blob[:8])
    with pytest.raises(TruncatedFileError):
        parse_volume(blob[:8] + struct.pack("<I", 10**6) + blob[12:])
    with pytest.raises(PayloadSizeError, match="payload size mismatch"):
        parse_volume(blob[:-4])
    bad = pack(b"RVOL", 1, {"dims": [2, 3], "spacing": [1, 1, 1], "dtype": "f32"}, b"")
    with pytest.raises(HeaderError):
        parse_volume(bad)


@pytest.mark.parametrize("kind", ["ellipses", "shepp_logan_like"])
def test_short_phantoms_build(kind):
    for nz in range(1, 12):
        p = make_phantom(kind, (nz, 16, 16), seed=nz)
        assert p.volume.dims == (nz, 16, 16)
        assert all(1 <= i <= nz - 2 for i in p.organ_end_slices)
