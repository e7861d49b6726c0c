import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tumorsim.texture import (DisplacementField, TextureParams, elastic_deform, gaussian_blur,
                              gaussian_kernel1d, linear_transform, make_displacement,
                              transform_pipeline, tumor_texture)
from tumorsim.volume import BinaryMask, Volume


def _vol(shape=(10, 9, 8), spacing=(1.0, 1.0, 1.0), seed=0):
    return Volume(np.random.default_rng(seed).uniform(0.5, 2.0, shape).astype(np.float32), spacing)


def test_linear_transform_mean_identity():
    src, ref = _vol(seed=1), _vol(seed=2)
    out = linear_transform(src, ref, 1.7)
    assert out.data.mean() == pytest.approx(1.7 * ref.data.astype(np.float64).mean(), rel=1e-9)


def test_linear_transform_over_region():
    src, ref = _vol(seed=1), _vol(seed=2)
    region = BinaryMask(np.random.default_rng(3).random(src.dims) > 0.4, src.spacing)
    out = linear_transform(src, ref, 0.3, region)
    got = out.data[region.data].mean()
    want = 0.3 * ref.data[region.data].astype(np.float64).mean()
    assert got == pytest.approx(want, rel=1e-9)


def test_linear_transform_rejects():
    src = _vol()
    with pytest.raises(ValueError):
        linear_transform(src, src, 0.0)
    with pytest.raises(ValueError):
        linear_transform(Volume(np.zeros(src.dims, np.float32), src.spacing), src, 1.0)


@pytest.mark.parametrize("sigma", [0.3, 1.0, 2.5])
def test_kernel_normalised_and_truncated(sigma):
    k = gaussian_kernel1d(sigma)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    assert len(k) == 2 * int(np.ceil(3 * sigma)) + 1
    assert np.allclose(k, k[::-1])


def _naive_blur(data, sigma_mm, spacing):
    """Direct 3D correlation with a clamped-edge padded array (oracle)."""
    ks = [gaussian_kernel1d(sigma_mm / s) for s in spacing]
    r = [len(k) // 2 for k in ks]
    padded = np.pad(data.astype(np.float64), [(ri, ri) for ri in r], mode="edge")
    k3 = ks[0][:, None, None] * ks[1][None, :, None] * ks[2][None, None, :]
    out = np.zeros(data.shape)
    for a in range(k3.shape[0]):
        for b in range(k3.shape[1]):
            for c in range(k3.shape[2]):
                out += k3[a, b, c] * padded[a:a + data.shape[0], b:b + data.shape[1], c:c + data.shape[2]]
    return out


def test_blur_matches_direct_convolution():
    v = _vol(spacing=(1.0, 0.5, 2.0))
    got = gaussian_blur(v, 1.0).data
    np.testing.assert_allclose(got, _naive_blur(v.data, 1.0, v.spacing), rtol=0, atol=1e-12)


def test_blur_constant_and_identity():
    c = Volume(np.full((7, 7, 7), 3.25, np.float32), (1, 1, 1))
    assert np.abs(gaussian_blur(c, 1.3).data - 3.25).max() <= 1e-6
    v = _vol()
    assert np.array_equal(gaussian_blur(v, 0.0).data, v.data)
    with pytest.raises(ValueError):
        gaussian_blur(v, -1.0)


def test_elastic_zero_field_identity(backend):
    v = _vol()
    out = elastic_deform(v, DisplacementField.zeros(v.dims))
    assert np.array_equal(out.data, v.data.astype(np.float64))


def test_elastic_integer_shift_oracle(backend):
    v = _vol()
    out = elastic_deform(v, DisplacementField.constant(v.dims, (2.0, -1.0, 0.0))).data
    idx = np.indices(v.dims)
    xi = np.clip(idx[0] + 2, 0, v.dims[0] - 1)
    yi = np.clip(idx[1] - 1, 0, v.dims[1] - 1)
    assert np.array_equal(out, v.data[xi, yi, idx[2]].astype(np.float64))


def test_elastic_half_shift_is_average(backend):
    v = _vol()
    out = elastic_deform(v, DisplacementField.constant(v.dims, (0.5, 0.0, 0.0))).data
    d = v.data.astype(np.float64)
    np.testing.assert_allclose(out[:-1], 0.5 * (d[:-1] + d[1:]), atol=1e-12)
    assert np.array_equal(out[-1], d[-1])


def test_elastic_backends_agree():
    from tumorsim import _accel
    v = _vol((12, 12, 12))
    f = make_displacement(TextureParams(elastic_grid_spacing=4), np.random.default_rng(0), v.dims)
    _accel.set_backend("numba")
    a = elastic_deform(v, f).data
    _accel.set_backend("numpy")
    b = elastic_deform(v, f).data
    _accel.set_backend(None)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(4, 10), st.floats(0.5, 3.9))
def test_displacement_magnitude(seed, step, max_disp):
    p = TextureParams(elastic_grid_spacing=step, elastic_max_displacement=max_disp)
    f = make_displacement(p, np.random.default_rng(seed), (9, 10, 11))
    assert f.dims == (9, 10, 11)
    assert f.max_magnitude() == pytest.approx(max_disp, rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_elastic_stays_within_value_range(seed):
    v = _vol(seed=seed % 97)
    f = make_displacement(TextureParams(), np.random.default_rng(seed), v.dims)
    out = elastic_deform(v, f).data
    assert out.min() >= v.data.min() and out.max() <= v.data.max()


def _stage_params(**kw):
    base = dict(enable_elastic=False, enable_blur=False, enable_linear=False)
    base.update(kw)
    return TextureParams(**base)


def test_pipeline_order_elastic_blur_linear():
    src, ref = _vol(seed=4), _vol(seed=5)
    region = BinaryMask.full(src.dims)
    full, draw = transform_pipeline(src, ref, TextureParams(), np.random.default_rng(8), region)

    # replay the stages one at a time with the same draws
    rng = np.random.default_rng(8)
    params = TextureParams()
    field = make_displacement(params, rng, src.dims)
    sigma = draw.blur_sigma_mm
    rng.uniform(*params.blur_sigma_range_mm)
    staged = linear_transform(gaussian_blur(elastic_deform(src, field), sigma), ref, draw.ratio, region)
    np.testing.assert_allclose(full.data, staged.data, rtol=1e-12, atol=0)

    # a different order gives a different volume
    swapped = elastic_deform(gaussian_blur(src, sigma), field)
    swapped = linear_transform(swapped, ref, draw.ratio, region)
    assert not np.allclose(full.data, swapped.data, rtol=1e-6)


def test_pipeline_stage_disable_composition():
    src, ref = _vol(seed=4), _vol(seed=5)
    region = BinaryMask.full(src.dims)
    ed, _ = transform_pipeline(src, ref, _stage_params(enable_elastic=True), np.random.default_rng(1), region)
    field = make_displacement(TextureParams(), np.random.default_rng(1), src.dims)
    assert np.array_equal(ed.data, elastic_deform(src, field).data)

    gb, d = transform_pipeline(src, ref, _stage_params(enable_blur=True), np.random.default_rng(1), region)
    assert np.array_equal(gb.data, gaussian_blur(src, d.blur_sigma_mm).data)

    lt, d = transform_pipeline(src, ref, _stage_params(enable_linear=True), np.random.default_rng(1), region)
    assert np.array_equal(lt.data, linear_transform(src, ref, d.ratio, region).data)

    none, d = transform_pipeline(src, ref, _stage_params(), np.random.default_rng(1), region)
    assert np.array_equal(none.data, src.data.astype(np.float64))
    assert d.ratio is None and d.blur_sigma_mm is None


def test_pipeline_draws_within_ranges():
    src, ref = _vol(seed=4), _vol(seed=5)
    params = TextureParams(ratio_range=(0.125, 0.5))
    for seed in range(20):
        out, d = transform_pipeline(src, ref, params, np.random.default_rng(seed), BinaryMask.full(src.dims))
        assert 0.125 < d.ratio < 0.5
        assert 0.5 < d.blur_sigma_mm < 1.5
        assert out.data.mean() == pytest.approx(d.ratio * ref.data.astype(np.float64).mean(), rel=1e-9)


def test_tumor_texture_zero_outside():
    m = BinaryMask(np.random.default_rng(0).random((5, 5, 5)) > 0.5, (1, 1, 1))
    tex = _vol((5, 5, 5))
    s = tumor_texture(m, tex)
    assert np.all(s.data[~m.data] == 0)
    assert np.array_equal(s.data[m.data], tex.data[m.data])
