import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from r2spray.errors import DataError
from r2spray.volume import (
    AffineTransform,
    DisplacementField,
    Volume3D,
    apply_displacement,
    resample,
    trilinear_sample,
)


def ramp_volume(dims=(5, 5, 5), coeffs=(2.0, -3.0, 0.5, 7.0), spacing=(1.0, 1.0, 1.0)):
    a, b, c, d = coeffs
    i, j, k = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    data = a * i * spacing[0] + b * j * spacing[1] + c * k * spacing[2] + d
    return Volume3D(data=data, spacing=spacing)


def naive_trilinear(data, p):
    """Independent nested linear interpolation at grid point p (oracle)."""
    x, y, z = p
    x0, y0, z0 = int(np.floor(x)), int(np.floor(y)), int(np.floor(z))
    x0 = min(x0, data.shape[0] - 2)
    y0 = min(y0, data.shape[1] - 2)
    z0 = min(z0, data.shape[2] - 2)
    fx, fy, fz = x - x0, y - y0, z - z0

    def lerp(a, b, t):
        return a * (1 - t) + b * t

    c00 = lerp(data[x0, y0, z0], data[x0 + 1, y0, z0], fx)
    c10 = lerp(data[x0, y0 + 1, z0], data[x0 + 1, y0 + 1, z0], fx)
    c01 = lerp(data[x0, y0, z0 + 1], data[x0 + 1, y0, z0 + 1], fx)
    c11 = lerp(data[x0, y0 + 1, z0 + 1], data[x0 + 1, y0 + 1, z0 + 1], fx)
    return lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)


class TestTrilinearSample:
    def test_grid_nodes_return_stored_values(self):
        rng = np.random.default_rng(0)
        vol = Volume3D(data=rng.normal(size=(4, 4, 4)))
        for node in [(0, 0, 0), (3, 3, 3), (1, 2, 3)]:
            assert trilinear_sample(vol, np.array(node, dtype=float)) == pytest.approx(
                vol.data[node], abs=1e-14
            )

    def test_midpoint_between_nodes(self):
        data = np.zeros((2, 1, 1))
        data[1, 0, 0] = 1.0
        vol = Volume3D(data=data)
        assert trilinear_sample(vol, (0.5, 0.0, 0.0)) == pytest.approx(0.5)

    def test_against_nested_interp_oracle(self):
        rng = np.random.default_rng(42)
        vol = Volume3D(data=rng.normal(size=(4, 4, 4)))
        pts = rng.uniform(0.0, 3.0, size=(200, 3))
        values = trilinear_sample(vol, pts)
        expected = np.array([naive_trilinear(vol.data, p) for p in pts])
        assert np.max(np.abs(values - expected)) < 1e-12

    def test_outside_returns_oob_value(self):
        vol = Volume3D(data=np.ones((3, 3, 3)))
        assert trilinear_sample(vol, (-0.5, 1.0, 1.0)) == 0.0
        assert trilinear_sample(vol, (1.0, 1.0, 5.0), oob_value=-9.0) == -9.0

    @settings(max_examples=50, deadline=None)
    @given(
        coeffs=st.tuples(*[st.floats(-5, 5) for _ in range(4)]),
        point=st.tuples(*[st.floats(0.0, 4.0) for _ in range(3)]),
    )
    def test_exact_on_affine_fields(self, coeffs, point):
        vol = ramp_volume(dims=(5, 5, 5), coeffs=coeffs)
        a, b, c, d = coeffs
        x, y, z = point
        expected = a * x + b * y + c * z + d
        assert trilinear_sample(vol, np.array(point)) == pytest.approx(
            expected, abs=1e-10
        )


class TestResample:
    def test_identity_same_grid_is_identity(self):
        rng = np.random.default_rng(1)
        vol = Volume3D(data=rng.normal(size=(6, 5, 4)))
        out = resample(vol, vol.dims, vol.spacing, vol.affine)
        assert np.array_equal(out.data, vol.data)

    def test_integer_shift_oracle(self):
        rng = np.random.default_rng(2)
        vol = Volume3D(data=rng.normal(size=(6, 6, 6)))
        shift = AffineTransform.translation((1.0, 0.0, 0.0))
        out = resample(vol, vol.dims, vol.spacing, vol.affine, transform=shift)
        assert np.allclose(out.data[1:], vol.data[:-1], atol=1e-12)
        assert np.all(out.data[0] == 0.0)

    def test_translation_roundtrip_interior(self):
        rng = np.random.default_rng(3)
        vol = Volume3D(data=rng.normal(size=(8, 8, 8)))
        fwd = AffineTransform.translation((1.0, 0.0, 0.0))
        back = AffineTransform.translation((-1.0, 0.0, 0.0))
        once = resample(vol, vol.dims, vol.spacing, vol.affine, transform=fwd)
        twice = resample(once, vol.dims, vol.spacing, vol.affine, transform=back)
        assert np.allclose(twice.data[1:-1], vol.data[1:-1], atol=1e-10)

    def test_gaussian_mass_preserved_at_2mm(self):
        n = 32
        i, j, k = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
        c = (n - 1) / 2.0
        blob = np.exp(-((i - c) ** 2 + (j - c) ** 2 + (k - c) ** 2) / (2 * 4.0**2))
        vol = Volume3D(data=blob, spacing=(1.0, 1.0, 1.0))
        target_affine = vol.affine @ np.diag([2.0, 2.0, 2.0, 1.0])
        low = resample(vol, (16, 16, 16), (2.0, 2.0, 2.0), target_affine)
        mass_hi = vol.data.sum() * 1.0
        mass_lo = low.data.sum() * 8.0
        assert abs(mass_lo - mass_hi) / mass_hi < 0.05

    def test_non_invertible_transform_rejected(self):
        m = np.eye(4)
        m[0, 0] = 0.0
        with pytest.raises(DataError):
            AffineTransform(m)


class TestApplyDisplacement:
    def test_zero_field_is_identity(self):
        rng = np.random.default_rng(4)
        vol = Volume3D(data=rng.normal(size=(5, 5, 5)))
        zero = vol.with_data(np.zeros(vol.dims))
        field = DisplacementField(dx=zero, dy=zero, dz=zero)
        out = apply_displacement(vol, field)
        assert np.array_equal(out.data, vol.data)

    def test_uniform_field_matches_integer_shift(self):
        rng = np.random.default_rng(5)
        vol = Volume3D(data=rng.normal(size=(6, 6, 6)))
        minus = vol.with_data(np.full(vol.dims, -1.0))
        zero = vol.with_data(np.zeros(vol.dims))
        field = DisplacementField(dx=minus, dy=zero, dz=zero)
        warped = apply_displacement(vol, field)
        shift = AffineTransform.translation((1.0, 0.0, 0.0))
        shifted = resample(vol, vol.dims, vol.spacing, vol.affine, transform=shift)
        assert np.allclose(warped.data, shifted.data, atol=1e-12)

    def test_sinusoidal_field_on_ramp_matches_analytic(self):
        vol = ramp_volume(dims=(12, 12, 12), coeffs=(1.5, -2.0, 0.75, 3.0))
        i, j, k = np.meshgrid(*[np.arange(12)] * 3, indexing="ij")
        dx = 0.8 * np.sin(2 * np.pi * j / 12.0)
        dy = 0.5 * np.sin(2 * np.pi * k / 12.0)
        dz = 0.3 * np.sin(2 * np.pi * i / 12.0)
        field = DisplacementField(
            dx=vol.with_data(dx), dy=vol.with_data(dy), dz=vol.with_data(dz)
        )
        out = apply_displacement(vol, field)
        a, b, c, d = 1.5, -2.0, 0.75, 3.0
        expected = a * (i + dx) + b * (j + dy) + c * (k + dz) + d
        interior = (slice(2, -2),) * 3
        assert np.max(np.abs(out.data[interior] - expected[interior])) < 1e-6

    def test_mismatched_components_rejected(self):
        a = Volume3D(data=np.zeros((3, 3, 3)))
        b = Volume3D(data=np.zeros((4, 3, 3)))
        with pytest.raises(DataError):
            DisplacementField(dx=a, dy=a, dz=b)


class TestVolumeInvariants:
    def test_spacing_must_be_positive(self):
        with pytest.raises(DataError):
            Volume3D(data=np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_singular_affine_rejected(self):
        with pytest.raises(DataError):
            Volume3D(data=np.zeros((2, 2, 2)), affine=np.zeros((4, 4)))

    def test_ravel_is_x_fastest(self):
        data = np.arange(8.0).reshape(2, 2, 2)
        vol = Volume3D(data=data)
        flat = vol.ravel()
        assert flat[0] == data[0, 0, 0]
        assert flat[1] == data[1, 0, 0]
