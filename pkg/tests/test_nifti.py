import numpy as np
import pytest

from r2spray import nifti
from r2spray.errors import BadMagicError, TruncatedFileError, UnsupportedDatatypeError
from r2spray.volume import Volume3D


def random_volume(seed=0, dims=(32, 32, 32), dtype=np.float32):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=dims).astype(dtype).astype(np.float64)
    affine = np.diag([1.0, 1.2, 2.0, 1.0])
    affine[:3, 3] = [-16.0, -19.2, -32.0]
    return Volume3D(data=data, spacing=(1.0, 1.2, 2.0), affine=affine)


class TestHeaderConstants:
    def test_sizeof_hdr_and_magic(self, tmp_path):
        path = str(tmp_path / "vol.nii")
        nifti.write_nifti(random_volume(), path)
        raw = open(path, "rb").read()
        assert int(np.frombuffer(raw[:4], dtype="<i4")[0]) == 348
        assert raw[344:348] == b"n+1\x00"
        assert len(raw) >= 352

    def test_header_dtype_is_348_bytes(self):
        assert nifti.HEADER_DTYPE.itemsize == 348


class TestRoundtrip:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_float_roundtrip_bit_exact(self, tmp_path, dtype):
        vol = random_volume(seed=7, dtype=dtype)
        path = str(tmp_path / "vol.nii")
        nifti.write_nifti(vol, path, dtype=dtype)
        back = nifti.read_nifti(path)
        assert back.dims == vol.dims
        assert np.array_equal(
            back.data.astype(dtype).tobytes(), vol.data.astype(dtype).tobytes()
        )
        assert np.allclose(back.spacing, vol.spacing, atol=1e-6)
        assert np.allclose(back.affine, vol.affine, atol=1e-5)

    def test_data_section_bytes_identical(self, tmp_path):
        vol = random_volume(seed=9, dtype=np.float32)
        path = str(tmp_path / "vol.nii")
        nifti.write_nifti(vol, path, dtype=np.float32)
        raw = open(path, "rb").read()
        stored = raw[352:]
        assert stored == vol.data.astype("<f4").tobytes(order="F")

    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32])
    def test_integer_dtypes_roundtrip(self, tmp_path, dtype):
        rng = np.random.default_rng(3)
        data = rng.integers(0, 100, size=(4, 5, 6)).astype(dtype).astype(np.float64)
        vol = Volume3D(data=data)
        path = str(tmp_path / "vol.nii")
        nifti.write_nifti(vol, path, dtype=dtype)
        back = nifti.read_nifti(path)
        assert np.array_equal(back.data, data)

    def test_stack_roundtrip(self, tmp_path):
        vols = [random_volume(seed=i) for i in range(3)]
        path = str(tmp_path / "stack.nii")
        nifti.write_nifti_stack(vols, path, dtype=np.float64)
        back = nifti.read_nifti_stack(path)
        assert len(back) == 3
        for a, b in zip(vols, back):
            assert np.array_equal(a.data, b.data)

    def test_stack_dim4_field(self, tmp_path):
        vols = [random_volume(seed=i) for i in range(3)]
        path = str(tmp_path / "stack.nii")
        nifti.write_nifti_stack(vols, path)
        raw = open(path, "rb").read()
        dim = np.frombuffer(raw[40:56], dtype="<i2")
        assert dim[0] == 4
        assert dim[4] == 3


class TestScaling:
    def test_slope_and_intercept_applied(self, tmp_path):
        vol = Volume3D(data=np.full((2, 2, 2), 3.0))
        path = str(tmp_path / "scaled.nii")
        nifti.write_nifti(vol, path, dtype=np.int16)
        raw = bytearray(open(path, "rb").read())
        raw[112:116] = np.float32(2.0).tobytes()  # scl_slope
        raw[116:120] = np.float32(1.0).tobytes()  # scl_inter
        open(path, "wb").write(bytes(raw))
        back = nifti.read_nifti(path)
        assert np.all(back.data == 7.0)

    def test_zero_slope_means_no_scaling(self, tmp_path):
        vol = Volume3D(data=np.full((2, 2, 2), 3.0))
        path = str(tmp_path / "scaled.nii")
        nifti.write_nifti(vol, path, dtype=np.int16)
        raw = bytearray(open(path, "rb").read())
        raw[112:116] = np.float32(0.0).tobytes()
        raw[116:120] = np.float32(5.0).tobytes()
        open(path, "wb").write(bytes(raw))
        back = nifti.read_nifti(path)
        assert np.all(back.data == 3.0)


class TestQuaternionAffine:
    def test_qform_identity_rotation(self, tmp_path):
        vol = random_volume()
        path = str(tmp_path / "q.nii")
        nifti.write_nifti(vol, path)
        raw = bytearray(open(path, "rb").read())
        raw[254:256] = np.int16(0).tobytes()  # sform_code = 0
        raw[252:254] = np.int16(1).tobytes()  # qform_code = 1
        # quatern b,c,d = 0 -> identity rotation; offsets at 268..280
        raw[256:268] = np.zeros(3, dtype=np.float32).tobytes()
        raw[268:280] = np.array([-16.0, -19.2, -32.0], dtype=np.float32).tobytes()
        open(path, "wb").write(bytes(raw))
        back = nifti.read_nifti(path)
        assert np.allclose(back.affine, vol.affine, atol=1e-5)


class TestErrors:
    def test_bad_magic_is_distinct_error(self, tmp_path):
        vol = random_volume()
        path = str(tmp_path / "bad.nii")
        nifti.write_nifti(vol, path)
        raw = bytearray(open(path, "rb").read())
        raw[344:348] = b"XXXX"
        open(path, "wb").write(bytes(raw))
        with pytest.raises(BadMagicError):
            nifti.read_nifti(path)

    def test_unsupported_datatype_is_distinct_error(self, tmp_path):
        vol = random_volume()
        path = str(tmp_path / "dtype.nii")
        nifti.write_nifti(vol, path)
        raw = bytearray(open(path, "rb").read())
        raw[70:72] = np.int16(32).tobytes()  # complex64: not supported
        open(path, "wb").write(bytes(raw))
        with pytest.raises(UnsupportedDatatypeError):
            nifti.read_nifti(path)

    def test_truncated_file_is_distinct_error(self, tmp_path):
        vol = random_volume()
        path = str(tmp_path / "trunc.nii")
        nifti.write_nifti(vol, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            nifti.read_nifti(path)

    def test_short_header_is_truncated(self, tmp_path):
        path = str(tmp_path / "short.nii")
        open(path, "wb").write(b"\x00" * 100)
        with pytest.raises(TruncatedFileError):
            nifti.read_nifti(path)
