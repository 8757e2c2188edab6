"""Tests for the NPZ/NPY reader and the deterministic writer."""

import io
import zipfile

import numpy as np
import pytest

from npz_reader import (
    BadZipSignatureError,
    CrcMismatchError,
    DataFormatError,
    TruncatedArchiveError,
    UnsupportedCompressionError,
    UnsupportedNpyError,
    array_summary,
    encode_npy,
    encode_npz,
    parse_npy,
    read_npy,
    read_npz,
    read_npz_bytes,
    read_zip_members,
    write_npz,
)

# --- Sample arrays in the MedMNIST layout ---

ARRAYS = {
    "train_images": np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4),
    "train_labels": np.array([[0], [1]], dtype=np.uint8),
    "scores": np.linspace(0.0, 1.0, 7, dtype=np.float32),
    "ids": np.arange(5, dtype=np.int64),
    "weights": np.eye(3),
}


def _npy_bytes(array, **kwargs):
    buffer = io.BytesIO()
    np.lib.format.write_array(buffer, array, allow_pickle=False, **kwargs)
    return buffer.getvalue()


def _assert_same(actual, expected):
    assert sorted(actual) == sorted(expected)
    for key, value in expected.items():
        assert actual[key].dtype == value.dtype, key
        np.testing.assert_array_equal(actual[key], value)


class TestReadNpz:
    @pytest.mark.parametrize("compress", [True, False])
    def test_own_archives(self, compress):
        _assert_same(read_npz_bytes(encode_npz(ARRAYS, compress)), ARRAYS)

    def test_numpy_savez_compressed(self):
        buffer = io.BytesIO()
        np.savez_compressed(buffer, **ARRAYS)
        _assert_same(read_npz_bytes(buffer.getvalue()), ARRAYS)

    def test_numpy_savez(self):
        buffer = io.BytesIO()
        np.savez(buffer, **ARRAYS)
        _assert_same(read_npz_bytes(buffer.getvalue()), ARRAYS)

    def test_file_round_trip(self, tmp_path):
        path = write_npz(str(tmp_path / "data.npz"), ARRAYS)
        _assert_same(read_npz(path), ARRAYS)

    def test_writer_is_deterministic(self):
        assert encode_npz(ARRAYS) == encode_npz(dict(reversed(list(ARRAYS.items()))))

    def test_empty_archive(self):
        buffer = io.BytesIO()
        with zipfile.ZipFile(buffer, "w"):
            pass
        assert read_zip_members(buffer.getvalue()) == {}

    def test_summary(self):
        assert array_summary({"a": np.zeros((2, 3), dtype=np.float32)}) == {"a": ((2, 3), "float32")}


class TestArchiveErrors:
    def test_bad_signature(self):
        with pytest.raises(BadZipSignatureError):
            read_npz_bytes(b"GIF89a" + b"\x00" * 100)

    def test_truncated(self):
        blob = encode_npz(ARRAYS)
        for cut in (10, len(blob) // 2, len(blob) - 5):
            with pytest.raises(DataFormatError):
                read_npz_bytes(blob[:cut])

    def test_truncated_is_specific(self):
        with pytest.raises(TruncatedArchiveError):
            read_npz_bytes(encode_npz(ARRAYS)[:-5])

    def test_crc_mismatch(self):
        payload = np.arange(10, dtype=np.int64)
        blob = bytearray(encode_npz({"x": payload}, compress=False))
        index = blob.find(payload.tobytes())
        blob[index + 8] ^= 0x01
        with pytest.raises(CrcMismatchError):
            read_npz_bytes(bytes(blob))

    def test_unsupported_compression(self):
        buffer = io.BytesIO()
        with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_BZIP2) as archive:
            archive.writestr("x.npy", encode_npy(np.zeros(3)))
        with pytest.raises(UnsupportedCompressionError):
            read_npz_bytes(buffer.getvalue())

    def test_every_prefix_fails_cleanly(self):
        blob = encode_npz({"x": np.arange(6, dtype=np.float32)})
        for cut in range(0, len(blob), 7):
            with pytest.raises(DataFormatError):
                read_npz_bytes(blob[:cut])


class TestParseNpy:
    def test_round_trip_dtypes(self):
        for array in ARRAYS.values():
            parsed = parse_npy(encode_npy(array))
            assert parsed.dtype == array.dtype
            np.testing.assert_array_equal(parsed, array)

    def test_empty_shape(self):
        assert parse_npy(encode_npy(np.zeros((0, 3), dtype=np.float32))).shape == (0, 3)

    @pytest.mark.parametrize("array", [np.zeros(3, dtype=np.int32), np.zeros(3, dtype=">f8"),
                                       np.zeros(2, dtype=np.complex64)], ids=["int32", "big_endian", "complex"])
    def test_unsupported_dtype(self, array):
        with pytest.raises(UnsupportedNpyError):
            parse_npy(_npy_bytes(array))

    def test_fortran_order_rejected(self):
        with pytest.raises(UnsupportedNpyError):
            parse_npy(_npy_bytes(np.asfortranarray(np.zeros((2, 3)))))

    def test_version_2_rejected(self):
        with pytest.raises(UnsupportedNpyError):
            parse_npy(_npy_bytes(np.zeros(3), version=(2, 0)))

    def test_bad_magic(self):
        with pytest.raises(UnsupportedNpyError):
            parse_npy(b"NOTNPY" + b"\x00" * 20)

    def test_short_payload(self):
        with pytest.raises(TruncatedArchiveError):
            parse_npy(encode_npy(np.zeros(4))[:-3])

    def test_read_npy_file(self, tmp_path):
        path = tmp_path / "a.npy"
        path.write_bytes(encode_npy(ARRAYS["weights"]))
        np.testing.assert_array_equal(read_npy(str(path)), ARRAYS["weights"])


@pytest.mark.parametrize("iterations", [400, pytest.param(10000, marks=pytest.mark.slow)])
def test_corrupted_archives_fail_with_format_errors(iterations):
    rng = np.random.default_rng(2024)
    originals = [encode_npz(ARRAYS, compress=True), encode_npz(ARRAYS, compress=False)]
    for i in range(iterations):
        blob = bytearray(originals[i % 2])
        if rng.random() < 0.3:
            blob = blob[:int(rng.integers(0, len(blob)))]
        for _ in range(int(rng.integers(1, 4))):
            if blob:
                blob[int(rng.integers(0, len(blob)))] ^= int(rng.integers(1, 256))
        try:
            read_npz_bytes(bytes(blob))
        except DataFormatError:
            pass
