"""
Reader and writer for NPZ archives (ZIP containers of NPY v1.0 arrays).

The reader walks the ZIP central directory, so sizes are taken from there even
when local headers carry placeholder values. Members may be stored (method 0)
or DEFLATE-compressed (method 8); every member's CRC-32 is checked. Any byte
string either parses or raises a DataFormatError subclass.

Usage:
    from npz_reader import read_npz

    arrays = read_npz("pneumoniamnist.npz")
    arrays["train_images"].shape  # -> (4708, 28, 28)
"""

import ast
import io
import math
import logging
import struct
import zipfile
import zlib
from typing import Dict, Mapping, Tuple

import numpy as np

from deflate_decoder import InflateError, inflate

logger = logging.getLogger(__name__)

NPY_MAGIC = b"\x93NUMPY"
SUPPORTED_DESCR = {"|u1": np.uint8, "<u1": np.uint8, "<i8": np.int64, "<f4": np.float32, "<f8": np.float64}

_LOCAL_SIG = b"PK\x03\x04"
_CENTRAL_SIG = b"PK\x01\x02"
_EOCD_SIG = b"PK\x05\x06"
_EOCD = struct.Struct("<4s4H2LH")
_CENTRAL = struct.Struct("<4s6H3L5H2L")
_LOCAL = struct.Struct("<4s5H3L2H")
# Fixed timestamp so written archives are byte-identical across runs
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


class DataFormatError(ValueError):
    """Base class for malformed archive or array bytes."""


class BadZipSignatureError(DataFormatError):
    pass


class TruncatedArchiveError(DataFormatError):
    pass


class UnsupportedCompressionError(DataFormatError):
    pass


class CrcMismatchError(DataFormatError):
    pass


class UnsupportedNpyError(DataFormatError):
    pass


class MissingMemberError(DataFormatError):
    pass


def _find_eocd(blob: bytes) -> int:
    start = max(0, len(blob) - (_EOCD.size + 0xFFFF))
    pos = blob.rfind(_EOCD_SIG, start)
    while pos != -1:
        if pos + _EOCD.size <= len(blob):
            comment_len = struct.unpack_from("<H", blob, pos + 20)[0]
            if pos + _EOCD.size + comment_len == len(blob):
                return pos
        pos = blob.rfind(_EOCD_SIG, start, pos)
    raise TruncatedArchiveError("End of central directory record not found")


def read_zip_members(blob: bytes) -> Dict[str, bytes]:
    """Decode every member of a ZIP archive held in memory."""
    if not (blob.startswith(_LOCAL_SIG) or blob.startswith(_EOCD_SIG)):
        raise BadZipSignatureError(f"Not a ZIP archive (starts with {blob[:4]!r})")
    try:
        return _read_members(blob)
    except (struct.error, IndexError, EOFError) as e:
        raise TruncatedArchiveError(f"Archive ends inside a header: {e}")


def _read_members(blob: bytes) -> Dict[str, bytes]:
    eocd = _find_eocd(blob)
    _, disk, cd_disk, _, entries, cd_size, cd_offset, _ = _EOCD.unpack_from(blob, eocd)
    if disk != 0 or cd_disk != 0:
        raise DataFormatError("Multi-disk archives are not supported")
    if cd_offset == 0xFFFFFFFF or entries == 0xFFFF:
        raise DataFormatError("ZIP64 archives are not supported")
    if cd_offset + cd_size > eocd:
        raise TruncatedArchiveError(f"Central directory at {cd_offset}+{cd_size} overruns the archive")

    members: Dict[str, bytes] = {}
    pos = cd_offset
    for _ in range(entries):
        (sig, _, _, flags, method, _, _, crc, comp_size, size,
         name_len, extra_len, comment_len, _, _, _, local_offset) = _CENTRAL.unpack_from(blob, pos)
        if sig != _CENTRAL_SIG:
            raise BadZipSignatureError(f"Bad central directory signature at offset {pos}")
        name_start = pos + _CENTRAL.size
        if name_start + name_len > len(blob):
            raise TruncatedArchiveError("Central directory entry name runs past the archive")
        try:
            name = blob[name_start:name_start + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError(f"Member name at offset {pos} is not UTF-8")
        pos = name_start + name_len + extra_len + comment_len

        if 0xFFFFFFFF in (comp_size, size, local_offset):
            raise DataFormatError(f"Member '{name}' needs ZIP64, which is not supported")
        if flags & 0x1:
            raise UnsupportedCompressionError(f"Member '{name}' is encrypted")
        if method not in (0, 8):
            raise UnsupportedCompressionError(f"Member '{name}' uses compression method {method}; "
                                              f"only 0 (stored) and 8 (DEFLATE) are supported")

        lsig, _, _, _, _, _, _, _, _, lname_len, lextra_len = _LOCAL.unpack_from(blob, local_offset)
        if lsig != _LOCAL_SIG:
            raise BadZipSignatureError(f"Bad local header signature for member '{name}'")
        data_start = local_offset + _LOCAL.size + lname_len + lextra_len
        if data_start + comp_size > len(blob):
            raise TruncatedArchiveError(f"Member '{name}' data runs past the end of the archive")
        raw = blob[data_start:data_start + comp_size]

        if method == 8:
            try:
                raw = inflate(raw, max_output=size)
            except InflateError as e:
                raise DataFormatError(f"Member '{name}': {e}")
        if len(raw) != size:
            raise DataFormatError(f"Member '{name}' decodes to {len(raw)} bytes, header says {size}")
        actual = zlib.crc32(raw) & 0xFFFFFFFF
        if actual != crc:
            raise CrcMismatchError(f"Member '{name}' CRC-32 is {actual:08x}, header says {crc:08x}")
        logger.debug(f"Read member {name}: method={method}, {comp_size} -> {size} bytes")
        members[name] = raw
    return members


def parse_npy(raw: bytes, name: str = "<array>") -> np.ndarray:
    """Decode NPY v1.0 bytes (little-endian uint8/int64/float32/float64, C order)."""
    if len(raw) < 10 or raw[:6] != NPY_MAGIC:
        raise UnsupportedNpyError(f"{name}: missing NPY magic")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise UnsupportedNpyError(f"{name}: NPY version {major}.{minor} is not supported (need 1.0)")
    header_len = struct.unpack_from("<H", raw, 8)[0]
    if 10 + header_len > len(raw):
        raise TruncatedArchiveError(f"{name}: NPY header runs past the end of the data")
    try:
        header = ast.literal_eval(raw[10:10 + header_len].decode("latin1"))
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        raise UnsupportedNpyError(f"{name}: NPY header is not a Python literal")
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise UnsupportedNpyError(f"{name}: NPY header must have descr, fortran_order and shape")

    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if not isinstance(descr, str) or descr not in SUPPORTED_DESCR:
        raise UnsupportedNpyError(f"{name}: dtype {descr!r} is not supported; "
                                  f"expected one of {sorted(SUPPORTED_DESCR)}")
    if fortran is not False:
        raise UnsupportedNpyError(f"{name}: Fortran-ordered arrays are not supported")
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                                               for s in shape):
        raise UnsupportedNpyError(f"{name}: invalid shape {shape!r}")

    dtype = np.dtype(SUPPORTED_DESCR[descr]).newbyteorder("<")
    count = math.prod(shape)
    payload = raw[10 + header_len:]
    if len(payload) != count * dtype.itemsize:
        raise TruncatedArchiveError(f"{name}: payload has {len(payload)} bytes, "
                                    f"shape {shape} needs {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype, count=count).reshape(shape).astype(dtype.newbyteorder("="))


def read_npz_bytes(blob: bytes) -> Dict[str, np.ndarray]:
    arrays = {}
    for member, raw in read_zip_members(bytes(blob)).items():
        key = member[:-4] if member.endswith(".npy") else member
        arrays[key] = parse_npy(raw, member)
    return arrays


def read_npz(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    arrays = read_npz_bytes(blob)
    logger.debug(f"Read {path}: {sorted(arrays)}")
    return arrays


def read_npy(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_npy(f.read(), path)


def encode_npy(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.lib.format.write_array(buffer, np.ascontiguousarray(array), version=(1, 0), allow_pickle=False)
    return buffer.getvalue()


def encode_npz(arrays: Mapping[str, np.ndarray], compress: bool = True) -> bytes:
    """Build a deterministic NPZ archive; members are written in key order."""
    buffer = io.BytesIO()
    method = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(buffer, "w", compression=method) as archive:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_FIXED_DATE)
            info.compress_type = method
            info.external_attr = 0o644 << 16
            archive.writestr(info, encode_npy(arrays[key]))
    return buffer.getvalue()


def write_npz(path: str, arrays: Mapping[str, np.ndarray], compress: bool = True) -> str:
    with open(path, "wb") as f:
        f.write(encode_npz(arrays, compress))
    return path


def array_summary(arrays: Mapping[str, np.ndarray]) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    return {key: (tuple(a.shape), str(a.dtype)) for key, a in arrays.items()}


