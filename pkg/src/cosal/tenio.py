"""Binary tensor files (.ten) and checkpoint directories.

A .ten file is:

    bytes 0-3   magic "CADC"
    byte  4     format version, currently 1
    byte  5     dtype code, 0 = float32
    byte  6     rank (number of dimensions)
    byte  7     reserved, must be 0
    then        rank little-endian uint32 dimensions
    then        row-major little-endian payload

A checkpoint is a directory holding one .ten per named state array plus a
manifest.txt of tab-separated "name<TAB>dims" lines (dims comma-separated),
which lets a loader validate shapes before touching any payload.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import DataError

MAGIC = b"CADC"
VERSION = 1
DTYPE_FLOAT32 = 0

MANIFEST_NAME = "manifest.txt"


def atomic_write_bytes(path: str, payload: bytes):
    """Write via a sibling temp file and rename, so readers never see a torn file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ten(path: str, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise DataError(f"tensor rank {arr.ndim} does not fit the format")
    header = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_FLOAT32, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, header + dims + arr.tobytes())


def read_ten(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise DataError(f"{path}: truncated header")
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    version, dtype_code, ndim, reserved = struct.unpack("<BBBB", blob[4:8])
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_FLOAT32:
        raise DataError(f"{path}: unsupported dtype code {dtype_code}")
    if reserved != 0:
        raise DataError(f"{path}: reserved header byte is {reserved}, expected 0")
    dims_end = 8 + 4 * ndim
    if len(blob) < dims_end:
        raise DataError(f"{path}: truncated dimension list")
    shape = struct.unpack(f"<{ndim}I", blob[8:dims_end])
    count = 1
    for d in shape:
        count *= d
    expected = dims_end + 4 * count
    if len(blob) != expected:
        raise DataError(f"{path}: payload is {len(blob) - dims_end} bytes, expected {4 * count}")
    data = np.frombuffer(blob, dtype="<f4", offset=dims_end, count=count)
    return data.reshape(shape).astype(np.float32)


def _entry_filename(name: str) -> str:
    return name + ".ten"


def save_checkpoint(directory: str, model) -> None:
    """Write every parameter and buffer of `model` as .ten plus a manifest."""
    os.makedirs(directory, exist_ok=True)
    arrays = model.state_arrays()
    lines = []
    for name, arr in arrays.items():
        write_ten(os.path.join(directory, _entry_filename(name)), arr)
        dims = ",".join(str(d) for d in np.asarray(arr).shape)
        lines.append(f"{name}\t{dims}\n")
    atomic_write_bytes(os.path.join(directory, MANIFEST_NAME), "".join(lines).encode())


def load_checkpoint(directory: str, model) -> None:
    """Load a checkpoint directory into `model`, validating names and shapes."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise DataError(f"{directory}: no {MANIFEST_NAME}")
    arrays: dict[str, np.ndarray] = {}
    with open(manifest_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{manifest_path}:{lineno}: expected 'name<TAB>dims'")
            name, dims_text = parts
            if name in arrays:
                raise DataError(f"{manifest_path}:{lineno}: duplicate entry {name}")
            shape = tuple(int(d) for d in dims_text.split(",")) if dims_text else ()
            arr = read_ten(os.path.join(directory, _entry_filename(name)))
            if arr.shape != shape:
                raise DataError(
                    f"{directory}: {name} is {arr.shape} on disk but manifest says {shape}")
            arrays[name] = arr
    model.load_state_arrays(arrays)
