"""Binary container for named tensors, shared by checkpoints and adapters.

Layout (all integers little-endian u64 unless noted):

    magic "WCLM" (4 bytes)
    format version (u32)
    config block length, then that many bytes of UTF-8 key=value lines
    per tensor: name length, name (UTF-8), rank, dims..., then row-major
    float32 little-endian data

Tensors are stored as 32-bit floats; loading upcasts to 64-bit.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"WCLM"
VERSION = 1


def write_tensor_file(
    path: str | Path,
    config: dict[str, str],
    tensors: dict[str, np.ndarray],
) -> None:
    config_block = "".join(f"{k}={v}\n" for k, v in config.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(config_block)))
        fh.write(config_block)
        for name, tensor in tensors.items():
            name_bytes = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor, dtype="<f4")
            fh.write(struct.pack("<Q", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes(order="C"))


def read_tensor_file(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Return (config, tensors); tensor data is upcast to float64."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ConfigError(f"{path}: bad magic, not a WCLM tensor file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported format version {version}")
    offset = 8
    (config_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    config: dict[str, str] = {}
    for line in blob[offset : offset + config_len].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    offset += config_len

    tensors: dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[name] = data.astype(np.float64).reshape(dims)
    return config, tensors
