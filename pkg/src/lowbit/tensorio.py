"""On-disk tensor containers and quantized-layer artifacts.

Files use the safetensors layout: an 8-byte little-endian header length,
a JSON header mapping tensor names to dtype/shape/offsets (plus a free-form
``__metadata__`` string map), and the raw little-endian payloads back to
back. Files written here are readable by standard safetensors tooling and
vice versa for the supported element kinds (F32/F64/I32/I64).

All floating payloads are widened to float64 on load; internal computation
is 64-bit throughout so oracle tolerances hold. Writers sort tensor names
and header keys, which makes output bytes a pure function of the content.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import TensorFormatError
from .quantizer import QuantizedLayer

__all__ = [
    "TensorFile",
    "save_tensors",
    "load_tensor",
    "save_quantized",
    "load_quantized",
]

_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
}
_DTYPE_NAMES = {np.dtype(k): v for v, k in (("F64", "float64"), ("F32", "float32"), ("I64", "int64"), ("I32", "int32"))}


@dataclass(frozen=True)
class TensorEntry:
    shape: tuple[int, ...]
    dtype_name: str
    begin: int
    end: int


class TensorFile:
    """Parsed view of one tensor container; payloads are read on demand.

    Instances are safe to share across reader threads: every load opens the
    file independently. Writing is not concurrent-safe per path.
    """

    def __init__(self, path: str, entries: dict[str, TensorEntry], metadata: dict[str, str], payload_offset: int, payload_size: int):
        self.path = path
        self.entries = entries
        self.metadata = metadata
        self._payload_offset = payload_offset
        self._payload_size = payload_size

    @classmethod
    def open(cls, path: str | os.PathLike) -> "TensorFile":
        path = os.fspath(path)
        with open(path, "rb") as fh:
            head = fh.read(8)
            if len(head) != 8:
                raise TensorFormatError(f"{path}: truncated header length")
            (header_len,) = struct.unpack("<Q", head)
            raw = fh.read(header_len)
            if len(raw) != header_len:
                raise TensorFormatError(f"{path}: truncated header")
            fh.seek(0, os.SEEK_END)
            payload_size = fh.tell() - 8 - header_len
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TensorFormatError(f"{path}: invalid JSON header: {exc}") from exc
        if not isinstance(header, dict):
            raise TensorFormatError(f"{path}: header must be a JSON object")
        metadata = header.pop("__metadata__", {}) or {}
        entries: dict[str, TensorEntry] = {}
        for name, info in header.items():
            try:
                dtype_name = info["dtype"]
                shape = tuple(int(s) for s in info["shape"])
                begin, end = (int(v) for v in info["data_offsets"])
            except (KeyError, TypeError, ValueError) as exc:
                raise TensorFormatError(f"{path}: malformed entry {name!r}") from exc
            if dtype_name not in _DTYPES:
                raise TensorFormatError(
                    f"{path}: tensor {name!r} has unsupported element kind {dtype_name!r}"
                )
            expected = math.prod(shape) * _DTYPES[dtype_name].itemsize
            if end - begin != expected:
                raise TensorFormatError(
                    f"{path}: tensor {name!r} declares shape {shape} ({expected} bytes) "
                    f"but payload spans {end - begin} bytes"
                )
            if begin < 0 or end > payload_size:
                raise TensorFormatError(f"{path}: tensor {name!r} offsets outside payload")
            entries[name] = TensorEntry(shape, dtype_name, begin, end)
        return cls(path, entries, dict(metadata), 8 + header_len, payload_size)

    @property
    def names(self) -> list[str]:
        return sorted(self.entries)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._entry(name).shape

    def _entry(self, name: str) -> TensorEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise TensorFormatError(f"{self.path}: no tensor named {name!r}") from None

    def load(self, name: str, widen: bool = True) -> np.ndarray:
        """Read one tensor. Float32 payloads widen to float64 unless disabled."""
        entry = self._entry(name)
        with open(self.path, "rb") as fh:
            fh.seek(self._payload_offset + entry.begin)
            raw = fh.read(entry.end - entry.begin)
        if len(raw) != entry.end - entry.begin:
            raise TensorFormatError(f"{self.path}: truncated payload for {name!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry.dtype_name]).reshape(entry.shape)
        if widen and entry.dtype_name == "F32":
            return arr.astype(np.float64)
        return arr.copy()


def save_tensors(
    path: str | os.PathLike,
    tensors: dict[str, np.ndarray],
    metadata: dict[str, str] | None = None,
) -> None:
    """Write a tensor container. Supported dtypes: float64/32, int64/32.

    Tensor names must be unique and non-empty; entries are laid out in
    sorted name order so identical content yields identical bytes.
    """
    header: dict[str, object] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        if not name or name == "__metadata__":
            raise TensorFormatError(f"invalid tensor name {name!r}")
        arr = np.ascontiguousarray(tensors[name])
        dtype_name = _DTYPE_NAMES.get(arr.dtype)
        if dtype_name is None:
            raise TensorFormatError(
                f"tensor {name!r} has unsupported dtype {arr.dtype}; "
                "expected float64, float32, int64, or int32"
            )
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        header[name] = {
            "dtype": dtype_name,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        blobs.append(blob)
        offset += len(blob)
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_tensor(file: TensorFile | str | os.PathLike, name: str) -> np.ndarray:
    """Load one named tensor from a container (path or parsed file)."""
    if not isinstance(file, TensorFile):
        file = TensorFile.open(file)
    return file.load(name)


def _meta_dump(value) -> str:
    return json.dumps(value)


def _meta_load(metadata: dict[str, str], key: str, default=None):
    if key not in metadata:
        return default
    return json.loads(metadata[key])


def save_quantized(layer: QuantizedLayer, path: str | os.PathLike) -> None:
    """Persist a quantized layer; invariants are checked before any write."""
    layer.validate()
    metadata = {
        "format": "lowbit-quantized-v1",
        "bits": _meta_dump(layer.bits),
        "group_size": _meta_dump(layer.group_size),
        "symmetric": _meta_dump(layer.symmetric),
        "engine": _meta_dump(layer.engine),
        "beta": _meta_dump(layer.beta),
        "damp_ratio": _meta_dump(layer.damp_ratio),
        "block_size": _meta_dump(layer.block_size),
        "first_order_sign": _meta_dump(layer.first_order_sign),
    }
    for key, value in sorted(layer.extra.items()):
        metadata[f"x.{key}"] = _meta_dump(value)
    save_tensors(
        path,
        {
            "codes": layer.codes.astype(np.int32),
            "scales": layer.scales.astype(np.float64),
            "zero_points": layer.zero_points.astype(np.int32),
        },
        metadata=metadata,
    )


def load_quantized(path: str | os.PathLike) -> QuantizedLayer:
    """Read back a quantized layer written by :func:`save_quantized`."""
    tf = TensorFile.open(path)
    meta = tf.metadata
    if meta.get("format") != "lowbit-quantized-v1":
        raise TensorFormatError(f"{tf.path}: not a lowbit quantized-layer file")
    extra = {
        key[2:]: _meta_load(meta, key) for key in sorted(meta) if key.startswith("x.")
    }
    layer = QuantizedLayer(
        codes=tf.load("codes"),
        scales=tf.load("scales"),
        zero_points=tf.load("zero_points"),
        bits=_meta_load(meta, "bits"),
        group_size=_meta_load(meta, "group_size"),
        symmetric=_meta_load(meta, "symmetric"),
        engine=_meta_load(meta, "engine", "rtn"),
        beta=_meta_load(meta, "beta", 0.0),
        damp_ratio=_meta_load(meta, "damp_ratio", 0.0),
        block_size=_meta_load(meta, "block_size", 0),
        first_order_sign=_meta_load(meta, "first_order_sign", "minus"),
        extra=extra,
    )
    layer.validate()
    return layer
