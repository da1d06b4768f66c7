"""Versioned binary container for trained models.

Layout (all integers little-endian)::

    magic        8 bytes  b"SARGNNMF"
    version      1 byte
    header_len   uint32
    header       UTF-8 JSON: architecture, class names, dtype, array manifest
    arrays       raw little-endian arrays in declaration order
    checksum     32 bytes, SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CorruptionError, DatasetIOError, UnsupportedVersionError
from .model import ModelParams, init_model

MAGIC = b"SARGNNMF"
FORMAT_VERSION = 1
_DIGEST = 32


def _array(value) -> np.ndarray:
    return np.asarray(value.data if isinstance(value, Tensor) else value)


def encode_model(model: ModelParams) -> bytes:
    params = [(name, _array(v)) for name, v in model.named_parameters()]
    dtype = np.dtype(params[0][1].dtype if params else np.float64).newbyteorder("<")
    header = {
        "input_shape": list(model.input_shape),
        "in_channels": model.in_channels,
        "channels": model.channels[1:],
        "pools": model.pools,
        "update_rule": model.update_rule,
        "reduction": model.reduction,
        "head": [int(_array(W).shape[1]) for W, _ in model.head],
        "class_names": model.class_names,
        "dtype": dtype.str,
        "arrays": [[name, list(arr.shape)] for name, arr in params],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<BI", FORMAT_VERSION, len(blob))
    body += blob
    for _, arr in params:
        body += np.ascontiguousarray(arr, dtype=dtype).tobytes()
    body += hashlib.sha256(body).digest()
    return bytes(body)


def decode_model(data: bytes) -> ModelParams:
    prefix = len(MAGIC) + 5
    if len(data) < len(MAGIC) + 1 or data[: len(MAGIC)] != MAGIC:
        raise CorruptionError("not a sargnn model file (bad magic)")
    version = data[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(version, FORMAT_VERSION)
    if len(data) < prefix + _DIGEST:
        raise CorruptionError("model file is truncated")
    payload, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptionError("model file checksum mismatch (truncated or modified)")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC) + 1)
    try:
        header = json.loads(payload[prefix : prefix + header_len].decode("utf-8"))
        dtype = np.dtype(header["dtype"])
        template = init_model(
            tuple(header["input_shape"]),
            header["class_names"],
            channels=header["channels"],
            pools=header["pools"],
            head_hidden=header["head"][:-1],
            update_rule=header["update_rule"],
            reduction=header["reduction"],
            in_channels=header["in_channels"],
            dtype=dtype,
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"model header is invalid ({exc})") from exc
    expected = [[name, list(_array(v).shape)] for name, v in template.named_parameters()]
    if header["arrays"] != expected:
        raise CorruptionError("array manifest does not match the declared architecture")
    values = {}
    offset = prefix + header_len
    for name, shape in expected:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * dtype.itemsize
        if end > len(payload):
            raise CorruptionError("array data is shorter than the manifest declares")
        values[name] = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
        offset = end
    if offset != len(payload):
        raise CorruptionError("trailing bytes after array data")
    return template.with_values(values)


def save_model(model: ModelParams, path) -> None:
    try:
        Path(path).write_bytes(encode_model(model))
    except OSError as exc:
        raise DatasetIOError(path, f"cannot write model ({exc})") from exc


def load_model(path) -> ModelParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetIOError(path, f"cannot read model ({exc})") from exc
    return decode_model(data)
