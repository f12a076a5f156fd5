"""On-disk tensor format.

Layout: magic bytes "HCT1", one ASCII header line
`dtype=f32|f64; shape=d0,d1,...;` terminated by a newline, then the raw
little-endian values in row-major order.
"""

from __future__ import annotations

import numpy as np

MAGIC = b"HCT1"
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NP = {"f32": "<f4", "f64": "<f8"}

__all__ = ["write_tensor", "read_tensor", "TensorFormatError"]


class TensorFormatError(ValueError):
    """The file does not conform to the tensor format."""


def write_tensor(path, arr):
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}, expected float32/float64")
    header = f"dtype={tag}; shape={','.join(str(d) for d in arr.shape)};\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr).astype(_NP[tag], copy=False).tobytes(order="C"))


def read_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise TensorFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header = bytearray()
        while True:
            ch = fh.read(1)
            if not ch:
                raise TensorFormatError(f"{path}: truncated header")
            if ch == b"\n":
                break
            header += ch
            if len(header) > 4096:
                raise TensorFormatError(f"{path}: unterminated header")
        payload = fh.read()
    try:
        text = header.decode("ascii")
        fields = dict(part.strip().split("=", 1)
                      for part in text.split(";") if part.strip())
        tag = fields["dtype"]
        shape_text = fields["shape"]
    except (UnicodeDecodeError, KeyError, ValueError) as exc:
        raise TensorFormatError(f"{path}: malformed header {header!r}") from exc
    if tag not in _NP:
        raise TensorFormatError(f"{path}: unknown dtype tag {tag!r}")
    shape = tuple(int(d) for d in shape_text.split(",")) if shape_text else ()
    arr = np.frombuffer(payload, dtype=_NP[tag])
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise TensorFormatError(
            f"{path}: payload holds {arr.size} values, header shape {shape} needs {expected}")
    out_dtype = np.float32 if tag == "f32" else np.float64
    return arr.reshape(shape).astype(out_dtype)
