"""Binary file formats shared across the package.

Kernel files are a single JSON header line (UTF-8, terminated by
``\\n``) followed by the matrix entries as little-endian 64-bit floats
in row-major order.  Flat kernel indices are point-major
(``flat = point * pixels + pixel``), so the header records the point
count and the pixel count separately::

    {"n": 128, "pixels": 4, "dtype": "f64", "layout": "row-major point-major"}

The same envelope (JSON header + raw little-endian doubles) is reused
for rectangular data matrices and for append-only trajectory logs of
fixed-width records.

Writers go through a temporary file in the same directory and
``os.replace`` so readers never observe a half-written file.  Headers
carry no timestamps; rewriting identical content produces identical
bytes.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

_DTYPE = np.dtype("<f8")


def _encode_header(header: dict) -> bytes:
    return (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")


def _atomic_write(path, header: dict, payload: np.ndarray) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    payload = np.ascontiguousarray(payload, dtype=_DTYPE)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".eoskit-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_encode_header(header))
            fh.write(payload.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_payload(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: malformed header line") from exc
        if header.get("dtype") != "f64":
            raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        payload = np.frombuffer(fh.read(), dtype=_DTYPE)
    return header, payload


def write_kernel(path, K: np.ndarray, pixels: int = 1) -> None:
    """Serialize a square kernel matrix.

    ``pixels`` is the per-point block size of the flat point-major
    index; plain FCN kernels use the default 1.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("kernel must be a square matrix")
    pixels = int(pixels)
    if pixels <= 0 or K.shape[0] % pixels:
        raise ValueError(
            f"kernel side {K.shape[0]} is not a multiple of pixels={pixels}")
    header = {"n": K.shape[0] // pixels, "pixels": pixels, "dtype": "f64",
              "layout": "row-major point-major"}
    _atomic_write(path, header, K)


def read_kernel(path) -> tuple[np.ndarray, dict]:
    """Load a kernel file; returns ``(matrix, header)``."""
    header, payload = _read_payload(path)
    try:
        side = int(header["n"]) * int(header["pixels"])
    except KeyError as exc:
        raise ValueError(f"{path}: header is missing {exc}") from None
    if payload.size != side * side:
        raise ValueError(f"{path}: expected {side * side} entries, "
                         f"found {payload.size}")
    return payload.reshape(side, side).copy(), header


def write_matrix(path, M: np.ndarray) -> None:
    """Serialize a rectangular (rows, cols) matrix with the same envelope."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError("expected a 1-d or 2-d array")
    header = {"rows": M.shape[0], "cols": M.shape[1], "dtype": "f64",
              "layout": "row-major"}
    _atomic_write(path, header, M)


def read_matrix(path) -> np.ndarray:
    header, payload = _read_payload(path)
    try:
        rows, cols = int(header["rows"]), int(header["cols"])
    except KeyError as exc:
        raise ValueError(f"{path}: header is missing {exc}") from None
    if payload.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} entries, "
                         f"found {payload.size}")
    return payload.reshape(rows, cols).copy()


def write_json(path, obj) -> None:
    """Atomic canonical JSON dump (sorted keys, trailing newline)."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".eoskit-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


class TrajectoryLog:
    """Append-only log of fixed-width float records.

    The first line is a JSON header naming the record fields; each
    record is ``len(fields)`` little-endian doubles.  Appending to an
    existing log checks that the fields match.
    """

    def __init__(self, path, fields: list[str]):
        self.path = os.fspath(path)
        self.fields = list(fields)
        if not self.fields:
            raise ValueError("need at least one field")
        header = {"format": "trajectory", "version": 1, "dtype": "f64",
                  "fields": self.fields}
        if os.path.exists(self.path) and os.path.getsize(self.path) > 0:
            existing, _ = _read_payload(self.path)
            if existing.get("fields") != self.fields:
                raise ValueError(f"{self.path}: field mismatch "
                                 f"{existing.get('fields')} != {self.fields}")
            self._fh = open(self.path, "ab")
        else:
            self._fh = open(self.path, "wb")
            self._fh.write(_encode_header(header))

    def append(self, values) -> None:
        row = np.asarray(values, dtype=_DTYPE)
        if row.shape != (len(self.fields),):
            raise ValueError(f"record needs {len(self.fields)} values, "
                             f"got shape {row.shape}")
        self._fh.write(row.tobytes())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trajectory(path) -> tuple[list[str], np.ndarray]:
    """Load a trajectory log; returns ``(fields, records)`` with
    ``records`` of shape (entries, len(fields))."""
    header, payload = _read_payload(path)
    if header.get("format") != "trajectory":
        raise ValueError(f"{path}: not a trajectory log")
    fields = list(header["fields"])
    width = len(fields)
    if payload.size % width:
        raise ValueError(f"{path}: truncated record at the end")
    return fields, payload.reshape(-1, width).copy()
