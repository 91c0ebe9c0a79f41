"""Binary container and CSV export for path batches and solver output.

Container layout (all integers little-endian unsigned 64-bit, floats IEEE
binary64 little-endian, names ASCII padded to 32 bytes):

    magic "QSMPBIN1"
    u64 metadata count, then per entry: name[32], f64 value
    u64 array count, then per array: name[32], u64 ndim, u64 dims...,
        row-major f64 data

Writes go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import csv
import os
import struct

import numpy as np

MAGIC = b"QSMPBIN1"
_NAME_LEN = 32


def _pack_name(name: str) -> bytes:
    raw = name.encode("ascii")
    if len(raw) > _NAME_LEN:
        raise ValueError(f"name too long for container: {name!r}")
    return raw.ljust(_NAME_LEN, b"\x00")


def _unpack_name(raw: bytes) -> str:
    return raw.rstrip(b"\x00").decode("ascii")


def atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as handle:
        handle.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_container(path: str, metadata: dict, arrays: dict) -> None:
    parts = [MAGIC]
    parts.append(struct.pack("<Q", len(metadata)))
    for name, value in metadata.items():
        parts.append(_pack_name(name))
        parts.append(struct.pack("<d", float(value)))
    parts.append(struct.pack("<Q", len(arrays)))
    for name, array in arrays.items():
        array = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
        parts.append(_pack_name(name))
        parts.append(struct.pack("<Q", array.ndim))
        for dim in array.shape:
            parts.append(struct.pack("<Q", dim))
        parts.append(array.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_container(path: str) -> tuple[dict, dict]:
    with open(path, "rb") as handle:
        payload = handle.read()
    if payload[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a batch container (bad magic)")
    offset = len(MAGIC)

    def read_u64():
        nonlocal offset
        (value,) = struct.unpack_from("<Q", payload, offset)
        offset += 8
        return value

    metadata = {}
    for _ in range(read_u64()):
        name = _unpack_name(payload[offset : offset + _NAME_LEN])
        offset += _NAME_LEN
        (value,) = struct.unpack_from("<d", payload, offset)
        offset += 8
        metadata[name] = value
    arrays = {}
    for _ in range(read_u64()):
        name = _unpack_name(payload[offset : offset + _NAME_LEN])
        offset += _NAME_LEN
        ndim = read_u64()
        shape = tuple(read_u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += count * 8
        arrays[name] = data.copy()
    return metadata, arrays


def save_solution(path: str, grid, forward, backward=None) -> None:
    """Forward batch (and optionally the backward pair) in one container."""
    meta = {
        "M": forward.states.shape[0],
        "N": grid.N,
        "n": forward.states.shape[2],
        "k": forward.controls.shape[2],
        "dt": grid.dt,
    }
    arrays = {"states": forward.states, "controls": forward.controls}
    if backward is not None:
        meta["d"] = backward.Z.shape[2]
        arrays["Y"] = backward.Y
        arrays["Z"] = backward.Z
    save_container(path, meta, arrays)


def _format_float(value: float) -> str:
    return repr(float(value))


def write_csv(path: str, header: list, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_float(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_paths_csv(path: str, grid, forward, backward=None, max_paths: int = 64) -> None:
    """Wide per-(path, step) table for small batches; one column per state,
    control, and backward component."""
    m_paths = min(forward.states.shape[0], max_paths)
    n = forward.states.shape[2]
    k = forward.controls.shape[2]
    header = ["path", "step", "t"]
    header += [f"x{j+1}" for j in range(n)]
    header += [f"u{j+1}" for j in range(k)]
    d = 0
    if backward is not None:
        d = backward.Z.shape[2]
        header += ["Y"] + [f"Z{j+1}" for j in range(d)]
    times = grid.times
    rows = []
    for m in range(m_paths):
        for i in range(grid.N + 1):
            row = [m, i, float(times[i])]
            row += [float(v) for v in forward.states[m, i]]
            row += [float(v) for v in forward.controls[m, i]]
            if backward is not None:
                row.append(float(backward.Y[m, i]))
                row += [float(v) for v in backward.Z[m, i]]
            rows.append(row)
    write_csv(path, header, rows)


def export_regression_coefficients(path: str, solution) -> None:
    """Per-step regression coefficients of a backward solution as CSV."""
    rows = []
    for i, fit in enumerate(solution.y_fits):
        if fit is None:
            continue
        coeffs = np.atleast_2d(fit.coefficients.T)
        for target_idx, coeff_row in enumerate(coeffs):
            for feat_idx, value in enumerate(coeff_row):
                rows.append([i, f"y{target_idx}", feat_idx, float(value)])
    for i, fit in enumerate(solution.z_fits):
        if fit is None:
            continue
        coeffs = np.atleast_2d(fit.coefficients.T)
        for target_idx, coeff_row in enumerate(coeffs):
            for feat_idx, value in enumerate(coeff_row):
                rows.append([i, f"z{target_idx + 1}", feat_idx, float(value)])
    write_csv(path, ["step", "target", "feature", "coefficient"], rows)
