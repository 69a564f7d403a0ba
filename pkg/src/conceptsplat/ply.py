"""Minimal PLY reader/writer for vertex-only files.

Handles ``ascii`` and ``binary_little_endian`` encodings with scalar vertex
properties. Other elements (faces etc.) that follow the vertex block are ignored.
"""
from __future__ import annotations

import io

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NUMPY_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
                 "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    pass


def write_ply(columns: dict[str, np.ndarray], binary: bool = True, comments=()) -> bytes:
    """Serialize equal-length 1-d arrays as vertex properties, in dict order."""
    names = list(columns)
    if not names:
        raise PlyError("no properties to write")
    n = len(columns[names[0]])
    dtype = []
    for name in names:
        arr = np.asarray(columns[name])
        if arr.ndim != 1 or len(arr) != n:
            raise PlyError(f"property {name!r} must be 1-d with {n} entries")
        code = arr.dtype.str.lstrip("<>|=")
        if code not in _NUMPY_TO_PLY:
            raise PlyError(f"unsupported dtype {arr.dtype} for {name!r}")
        dtype.append((name, "<" + code))

    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property {_NUMPY_TO_PLY[d.lstrip('<')]} {name}" for name, d in dtype]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    table = np.empty(n, dtype=dtype)
    for name in names:
        table[name] = columns[name]
    if binary:
        return head + table.tobytes()

    out = io.StringIO()
    for row in table:
        fields = []
        for name, d in dtype:
            v = row[name]
            fields.append(repr(float(v)) if d[1] == "f" else str(int(v)))
        out.write(" ".join(fields) + "\n")
    return head + out.getvalue().encode("ascii")


def read_ply(data: bytes) -> tuple[dict[str, np.ndarray], list[str]]:
    """Parse vertex properties. Returns (columns, comment lines)."""
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("not a PLY file (missing 'ply' magic or end_header)")
    nl = data.find(b"\n", end)
    body = data[nl + 1:] if nl >= 0 else b""
    lines = data[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    comments: list[str] = []
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            if len(parts) < 2:
                raise PlyError(f"line {lineno}: malformed format line")
            fmt = parts[1]
        elif key in ("comment", "obj_info"):
            comments.append(line.partition(" ")[2])
        elif key == "element":
            if len(parts) != 3:
                raise PlyError(f"line {lineno}: malformed element line")
            elements.append((parts[1], int(parts[2]), []))
        elif key == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], "list"))
                continue
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise PlyError(f"line {lineno}: unsupported property {line!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PlyError(f"line {lineno}: unknown header keyword {key!r}")

    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise PlyError("first element must be 'vertex'")
    _, n, props = elements[0]
    if any(t == "list" for _, t in props):
        raise PlyError("list properties on vertices are not supported")
    dtype = [(name, "<" + t) for name, t in props]

    if fmt == "binary_little_endian":
        need = np.dtype(dtype).itemsize * n
        if len(body) < need:
            raise PlyError(f"truncated vertex data: need {need} bytes, have {len(body)}")
        table = np.frombuffer(body[:need], dtype=dtype, count=n)
    else:
        rows = body.decode("ascii").splitlines()[:n]
        if len(rows) < n:
            raise PlyError(f"expected {n} vertex rows, found {len(rows)}")
        table = np.empty(n, dtype=dtype)
        for i, row in enumerate(rows):
            vals = row.split()
            if len(vals) != len(props):
                raise PlyError(f"vertex row {i}: expected {len(props)} values, got {len(vals)}")
            table[i] = tuple(float(v) if t[0] == "f" else int(v) for v, (_, t) in zip(vals, props))
    return {name: np.array(table[name]) for name, _ in props}, comments
