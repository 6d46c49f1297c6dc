"""Readers and writers for xyz text clouds and PLY (ascii / binary LE)."""

from __future__ import annotations

import numpy as np

from .errors import ParseError
from .pointcloud import PointCloud

_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
}


def read_cloud(path, with_flags: bool = False):
    """Read a point cloud from ``path`` (.xyz or .ply, by extension).

    With ``with_flags=True`` the result is ``(cloud, flags)`` where flags is
    the per-point uint8 'generated' column of a PLY file, or None when the
    file carries no such column.
    """
    path = str(path)
    if path.lower().endswith(".ply"):
        cloud, flags = _read_ply(path)
    elif path.lower().endswith(".xyz"):
        cloud, flags = _read_xyz(path), None
    else:
        raise ParseError("unknown cloud extension (expected .xyz or .ply)", path=path)
    return (cloud, flags) if with_flags else cloud


def write_cloud(path, cloud: PointCloud, fmt: str | None = None, flags=None):
    """Write ``cloud`` to ``path``; format picked by extension.

    PLY defaults to binary little-endian with double precision (bit-exact
    round trip); pass ``fmt='ascii'`` for text PLY. ``flags`` attaches a
    per-point uint8 'generated' column (PLY only).
    """
    path = str(path)
    if path.lower().endswith(".ply"):
        _write_ply(path, cloud, binary=(fmt != "ascii"), flags=flags)
    elif path.lower().endswith(".xyz"):
        _write_xyz(path, cloud)
    else:
        raise ParseError("unknown cloud extension (expected .xyz or .ply)", path=path)


def _read_xyz(path) -> PointCloud:
    rows = []
    width = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) not in (3, 6):
                raise ParseError(
                    f"expected 3 or 6 columns, found {len(tokens)}",
                    path=path, line=lineno,
                )
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise ParseError(
                    f"inconsistent column count ({len(tokens)} after {width})",
                    path=path, line=lineno,
                )
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise ParseError("malformed number", path=path, line=lineno) from None
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), width or 3)
    if width == 6:
        return PointCloud(data[:, :3], data[:, 3:])
    return PointCloud(data)


def _write_xyz(path, cloud: PointCloud):
    data = cloud.points
    if cloud.normals is not None:
        data = np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, data, fmt="%.9g")


def _read_ply(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or marker < 0:
        raise ParseError("not a PLY file", path=path)
    header = blob[:marker].decode("ascii", errors="replace").splitlines()
    body = blob[marker + len(b"end_header\n"):]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []  # (name, numpy dtype)
    in_vertex = False
    for lineno, line in enumerate(header, start=1):
        tokens = line.strip().split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format {tokens[1:]}",
                                 path=path, line=lineno)
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] == "vertex":
                in_vertex = True
                count = int(tokens[2])
            else:
                raise ParseError(f"unsupported element '{tokens[1]}'",
                                 path=path, line=lineno)
        elif tokens[0] == "property":
            if not in_vertex:
                raise ParseError("property before vertex element",
                                 path=path, line=lineno)
            if tokens[1] == "list":
                raise ParseError("list properties are not supported",
                                 path=path, line=lineno)
            if tokens[1] not in _PLY_TYPES:
                raise ParseError(f"unknown property type '{tokens[1]}'",
                                 path=path, line=lineno)
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt is None or count is None:
        raise ParseError("PLY header is missing format or vertex element", path=path)
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element lacks '{axis}' property", path=path)

    dtype = np.dtype([(f"f{i}", p[1]) for i, p in enumerate(props)])
    if fmt == "binary_little_endian":
        if len(body) < count * dtype.itemsize:
            raise ParseError(
                f"truncated body: need {count * dtype.itemsize} bytes, "
                f"have {len(body)}", path=path,
            )
        table = np.frombuffer(body, dtype=dtype, count=count)
    else:
        text_rows = body.decode("ascii", errors="replace").split()
        if len(text_rows) < count * len(props):
            raise ParseError("truncated ascii vertex data", path=path)
        try:
            flat = np.asarray(text_rows[: count * len(props)], dtype=np.float64)
        except ValueError:
            raise ParseError("malformed vertex number", path=path) from None
        flat = flat.reshape(count, len(props))
        table = np.zeros(count, dtype=dtype)
        for i in range(len(props)):
            table[f"f{i}"] = flat[:, i]

    def column(name):
        return np.asarray(table[f"f{names.index(name)}"], dtype=np.float64)

    pts = np.column_stack([column("x"), column("y"), column("z")])
    normals = None
    if all(n in names for n in ("nx", "ny", "nz")):
        normals = np.column_stack([column("nx"), column("ny"), column("nz")])
    flags = None
    if "generated" in names:
        flags = np.asarray(
            table[f"f{names.index('generated')}"], dtype=np.uint8
        ).copy()
    try:
        cloud = PointCloud(pts, normals)
    except Exception as exc:
        raise ParseError(f"invalid vertex data: {exc}", path=path) from None
    return cloud, flags


def _write_ply(path, cloud: PointCloud, binary: bool, flags=None):
    n = len(cloud)
    names = ["x", "y", "z"]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
    if flags is not None:
        flags = np.asarray(flags, dtype=np.uint8)
        if flags.shape != (n,):
            raise ParseError(f"flags must have shape ({n},), got {flags.shape}",
                             path=str(path))
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header.extend(f"property double {name}" for name in names)
    if flags is not None:
        header.append("property uchar generated")
    header.append("end_header")

    columns = [cloud.points[:, i] for i in range(3)]
    if cloud.normals is not None:
        columns += [cloud.normals[:, i] for i in range(3)]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dtype = [(name, "<f8") for name in names]
            if flags is not None:
                dtype.append(("generated", "u1"))
            table = np.zeros(n, dtype=dtype)
            for name, col in zip(names, columns):
                table[name] = col
            if flags is not None:
                table["generated"] = flags
            fh.write(table.tobytes())
        else:
            body = np.column_stack(columns)
            lines = []
            for i in range(n):
                row = " ".join("%.17g" % v for v in body[i])
                if flags is not None:
                    row += f" {int(flags[i])}"
                lines.append(row)
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))
