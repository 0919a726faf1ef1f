"""Binary little-endian PLY in the layout used by common Gaussian-splatting viewers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from holosplat.io import DataError
from holosplat.scene import GaussianSet

_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4", "uint": "<u4"}


def property_names(sh_degree: int) -> list[str]:
    k = (sh_degree + 1) ** 2
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def export_ply(path, gs: GaussianSet) -> None:
    n = len(gs)
    ptype, fmt = ("double", "<f8") if gs.dtype == np.float64 else ("float", "<f4")
    names = property_names(gs.sh_degree)
    rec = np.zeros(n, dtype=[(name, fmt) for name in names])
    for i, c in enumerate("xyz"):
        rec[c] = gs.means[:, i]
    for c in range(3):
        rec[f"f_dc_{c}"] = gs.sh[:, 0, c]
    # higher bands are stored channel-major: f_rest_{c*(K-1)+j}
    rest = gs.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    for i in range(rest.shape[1]):
        rec[f"f_rest_{i}"] = rest[:, i]
    rec["opacity"] = gs.opacity_logits
    for i in range(3):
        rec[f"scale_{i}"] = gs.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = gs.quats[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {ptype} {name}" for name in names]
    header.append("end_header")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + rec.tobytes())


def _parse_header(data: bytes, path):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    n, props, in_vertex = None, [], False
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if parts[1:2] != ["binary_little_endian"]:
                raise DataError(f"{path}:{lineno}: only binary_little_endian is supported")
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
            elif n is not None:
                raise DataError(f"{path}:{lineno}: elements after 'vertex' are not supported")
        elif parts[0] == "property" and in_vertex:
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise DataError(f"{path}:{lineno}: unsupported property declaration {line!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise DataError(f"{path}:{lineno}: unexpected header line {line!r}")
    if n is None:
        raise DataError(f"{path}: no vertex element")
    return n, props, end + len(b"end_header\n")


def import_ply(path) -> GaussianSet:
    path = Path(path)
    data = path.read_bytes()
    n, props, offset = _parse_header(data, path)
    dtype = np.dtype(props)
    if len(data) - offset < n * dtype.itemsize:
        raise DataError(f"{path}: vertex data truncated")
    rec = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
    names = set(dtype.names)
    n_rest = sum(1 for p in names if p.startswith("f_rest_"))
    k = n_rest // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if n_rest % 3 or (degree + 1) ** 2 != k:
        raise DataError(f"{path}: {n_rest} f_rest properties do not match any SH degree")
    for name in property_names(degree):
        if name not in names:
            raise DataError(f"{path}: missing required property {name!r}")
    out_dt = np.float64 if any(rec.dtype[nm] == np.dtype("<f8") for nm in ("x", "opacity")) else np.float32

    def col(name):
        return rec[name].astype(out_dt)

    sh = np.zeros((n, k, 3), out_dt)
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
    if k > 1:
        rest = np.stack([col(f"f_rest_{i}") for i in range(3 * (k - 1))], axis=1)
        sh[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    return GaussianSet(np.stack([col(c) for c in "xyz"], axis=1),
                       np.stack([col(f"rot_{i}") for i in range(4)], axis=1),
                       np.stack([col(f"scale_{i}") for i in range(3)], axis=1),
                       col("opacity"), sh)
