"""Binary little-endian PLY scene storage, layout-compatible with the
widespread Gaussian-splat export: per-vertex float32 properties x/y/z,
f_dc_0..2, f_rest_* (higher SH bands, channel-major), opacity (logit),
scale_0..2 (log) and rot_0..3 (quaternion, r first).  Unknown properties are
ignored with a warning so third-party scenes load unchanged.
"""

from __future__ import annotations

import re
import warnings

import numpy as np

from .scene import GaussianScene

_FLOAT_NAMES = {"float", "float32"}


def save_scene(scene: GaussianScene, path):
    n = len(scene)
    n_bands = scene.sh.shape[1]
    n_rest = 3 * (n_bands - 1)
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]

    data = np.empty(n, dtype=[(name, "<f4") for name in names])
    data["x"], data["y"], data["z"] = scene.means.T.astype(np.float32)
    for c in range(3):
        data[f"f_dc_{c}"] = scene.sh[:, 0, c].astype(np.float32)
    if n_rest:
        rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, n_rest)  # channel-major
        for i in range(n_rest):
            data[f"f_rest_{i}"] = rest[:, i].astype(np.float32)
    data["opacity"] = scene.opacity_logits.astype(np.float32)
    for a in range(3):
        data[f"scale_{a}"] = scene.log_scales[:, a].astype(np.float32)
    for a in range(4):
        data[f"rot_{a}"] = scene.quats[:, a].astype(np.float32)

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


class PLYFormatError(ValueError):
    pass


def _parse_header(f):
    line = f.readline().decode("ascii", errors="replace").strip()
    if line != "ply":
        raise PLYFormatError("not a PLY file (missing 'ply' magic)")
    fmt = None
    n_vertices = None
    props = []
    in_vertex = False
    line_no = 1
    while True:
        raw = f.readline()
        if not raw:
            raise PLYFormatError("unexpected end of header")
        line_no += 1
        line = raw.decode("ascii", errors="replace").strip()
        if line == "end_header":
            break
        if line.startswith("format"):
            fmt = line.split()[1]
        elif line.startswith("element"):
            parts = line.split()
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertices = int(parts[2])
            elif int(parts[2]) > 0:
                raise PLYFormatError(f"line {line_no}: unsupported element '{parts[1]}'")
        elif line.startswith("property") and in_vertex:
            parts = line.split()
            if parts[1] == "list":
                raise PLYFormatError(f"line {line_no}: list properties unsupported")
            if parts[1] not in _FLOAT_NAMES:
                raise PLYFormatError(f"line {line_no}: property '{parts[2]}' is not float32")
            props.append(parts[2])
    if fmt != "binary_little_endian":
        raise PLYFormatError(f"unsupported format '{fmt}' (need binary_little_endian)")
    if n_vertices is None:
        raise PLYFormatError("no vertex element found")
    return n_vertices, props


def load_scene(path) -> GaussianScene:
    with open(path, "rb") as f:
        n, props = _parse_header(f)
        data = np.frombuffer(f.read(), dtype=[(p, "<f4") for p in props], count=n)
    if n == 0:
        raise PLYFormatError("vertex count is zero")

    required = ["x", "y", "z", "opacity"] + [f"scale_{a}" for a in range(3)] + [
        f"rot_{a}" for a in range(4)
    ] + [f"f_dc_{c}" for c in range(3)]
    missing = [p for p in required if p not in props]
    if missing:
        raise PLYFormatError(f"missing required properties: {', '.join(missing)}")

    rest_names = sorted(
        (p for p in props if re.fullmatch(r"f_rest_\d+", p)),
        key=lambda p: int(p.rsplit("_", 1)[1]),
    )
    n_rest = len(rest_names)
    if n_rest % 3 != 0:
        raise PLYFormatError(f"f_rest count {n_rest} is not divisible by 3")
    n_bands = n_rest // 3 + 1
    if n_bands not in (1, 4, 9, 16):
        raise PLYFormatError(f"SH band count {n_bands} does not match a degree in 0..3")

    known = set(required) | set(rest_names)
    unknown = [p for p in props if p not in known]
    if unknown:
        warnings.warn(f"ignoring unknown PLY properties: {', '.join(unknown)}")

    sh = np.zeros((n, n_bands, 3))
    for c in range(3):
        sh[:, 0, c] = data[f"f_dc_{c}"].astype(np.float64)
    if n_rest:
        rest = np.stack([data[p].astype(np.float64) for p in rest_names], axis=1)
        sh[:, 1:, :] = rest.reshape(n, 3, n_bands - 1).transpose(0, 2, 1)

    return GaussianScene(
        means=np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64),
        log_scales=np.stack([data[f"scale_{a}"] for a in range(3)], axis=1).astype(np.float64),
        quats=np.stack([data[f"rot_{a}"] for a in range(4)], axis=1).astype(np.float64),
        opacity_logits=data["opacity"].astype(np.float64),
        sh=sh,
    )
