"""COLMAP text-format reader (cameras.txt, images.txt, points3D.txt)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from holosplat.io import DataError
from holosplat.scene import Camera, quat_to_rotmat

SUPPORTED_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")


class UnsupportedCameraModel(DataError):
    def __init__(self, model: str, where: str):
        super().__init__(f"{where}: unsupported camera model {model!r} (supported: "
                         f"{', '.join(SUPPORTED_MODELS)})")
        self.model = model


def _lines(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    return text.splitlines()


def _numbers(parts, conv, path, lineno, what):
    try:
        return [conv(p) for p in parts]
    except ValueError:
        raise DataError(f"{path}:{lineno}: malformed {what} line") from None


def read_cameras(path) -> dict[int, dict]:
    path = Path(path)
    cams = {}
    for lineno, line in enumerate(_lines(path), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 4:
            raise DataError(f"{path}:{lineno}: malformed camera line")
        cid, w, h = _numbers([parts[0], parts[2], parts[3]], int, path, lineno, "camera")
        model = parts[1]
        params = _numbers(parts[4:], float, path, lineno, "camera")
        if model == "PINHOLE":
            if len(params) != 4:
                raise DataError(f"{path}:{lineno}: PINHOLE needs 4 parameters, got {len(params)}")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise DataError(f"{path}:{lineno}: SIMPLE_PINHOLE needs 3 parameters, got {len(params)}")
            fx, cx, cy = params
            fy = fx
        else:
            raise UnsupportedCameraModel(model, f"{path}:{lineno}")
        cams[cid] = {"model": model, "width": w, "height": h, "fx": fx, "fy": fy, "cx": cx, "cy": cy}
    return cams


def read_images(path) -> list[dict]:
    """Image records in file order. Each record line is followed by a (possibly empty) 2D-point line."""
    path = Path(path)
    lines = _lines(path)
    out = []
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        lineno = i + 1
        i += 1
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 10:
            raise DataError(f"{path}:{lineno}: malformed image line")
        iid, cid = _numbers([parts[0], parts[8]], int, path, lineno, "image")
        qt = _numbers(parts[1:8], float, path, lineno, "image")
        out.append({"id": iid, "q": np.array(qt[:4]), "t": np.array(qt[4:]), "camera_id": cid,
                    "name": " ".join(parts[9:]), "line": lineno})
        i += 1  # skip POINTS2D line
    return out


def read_points(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    pts, cols = [], []
    for lineno, line in enumerate(_lines(path), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 8:
            raise DataError(f"{path}:{lineno}: malformed point line")
        xyz = _numbers(parts[1:4], float, path, lineno, "point")
        rgb = _numbers(parts[4:7], int, path, lineno, "point")
        pts.append(xyz)
        cols.append(rgb)
    return (np.array(pts, dtype=np.float64).reshape(-1, 3),
            np.array(cols, dtype=np.float64).reshape(-1, 3) / 255.0)


def find_sparse_dir(root) -> Path | None:
    root = Path(root)
    for cand in (root, root / "sparse" / "0", root / "sparse"):
        if all((cand / f).is_file() for f in ("cameras.txt", "images.txt", "points3D.txt")):
            return cand
    return None


def load_colmap(root, downsample: int = 1, *, check_images: bool = True):
    """Parse a COLMAP text model into a SceneBundle; intrinsics are divided by ``downsample``."""
    from holosplat.io.scenes import SceneBundle

    root = Path(root)
    sparse = find_sparse_dir(root)
    if sparse is None:
        raise DataError(f"{root}: no cameras.txt/images.txt/points3D.txt found")
    intr = read_cameras(sparse / "cameras.txt")
    cameras, paths = [], []
    img_dir = root / "images"
    for rec in sorted(read_images(sparse / "images.txt"), key=lambda r: r["name"]):
        if rec["camera_id"] not in intr:
            raise DataError(f"{sparse / 'images.txt'}:{rec['line']}: unknown camera id {rec['camera_id']}")
        k = intr[rec["camera_id"]]
        q = rec["q"] / np.linalg.norm(rec["q"])
        cam = Camera(quat_to_rotmat(q), rec["t"], k["fx"], k["fy"], k["cx"], k["cy"], k["width"],
                     k["height"], name=rec["name"])
        if downsample != 1:
            cam = cam.scaled(downsample)
        cameras.append(cam)
        p = img_dir / rec["name"]
        if check_images and not p.is_file():
            raise DataError(f"image {p} listed in {sparse / 'images.txt'}:{rec['line']} does not exist")
        paths.append(p)
    pts, cols = read_points(sparse / "points3D.txt")
    return SceneBundle(cameras, paths, pts, cols)
