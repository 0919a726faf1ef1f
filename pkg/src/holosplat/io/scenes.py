"""Scene bundles and the synthetic scene directory format."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from holosplat.io import DataError
from holosplat.io.images import read_image, write_image
from holosplat.scene import Camera, GaussianSet

SYNTHETIC_FORMAT = "holosplat-synthetic"
SYNTHETIC_VERSION = 1


@dataclass
class SceneBundle:
    cameras: list
    image_paths: list
    points: np.ndarray
    colors: np.ndarray
    background: tuple | None = None      # None: use the run config
    ground_truth: GaussianSet | None = None
    extra: dict = field(default_factory=dict)

    def load_images(self) -> list[np.ndarray]:
        return [read_image(p, (c.width, c.height)) for c, p in zip(self.cameras, self.image_paths)]


def _camera_dict(cam: Camera, image: str) -> dict:
    return {"name": cam.name, "image": image, "rotation": cam.rotation.tolist(),
            "translation": cam.translation.tolist(), "fx": cam.fx, "fy": cam.fy, "cx": cam.cx,
            "cy": cam.cy, "width": cam.width, "height": cam.height, "near": cam.near, "far": cam.far}


def write_synthetic(root, scene, images=None) -> Path:
    """Write scene.json, PNG views and seed points for a ``synthetic.SyntheticScene``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images = scene.render_images() if images is None else images
    cams = []
    for cam, img in zip(scene.cameras, images):
        name = f"{cam.name}.png"
        write_image(root / "images" / name, img)
        cams.append(_camera_dict(cam, name))
    gt = scene.gaussians
    doc = {"format": SYNTHETIC_FORMAT, "version": SYNTHETIC_VERSION,
           "background": list(scene.background), "seam_x": scene.seam_x, "cameras": cams,
           "gaussians": {k: np.asarray(v, np.float64).tolist() for k, v in gt.arrays().items()},
           "seeds": {"points": scene.seed_points.tolist(), "colors": scene.seed_colors.tolist()}}
    (root / "scene.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return root


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise DataError(f"{where}: missing field {key!r}")
    return d[key]


def load_synthetic(root, downsample: int = 1) -> SceneBundle:
    root = Path(root)
    path = root / "scene.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    if doc.get("format") != SYNTHETIC_FORMAT:
        raise DataError(f"{path}: not a synthetic scene file")
    if doc.get("version") != SYNTHETIC_VERSION:
        raise DataError(f"{path}: unsupported version {doc.get('version')}")
    cams, paths = [], []
    for i, c in enumerate(_need(doc, "cameras", str(path))):
        where = f"{path}: cameras[{i}]"
        try:
            cam = Camera(np.array(_need(c, "rotation", where)), np.array(_need(c, "translation", where)),
                         float(_need(c, "fx", where)), float(_need(c, "fy", where)),
                         float(_need(c, "cx", where)), float(_need(c, "cy", where)),
                         int(_need(c, "width", where)), int(_need(c, "height", where)),
                         float(c.get("near", 0.01)), float(c.get("far", 100.0)), c.get("name", f"view_{i:03d}"))
        except (TypeError, ValueError) as e:
            if isinstance(e, DataError):
                raise
            raise DataError(f"{where}: {e}") from None
        if downsample != 1:
            cam = cam.scaled(downsample)
        p = root / "images" / _need(c, "image", where)
        if not p.is_file():
            raise DataError(f"{where}: image {p} does not exist")
        cams.append(cam)
        paths.append(p)
    seeds = _need(doc, "seeds", str(path))
    gt = None
    if "gaussians" in doc:
        g = doc["gaussians"]
        gt = GaussianSet(**{k: np.array(g[k], np.float64) for k in
                            ("means", "quats", "log_scales", "opacity_logits", "sh")})
    return SceneBundle(cams, paths, np.array(seeds["points"], np.float64).reshape(-1, 3),
                       np.array(seeds["colors"], np.float64).reshape(-1, 3),
                       tuple(doc.get("background", (0.0, 0.0, 0.0))), gt,
                       {"seam_x": doc.get("seam_x")})


def load_scene(root, downsample: int = 1) -> SceneBundle:
    """Synthetic JSON if ``scene.json`` exists, otherwise a COLMAP text model."""
    from holosplat.io.colmap import load_colmap

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"scene directory {root} does not exist")
    if (root / "scene.json").is_file():
        return load_synthetic(root, downsample)
    return load_colmap(root, downsample)


REPORT_HEADER = ("view_id", "psnr", "ssim")


def write_report(path, rows) -> None:
    """rows: iterable of (view_id, psnr, ssim); a final 'mean' row is appended."""
    rows = list(rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for vid, p, s in rows:
            w.writerow([vid, f"{p:.6f}", f"{s:.6f}"])
        if rows:
            w.writerow(["mean", f"{np.mean([r[1] for r in rows]):.6f}", f"{np.mean([r[2] for r in rows]):.6f}"])


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != REPORT_HEADER:
            raise DataError(f"{path}: unexpected header {r.fieldnames}")
        return [{"view_id": row["view_id"], "psnr": float(row["psnr"]), "ssim": float(row["ssim"])}
                for row in r]
