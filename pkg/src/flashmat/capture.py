"""File I/O for material maps and captured photographs.

Maps are exchanged as a directory of 16-bit PNGs (albedo, normal,
roughness, specular) with the normal channels shifted from [-1, 1] to
[0, 1] for storage.  Photograph sets are described by a JSON manifest
listing, per view, the image file and the light/camera configuration;
8-bit sources are linearized with an inverse gamma curve and scaled by
a per-view exposure factor.  A small homography toolkit rectifies
hand-held photographs of a planar sample onto the unit square.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .brdf import R_MIN, SvbrdfMaps, project_to_disk
from .render import CaptureView

GAMMA = 2.2
_U16 = 65535.0


# -- image files -------------------------------------------------------------


def _to_uint16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * _U16).astype(np.uint16)


def _write_png(path, img: np.ndarray) -> None:
    """img is (H, W) or (H, W, 3) RGB in [0, 1]."""
    data = _to_uint16(img)
    if data.ndim == 3:
        data = data[..., ::-1]  # cv2 stores BGR
    if not cv2.imwrite(str(path), data):
        raise IOError(f"could not write {path}")


def _read_png(path) -> np.ndarray:
    """Returns (H, W) or (H, W, 3) RGB in [0, 1] at source precision."""
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise IOError(f"could not read {path}")
    if data.ndim == 3:
        if data.shape[2] == 4:
            data = data[..., :3]
        data = data[..., ::-1]
    peak = _U16 if data.dtype == np.uint16 else 255.0
    return data.astype(np.float64) / peak


def save_image(path, linear: np.ndarray, gamma: float = GAMMA) -> None:
    """Store a linear-radiance image as a gamma-encoded 16-bit PNG."""
    encoded = np.clip(linear, 0.0, 1.0) ** (1.0 / gamma)
    _write_png(path, encoded)


def load_image(path, gamma: float = GAMMA, exposure: float = 1.0) -> np.ndarray:
    """Read a gamma-encoded photograph back to linear radiance."""
    return (_read_png(path) ** gamma) * exposure


# -- map bundles -------------------------------------------------------------

_MAP_FILES = ("albedo.png", "normal.png", "roughness.png", "specular.png")


def save_maps(directory, maps: SvbrdfMaps) -> None:
    """Write the four map PNGs (16-bit, linear values) to a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    maps.validate()
    _write_png(directory / "albedo.png", maps.albedo)
    normal3 = np.concatenate(
        [maps.normal_xy, np.zeros(maps.normal_xy.shape[:2] + (1,))], axis=-1)
    _write_png(directory / "normal.png", (normal3 + 1.0) / 2.0)
    _write_png(directory / "roughness.png", maps.roughness)
    _write_png(directory / "specular.png", maps.specular)


def load_maps(directory) -> SvbrdfMaps:
    """Read a map bundle written by save_maps."""
    directory = Path(directory)
    for name in _MAP_FILES:
        if not (directory / name).exists():
            raise FileNotFoundError(f"map bundle is missing {directory / name}")
    albedo = _read_png(directory / "albedo.png")
    normal = _read_png(directory / "normal.png") * 2.0 - 1.0
    roughness = _read_png(directory / "roughness.png")
    if roughness.ndim == 3:
        roughness = roughness.mean(axis=-1)
    specular = _read_png(directory / "specular.png")
    return SvbrdfMaps(
        albedo=albedo,
        normal_xy=project_to_disk(normal[..., :2]),
        roughness=np.clip(roughness, R_MIN, 1.0),
        specular=specular,
    )


# -- capture manifests -------------------------------------------------------


@dataclass
class CaptureManifest:
    """Serializable description of a photograph set of one sample.

    Positions are in sample-plane units (the sample spans the unit
    square); `size_m` records the physical edge length for reference
    only.
    """

    views: list = field(default_factory=list)   # per view: dict, see add_view
    resolution: int = 256
    size_m: float = 0.1
    gamma: float = GAMMA

    def add_view(self, image_file: str, camera_position, light_position,
                 light_intensity: float, exposure: float = 1.0) -> None:
        self.views.append({
            "image": image_file,
            "camera_position": list(np.asarray(camera_position, dtype=float)),
            "light_position": list(np.asarray(light_position, dtype=float)),
            "light_intensity": float(light_intensity),
            "exposure": float(exposure),
        })

    def to_dict(self) -> dict:
        return {"views": self.views, "resolution": self.resolution,
                "size_m": self.size_m, "gamma": self.gamma}

    @staticmethod
    def from_dict(d: dict) -> "CaptureManifest":
        return CaptureManifest(
            views=list(d.get("views", [])),
            resolution=int(d.get("resolution", 256)),
            size_m=float(d.get("size_m", 0.1)),
            gamma=float(d.get("gamma", GAMMA)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @staticmethod
    def load(path) -> "CaptureManifest":
        return CaptureManifest.from_dict(json.loads(Path(path).read_text()))


def load_capture_views(manifest_path) -> list:
    """Materialize a manifest into CaptureView objects with linear
    images, resized to the manifest resolution."""
    manifest_path = Path(manifest_path)
    manifest = CaptureManifest.load(manifest_path)
    views = []
    for entry in manifest.views:
        img = load_image(manifest_path.parent / entry["image"],
                         gamma=manifest.gamma,
                         exposure=entry.get("exposure", 1.0))
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=-1)
        res = manifest.resolution
        if img.shape[:2] != (res, res):
            img = cv2.resize(img, (res, res), interpolation=cv2.INTER_AREA)
        view = CaptureView(
            camera_position=np.asarray(entry["camera_position"], dtype=float),
            light_position=np.asarray(entry["light_position"], dtype=float),
            light_intensity=float(entry["light_intensity"]),
            image=img,
        )
        view.validate()
        views.append(view)
    return views


def save_capture_views(directory, views: list, resolution: int | None = None,
                       gamma: float = GAMMA) -> Path:
    """Write views' images plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = CaptureManifest(resolution=resolution or views[0].shape[0],
                               gamma=gamma)
    for i, view in enumerate(views):
        if view.image is None:
            raise ValueError("cannot save a view without an image")
        name = f"view{i:02d}.png"
        save_image(directory / name, view.image, gamma=gamma)
        manifest.add_view(name, view.camera_position, view.light_position,
                          view.light_intensity)
    path = directory / "capture.json"
    manifest.save(path)
    return path


# -- planar rectification ----------------------------------------------------


def estimate_homography(src_points, dst_points) -> tuple[np.ndarray, float]:
    """Homography mapping src pixel coordinates to dst coordinates.

    Uses the normalized direct linear transform.  Returns the 3x3
    matrix (unit bottom-right entry) and the reprojection RMSE on the
    input correspondences.  Raises for fewer than 4 points or a
    degenerate (e.g. collinear) configuration.
    """
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("point sets must both be (N, 2)")
    n = src.shape[0]
    if n < 4:
        raise ValueError("homography estimation needs at least 4 points")

    def normalizer(pts):
        mean = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(
            np.linalg.norm(pts - mean, axis=1)), 1e-12)
        t = np.array([[scale, 0, -scale * mean[0]],
                      [0, scale, -scale * mean[1]],
                      [0, 0, 1.0]])
        return t

    t_src, t_dst = normalizer(src), normalizer(dst)
    sh = (t_src @ np.c_[src, np.ones(n)].T).T
    dh = (t_dst @ np.c_[dst, np.ones(n)].T).T

    rows = []
    for (x, y, _), (u, v, _) in zip(sh, dh):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    a = np.asarray(rows)
    _, s, vt = np.linalg.svd(a)
    # A vanishing second-smallest singular value means the solution is
    # not unique: degenerate geometry such as collinear points.
    if s[-2] < 1e-8 * s[0]:
        raise ValueError("degenerate point configuration (collinear points?)")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h @ t_src
    if abs(h[2, 2]) < 1e-12:
        raise ValueError("degenerate homography")
    h /= h[2, 2]

    projected = apply_homography(h, src)
    rmse = float(np.sqrt(np.mean(np.sum((projected - dst) ** 2, axis=-1))))
    return h, rmse


def apply_homography(h: np.ndarray, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    ph = np.c_[pts, np.ones(len(pts))] @ h.T
    return ph[:, :2] / ph[:, 2:3]


def rectify(image: np.ndarray, corners, resolution: int) -> tuple[np.ndarray,
                                                                  np.ndarray]:
    """Warp the quadrilateral `corners` (TL, TR, BR, BL pixel coords)
    onto a square image of the given resolution.

    Returns (warped, inside) where `inside` flags output pixels whose
    source location fell within the photograph.
    """
    corners = np.asarray(corners, dtype=np.float64)
    if corners.shape != (4, 2):
        raise ValueError("corners must be four (x, y) pixel positions")
    r = float(resolution)
    square = np.array([[0.0, 0.0], [r, 0.0], [r, r], [0.0, r]]) - 0.5
    h, _ = estimate_homography(square, corners)

    warped = cv2.warpPerspective(
        image.astype(np.float64), h, (resolution, resolution),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)

    # Pixels whose preimage is outside the photograph are not data.
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
    src = apply_homography(h, grid)
    h_img, w_img = image.shape[:2]
    inside = ((src[:, 0] >= -0.5) & (src[:, 0] <= w_img - 0.5)
              & (src[:, 1] >= -0.5) & (src[:, 1] <= h_img - 0.5))
    return warped, inside.reshape(resolution, resolution)
