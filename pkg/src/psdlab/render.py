"""Orthographic views of sphere assemblies and the image transforms between them.

Pixel (row, col) of a view covers the box footprint cell whose centre is at
x = (col + 0.5) * W / n, y = (n - row - 0.5) * D / n, so row 0 is the far wall.
Top (T) and Under (U) views share this grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from PIL import Image

VIEWS = ("T", "U", "TU", "STU")
AMBIENT = 0.35
LIGHT_TOP = np.array([-1.0, -1.0, 2.0]) / math.sqrt(6.0)
LIGHT_UNDER = np.array([-1.0, -1.0, -2.0]) / math.sqrt(6.0)


class RenderError(ValueError):
    pass


@dataclass
class RasterImage:
    pixels: np.ndarray  # uint8, (H, W) gray or (H, W, 3) color
    view: str
    mode: str = "C"

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.view not in VIEWS:
            raise RenderError(f"unknown view {self.view!r}")
        if self.mode == "C" and (self.pixels.ndim != 3 or self.pixels.shape[2] != 3):
            raise RenderError("color images need shape (H, W, 3)")
        if self.mode == "G" and self.pixels.ndim != 2:
            raise RenderError("grayscale images need shape (H, W)")
        if self.mode not in ("C", "G"):
            raise RenderError(f"unknown color mode {self.mode!r}")
        h, w = self.pixels.shape[:2]
        if self.view == "TU" and w != 2 * h:
            raise RenderError(f"TU image must be twice as wide as high, got {w}x{h}")
        if self.view != "TU" and w != h:
            raise RenderError(f"{self.view} image must be square, got {w}x{h}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def save_png(self, path) -> None:
        Image.fromarray(self.pixels, mode="L" if self.mode == "G" else "RGB").save(path, format="PNG")

    @classmethod
    def load_png(cls, path, view: str) -> "RasterImage":
        with Image.open(path) as im:
            mode = "G" if im.mode == "L" else "C"
            arr = np.asarray(im.convert("L" if mode == "G" else "RGB"))
        return cls(arr, view, mode)


def image_filename(scene_id: str, view: str, size: int, mode: str) -> str:
    return f"{scene_id}_{view}_{size}_{mode}.png"


@numba.njit(cache=True)
def _zbuffer(centers, radii, width, depth, n, top):
    """Per-pixel index of the visible sphere and its surface height (-1 = background)."""
    sx = width / n
    sy = depth / n
    index = np.full((n, n), -1, dtype=np.int64)
    height = np.zeros((n, n))
    for k in range(radii.shape[0]):
        x = centers[k, 0]
        y = centers[k, 1]
        z = centers[k, 2]
        r = radii[k]
        c0 = max(0, int(math.floor((x - r) / sx - 0.5)))
        c1 = min(n - 1, int(math.ceil((x + r) / sx - 0.5)))
        # row = n - 1 - floor(y / sy)
        r0 = max(0, int(math.floor(n - (y + r) / sy - 0.5)))
        r1 = min(n - 1, int(math.ceil(n - (y - r) / sy - 0.5)))
        for row in range(r0, r1 + 1):
            py = (n - row - 0.5) * sy
            dy = py - y
            for col in range(c0, c1 + 1):
                px = (col + 0.5) * sx
                dx = px - x
                h2 = dx * dx + dy * dy
                if h2 >= r * r:
                    continue
                dz = math.sqrt(r * r - h2)
                if top:
                    s = z + dz
                    if index[row, col] < 0 or s > height[row, col]:
                        index[row, col] = k
                        height[row, col] = s
                else:
                    s = z - dz
                    if index[row, col] < 0 or s < height[row, col]:
                        index[row, col] = k
                        height[row, col] = s
    return index, height


def _round_half_up(values) -> np.ndarray:
    return np.floor(np.asarray(values) + 0.5)


def render_view(assembly, view: str, resolution: int = 400, flat_shading: bool = False) -> RasterImage:
    """Color T or U view: nearest sphere surface per pixel, Lambert + ambient shading."""
    if view not in ("T", "U"):
        raise RenderError("render_view draws only T and U views")
    if resolution < 8:
        raise RenderError("resolution must be at least 8 pixels")
    if len(assembly.diameters) == 0:
        raise RenderError("empty assembly")
    width, depth = float(assembly.box[0]), float(assembly.box[1])
    centers = np.ascontiguousarray(assembly.centers, dtype=float)
    radii = np.ascontiguousarray(0.5 * np.asarray(assembly.diameters, dtype=float))
    index, surface = _zbuffer(centers, radii, width, depth, resolution, view == "T")

    hit = index >= 0
    k = index[hit]
    rows, cols = np.nonzero(hit)
    if flat_shading:
        shade = np.ones(k.size)
    else:
        px = (cols + 0.5) * width / resolution
        py = (resolution - rows - 0.5) * depth / resolution
        normal = np.stack([px - centers[k, 0], py - centers[k, 1], surface[hit] - centers[k, 2]], axis=1)
        normal /= radii[k][:, None]
        light = LIGHT_TOP if view == "T" else LIGHT_UNDER
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normal @ light, 0.0, None)
    out = np.zeros((resolution, resolution, 3), dtype=np.uint8)
    colors = np.asarray(assembly.colors, dtype=float)[k]
    out[hit] = np.clip(_round_half_up(colors * shade[:, None]), 0, 255).astype(np.uint8)
    return RasterImage(out, view, "C")


def to_grayscale(image: RasterImage) -> RasterImage:
    """Luminance 0.299 R + 0.587 G + 0.114 B, rounded half up (exact integer math)."""
    if image.channels != 3:
        raise RenderError("already single-channel")
    px = image.pixels.astype(np.int64)
    gray = (299 * px[..., 0] + 587 * px[..., 1] + 114 * px[..., 2] + 500) // 1000
    return RasterImage(np.clip(gray, 0, 255).astype(np.uint8), image.view, "G")


def _area_weights(n_src: int, n_dst: int) -> np.ndarray:
    """Integer overlap lengths, in units of 1/n_dst source pixels.

    Source pixel k spans [k n_dst, (k+1) n_dst) and destination pixel i spans
    [i n_src, (i+1) n_src); each destination row of the matrix sums to n_src.
    """
    w = np.zeros((n_dst, n_src))
    for i in range(n_dst):
        lo, hi = i * n_src, (i + 1) * n_src
        k0, k1 = lo // n_dst, (hi - 1) // n_dst
        for k in range(k0, k1 + 1):
            w[i, k] = min(hi, (k + 1) * n_dst) - max(lo, k * n_dst)
    return w


def _area_resample(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    src_h, src_w = pixels.shape[:2]
    wh = _area_weights(src_h, out_h)
    ww = _area_weights(src_w, out_w)
    denom = src_h * src_w
    planes = pixels[..., None] if pixels.ndim == 2 else pixels
    out = np.empty((out_h, out_w, planes.shape[2]), dtype=np.uint8)
    for c in range(planes.shape[2]):
        # integer-valued float64 products stay exact below 2**53
        num = wh @ planes[..., c].astype(np.float64) @ ww.T
        num = num.astype(np.int64)
        out[..., c] = (2 * num + denom) // (2 * denom)
    return out[..., 0] if pixels.ndim == 2 else out


def downscale(image: RasterImage, target_size: int) -> RasterImage:
    """Area-average to height ``target_size`` keeping the aspect ratio."""
    h, w = image.height, image.width
    if target_size > h:
        raise RenderError(f"cannot upscale from {h} to {target_size}")
    if target_size < 1:
        raise RenderError("target size must be positive")
    if (w * target_size) % h:
        raise RenderError(f"{w}x{h} cannot be resized to height {target_size} keeping its aspect")
    out_w = w * target_size // h
    if target_size == h:
        return RasterImage(image.pixels.copy(), image.view, image.mode)
    return RasterImage(_area_resample(image.pixels, target_size, out_w), image.view, image.mode)


def stitch_tu(top: RasterImage, under: RasterImage) -> RasterImage:
    """Top on the left, Under on the right."""
    if top.view != "T" or under.view != "U":
        raise RenderError("stitch_tu expects a T and a U image")
    if top.pixels.shape != under.pixels.shape or top.mode != under.mode:
        raise RenderError("T and U images differ in size or color mode")
    return RasterImage(np.concatenate([top.pixels, under.pixels], axis=1), "TU", top.mode)


def split_tu(tu: RasterImage) -> tuple[RasterImage, RasterImage]:
    if tu.view != "TU":
        raise RenderError("split_tu expects a TU image")
    h = tu.height
    return (RasterImage(tu.pixels[:, :h], "T", tu.mode), RasterImage(tu.pixels[:, h:], "U", tu.mode))


def stretch_stu(tu: RasterImage) -> RasterImage:
    """Squeeze a TU image horizontally by two into a square STU image."""
    if tu.view != "TU" or tu.width != 2 * tu.height:
        raise RenderError("stretch_stu expects a TU image twice as wide as high")
    out = _area_resample(tu.pixels, tu.height, tu.height)
    return RasterImage(out, "STU", tu.mode)


def background_fraction(image: RasterImage) -> float:
    px = image.pixels if image.pixels.ndim == 2 else image.pixels.max(axis=2)
    return float(np.mean(px == 0))
