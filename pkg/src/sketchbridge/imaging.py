"""Image container, PNG/landmark I/O, eye alignment and training augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from scipy import ndimage

from .errors import (
    BadConfig,
    BadShape,
    CoincidentLandmarks,
    InvalidImage,
    OddDimensions,
    OutOfBounds,
)

DOMAINS = ("photo", "sketch", "line_drawing")
MIN_SIDE = 8
WHITE = 1.0


@dataclass(frozen=True, eq=False)
class Image:
    """A grayscale (H, W) or RGB (H, W, 3) grid of intensities in [0, 1].

    The pixel array is copied on construction and made read-only, so an
    ``Image`` can be shared freely between threads.
    """

    pixels: np.ndarray
    domain_tag: str

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[..., 0]
        if not (px.ndim == 2 or (px.ndim == 3 and px.shape[2] == 3)):
            raise InvalidImage(f"expected (H, W) or (H, W, 3) pixels, got {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise InvalidImage(f"image sides must be >= {MIN_SIDE}, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidImage("intensities must lie in [0, 1]")
        if self.domain_tag not in DOMAINS:
            raise InvalidImage(f"unknown domain tag {self.domain_tag!r}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    @property
    def shape(self):
        return self.pixels.shape[:2]

    def with_pixels(self, pixels, domain_tag=None) -> "Image":
        return Image(pixels, domain_tag or self.domain_tag)

    def gray(self) -> np.ndarray:
        """Luma (ITU-R 601) for RGB images, the pixels themselves otherwise."""
        if self.channels == 1:
            return self.pixels
        return self.pixels @ np.array([0.299, 0.587, 0.114])

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.domain_tag == other.domain_tag and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def to_tensor(image: Image, dtype=torch.float32) -> torch.Tensor:
    """Image -> (1, C, H, W) tensor."""
    px = image.pixels
    if px.ndim == 2:
        px = px[None]
    else:
        px = px.transpose(2, 0, 1)
    return torch.from_numpy(np.array(px)).to(dtype).unsqueeze(0)


def from_tensor(t: torch.Tensor, domain_tag: str) -> Image:
    """(1, C, H, W) or (C, H, W) tensor -> Image; values are clamped to [0, 1]."""
    t = t.detach()
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise BadShape(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    px = t.double().clamp(0.0, 1.0).cpu().numpy()
    px = px[0] if px.shape[0] == 1 else px.transpose(1, 2, 0)
    return Image(px, domain_tag)


def read_png(path, domain_tag: str) -> Image:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK", "YCbCr") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return Image(arr, domain_tag)


def write_png(image: Image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.rint(image.pixels * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path)
    return path


# --- alignment ---------------------------------------------------------------


@dataclass(frozen=True)
class Landmarks:
    left_eye: tuple
    right_eye: tuple

    def __post_init__(self):
        le = tuple(float(v) for v in self.left_eye)
        re = tuple(float(v) for v in self.right_eye)
        if len(le) != 2 or len(re) != 2:
            raise InvalidImage("landmarks are (row, col) pairs")
        if le == re:
            raise CoincidentLandmarks(f"eye centers coincide at {le}")
        object.__setattr__(self, "left_eye", le)
        object.__setattr__(self, "right_eye", re)

    def check_inside(self, height: int, width: int) -> None:
        for name, (r, c) in (("left_eye", self.left_eye), ("right_eye", self.right_eye)):
            if not (0.0 <= r <= height - 1 and 0.0 <= c <= width - 1):
                raise OutOfBounds(f"{name} {(r, c)} outside a {height}x{width} image")


def load_landmarks(path) -> Landmarks:
    with open(path) as fh:
        data = json.load(fh)
    return Landmarks(tuple(data["left_eye"]), tuple(data["right_eye"]))


def save_landmarks(lm: Landmarks, path) -> None:
    with open(path, "w") as fh:
        json.dump({"left_eye": list(lm.left_eye), "right_eye": list(lm.right_eye)}, fh)


class SimilarityTransform(NamedTuple):
    """w = scale_rot * u + shift, with points encoded as u = col + 1j * row."""

    scale_rot: complex
    shift: complex

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        w = self.scale_rot * (pts[:, 1] + 1j * pts[:, 0]) + self.shift
        return np.stack([w.imag, w.real], axis=1)

    def inverse(self) -> "SimilarityTransform":
        inv = 1.0 / self.scale_rot
        return SimilarityTransform(inv, -self.shift * inv)


def canonical_eyes(out_size: int, eye_row=0.4, eye_cols=(0.3, 0.7)):
    return ((eye_row * out_size, eye_cols[0] * out_size),
            (eye_row * out_size, eye_cols[1] * out_size))


def eye_alignment_transform(lm: Landmarks, out_size: int, eye_row=0.4,
                            eye_cols=(0.3, 0.7)) -> SimilarityTransform:
    """Similarity transform taking the landmark eyes to their canonical spots."""
    (r1, c1), (r2, c2) = lm.left_eye, lm.right_eye
    u1, u2 = complex(c1, r1), complex(c2, r2)
    (cr1, cc1), (cr2, cc2) = canonical_eyes(out_size, eye_row, eye_cols)
    w1, w2 = complex(cc1, cr1), complex(cc2, cr2)
    a = (w2 - w1) / (u2 - u1)
    return SimilarityTransform(a, w1 - a * u1)


def align_face(image: Image, lm: Landmarks, out_size: int, eye_row=0.4,
               eye_cols=(0.3, 0.7)) -> Image:
    if out_size < MIN_SIDE:
        raise BadShape(f"out_size must be >= {MIN_SIDE}")
    lm.check_inside(image.height, image.width)
    inv = eye_alignment_transform(lm, out_size, eye_row, eye_cols).inverse()
    rows, cols = np.mgrid[0:out_size, 0:out_size].astype(np.float64)
    src = inv.apply(np.stack([rows.ravel(), cols.ravel()], axis=1))
    coords = src.T.reshape(2, out_size, out_size)

    def warp(channel):
        out = ndimage.map_coordinates(channel, coords, order=1, mode="constant", cval=WHITE)
        return np.clip(out, 0.0, 1.0)

    px = image.pixels
    if px.ndim == 2:
        out = warp(px)
    else:
        out = np.stack([warp(px[..., c]) for c in range(px.shape[2])], axis=-1)
    return image.with_pixels(out)


# --- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    resize_to: int = 542
    crop_to: int = 512
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.resize_to <= 0 or self.crop_to <= 0:
            raise BadConfig("augmentation sizes must be positive")
        if self.crop_to > self.resize_to:
            raise BadConfig(f"crop_to={self.crop_to} exceeds resize_to={self.resize_to}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise BadConfig("hflip_prob must lie in [0, 1]")


class AugmentParams(NamedTuple):
    top: int
    left: int
    flip: bool


def draw_augment_params(cfg: AugmentConfig, draw) -> AugmentParams:
    """Consume exactly three draws: row offset, column offset, flip coin."""
    span = cfg.resize_to - cfg.crop_to + 1
    top = int(draw.integers(0, span))
    left = int(draw.integers(0, span))
    flip = bool(draw.random() < cfg.hflip_prob)
    return AugmentParams(top, left, flip)


def resize_bilinear(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape[0] == size and pixels.shape[1] == size:
        return pixels
    t = torch.from_numpy(np.array(pixels))
    t = t[None, None] if t.dim() == 2 else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0]
    out = out[0] if pixels.ndim == 2 else out.permute(1, 2, 0)
    return np.clip(out.numpy(), 0.0, 1.0)


def apply_augment(image: Image, cfg: AugmentConfig, params: AugmentParams) -> Image:
    if image.height != image.width:
        raise BadShape(f"augment expects a square image, got {image.shape}")
    if image.height < cfg.crop_to:
        raise BadShape(f"image side {image.height} smaller than crop_to={cfg.crop_to}")
    px = resize_bilinear(image.pixels, cfg.resize_to)
    px = px[params.top:params.top + cfg.crop_to, params.left:params.left + cfg.crop_to]
    if params.flip:
        px = px[:, ::-1]
    return image.with_pixels(px)


def augment(image: Image, cfg: AugmentConfig, draw=None) -> Image:
    """Rescale, random-crop and maybe mirror one image.

    ``draw`` is anything with numpy ``Generator``-style ``integers`` and
    ``random`` methods; when omitted a generator seeded from ``cfg.seed`` is
    used, which makes the call a pure function of its arguments.
    """
    if draw is None:
        draw = np.random.default_rng(cfg.seed)
    return apply_augment(image, cfg, draw_augment_params(cfg, draw))


def hflip(image: Image) -> Image:
    return image.with_pixels(image.pixels[:, ::-1])


# --- downsampling ------------------------------------------------------------


def downsample2x(image):
    """2x2 mean pooling for an Image, an ndarray (H, W[, C]) or a tensor (..., H, W)."""
    if isinstance(image, torch.Tensor):
        h, w = image.shape[-2:]
        if h % 2 or w % 2:
            raise OddDimensions(f"cannot halve {h}x{w}")
        lead = image.shape[:-2]
        flat = image.reshape(-1, 1, h, w)
        return F.avg_pool2d(flat, 2).reshape(*lead, h // 2, w // 2)
    if isinstance(image, Image):
        return image.with_pixels(downsample2x(image.pixels))
    px = np.asarray(image, dtype=np.float64)
    h, w = px.shape[:2]
    if h % 2 or w % 2:
        raise OddDimensions(f"cannot halve {h}x{w}")
    blocks = px.reshape(h // 2, 2, w // 2, 2, *px.shape[2:])
    return blocks.mean(axis=(1, 3))
