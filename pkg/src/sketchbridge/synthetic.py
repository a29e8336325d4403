"""Procedural desk-scale data: stroke textures and pencil-style face sketches.

Nothing here depends on external datasets; every generator is a pure
function of its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import Image, Landmarks
from .networks import StrokeLabel

TEXTURES = ("constant", "horizontal", "vertical", "diagonal", "dots", "checker", "noise")
BACKGROUND = len(StrokeLabel)


def texture_patch(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    bg = rng.uniform(0.7, 1.0)
    ink = bg - rng.uniform(0.35, 0.65)
    r, c = np.mgrid[0:size, 0:size]
    period = int(rng.integers(4, 9))
    thick = int(rng.integers(1, 3))
    phase = int(rng.integers(0, period))
    if kind == "constant":
        return np.full((size, size), bg)
    if kind == "horizontal":
        on = (r + phase) % period < thick
    elif kind == "vertical":
        on = (c + phase) % period < thick
    elif kind == "diagonal":
        t = r + c if rng.random() < 0.5 else r - c
        on = (t + phase) % period < thick
    elif kind == "dots":
        pc = int(rng.integers(0, period))
        on = ((r + phase) % period < 2) & ((c + pc) % period < 2)
    elif kind == "checker":
        block = int(rng.integers(2, 7))
        on = ((r + phase) // block + (c + phase) // block) % 2 == 0
    elif kind == "noise":
        return np.clip(rng.uniform(ink, bg, size=(size, size)), 0.0, 1.0)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    px = np.where(on, ink, bg) + rng.normal(0.0, 0.02, size=(size, size))
    return np.clip(px, 0.0, 1.0)


def texture_dataset(patch_size: int, per_class: int, seed: int):
    """Shuffled list of (Image, class index) over the seven texture kinds."""
    rng = np.random.default_rng(seed)
    items = [(Image(texture_patch(kind, patch_size, rng), "sketch"), label)
             for label, kind in enumerate(TEXTURES) for _ in range(per_class)]
    order = rng.permutation(len(items))
    return [items[i] for i in order]


@dataclass(frozen=True)
class FaceSample:
    sketch: Image
    mask: np.ndarray
    landmarks: Landmarks
    identity: int


def _ellipse(r, c, cr, cc, hr, hc):
    return ((r - cr) / hr) ** 2 + ((c - cc) / hc) ** 2


def _hatch(r, c, angle, period, rng):
    t = r * np.cos(angle) + c * np.sin(angle) + rng.uniform(0, period)
    return (t % period) < 1.0


def synthetic_face(identity: int, variant: int, size: int = 64) -> FaceSample:
    """A pencil-style frontal face with its region mask and eye landmarks.

    ``identity`` fixes the face geometry and stroke style, ``variant`` adds
    pose jitter and fresh stroke noise, so several variants of one identity
    look like different drawings of the same person.
    """
    ident = np.random.default_rng([identity, 7919])
    rng = np.random.default_rng([identity, variant, 104729])
    s = float(size)
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)

    face_hr = s * ident.uniform(0.30, 0.38)
    face_hc = s * ident.uniform(0.22, 0.30)
    cr = s * 0.52 + rng.normal(0, s * 0.01)
    cc = s * 0.50 + rng.normal(0, s * 0.01)
    eye_dx = s * ident.uniform(0.10, 0.15)
    eye_row = cr - face_hr * ident.uniform(0.15, 0.30)
    hair_angle = ident.uniform(-0.6, 0.6)
    hair_tone = ident.uniform(0.15, 0.45)
    skin_tone = ident.uniform(0.80, 0.95)

    px = np.ones((size, size))
    mask = np.full((size, size), BACKGROUND, dtype=np.int64)

    face = _ellipse(r, c, cr, cc, face_hr, face_hc)
    inside = face < 1.0
    mask[inside] = StrokeLabel.skin.value
    skin = np.where(_hatch(r, c, 0.8, 5.0, rng), skin_tone - 0.12, skin_tone)
    px[inside] = skin[inside]

    for side in (-1, 1):
        ear = _ellipse(r, c, cr, cc + side * face_hc * 1.02, face_hr * 0.18, face_hc * 0.12) < 1.0
        ear &= ~inside
        mask[ear] = StrokeLabel.ear.value
        px[ear] = skin_tone - 0.2

    hair = (_ellipse(r, c, cr - face_hr * 0.25, cc, face_hr * 1.0, face_hc * 1.25) < 1.0)
    hair &= (r < cr - face_hr * 0.45) | ((~inside) & (r < cr))
    hair &= mask != StrokeLabel.ear.value
    mask[hair] = StrokeLabel.hair.value
    strokes = _hatch(r, c, hair_angle, 3.0, rng) | _hatch(r, c, hair_angle + 0.15, 4.0, rng)
    px[hair] = np.where(strokes, hair_tone, hair_tone + 0.3)[hair]

    rim = (np.abs(np.sqrt(face) - 1.0) < 1.5 / min(face_hr, face_hc)) & ~hair
    mask[rim] = StrokeLabel.boundary.value
    px[rim] = 0.25

    eyes = []
    for side in (-1, 1):
        ec = cc + side * eye_dx + rng.normal(0, s * 0.005)
        er = eye_row + rng.normal(0, s * 0.005)
        eyes.append((er, ec))
        eye = _ellipse(r, c, er, ec, s * 0.025, s * 0.055) < 1.0
        mask[eye] = StrokeLabel.eye.value
        px[eye] = np.where(_ellipse(r, c, er, ec, s * 0.02, s * 0.02) < 1.0, 0.1, 0.6)[eye]
        brow = (np.abs(r - (er - s * 0.06) + 0.15 * np.abs(c - ec)) < s * 0.012)
        brow &= np.abs(c - ec) < s * 0.07
        mask[brow] = StrokeLabel.eye_brow.value
        px[brow] = 0.3

    mouth_r = cr + face_hr * ident.uniform(0.45, 0.6)
    lips = _ellipse(r, c, mouth_r, cc, s * 0.025, face_hc * 0.35) < 1.0
    mask[lips] = StrokeLabel.clips.value
    px[lips] = 0.45

    px = np.clip(px + rng.normal(0, 0.015, size=px.shape), 0.0, 1.0)
    (lr, lc), (rr, rc) = sorted(eyes, key=lambda e: e[1])
    return FaceSample(Image(px, "sketch"), mask, Landmarks((lr, lc), (rr, rc)), identity)


def face_corpus(n_identities: int, per_identity: int, size: int = 64, seed: int = 0):
    """Faces with source ids of the form ``id{identity:03d}_{variant:02d}``."""
    out = []
    for i in range(n_identities):
        for v in range(per_identity):
            out.append((f"id{i:03d}_{v:02d}", synthetic_face(seed * 1000 + i, v, size)))
    return out


def synthetic_photo(identity: int, variant: int, size: int = 64) -> Image:
    """A smooth-shaded RGB stand-in for a face photo of the same geometry."""
    sample = synthetic_face(identity, variant, size)
    base = sample.sketch.pixels
    smooth = ndimage.gaussian_filter(base, 1.5)
    tint = np.array([1.0, 0.9, 0.8])
    return Image(np.clip(smooth[..., None] * tint, 0.0, 1.0), "photo")
