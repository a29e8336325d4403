"""The photo/sketch -> line-drawing operator and pseudo-pair construction.

The default operator is an extended difference-of-Gaussians (XDoG-style)
edge stylizer.  Any deterministic callable can be registered as an
``external`` operator in its place.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np
from scipy import ndimage

from .errors import BadShape, StaleFingerprint, UnknownOperator, WrongDomainTag
from .imaging import Image, read_png, write_png

log = logging.getLogger(__name__)

DOG_DEFAULTS = {"sigma": 1.0, "k": 1.6, "threshold": 0.005, "phi": 100.0}
GAUSS_TRUNCATE = 4.0
MANIFEST_NAME = "pairs.jsonl"


@dataclass(frozen=True, eq=False)
class LineDrawingOperator:
    kind: str = "dog_default"
    params: Mapping = field(default_factory=dict)
    fn: Callable | None = None

    def __post_init__(self):
        if self.kind == "dog_default":
            params = {**DOG_DEFAULTS, **dict(self.params)}
            unknown = set(params) - set(DOG_DEFAULTS)
            if unknown:
                raise UnknownOperator(f"unknown dog_default params {sorted(unknown)}")
            params = {k: float(v) for k, v in params.items()}
            if params["sigma"] <= 0 or params["k"] <= 1 or not 0 < params["threshold"] < 1:
                raise UnknownOperator(f"invalid dog_default params {params}")
        elif self.kind == "external":
            if self.fn is None:
                raise UnknownOperator("external operator needs a callable")
            params = dict(self.params)
            params.setdefault("name", getattr(self.fn, "__qualname__", repr(self.fn)))
        else:
            raise UnknownOperator(f"unknown operator kind {self.kind!r}")
        object.__setattr__(self, "params", MappingProxyType(params))

    def fingerprint(self) -> str:
        blob = json.dumps({"kind": self.kind, "params": dict(self.params)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def describe(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    def __call__(self, image: Image) -> Image:
        return line_draw(self, image)


def dog_operator(sigma=1.0, k=1.6, threshold=0.005, phi=100.0) -> LineDrawingOperator:
    return LineDrawingOperator("dog_default", {"sigma": sigma, "k": k,
                                              "threshold": threshold, "phi": phi})


def operator_from_description(desc: Mapping) -> LineDrawingOperator:
    if desc.get("kind") != "dog_default":
        raise UnknownOperator(f"cannot rebuild operator of kind {desc.get('kind')!r}")
    return LineDrawingOperator("dog_default", desc.get("params", {}))


def dog_response(gray: np.ndarray, sigma: float, k: float) -> np.ndarray:
    g1 = ndimage.gaussian_filter(gray, sigma, mode="nearest", truncate=GAUSS_TRUNCATE)
    g2 = ndimage.gaussian_filter(gray, k * sigma, mode="nearest", truncate=GAUSS_TRUNCATE)
    return g1 - g2


def soft_threshold(response: np.ndarray, threshold: float, phi: float) -> np.ndarray:
    """White where the response clears -threshold, a tanh ramp to black below it."""
    below = 1.0 + np.tanh(phi * (response + threshold))
    return np.clip(np.where(response >= -threshold, 1.0, below), 0.0, 1.0)


def line_draw(op: LineDrawingOperator, image: Image) -> Image:
    if not isinstance(op, LineDrawingOperator):
        raise UnknownOperator(f"not a line-drawing operator: {op!r}")
    if op.kind == "dog_default":
        p = op.params
        out = soft_threshold(dog_response(image.gray(), p["sigma"], p["k"]),
                             p["threshold"], p["phi"])
    else:
        out = np.asarray(op.fn(image), dtype=np.float64)
        if out.shape[:2] != image.shape:
            raise BadShape(f"external operator changed size {image.shape} -> {out.shape[:2]}")
    if out.ndim == 3:
        out = Image(out, "photo").gray()
    return Image(out, "line_drawing")


@dataclass(frozen=True, eq=False)
class PseudoPair:
    z: Image
    y: Image
    source_id: str
    operator_fingerprint: str = ""

    def __post_init__(self):
        if self.z.shape != self.y.shape:
            raise BadShape(f"pair {self.source_id}: z {self.z.shape} != y {self.y.shape}")
        if self.z.domain_tag != "line_drawing":
            raise WrongDomainTag(f"pair {self.source_id}: z is {self.z.domain_tag}")
        if self.y.domain_tag != "sketch":
            raise WrongDomainTag(f"pair {self.source_id}: y is {self.y.domain_tag}")

    def check_operator(self, op: LineDrawingOperator) -> None:
        if self.operator_fingerprint != op.fingerprint():
            raise StaleFingerprint(
                f"pair {self.source_id} built with {self.operator_fingerprint}, "
                f"expected {op.fingerprint()}")


def build_pseudo_pairs(op: LineDrawingOperator, sketches, source_ids=None) -> list:
    sketches = list(sketches)
    if source_ids is None:
        source_ids = [f"sketch_{i:04d}" for i in range(len(sketches))]
    for i, y in enumerate(sketches):
        if y.domain_tag != "sketch":
            raise WrongDomainTag(f"input {i} is tagged {y.domain_tag!r}, expected 'sketch'")
    fp = op.fingerprint()
    return [PseudoPair(line_draw(op, y), y, sid, fp) for y, sid in zip(sketches, source_ids)]


# --- manifests ---------------------------------------------------------------


def build_pairs_from_dir(sketch_dir, out_dir, op: LineDrawingOperator) -> Path:
    """Line-draw every PNG in ``sketch_dir``; write lines and a JSON-lines manifest.

    The sketch directory is only read.  Returns the manifest path.
    """
    sketch_dir, out_dir = Path(sketch_dir).resolve(), Path(out_dir)
    files = sorted(sketch_dir.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG sketches in {sketch_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = op.fingerprint()
    records = []
    for path in files:
        y = read_png(path, "sketch")
        z = line_draw(op, y)
        line_rel = Path("lines") / path.name
        write_png(z, out_dir / line_rel)
        records.append({"source_id": path.stem, "sketch_path": str(path),
                        "line_path": str(line_rel), "operator_fingerprint": fp})
    manifest = out_dir / MANIFEST_NAME
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("wrote %d pairs to %s", len(records), manifest)
    return manifest


def read_manifest(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_pseudo_pairs(manifest, op: LineDrawingOperator | None = None) -> list:
    """Load pairs from a manifest; with ``op`` given, reject stale fingerprints."""
    manifest = Path(manifest)
    root = manifest.parent
    pairs = []
    for rec in read_manifest(manifest):
        if op is not None and rec["operator_fingerprint"] != op.fingerprint():
            raise StaleFingerprint(
                f"{rec['source_id']}: manifest fingerprint {rec['operator_fingerprint']} "
                f"!= operator {op.fingerprint()}")
        y = read_png(_resolve(root, rec["sketch_path"]), "sketch")
        z = read_png(_resolve(root, rec["line_path"]), "line_drawing")
        if y.channels == 3:
            y = y.with_pixels(y.gray())
        pairs.append(PseudoPair(z, y, rec["source_id"], rec["operator_fingerprint"]))
    return pairs


def _resolve(root: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else root / p
