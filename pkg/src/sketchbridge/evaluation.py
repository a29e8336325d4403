"""Inference G(F(x)) and the evaluation metrics: patch-FID, a Scoot-style
structure/texture similarity, and Fisherface identity accuracy."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np
import scipy.linalg
import torch

from .errors import (
    BadShape,
    DimensionMismatch,
    EmptySet,
    PatchTooLarge,
    ShapeMismatch,
    TooFewIdentities,
    UnknownProbeId,
)
from .imaging import Image, from_tensor, to_tensor
from .line_drawing import LineDrawingOperator, line_draw
from .networks import ModelBundle, PerceptualExtractor, PerceptualSpec

log = logging.getLogger(__name__)

FID_JITTER = 1e-6


# --- inference ---------------------------------------------------------------


def infer(bundle: ModelBundle, op: LineDrawingOperator, x: Image):
    """Return ``(line, sketch)`` with ``line = F(x)`` and ``sketch = G(line)``.

    Applied to a real sketch this is the reconstruction G(F(y)).
    """
    side = bundle.profile.image_size
    if x.shape != (side, side):
        raise BadShape(f"profile {bundle.profile.name} expects {side}x{side}, got {x.shape}")
    line = line_draw(op, x)
    G = bundle.G
    was_training = G.training
    G.eval()
    try:
        dtype = next(G.parameters()).dtype
        with torch.no_grad():
            out = G(to_tensor(line, dtype))
    finally:
        G.train(was_training)
    return line, from_tensor(out, "sketch")


# --- patch sampling and embedding -------------------------------------------


@dataclass(frozen=True)
class PatchSampleConfig:
    n_patches: int = 10_000
    patch_size: int = 256
    seed: int = 0

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def patch_offsets(shapes, cfg: PatchSampleConfig):
    """Yield ``(image index, top, left)``: image uniform, then offset uniform."""
    p = cfg.patch_size
    for i, (h, w) in enumerate(shapes):
        if h < p or w < p:
            raise PatchTooLarge(f"image {i} is {h}x{w}, smaller than patch {p}")
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.n_patches):
        i = int(rng.integers(len(shapes)))
        h, w = shapes[i]
        yield i, int(rng.integers(h - p + 1)), int(rng.integers(w - p + 1))


def sample_patches(images, cfg: PatchSampleConfig) -> list:
    images = list(images)
    if not images:
        raise EmptySet("no images to sample from")
    p = cfg.patch_size
    return [images[i].with_pixels(images[i].pixels[t:t + p, l:l + p])
            for i, t, l in patch_offsets([im.shape for im in images], cfg)]


@dataclass(eq=False)
class FeatureEmbedder:
    """Patch -> vector map used for FID.

    ``bundled_fixed`` is a frozen fixed-seed conv stack whose spatially
    averaged activations at four depths are concatenated (176 dims).  Use
    ``external`` with ``fn`` (batch tensor -> (B, D) array) to plug in a large
    pretrained network; FIDs are only comparable under the same embedder.
    """

    kind: str = "bundled_fixed"
    fn: Callable | None = None
    seed: int = 7
    name: str = ""
    _net: torch.nn.Module | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind == "bundled_fixed":
            self._net = PerceptualExtractor(PerceptualSpec(seed=self.seed))
        elif self.kind != "external" or self.fn is None:
            raise ValueError("external embedders need fn")

    @property
    def output_dim(self) -> int:
        if self.kind == "bundled_fixed":
            return sum(self._net.spec.widths)
        return int(self.embed_tensor(torch.ones(1, 1, 64, 64)).shape[1])

    def fingerprint(self) -> str:
        desc = {"kind": self.kind, "seed": self.seed, "name": self.name or
                getattr(self.fn, "__qualname__", "")}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]

    def embed_tensor(self, x: torch.Tensor) -> np.ndarray:
        if self.kind == "external":
            return np.asarray(self.fn(x), dtype=np.float64)
        with torch.no_grad():
            feats = self._net(x)
        return torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1).double().numpy()

    def embed(self, images, batch: int = 64) -> np.ndarray:
        images = list(images)
        out = []
        for i in range(0, len(images), batch):
            x = torch.cat([to_tensor(im if im.channels == 1 else im.with_pixels(im.gray()))
                           for im in images[i:i + batch]])
            out.append(self.embed_tensor(x))
        return np.concatenate(out) if out else np.zeros((0, self.output_dim))


def embed_patches(images, cfg: PatchSampleConfig, embedder: FeatureEmbedder,
                  batch: int = 64) -> np.ndarray:
    """Sample-and-embed in chunks so 10k large patches never sit in memory."""
    images = list(images)
    if not images:
        raise EmptySet("no images to sample from")
    dim = embedder.output_dim
    if cfg.n_patches < 2 * dim:
        warnings.warn(f"{cfg.n_patches} patches for {dim}-dim features: covariance is "
                      "poorly conditioned (recommend >= 2x the dimension)", stacklevel=2)
    p = cfg.patch_size
    out, chunk = [], []
    for i, t, l in patch_offsets([im.shape for im in images], cfg):
        chunk.append(images[i].with_pixels(images[i].pixels[t:t + p, l:l + p]))
        if len(chunk) == batch:
            out.append(embedder.embed(chunk, batch))
            chunk = []
    if chunk:
        out.append(embedder.embed(chunk, batch))
    return np.concatenate(out)


# --- FID ---------------------------------------------------------------------


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = scipy.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _gaussian_fit(feats: np.ndarray):
    mu = feats.mean(axis=0)
    if len(feats) > 1:
        cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
    else:
        cov = np.zeros((feats.shape[1], feats.shape[1]))
    return mu, cov + FID_JITTER * np.eye(len(mu))


def fid(feats_a, feats_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Both covariance square roots come from symmetric eigendecompositions with
    negative round-off eigenvalues clamped to zero.  The cross term
    Tr((S1 S2)^1/2) is then the sum of singular values of S1^1/2 S2^1/2, which
    avoids squaring the spectrum (small jitter-level eigenvalues survive).
    """
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise EmptySet("fid needs two nonempty feature sets")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"feature dims {a.shape[1]} vs {b.shape[1]}")
    mu_a, cov_a = _gaussian_fit(a)
    mu_b, cov_b = _gaussian_fit(b)
    tr_root = np.linalg.svd(_psd_sqrt(cov_a) @ _psd_sqrt(cov_b), compute_uv=False).sum()
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_root
    return float(max(value, 0.0))


# --- Scoot-style similarity --------------------------------------------------


def _block_stats(gray: np.ndarray, grid: int, bins: int):
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bin_idx = np.minimum((theta / np.pi * bins).astype(int), bins - 1)
    rows = np.array_split(np.arange(gray.shape[0]), grid)
    cols = np.array_split(np.arange(gray.shape[1]), grid)
    stats = []
    for r in rows:
        for c in cols:
            block = gray[np.ix_(r, c)]
            m = mag[np.ix_(r, c)].ravel()
            hist = np.bincount(bin_idx[np.ix_(r, c)].ravel(), weights=m, minlength=bins)
            total = hist.sum()
            hist = hist / total if total > 1e-12 else np.zeros(bins)
            stats.append((block.mean(), np.sqrt(block.var()), hist))
    return stats


def _weighted_jaccard(ha, hb) -> float:
    top = np.maximum(ha, hb).sum()
    if top == 0.0:
        return 1.0
    return float(np.minimum(ha, hb).sum() / top)


def scoot(a: Image, b: Image, grid: int = 4, bins: int = 8, c: float = 1e-4) -> float:
    """Simplified structure/texture similarity in [0, 1].

    Both images are cut into a ``grid`` x ``grid`` block partition.  Per block
    the similarity is the product of a tone term ``1 - |mean_a - mean_b|``, a
    contrast term ``(2 sd_a sd_b + c) / (sd_a^2 + sd_b^2 + c)`` and the
    weighted-Jaccard overlap of magnitude-weighted gradient-orientation
    histograms (``bins`` bins over [0, pi)).  The score is the block mean, so
    ``scoot(a, a) == 1`` exactly.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"scoot on {a.shape} vs {b.shape}")
    sa = _block_stats(a.gray(), grid, bins)
    sb = _block_stats(b.gray(), grid, bins)
    sims = []
    for (ma, da, ha), (mb, db, hb) in zip(sa, sb):
        tone = 1.0 - abs(ma - mb)
        contrast = (2.0 * da * db + c) / (da * da + db * db + c)
        sims.append(tone * contrast * _weighted_jaccard(ha, hb))
    return float(np.clip(np.mean(sims), 0.0, 1.0))


# --- Fisherface --------------------------------------------------------------


def _flatten(items):
    return np.stack([im.gray().ravel() for im, _ in items])


def fisherface_projection(X: np.ndarray, ids):
    """Fit PCA to (n - c) dims then LDA to (c - 1); returns (mean, W)."""
    ids = np.asarray(ids)
    classes = np.unique(ids)
    n, c = len(X), len(classes)
    if c < 2:
        raise TooFewIdentities(f"need >= 2 identities, got {c}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    rank = int((s > s.max() * 1e-10).sum()) if s.size else 0
    k = min(n - c, rank)
    if k < 1:
        raise TooFewIdentities(f"{n} gallery images for {c} identities leave no PCA dims")
    w_pca = vt[:k].T
    P = Xc @ w_pca
    sw = np.zeros((k, k))
    sb = np.zeros((k, k))
    for cls in classes:
        Pc = P[ids == cls]
        mc = Pc.mean(axis=0)
        sw += (Pc - mc).T @ (Pc - mc)
        sb += len(Pc) * np.outer(mc, mc)
    sw += np.eye(k) * 1e-10 * max(np.trace(sw) / k, 1e-300)
    vals, vecs = scipy.linalg.eigh(sb, sw)
    keep = min(c - 1, k)
    w_lda = vecs[:, np.argsort(vals)[::-1][:keep]]
    return mean, w_pca @ w_lda


def fisherface_acc(gallery, probes) -> float:
    """Nearest-neighbour identification rate of probes against the gallery."""
    gallery, probes = list(gallery), list(probes)
    if not probes:
        raise EmptySet("no probes")
    g_ids = [i for _, i in gallery]
    known = set(g_ids)
    for _, pid in probes:
        if pid not in known:
            raise UnknownProbeId(f"probe identity {pid!r} not in the gallery")
    mean, W = fisherface_projection(_flatten(gallery), g_ids)
    G = (_flatten(gallery) - mean) @ W
    Q = (_flatten(probes) - mean) @ W
    d2 = ((Q[:, None, :] - G[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    hits = [g_ids[j] == pid for j, (_, pid) in zip(nearest, probes)]
    return float(np.mean(hits))


# --- reports and ablation ----------------------------------------------------


REPORT_SCHEMA = {
    "type": "object",
    "required": ["fid", "sample_config", "embedder_fingerprint"],
    "properties": {
        "fid": {"type": ["number", "null"], "minimum": 0},
        "scoot": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "acc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "sample_config": {
            "type": "object",
            "required": ["n_patches", "patch_size", "seed"],
            "properties": {
                "n_patches": {"type": "integer", "minimum": 1},
                "patch_size": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "sample_fingerprint": {"type": "string"},
        "embedder_fingerprint": {"type": "string"},
    },
}


@dataclass
class MetricsReport:
    fid: float | None
    sample_config: PatchSampleConfig
    embedder_fingerprint: str
    scoot: float | None = None
    acc: float | None = None

    def to_dict(self) -> dict:
        return {"fid": self.fid, "scoot": self.scoot, "acc": self.acc,
                "sample_config": asdict(self.sample_config),
                "sample_fingerprint": self.sample_config.fingerprint(),
                "embedder_fingerprint": self.embedder_fingerprint}

    def write(self, path) -> None:
        data = self.to_dict()
        jsonschema.validate(data, REPORT_SCHEMA)
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def validate_report(data: dict) -> None:
    jsonschema.validate(data, REPORT_SCHEMA)


def default_identity(source_id: str) -> str:
    return source_id.split("_")[0]


def evaluate_images(reals, fakes, metrics=("fid", "scoot", "acc"),
                    sample_cfg: PatchSampleConfig = PatchSampleConfig(),
                    embedder: FeatureEmbedder | None = None, ids=None) -> MetricsReport:
    """Score generated images against their real counterparts (paired by index).

    Recognition convention: the real images form the gallery and the
    generated ones are the probes, both labelled by ``ids``.
    """
    embedder = embedder or FeatureEmbedder()
    reals, fakes = list(reals), list(fakes)
    value_fid = value_scoot = value_acc = None
    if "fid" in metrics:
        value_fid = fid(embed_patches(reals, sample_cfg, embedder),
                        embed_patches(fakes, sample_cfg, embedder))
    if "scoot" in metrics:
        if len(reals) != len(fakes):
            raise ShapeMismatch("scoot needs the same number of real and fake images")
        value_scoot = float(np.mean([scoot(r, f) for r, f in zip(reals, fakes)]))
    if "acc" in metrics:
        if ids is None:
            raise ValueError("recognition accuracy needs identities")
        try:
            value_acc = fisherface_acc(list(zip(reals, ids)), list(zip(fakes, ids)))
        except TooFewIdentities as exc:
            log.warning("skipping recognition accuracy: %s", exc)
    return MetricsReport(value_fid, sample_cfg, embedder.fingerprint(), value_scoot, value_acc)


def evaluate_reconstruction(bundle: ModelBundle, op: LineDrawingOperator, pairs,
                            sample_cfg: PatchSampleConfig, embedder=None,
                            identity_of=default_identity) -> MetricsReport:
    reals = [p.y for p in pairs]
    fakes = [infer(bundle, op, y)[1] for y in reals]
    ids = [identity_of(p.source_id) for p in pairs]
    return evaluate_images(reals, fakes, sample_cfg=sample_cfg, embedder=embedder, ids=ids)


VARIANTS = {"full": {}, "no_stroke": {"lambda_str": 0.0}}


@dataclass
class AblationRow:
    variant: str
    config: dict
    data_fingerprint: str
    report: MetricsReport

    def to_dict(self) -> dict:
        return {"variant": self.variant, "config": self.config,
                "data_fingerprint": self.data_fingerprint, "report": self.report.to_dict()}


def run_ablation(train_pairs, held_out_pairs, cfg, psi, out_dir, op: LineDrawingOperator,
                 variants=("full", "no_stroke"), sample_cfg: PatchSampleConfig | None = None,
                 embedder=None, max_steps=None, identity_of=default_identity) -> list:
    """Train each variant from identical seeds/data and evaluate on held-out sketches."""
    from .training import pairs_fingerprint, train

    out_dir = Path(out_dir)
    sample_cfg = sample_cfg or PatchSampleConfig()
    embedder = embedder or FeatureEmbedder()
    data_fp = pairs_fingerprint(train_pairs) + ":" + pairs_fingerprint(held_out_pairs)
    rows = []
    for name in variants:
        vcfg = replace(cfg, **VARIANTS[name])
        bundle = train(train_pairs, vcfg, out_dir / name, psi=psi, max_steps=max_steps,
                       operator=op.describe())
        report = evaluate_reconstruction(bundle, op, held_out_pairs, sample_cfg, embedder,
                                         identity_of)
        rows.append(AblationRow(name, vcfg.as_dict(), data_fp, report))
        log.info("ablation %s: %s", name, report.to_dict())
    (out_dir / "ablation.json").write_text(
        json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True))
    (out_dir / "ablation.md").write_text(format_ablation(rows))
    return rows


def format_ablation(rows) -> str:
    def fmt(v, spec):
        return "n/a" if v is None else format(v, spec)

    lines = ["| variant | lambda_str | FID | Scoot | Acc. |", "|---|---|---|---|---|"]
    for r in rows:
        m = r.report
        lines.append(f"| {r.variant} | {r.config['lambda_str']} | {fmt(m.fid, '.3f')} | "
                     f"{fmt(m.scoot, '.3f')} | {fmt(m.acc, '.3f')} |")
    return "\n".join(lines) + "\n"


def split_pairs(pairs, held_out_fraction: float = 0.2, seed: int = 0):
    """Deterministic (train, held_out) split of a pair list."""
    pairs = list(pairs)
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_held = max(1, int(round(len(pairs) * held_out_fraction)))
    if n_held >= len(pairs):
        raise EmptySet(f"{len(pairs)} pairs leave nothing to train on")
    held = sorted(order[:n_held])
    train = sorted(order[n_held:])
    return [pairs[i] for i in train], [pairs[i] for i in held]
