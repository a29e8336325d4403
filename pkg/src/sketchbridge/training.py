"""Stroke-classifier pretraining and the alternating D/G training loop."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .errors import (
    BadConfig,
    ChecksumMismatch,
    DegenerateDataset,
    EpochOutOfRange,
    NonFiniteLoss,
    ShapeMismatch,
)
from .imaging import AugmentConfig, Image, apply_augment, draw_augment_params, to_tensor
from .losses import LossBreakdown, LossWeights
from .networks import (
    ModelBundle,
    StrokeClassifier,
    StrokeLabel,
    build_bundle,
    freeze,
    get_profile,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "adv_d", "adv_g", "fm", "rec", "stroke", "total_g", "lr")
LOG_NAME = "loss_log.csv"


@dataclass(frozen=True)
class TrainConfig:
    epochs_const: int = 100
    epochs_decay: int = 100
    lr0: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    lambda_fm: float = 100.0
    lambda_rec: float = 10.0
    lambda_str: float = 0.002
    seed: int = 0
    profile: str = "toy_64"
    hflip_prob: float = 0.5
    checkpoint_every: int = 10
    phi_layers: tuple = (0, 1, 2, 3)
    psi_layers: tuple = ("dense", "out")
    stroke_purity: float = 0.7
    stroke_per_class: int = 200
    stroke_epochs: int = 6
    stroke_lr: float = 2e-3
    stroke_batch: int = 32

    def __post_init__(self):
        object.__setattr__(self, "phi_layers", tuple(self.phi_layers))
        object.__setattr__(self, "psi_layers", tuple(self.psi_layers))
        if self.epochs_const < 0 or self.epochs_decay < 0:
            raise BadConfig("epoch counts must be nonnegative")
        if self.lr0 <= 0:
            raise BadConfig("lr0 must be positive")
        if self.batch_size < 1:
            raise BadConfig("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise BadConfig("checkpoint_every must be >= 1")
        if not 0.0 < self.stroke_purity <= 1.0:
            raise BadConfig("stroke_purity must lie in (0, 1]")
        get_profile(self.profile)
        self.weights  # validates the lambdas

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_fm, self.lambda_rec, self.lambda_str)

    @property
    def total_epochs(self) -> int:
        return self.epochs_const + self.epochs_decay

    def as_dict(self) -> dict:
        d = asdict(self)
        d["phi_layers"] = list(self.phi_layers)
        d["psi_layers"] = list(self.psi_layers)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant lr0, then a linear ramp that reaches zero on the final epoch."""
    if not 1 <= epoch <= cfg.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside 1..{cfg.total_epochs}")
    if epoch <= cfg.epochs_const:
        return cfg.lr0
    return cfg.lr0 * (1.0 - (epoch - cfg.epochs_const) / cfg.epochs_decay)


# --- stroke classifier -------------------------------------------------------


@dataclass
class StrokePatchDataset:
    patches: list
    split: str = "train"
    origins: list = field(default_factory=list)

    def labels(self) -> list:
        return [label for _, label in self.patches]

    def __len__(self):
        return len(self.patches)


def window_fractions(mask: np.ndarray, label: int, size: int) -> np.ndarray:
    """Fraction of each size x size window (indexed by top-left) equal to label."""
    hit = (mask == label).astype(np.int64)
    sat = np.zeros((hit.shape[0] + 1, hit.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = hit.cumsum(0).cumsum(1)
    counts = sat[size:, size:] - sat[:-size, size:] - sat[size:, :-size] + sat[:-size, :-size]
    return counts / float(size * size)


def extract_stroke_patches(sketch: Image, mask, patch_size: int, per_class: int, draw,
                           purity: float = 0.7) -> StrokePatchDataset:
    mask = np.asarray(mask)
    if mask.shape != sketch.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs sketch {sketch.shape}")
    gray = sketch.gray()
    patches, origins = [], []
    for label in StrokeLabel:
        frac = window_fractions(mask, label.value, patch_size)
        rows, cols = np.nonzero(frac >= purity)
        if len(rows) == 0:
            log.info("no %dpx window reaches %.0f%% %s", patch_size, purity * 100, label.name)
            continue
        take = draw.choice(len(rows), size=min(per_class, len(rows)), replace=False)
        for i in sorted(take):
            r, c = int(rows[i]), int(cols[i])
            patches.append((Image(gray[r:r + patch_size, c:c + patch_size], "sketch"),
                            label.value))
            origins.append((r, c))
    return StrokePatchDataset(patches, "train", origins)


def _patch_batch(items):
    x = torch.cat([to_tensor(im) for im, _ in items])
    y = torch.tensor([label for _, label in items], dtype=torch.long)
    return x, y


def split_dataset(ds: StrokePatchDataset, held_out_fraction=0.2, seed=0):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_held = max(1, int(round(len(ds) * held_out_fraction)))
    held = [ds.patches[i] for i in order[:n_held]]
    train = [ds.patches[i] for i in order[n_held:]]
    return StrokePatchDataset(train, "train"), StrokePatchDataset(held, "held_out")


def classifier_accuracy(psi: StrokeClassifier, ds: StrokePatchDataset, batch=256) -> float:
    correct = 0
    psi.eval()
    with torch.no_grad():
        for i in range(0, len(ds), batch):
            x, y = _patch_batch(ds.patches[i:i + batch])
            correct += int((psi(x).argmax(1) == y).sum())
    return correct / len(ds)


def train_stroke_classifier(ds: StrokePatchDataset, cfg: TrainConfig,
                            held_out: StrokePatchDataset | None = None):
    """Fit the stroke classifier, freeze it, return ``(psi, held_out_accuracy)``."""
    if len(set(ds.labels())) < 2:
        raise DegenerateDataset("stroke classifier needs at least two classes")
    if held_out is None:
        ds, held_out = split_dataset(ds, seed=cfg.seed)
    size = ds.patches[0][0].height
    spec = replace(get_profile(cfg.profile).stroke, patch_size=size)

    torch.manual_seed(cfg.seed)
    psi = StrokeClassifier(spec)
    opt = torch.optim.Adam(psi.parameters(), lr=cfg.stroke_lr)
    x_all, y_all = _patch_batch(ds.patches)
    gen = torch.Generator().manual_seed(cfg.seed)
    n_steps = cfg.stroke_epochs * math.ceil(len(ds) / cfg.stroke_batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(n_steps, 1))
    psi.train()
    for epoch in range(cfg.stroke_epochs):
        order = torch.randperm(len(ds), generator=gen)
        running = 0.0
        for i in range(0, len(ds), cfg.stroke_batch):
            idx = order[i:i + cfg.stroke_batch]
            loss = F.cross_entropy(psi(x_all[idx]), y_all[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(idx)
        log.info("stroke net epoch %d: loss %.4f", epoch + 1, running / len(ds))
    freeze(psi)
    acc = classifier_accuracy(psi, held_out)
    log.info("stroke net held-out accuracy %.4f over %d patches", acc, len(held_out))
    return psi, acc


# --- GAN training ------------------------------------------------------------


def _stack(images) -> torch.Tensor:
    return torch.cat([to_tensor(im if im.channels == 1 else im.with_pixels(im.gray()))
                      for im in images])


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(values: dict):
    for name, v in values.items():
        if not losses.is_finite(v):
            raise NonFiniteLoss(name, values)


def discriminator_step(bundle: ModelBundle, z, y_real, y_fake) -> float:
    bundle.D.requires_grad_(True)
    loss = losses.adv_loss_d(bundle.D, z, y_real, y_fake.detach())
    _check_finite({"adv_d": loss.item()})
    bundle.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    bundle.opt_d.step()
    return loss.item()


def generator_losses(bundle: ModelBundle, z, y_real, y_fake, cfg: TrainConfig) -> dict:
    outputs = bundle.D(z, y_fake)
    parts = {
        "adv_g": losses.adv_g_from_scores(losses.scale_scores(outputs)),
        "fm": losses.fm_loss(bundle.D, z, y_real, y_fake, fake_outputs=outputs),
        "rec": losses.rec_loss(bundle.phi, y_real, y_fake, cfg.phi_layers),
    }
    if bundle.psi is not None:
        parts["stroke"] = losses.stroke_loss(bundle.psi, y_real, y_fake, cfg.psi_layers)
    else:
        parts["stroke"] = torch.zeros((), dtype=y_fake.dtype)
    return parts


def generator_step(bundle: ModelBundle, z, y_real, y_fake, cfg: TrainConfig) -> dict:
    bundle.D.requires_grad_(False)
    try:
        parts = generator_losses(bundle, z, y_real, y_fake, cfg)
        total = losses.total_g_loss(parts["adv_g"], parts["fm"], parts["rec"],
                                    parts["stroke"], cfg.weights)
        values = {k: v.item() for k, v in parts.items()}
        _check_finite({**values, "total_g": total.item()})
        bundle.opt_g.zero_grad(set_to_none=True)
        total.backward()
        bundle.opt_g.step()
    finally:
        bundle.D.requires_grad_(True)
    return values


def train_step(bundle: ModelBundle, batch, cfg: TrainConfig, epoch: int = 1) -> LossBreakdown:
    """One D update on the detached fake, then one G update on the combined loss."""
    lr = lr_at(epoch, cfg)
    _set_lr(bundle.opt_g, lr)
    _set_lr(bundle.opt_d, lr)
    z = _stack([p.z for p in batch])
    y = _stack([p.y for p in batch])
    bundle.G.train()
    fake = bundle.G(z)
    adv_d = discriminator_step(bundle, z, y, fake)
    parts = generator_step(bundle, z, y, fake, cfg)
    return LossBreakdown(adv_d, parts["adv_g"], parts["fm"], parts["rec"], parts["stroke"],
                         cfg.weights)


def pairs_fingerprint(pairs) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.source_id.encode())
        h.update(p.operator_fingerprint.encode())
        h.update(np.ascontiguousarray(p.z.pixels).tobytes())
        h.update(np.ascontiguousarray(p.y.pixels).tobytes())
    return h.hexdigest()[:16]


def checkpoint_path(directory, epoch: int) -> Path:
    return Path(directory) / f"checkpoint_{epoch:04d}.pt"


def latest_checkpoint(directory) -> Path | None:
    found = sorted(Path(directory).glob("checkpoint_*.pt"))
    return found[-1] if found else None


def _format_row(epoch, step, b: LossBreakdown, lr) -> list:
    vals = [b.adv_d, b.adv_g, b.fm, b.rec, b.stroke, b.total_g, lr]
    return [str(epoch), str(step)] + [repr(float(v)) for v in vals]


def read_loss_log(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _restart_log(path: Path, keep_through_epoch: int):
    rows = []
    if path.exists():
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            rows = [r for r in reader if int(r[0]) <= keep_through_epoch]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        writer.writerows(rows)


def train(pairs, cfg: TrainConfig, checkpoint_dir, psi: StrokeClassifier | None = None,
          resume: bool = False, max_steps: int | None = None, operator: dict | None = None):
    """Run the full schedule; returns the trained ModelBundle.

    Shuffling and augmentation for epoch ``e`` draw from a generator seeded
    with ``(cfg.seed, e)``, so a run resumed from any checkpoint replays the
    remaining epochs exactly.  ``max_steps`` stops early (smoke runs) without
    writing a final checkpoint.
    """
    pairs = list(pairs)
    if not pairs:
        raise DegenerateDataset("no training pairs")
    if cfg.lambda_str > 0 and psi is None and not resume:
        raise BadConfig("lambda_str > 0 needs a trained stroke classifier")
    profile = get_profile(cfg.profile)
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    data_fp = pairs_fingerprint(pairs)
    header_extra = {"config": cfg.as_dict(), "data_fingerprint": data_fp,
                    "operator": operator or {}}

    latest = latest_checkpoint(checkpoint_dir) if resume else None
    if latest is not None:
        bundle, header = load_checkpoint(latest, profile, cfg.lr0, (cfg.beta1, cfg.beta2))
        if header.get("data_fingerprint") != data_fp:
            raise ChecksumMismatch(f"{latest}: training data changed since checkpoint")
        if header.get("config") != cfg.as_dict():
            raise BadConfig(f"{latest}: config differs from the checkpointed run")
        log.info("resuming from %s (epoch %d)", latest, bundle.epoch)
    else:
        bundle = build_bundle(profile, cfg.seed, cfg.lr0, (cfg.beta1, cfg.beta2), psi=psi)

    if cfg.total_epochs == 0:
        return bundle

    log_path = checkpoint_dir / LOG_NAME
    _restart_log(log_path, bundle.epoch)
    aug = AugmentConfig(profile.resize_to, profile.image_size, cfg.hflip_prob, cfg.seed)
    steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    step = bundle.epoch * steps_per_epoch
    torch.use_deterministic_algorithms(True, warn_only=True)

    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for epoch in range(bundle.epoch + 1, cfg.total_epochs + 1):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(pairs))
            lr = lr_at(epoch, cfg)
            for start in range(0, len(pairs), cfg.batch_size):
                batch = []
                for i in order[start:start + cfg.batch_size]:
                    p = pairs[i]
                    params = draw_augment_params(aug, rng)
                    batch.append(replace(p, z=apply_augment(p.z, aug, params),
                                         y=apply_augment(p.y, aug, params)))
                step += 1
                breakdown = train_step(bundle, batch, cfg, epoch)
                writer.writerow(_format_row(epoch, step, breakdown, lr))
                if max_steps is not None and step >= max_steps:
                    fh.flush()
                    return bundle
            fh.flush()
            bundle.epoch = epoch
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.total_epochs:
                save_checkpoint(bundle, checkpoint_path(checkpoint_dir, epoch), header_extra)
                log.info("epoch %d: checkpoint written", epoch)
    return bundle

