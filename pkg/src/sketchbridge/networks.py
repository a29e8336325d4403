"""Generator, multi-scale conditional discriminators, stroke classifier and the
frozen perceptual extractor, plus the bundle/checkpoint plumbing around them."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadConfig, BadShape, ChecksumMismatch, FingerprintMismatch, ShapeMismatch
from .imaging import Image, downsample2x, to_tensor

CHECKPOINT_VERSION = 1
SCORE_EPS = 1e-6


class StrokeLabel(Enum):
    # "clips" is kept verbatim from the original class list; it most likely means lips.
    skin = 0
    hair = 1
    boundary = 2
    eye_brow = 3
    eye = 4
    clips = 5
    ear = 6


N_STROKE_CLASSES = len(StrokeLabel)


def _fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- generator ---------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 64
    n_down: int = 4
    n_resblocks: int = 9
    channel_cap: int = 512
    entry_kernel: int = 7

    def fingerprint(self) -> str:
        return _fingerprint(asdict(self))


def _conv_in_relu(cin, cout, k, stride=1, reflect=True):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2,
                  padding_mode="reflect" if reflect else "zeros", bias=False),
        nn.InstanceNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect", bias=False),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect", bias=False),
            nn.InstanceNorm2d(channels),
        )

    @property
    def last_conv(self) -> nn.Conv2d:
        return self.body[3]

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Entry conv, strided downsampling, residual trunk, transposed upsampling.

    Under the default spec that is 5 convolutions, 9 residual blocks and 5
    transposed convolutions.  Output is tanh remapped to [0, 1].
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        widths = [spec.base_channels]
        for _ in range(spec.n_down):
            widths.append(min(widths[-1] * 2, spec.channel_cap))

        self.entry = _conv_in_relu(spec.in_channels, widths[0], spec.entry_kernel)
        self.down = nn.Sequential(*[
            _conv_in_relu(widths[i], widths[i + 1], 3, stride=2, reflect=False)
            for i in range(spec.n_down)
        ])
        self.res = nn.Sequential(*[ResBlock(widths[-1]) for _ in range(spec.n_resblocks)])
        self.up = nn.Sequential(*[
            nn.Sequential(
                nn.ConvTranspose2d(widths[i + 1], widths[i], 3, stride=2, padding=1,
                                   output_padding=1, bias=False),
                nn.InstanceNorm2d(widths[i]),
                nn.ReLU(inplace=True),
            )
            for i in reversed(range(spec.n_down))
        ])
        self.out = nn.ConvTranspose2d(widths[0], spec.out_channels, spec.entry_kernel,
                                      padding=spec.entry_kernel // 2)

    @property
    def factor(self) -> int:
        return 2 ** self.spec.n_down

    def forward(self, z):
        h, w = z.shape[-2:]
        if h % self.factor or w % self.factor:
            raise BadShape(f"generator input {h}x{w} not divisible by {self.factor}")
        x = self.entry(z)
        x = self.down(x)
        x = self.res(x)
        x = self.up(x)
        return (torch.tanh(self.out(x)) + 1.0) / 2.0


def layer_counts(g: Generator) -> dict:
    """Convolution inventory outside / inside the residual trunk."""
    res_ids = {id(m) for m in g.res.modules()}
    conv = sum(isinstance(m, nn.Conv2d) and id(m) not in res_ids for m in g.modules())
    tconv = sum(isinstance(m, nn.ConvTranspose2d) for m in g.modules())
    return {"conv": conv, "transposed": tconv, "resblocks": len(g.res)}


def generator_forward(G: Generator, z: Image) -> Image:
    from .imaging import from_tensor

    param = next(G.parameters())
    with torch.no_grad():
        out = G(to_tensor(z, param.dtype).to(param.device))
    return from_tensor(out, "sketch")


# --- discriminators ----------------------------------------------------------


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 2
    base_channels: int = 64
    n_layers: int = 5
    n_strided: int = 3
    kernel_size: int = 4
    channel_cap: int = 512
    n_scales: int = 2

    def fingerprint(self) -> str:
        return _fingerprint(asdict(self))

    def grid_size(self, side: int) -> int:
        """Score-grid side for a square input, by the convolution size formula."""
        for i in range(self.n_layers):
            stride = 2 if i < self.n_strided else 1
            side = (side + 2 - self.kernel_size) // stride + 1
        return side


class PatchDiscriminator(nn.Module):
    """Conditional patch discriminator; returns (score grid, per-layer activations).

    Scores are squashed into (SCORE_EPS, 1 - SCORE_EPS) so they stay strictly
    inside (0, 1) even when the sigmoid saturates in float32.
    """

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        k = spec.kernel_size
        layers = []
        cin, cout = spec.in_channels, spec.base_channels
        for i in range(spec.n_layers):
            stride = 2 if i < spec.n_strided else 1
            if i == spec.n_layers - 1:
                layers.append(nn.Conv2d(cin, 1, k, stride=stride, padding=1))
            elif i == 0:
                layers.append(nn.Sequential(
                    nn.Conv2d(cin, cout, k, stride=stride, padding=1),
                    nn.LeakyReLU(0.2, inplace=True)))
            else:
                layers.append(nn.Sequential(
                    nn.Conv2d(cin, cout, k, stride=stride, padding=1, bias=False),
                    nn.InstanceNorm2d(cout),
                    nn.LeakyReLU(0.2, inplace=True)))
            cin, cout = cout, min(cout * 2, spec.channel_cap)
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        feats = []
        for layer in self.layers[:-1]:
            x = layer(x)
            feats.append(x)
        score = SCORE_EPS + (1 - 2 * SCORE_EPS) * torch.sigmoid(self.layers[-1](x))
        feats.append(score)
        return score[:, 0], feats


class MultiScaleDiscriminator(nn.Module):
    """D1 sees (z, img) at full size, D2 the same pair after 2x2 mean pooling."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        self.nets = nn.ModuleList([PatchDiscriminator(spec) for _ in range(spec.n_scales)])

    @property
    def D1(self):
        return self.nets[0]

    @property
    def D2(self):
        return self.nets[1]

    def forward(self, z, img):
        if z.shape[0] != img.shape[0] or z.shape[-2:] != img.shape[-2:]:
            raise ShapeMismatch(f"condition {tuple(z.shape)} vs image {tuple(img.shape)}")
        x = torch.cat([z, img], dim=1)
        outs = []
        for k, net in enumerate(self.nets):
            if k:
                x = downsample2x(x)
            outs.append(net(x))
        return outs


def discriminator_forward(D: PatchDiscriminator, z: Image, img: Image) -> np.ndarray:
    if z.shape != img.shape:
        raise ShapeMismatch(f"condition {z.shape} vs image {img.shape}")
    param = next(D.parameters())
    x = torch.cat([to_tensor(z, param.dtype), to_tensor(img, param.dtype)], dim=1)
    with torch.no_grad():
        score, _ = D(x.to(param.device))
    return score[0].double().cpu().numpy()


# --- stroke classifier -------------------------------------------------------


@dataclass(frozen=True)
class StrokeClassifierSpec:
    patch_size: int = 64
    in_channels: int = 1
    stem_channels: int = 16
    n_dense_layers: int = 4
    growth: int = 16
    out_channels: int = 32
    n_classes: int = N_STROKE_CLASSES

    def fingerprint(self) -> str:
        return _fingerprint(asdict(self))


class DenseBlock(nn.Module):
    def __init__(self, cin, n_layers, growth):
        super().__init__()
        self.layers = nn.ModuleList()
        for i in range(n_layers):
            c = cin + i * growth
            self.layers.append(nn.Sequential(
                nn.InstanceNorm2d(c),
                nn.ReLU(),
                nn.Conv2d(c, growth, 3, padding=1, bias=False)))
        self.out_channels = cin + n_layers * growth

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return torch.cat(feats, dim=1)


class StrokeClassifier(nn.Module):
    """Input conv, one dense block, output conv, global pooling, 7-way head."""

    def __init__(self, spec: StrokeClassifierSpec = StrokeClassifierSpec()):
        super().__init__()
        self.spec = spec
        self.stem = nn.Conv2d(spec.in_channels, spec.stem_channels, 3, padding=1)
        self.dense = DenseBlock(spec.stem_channels, spec.n_dense_layers, spec.growth)
        self.out_conv = nn.Sequential(
            nn.InstanceNorm2d(self.dense.out_channels),
            nn.ReLU(),
            nn.Conv2d(self.dense.out_channels, spec.out_channels, 1),
            nn.ReLU())
        self.head = nn.Linear(spec.out_channels, spec.n_classes)

    def features(self, x) -> dict:
        x = x * 2.0 - 1.0
        stem = self.stem(x)
        dense = self.dense(stem)
        out = self.out_conv(dense)
        return {"stem": stem, "dense": dense, "out": out}

    def forward(self, x):
        return self.head(self.features(x)["out"].mean(dim=(2, 3)))

    def probabilities(self, x):
        return F.softmax(self(x), dim=1)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def is_frozen(module: nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


def stroke_classifier_forward(psi: StrokeClassifier, patch: Image) -> np.ndarray:
    p = psi.spec.patch_size
    if patch.channels != 1 or patch.shape != (p, p):
        raise BadShape(f"stroke patches are {p}x{p} grayscale, got {patch.pixels.shape}")
    param = next(psi.parameters())
    with torch.no_grad():
        probs = psi.probabilities(to_tensor(patch, param.dtype).to(param.device))
    return probs[0].double().cpu().numpy()


# --- perceptual extractor ----------------------------------------------------


@dataclass(frozen=True)
class PerceptualSpec:
    in_channels: int = 1
    widths: tuple = (16, 32, 64, 64)
    seed: int = 20201

    def fingerprint(self) -> str:
        return _fingerprint(asdict(self))


class PerceptualExtractor(nn.Module):
    """Frozen fixed-weight conv stack with taps at strides 1, 2, 4, 8.

    The weights are He-normal draws from ``numpy.random.default_rng(spec.seed)``
    (PCG64, stable across numpy releases), so the "weight file" is the seed
    itself; ``export_weights`` writes the realized tensors to .npz for audit.
    """

    def __init__(self, spec: PerceptualSpec = PerceptualSpec()):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        convs = []
        cin = spec.in_channels
        for i, w in enumerate(spec.widths):
            conv = nn.Conv2d(cin, w, 3, stride=1 if i == 0 else 2, padding=1)
            std = np.sqrt(2.0 / (cin * 9))
            weight = rng.normal(0.0, std, size=conv.weight.shape)
            conv.weight.data = torch.from_numpy(weight).float()
            conv.bias.data.zero_()
            convs.append(conv)
            cin = w
        self.convs = nn.ModuleList(convs)
        freeze(self)

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x):
        x = x * 2.0 - 1.0
        if x.shape[1] != self.spec.in_channels and x.shape[1] == 3:
            x = (x * torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype,
                                  device=x.device).view(1, 3, 1, 1)).sum(1, keepdim=True)
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats

    def export_weights(self, path) -> None:
        np.savez(path, **{k: v.cpu().numpy() for k, v in self.state_dict().items()})


class TorchvisionVGGFeatures(nn.Module):
    """Optional plug-in: taps of a torchvision VGG ``features`` stack.

    Pass e.g. ``torchvision.models.vgg16(weights=...).features``; the default
    taps are relu1_2, relu2_2, relu3_3 and relu4_3.
    """

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, features: nn.Module, taps=(3, 8, 15, 22)):
        super().__init__()
        self.features = features[: max(taps) + 1]
        self.taps = tuple(taps)
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1))
        freeze(self)

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def perceptual_features(phi: nn.Module, image: Image) -> list:
    param = next(phi.parameters())
    with torch.no_grad():
        feats = phi(to_tensor(image, param.dtype).to(param.device))
    return [f[0].clone() for f in feats]


# --- profiles and bundles ----------------------------------------------------


@dataclass(frozen=True)
class Profile:
    name: str
    image_size: int
    resize_to: int
    generator: GeneratorSpec
    discriminator: DiscriminatorSpec
    stroke: StrokeClassifierSpec
    perceptual: PerceptualSpec = field(default_factory=PerceptualSpec)

    def fingerprints(self) -> dict:
        return {
            "generator": self.generator.fingerprint(),
            "discriminator": self.discriminator.fingerprint(),
            "stroke": self.stroke.fingerprint(),
            "perceptual": self.perceptual.fingerprint(),
        }


PROFILES = {
    "paper_512": Profile(
        "paper_512", 512, 542,
        GeneratorSpec(),
        DiscriminatorSpec(),
        StrokeClassifierSpec(patch_size=64),
    ),
    "toy_64": Profile(
        "toy_64", 64, 68,
        # Two stride-2 stages keep a 16x16 residual trunk; four would squeeze a
        # 64px face through 4x4 with no skip path.
        GeneratorSpec(base_channels=16, channel_cap=64, n_down=2),
        DiscriminatorSpec(base_channels=16, channel_cap=128),
        StrokeClassifierSpec(patch_size=32),
    ),
    # Gradient-check scale: every network stays at or below 200 parameters.
    "micro_8": Profile(
        "micro_8", 8, 8,
        GeneratorSpec(base_channels=2, channel_cap=2, n_down=1, n_resblocks=1, entry_kernel=3),
        DiscriminatorSpec(base_channels=2, channel_cap=2, n_strided=1, kernel_size=3),
        StrokeClassifierSpec(patch_size=8, stem_channels=2, n_dense_layers=2, growth=2,
                             out_channels=2),
        PerceptualSpec(widths=(2, 2, 2, 2)),
    ),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise BadConfig(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class ModelBundle:
    profile: Profile
    G: Generator
    D: MultiScaleDiscriminator
    psi: StrokeClassifier | None
    phi: nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    epoch: int = 0

    @property
    def D1(self):
        return self.D.D1

    @property
    def D2(self):
        return self.D.D2


def build_bundle(profile: Profile, seed: int, lr: float = 2e-4, betas=(0.5, 0.999),
                 psi: StrokeClassifier | None = None, dtype=torch.float32) -> ModelBundle:
    torch.manual_seed(seed)
    G = Generator(profile.generator).to(dtype)
    D = MultiScaleDiscriminator(profile.discriminator).to(dtype)
    phi = PerceptualExtractor(profile.perceptual).to(dtype)
    if psi is not None:
        if psi.spec != profile.stroke:
            raise FingerprintMismatch(
                f"stroke classifier spec {psi.spec} does not match profile {profile.name}")
        psi = freeze(psi.to(dtype))
    opt_g = torch.optim.Adam(G.parameters(), lr=lr, betas=tuple(betas))
    opt_d = torch.optim.Adam(D.parameters(), lr=lr, betas=tuple(betas))
    return ModelBundle(profile, G, D, psi, phi, opt_g, opt_d)


# --- checkpoints -------------------------------------------------------------


def _state_checksum(states: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(states):
        for key, t in sorted(states[name].items()):
            h.update(f"{name}.{key}".encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(bundle: ModelBundle, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    states = {"G": bundle.G.state_dict(), "D": bundle.D.state_dict(),
              "phi": bundle.phi.state_dict()}
    if bundle.psi is not None:
        states["psi"] = bundle.psi.state_dict()
    header = {
        "version": CHECKPOINT_VERSION,
        "profile": bundle.profile.name,
        "fingerprints": bundle.profile.fingerprints(),
        "epoch": bundle.epoch,
        "optimizer_state_version": 1,
        "has_psi": bundle.psi is not None,
        "checksum": _state_checksum(states),
        **(extra or {}),
    }
    payload = {"header": json.dumps(header, sort_keys=True), **states,
               "opt_g": bundle.opt_g.state_dict(), "opt_d": bundle.opt_d.state_dict()}
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint_header(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return json.loads(payload["header"])


def load_checkpoint(path, profile: Profile | None = None, lr=2e-4, betas=(0.5, 0.999)):
    """Rebuild a bundle; returns (bundle, header).

    Fails loudly if the stored fingerprints disagree with ``profile`` or the
    parameters no longer match the recorded checksum.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    header = json.loads(payload["header"])
    stored = get_profile(header["profile"])
    if profile is None:
        profile = stored
    if header["fingerprints"] != profile.fingerprints():
        raise FingerprintMismatch(
            f"{path}: checkpoint fingerprints {header['fingerprints']} "
            f"!= expected {profile.fingerprints()}")
    names = ["G", "D", "phi"] + (["psi"] if header["has_psi"] else [])
    states = {n: payload[n] for n in names}
    if _state_checksum(states) != header["checksum"]:
        raise ChecksumMismatch(f"{path}: parameter checksum mismatch")
    psi = None
    if header["has_psi"]:
        psi = StrokeClassifier(profile.stroke)
        psi.load_state_dict(states["psi"])
    bundle = build_bundle(profile, seed=0, lr=lr, betas=betas, psi=psi)
    bundle.G.load_state_dict(states["G"])
    bundle.D.load_state_dict(states["D"])
    bundle.phi.load_state_dict(states["phi"])
    bundle.opt_g.load_state_dict(payload["opt_g"])
    bundle.opt_d.load_state_dict(payload["opt_d"])
    bundle.epoch = header["epoch"]
    return bundle, header


def save_stroke_classifier(psi: StrokeClassifier, path, held_out_accuracy=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = psi.state_dict()
    header = {"spec": asdict(psi.spec), "fingerprint": psi.spec.fingerprint(),
              "held_out_accuracy": held_out_accuracy,
              "checksum": _state_checksum({"psi": state})}
    torch.save({"header": json.dumps(header, sort_keys=True), "psi": state}, path)
    return path


def load_stroke_classifier(path) -> StrokeClassifier:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    header = json.loads(payload["header"])
    spec = StrokeClassifierSpec(**header["spec"])
    if spec.fingerprint() != header["fingerprint"]:
        raise FingerprintMismatch(f"{path}: stroke classifier spec fingerprint mismatch")
    if _state_checksum({"psi": payload["psi"]}) != header["checksum"]:
        raise ChecksumMismatch(f"{path}: stroke classifier checksum mismatch")
    psi = StrokeClassifier(spec)
    psi.load_state_dict(payload["psi"])
    return freeze(psi)


def with_stroke_patch(profile: Profile, patch_size: int) -> Profile:
    return replace(profile, stroke=replace(profile.stroke, patch_size=patch_size))
