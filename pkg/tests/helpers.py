"""Shared test machinery: finite differences, brute-force oracles, smoke runs."""

import math

import numpy as np
import torch
import torch.nn.functional as F

from sketchbridge import losses
from sketchbridge.networks import StrokeClassifier, build_bundle, freeze, get_profile


def micro_bundle(seed, dtype=torch.float64):
    prof = get_profile("micro_8")
    torch.manual_seed(seed + 1000)
    psi = freeze(StrokeClassifier(prof.stroke))
    return build_bundle(prof, seed, psi=psi, dtype=dtype)


def generator_losses(bundle, z, y):
    """name -> closure evaluating that loss of G(z) against y at the current G params."""
    def fake():
        return bundle.G(z)

    return {
        "adv_g": lambda: losses.adv_loss_g(bundle.D, z, fake()),
        "fm": lambda: losses.fm_loss(bundle.D, z, y, fake()),
        "rec": lambda: losses.rec_loss(bundle.phi, y, fake()),
        "stroke": lambda: losses.stroke_loss(bundle.psi, y, fake()),
    }


def central_differences(fn, params, h=1e-6):
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
                g[i] = (up - down) / (2 * h)
            grads.append(g)
    return torch.cat(grads)


def analytic_gradient(fn, params):
    for p in params:
        p.grad = None
    fn().backward()
    return torch.cat([p.grad.reshape(-1) for p in params])


def relative_error(a, b):
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def gradient_check(seed):
    """Relative analytic-vs-numeric gradient error of each G-facing loss."""
    bundle = micro_bundle(seed)
    bundle.D.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    z = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    y = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    params = list(bundle.G.parameters())
    out = {}
    for name, fn in generator_losses(bundle, z, y).items():
        out[name] = relative_error(analytic_gradient(fn, params),
                                   central_differences(fn, params))
    return out


def l2_gap_np(a, b):
    d = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).reshape(len(a), -1)
    return np.sqrt((d * d).sum(axis=1)) / math.sqrt(d.shape[1])


def fm_oracle(D, z, y_real, y_fake):
    """Walk every layer of both scales by hand and sum per-layer RMS gaps."""
    total = np.zeros(len(z))
    xr = torch.cat([z, y_real], 1)
    xf = torch.cat([z, y_fake], 1)
    with torch.no_grad():
        for k, net in enumerate(D.nets):
            if k:
                xr, xf = F.avg_pool2d(xr, 2), F.avg_pool2d(xf, 2)
            ar, af = xr, xf
            for i, layer in enumerate(net.layers):
                ar, af = layer(ar), layer(af)
                if i == len(net.layers) - 1:
                    ar = 1e-6 + (1 - 2e-6) * torch.sigmoid(ar)
                    af = 1e-6 + (1 - 2e-6) * torch.sigmoid(af)
                total += l2_gap_np(ar.numpy(), af.numpy())
    return total.mean()


def rec_oracle(phi, y_real, y_fake):
    total = np.zeros(len(y_real))
    with torch.no_grad():
        ar, af = y_real * 2 - 1, y_fake * 2 - 1
        for conv in phi.convs:
            ar, af = F.relu(conv(ar)), F.relu(conv(af))
            total += l2_gap_np(ar.numpy(), af.numpy())
    return total.mean()


def stroke_oracle(psi, y_real, y_fake, layers=("dense", "out")):
    p = psi.spec.patch_size
    b, _, h, w = y_real.shape
    total = np.zeros(b)
    with torch.no_grad():
        for n in range(b):
            for r in range(0, h - p + 1, p):
                for c in range(0, w - p + 1, p):
                    fr = psi.features(y_real[n:n + 1, :, r:r + p, c:c + p])
                    ff = psi.features(y_fake[n:n + 1, :, r:r + p, c:c + p])
                    for name in layers:
                        total[n] += l2_gap_np(fr[name].numpy(), ff[name].numpy())[0]
    return total.mean()


def smoke_run(pairs, psi, tmp_dir, seed=0, steps=50):
    """50 toy_64 steps; returns (loss rows, wall seconds)."""
    import time

    from sketchbridge.training import TrainConfig, read_loss_log, train

    cfg = TrainConfig(profile="toy_64", seed=seed, epochs_const=10, epochs_decay=0)
    t0 = time.perf_counter()
    train(pairs, cfg, tmp_dir, psi=psi, max_steps=steps)
    return read_loss_log(tmp_dir / "loss_log.csv"), time.perf_counter() - t0


# --- acceptance bookkeeping ---------------------------------------------------

ACCEPTANCE_RESULTS = {}


class criterion:
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title, self.notes = number, title, []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        import time

        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        secs = time.perf_counter() - self.t0
        detail = "; ".join(self.notes)
        if exc_type is None:
            line = f"criterion {self.number:>2} PASS  {self.title} ({detail}) [{secs:.1f}s]"
        else:
            reason = str(exc).strip().splitlines()[0] if str(exc).strip() else exc_type.__name__
            line = f"criterion {self.number:>2} FAIL  {self.title}: {reason} [{secs:.1f}s]"
        ACCEPTANCE_RESULTS[self.number] = line
        print(line)
        return False
