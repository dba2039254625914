"""Post-processing operators, the training augmentation pipeline and PGD baselines.

All image operators act on the last two axes of arrays in [-1, 1] and
return arrays in [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from probekit import tensor as tn
from probekit.errors import ContractError, ShapeError

LUMINANCE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


_DCT8 = _dct_matrix(8)


def quant_steps(quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ContractError(f"quality must be in [1, 100], got {quality}")
    s = 50.0 / quality if quality < 50 else (200 - 2 * quality) / 100.0
    return np.maximum(1.0, np.round(LUMINANCE_TABLE * s))


def compress_blockdct(x: np.ndarray, quality: int) -> np.ndarray:
    """Grayscale JPEG-style coefficient quantization (no entropy coding)."""
    steps = quant_steps(int(quality))
    x = np.asarray(x)
    h, w = x.shape[-2:]
    ph, pw = -h % 8, -w % 8
    v = (x.astype(np.float64) + 1.0) * 127.5 - 128.0
    if ph or pw:
        pad = [(0, 0)] * (v.ndim - 2) + [(0, ph), (0, pw)]
        v = np.pad(v, pad, mode="symmetric")
    lead = v.shape[:-2]
    H, W = v.shape[-2:]
    blocks = v.reshape(*lead, H // 8, 8, W // 8, 8)
    coef = np.einsum("ui,...aibj,vj->...aubv", _DCT8, blocks, _DCT8)
    q = np.round(coef / steps[:, None, :]) * steps[:, None, :]
    rec = np.einsum("ui,...aubv,vj->...aibj", _DCT8, q, _DCT8).reshape(*lead, H, W)
    rec = rec[..., :h, :w]
    return np.clip((rec + 128.0) / 127.5 - 1.0, -1, 1).astype(x.dtype)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    off = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(off**2) / (2 * sigma**2))
    return k / k.sum()


def _convolve_axis(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="reflect")
    n = x.shape[axis]
    out = np.zeros_like(x, dtype=np.float64)
    for j, kj in enumerate(k):
        out += kj * np.take(xp, np.arange(j, j + n), axis=axis)
    return out


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    x = np.asarray(x)
    if sigma == 0:
        return x.copy()
    k = gaussian_kernel(sigma)
    out = _convolve_axis(_convolve_axis(x.astype(np.float64), k, -1), k, -2)
    return np.clip(out, -1, 1).astype(x.dtype)


def add_noise(x: np.ndarray, std_255: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    if std_255 == 0:
        return x.copy()
    noisy = x + rng.normal(0.0, std_255 * 2.0 / 255.0, size=x.shape)
    return np.clip(noisy, -1, 1).astype(x.dtype)


def resize(x: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear resample (half-pixel centres) to ``round(size * scale)``."""
    if scale <= 0:
        raise ContractError("scale must be > 0")
    x = np.asarray(x)
    if scale == 1.0:
        return x.copy()
    h, w = x.shape[-2:]
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if nh < 2 or nw < 2:
        raise ShapeError(f"resize to {nh}x{nw} is below the 2-pixel minimum")

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(nh, h)
    x0, x1, fx = coords(nw, w)
    xf = x.astype(np.float64)
    top = xf[..., y0, :] * (1 - fy)[:, None] + xf[..., y1, :] * fy[:, None]
    out = top[..., x0] * (1 - fx) + top[..., x1] * fx
    return np.clip(out, -1, 1).astype(x.dtype)


def fit_to_size(x: np.ndarray, size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop (random if ``rng`` given, else centred) or reflect-pad to ``size``."""
    h, w = x.shape[-2:]
    if h < size or w < size:
        ph, pw = max(size - h, 0), max(size - w, 0)
        pad = [(0, 0)] * (x.ndim - 2) + [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)]
        x = np.pad(x, pad, mode="reflect" if min(h, w) > 1 else "edge")
        h, w = x.shape[-2:]
    if h > size or w > size:
        if rng is None:
            i, j = (h - size) // 2, (w - size) // 2
        else:
            i, j = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
        x = x[..., i : i + size, j : j + size]
    return x


@dataclass(frozen=True)
class AugmentPolicy:
    quality_range: tuple = (50, 100)
    blur_sigma_range: tuple = (0.0, 3.0)
    noise_std_range: tuple = (0.0, 55.0)  # on the 0-255 scale
    resize_scale_range: tuple = (0.5, 2.0)
    brightness_range: tuple = (-0.1, 0.1)
    contrast_range: tuple = (0.8, 1.2)
    flip: bool = True
    rotate: bool = True
    crop: bool = True
    prob: float = 0.2  # per-op application probability

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls((100, 100), (0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (1.0, 1.0), False, False, False, 1.0)

    def with_prob(self, prob: float) -> "AugmentPolicy":
        return replace(self, prob=prob)


def random_augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply the pipeline to one (H, W) image.

    Order: compress, blur, noise, resize, geometric, jitter. Each op fires
    with probability ``policy.prob``; an op whose drawn parameter is its
    identity value is skipped, so a degenerate policy returns ``x``
    unchanged. Output keeps the input size (crop or reflect-pad after
    resize).
    """
    x = np.asarray(x)
    size = x.shape[-1]
    out = x

    def fire() -> bool:
        return rng.random() < policy.prob

    if fire():
        q = int(rng.integers(policy.quality_range[0], policy.quality_range[1] + 1))
        if q < 100:
            out = compress_blockdct(out, q)
    if fire():
        s = rng.uniform(*policy.blur_sigma_range)
        if s > 0:
            out = gaussian_blur(out, s)
    if fire():
        s = rng.uniform(*policy.noise_std_range)
        if s > 0:
            out = add_noise(out, s, rng)
    if fire():
        s = rng.uniform(*policy.resize_scale_range)
        if s != 1.0 and round(size * s) >= 2:
            out = resize(out, s)
    if out.shape[-1] != size or out.shape[-2] != size:
        out = fit_to_size(out, size, rng if policy.crop else None)
    if policy.flip and rng.random() < 0.5:
        out = out[..., :, ::-1]
    if policy.rotate:
        k = int(rng.integers(0, 4))
        if k:
            out = np.rot90(out, k, axes=(-2, -1))
    if fire():
        b = rng.uniform(*policy.brightness_range)
        c = rng.uniform(*policy.contrast_range)
        if b != 0 or c != 1:
            m = out.mean()
            out = np.clip((out - m) * c + m + b, -1, 1)
    return np.ascontiguousarray(out, dtype=x.dtype)


def augment_batch(x: np.ndarray, policy: AugmentPolicy | None, seed: int, *path) -> np.ndarray:
    """Augment every image of a batch with its own derived stream."""
    from probekit.seeding import derive_rng

    if policy is None:
        return x
    return np.stack([random_augment(img, policy, derive_rng(seed, "augment", *path, i)) for i, img in enumerate(x)])


# ---------------------------------------------------------------------------
# PGD baselines


@dataclass(frozen=True)
class PgdConfig:
    eps: float = 4 / 255  # L-inf budget on the [0, 1] image scale
    alpha: float = 1 / 255
    steps: int = 10
    space: str = "pixel"
    latent_step_t: int | None = None  # None: attack x_T

    def __post_init__(self):
        if self.eps < 0 or self.steps < 1 or self.alpha <= 0:
            raise ContractError("PGD needs eps >= 0, alpha > 0, steps >= 1")
        if self.eps > 0 and self.alpha > self.eps:
            raise ContractError("PGD needs alpha <= eps")
        if self.space not in ("pixel", "latent"):
            raise ContractError(f"unknown PGD space {self.space!r}")

    @property
    def budget(self) -> float:
        """Budget in [-1, 1] units (twice the [0, 1]-scale eps)."""
        return 2.0 * self.eps

    @property
    def step_size(self) -> float:
        return 2.0 * self.alpha


def _check_budget(delta: np.ndarray, cfg: PgdConfig) -> None:
    # (x + d) - x is exact only up to one ulp of x, and |x| <= 1
    slack = 2 * np.finfo(delta.dtype).eps if delta.dtype.kind == "f" else 0.0
    if delta.size and np.max(np.abs(delta)) > cfg.budget + slack:
        raise ContractError(f"PGD budget exceeded: {np.max(np.abs(delta))} > {cfg.budget}")


def _probe_grad(detector, images: tn.Tensor) -> np.ndarray:
    from probekit.detector import detector_logits

    with detector.params.frozen():
        loss = tn.sum(tn.softplus(detector_logits(detector, images)))
        tn.backward(loss, inputs=[images])
    return images.grad


def pgd_pixel(x: np.ndarray, detector, cfg: PgdConfig = PgdConfig()) -> np.ndarray:
    """Push fakes toward "real" inside an L-inf ball; keep each sample's best iterate."""
    from probekit.detector import predict

    x = np.asarray(x)
    single = x.ndim == 2
    xb = x[None] if single else x
    best = xb.copy()
    best_score = predict(detector, best)
    if cfg.budget > 0:
        delta = np.zeros_like(xb)
        for _ in range(cfg.steps):
            cur = tn.Tensor(np.clip(xb + delta, -1, 1), requires_grad=True)
            g = _probe_grad(detector, cur)
            delta = np.clip(delta - cfg.step_size * np.sign(g), -cfg.budget, cfg.budget).astype(xb.dtype)
            cand = np.clip(xb + delta, -1, 1)
            score = predict(detector, cand)
            better = score < best_score
            best[better] = cand[better]
            best_score = np.where(better, score, best_score)
        _check_budget(best - xb, cfg)
    return best[0] if single else best


def pgd_latent(net, schedule, detector, class_ids, seeds, guidance: float, cfg: PgdConfig) -> tuple[np.ndarray, np.ndarray]:
    """Latent-space PGD through the detached-input sampler.

    Returns (images (N, H, W) clamped, perturbed latents).
    """
    from probekit import diffusion
    from probekit.detector import predict
    from probekit.probe import make_train_steps

    t = schedule.T if cfg.latent_step_t is None else cfg.latent_step_t
    if not 1 <= t <= schedule.T:
        raise ContractError(f"latent step {t} outside [1, {schedule.T}]")
    class_ids = np.asarray(class_ids)
    seeds = np.asarray(seeds)
    size = net.image_size
    with tn.no_grad():
        base = diffusion.sample(net, schedule, class_ids, seeds, guidance, record_trajectory=True)
    z0 = base.trajectory[t]
    plan = make_train_steps(t, t, t_s=1)

    def decode(z, grad):
        zt = tn.Tensor(z, requires_grad=grad)
        with net.params.frozen():
            res = diffusion.sample(net, schedule, class_ids, seeds, guidance, plan=plan, x_start=zt, t_start=t)
        return zt, res.x0

    best_img = np.clip(base.x0.data, -1, 1).reshape(-1, size, size)
    best_z = z0.copy()
    best_score = predict(detector, best_img)
    if cfg.budget > 0:
        delta = np.zeros_like(z0)
        for _ in range(cfg.steps):
            zt, x0 = decode(z0 + delta, True)
            from probekit.detector import detector_logits

            with detector.params.frozen():
                logits = detector_logits(detector, tn.reshape(x0, (-1, size, size)))
                tn.backward(tn.sum(tn.softplus(logits)), inputs=[zt])
            g = zt.grad if zt.grad is not None else np.zeros_like(z0)
            delta = np.clip(delta - cfg.step_size * np.sign(g), -cfg.budget, cfg.budget).astype(z0.dtype)
            with tn.no_grad():
                _, x_new = decode(z0 + delta, False)
            img = np.clip(x_new.data, -1, 1).reshape(-1, size, size)
            score = predict(detector, img)
            better = score < best_score
            best_img[better] = img[better]
            best_z[better] = (z0 + delta)[better]
            best_score = np.where(better, score, best_score)
        _check_budget(best_z - z0, cfg)
    return best_img, best_z
