"""Binary real/fake detector.

Logit convention: a positive logit means *fake*; ``p_fake = sigmoid(z)``.
The probing loss, BCE targets (fake = 1) and the 0.5 decision threshold all
derive from this one convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from probekit import archive
from probekit import tensor as tn
from probekit.augment import AugmentPolicy, augment_batch
from probekit.errors import ContractError, ShapeError, TrainingError
from probekit.metrics import balanced_accuracy
from probekit.optim import AdamW
from probekit.seeding import derive_rng
from probekit.tensor import ParamStore, Tensor

LOGIT_CONVENTION = "positive logit = fake; p_fake = sigmoid(logit)"


class DetectorNet:
    """conv(1->8, s2) -> ReLU -> conv(8->16, s2) -> ReLU -> flatten -> linear -> logit."""

    def __init__(self, input_size: int = 16, seed: int = 0, channels: tuple = (8, 16)):
        if input_size % 4:
            raise ContractError("input_size must be a multiple of 4")
        self.input_size = input_size
        self.channels = tuple(channels)
        rng = derive_rng(seed, "detector-init")
        dt = tn.get_dtype()
        p = ParamStore()
        c_in = 1
        for i, c in enumerate(self.channels):
            w = rng.standard_normal((c, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))
            p.add(f"conv{i + 1}.W", w.astype(dt))
            p.add(f"conv{i + 1}.b", np.zeros((1, c, 1, 1), dtype=dt))
            c_in = c
        feat = self.channels[-1] * (input_size // 4) ** 2
        p.add("fc.W", (rng.standard_normal((feat, 1)) / np.sqrt(feat)).astype(dt))
        p.add("fc.b", np.zeros(1, dtype=dt))
        self.params = p


def detector_logits(net: DetectorNet, x) -> Tensor:
    """Logits (N,) for a batch of (N, H, W) images at ``input_size``."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=net.params["fc.W"].data.dtype))
    if x.ndim != 3 or x.shape[1:] != (net.input_size, net.input_size):
        raise ShapeError(f"detector expects (N, {net.input_size}, {net.input_size}), got {x.shape}")
    p = net.params
    h = tn.reshape(x, (x.shape[0], 1, net.input_size, net.input_size))
    for i in range(len(net.channels)):
        h = tn.relu(tn.add(tn.conv2d(h, p[f"conv{i + 1}.W"], stride=2, pad=1), p[f"conv{i + 1}.b"]))
    h = tn.reshape(h, (x.shape[0], -1))
    return tn.reshape(tn.add(tn.matmul(h, p["fc.W"]), p["fc.b"]), (x.shape[0],))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def decision_function(net: DetectorNet, x, batch: int = 1024) -> np.ndarray:
    x = np.asarray(x)
    single = x.ndim == 2
    xb = x[None] if single else x
    out = []
    with tn.no_grad():
        for i in range(0, len(xb), batch):
            out.append(detector_logits(net, xb[i : i + batch]).data.astype(np.float64))
    z = np.concatenate(out) if out else np.zeros(0)
    return z[0] if single else z


def predict(net: DetectorNet, x) -> np.ndarray:
    """p_fake for one image (float) or a batch (array)."""
    return _sigmoid(decision_function(net, x))


def patch_logits(net: DetectorNet, x: np.ndarray) -> np.ndarray:
    """Per-patch logits of one image: reflect-pad to full patches, tile without overlap."""
    x = np.asarray(x)
    return decision_function(net, _tiles(x, net.input_size))


def _reflect_pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    while ph > 0 or pw > 0:
        # reflect padding cannot exceed size - 1 per pass
        sh = min(ph, x.shape[0] - 1) if x.shape[0] > 1 else 0
        sw = min(pw, x.shape[1] - 1) if x.shape[1] > 1 else 0
        if sh == 0 and sw == 0:
            return np.pad(x, ((0, ph), (0, pw)), mode="edge")
        x = np.pad(x, ((0, sh), (0, sw)), mode="reflect")
        ph -= sh
        pw -= sw
    return x


def _tiles(x: np.ndarray, s: int) -> np.ndarray:
    h, w = x.shape
    th, tw = max(1, -(-h // s)), max(1, -(-w // s))
    ph, pw = th * s - h, tw * s - w
    if ph or pw:
        x = _reflect_pad(x, ph, pw)
    return x.reshape(th, s, tw, s).transpose(0, 2, 1, 3).reshape(-1, s, s)


def patched_decision(net: DetectorNet, x) -> float | np.ndarray:
    """Mean patch logit of one image or of each image in a list/array."""
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return float(patch_logits(net, x).mean())
    if isinstance(x, np.ndarray) and x.ndim == 3:
        if len(x) == 0:
            return np.zeros(0)
        # same-size stack: score every tile in one pass
        tiles = np.stack([_tiles(img, net.input_size) for img in x])
        n, k = tiles.shape[:2]
        z = decision_function(net, tiles.reshape(n * k, net.input_size, net.input_size))
        return z.reshape(n, k).mean(axis=1)
    return np.array([patched_decision(net, np.asarray(img)) for img in x])


def predict_patched(net: DetectorNet, x) -> float | np.ndarray:
    """sigmoid of the mean patch logit; accepts one image or a list/array of images."""
    z = patched_decision(net, x)
    return float(_sigmoid(z)) if np.ndim(z) == 0 else _sigmoid(z)


# ---------------------------------------------------------------------------
# training


@dataclass
class DetectorTrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 64
    max_epochs: int = 10
    patience: int = 3
    val_fraction: float = 0.1
    seed: int = 0
    policy: AugmentPolicy | None = field(default_factory=AugmentPolicy)


@dataclass
class MixConfig(DetectorTrainConfig):
    w: float = 0.5
    lr: float = 3e-4

    def __post_init__(self):
        if not 0 <= self.w <= 1:
            raise ContractError("mixing weight w must lie in [0, 1]")


def split_validation(ds, fraction: float, seed: int, name: str):
    """Seeded (train, val) split of a dataset; val gets ``ceil(fraction * n)`` items."""
    n = len(ds)
    n_val = int(np.ceil(fraction * n)) if fraction > 0 else 0
    perm = derive_rng(seed, "val-split", name).permutation(n)
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def _balanced_batch(real, fake, half: int, rng) -> tuple[np.ndarray, np.ndarray]:
    ir = rng.integers(0, len(real), size=half)
    jf = rng.integers(0, len(fake), size=half)
    x = np.concatenate([real.pixels[ir], fake.pixels[jf]])
    y = np.concatenate([np.zeros(half), np.ones(half)])
    return x, y


def _val_bacc(net, x, y) -> float:
    if len(x) == 0 or len(np.unique(y)) < 2:
        return 0.0
    return balanced_accuracy(predict(net, x), y)


def _bce(net, x, y) -> Tensor:
    logits = detector_logits(net, x)
    return tn.bce_with_logits(logits, Tensor(y.astype(logits.data.dtype)))


def pretrain(real, fake, config: DetectorTrainConfig, net: DetectorNet | None = None) -> tuple[DetectorNet, list[dict]]:
    """BCE training on balanced real/fake batches with early stopping.

    Returns the parameters of the best validation epoch and a per-epoch log.
    """
    if len(real) == 0 or len(fake) == 0:
        raise ContractError("pretrain needs non-empty real and fake sets")
    size = real.pixels.shape[-1]
    net = net or DetectorNet(size, seed=config.seed)
    r_tr, r_val = split_validation(real, config.val_fraction, config.seed, "real")
    f_tr, f_val = split_validation(fake, config.val_fraction, config.seed, "fake")
    x_val = np.concatenate([r_val.pixels, f_val.pixels])
    y_val = np.concatenate([np.zeros(len(r_val)), np.ones(len(f_val))])
    half = config.batch // 2
    steps = max(1, (len(r_tr) + len(f_tr)) // config.batch)
    rng = derive_rng(config.seed, "detector-batches")

    def make_loss(epoch, step):
        x, y = _balanced_batch(r_tr, f_tr, half, rng)
        x = augment_batch(x, config.policy, config.seed, "pretrain", epoch, step)
        return _bce(net, x, y)

    log = _fit(net, make_loss, steps, config, lambda: _val_bacc(net, x_val, y_val))
    return net, log


def finetune_mixed(net: DetectorNet, pre_real, pre_fake, probe_paired, config: MixConfig) -> tuple[DetectorNet, list[dict]]:
    """Fine-tune on ``(1 - w) * L_pre + w * L_probe`` with equal-size batches.

    ``probe_paired`` holds probe fakes (label 1) plus an equal number of
    fresh reals (label 0). Per iteration one balanced batch comes from the
    pre-training pool and one from ``probe_paired``; the two batch streams
    are independent so ``w = 0`` reproduces pre-pool-only training.
    """
    if len(probe_paired) == 0:
        raise ContractError("probe dataset is empty")
    p_real = probe_paired.subset(np.flatnonzero(probe_paired.labels == 0))
    p_fake = probe_paired.subset(np.flatnonzero(probe_paired.labels == 1))
    if len(p_real) == 0 or len(p_fake) == 0:
        raise ContractError("probe dataset must contain both probe fakes and paired reals")
    r_tr, r_val = split_validation(pre_real, config.val_fraction, config.seed, "real")
    f_tr, f_val = split_validation(pre_fake, config.val_fraction, config.seed, "fake")
    pr_tr, pr_val = split_validation(p_real, config.val_fraction, config.seed, "probe-real")
    pf_tr, pf_val = split_validation(p_fake, config.val_fraction, config.seed, "probe-fake")
    x_val = np.concatenate([r_val.pixels, pr_val.pixels, f_val.pixels, pf_val.pixels])
    y_val = np.concatenate([np.zeros(len(r_val) + len(pr_val)), np.ones(len(f_val) + len(pf_val))])
    half = config.batch // 2
    steps = max(1, (len(pr_tr) + len(pf_tr)) // config.batch)
    rng_pre = derive_rng(config.seed, "detector-batches")
    rng_probe = derive_rng(config.seed, "probe-batches")
    w = config.w

    def make_loss(epoch, step):
        xa, ya = _balanced_batch(r_tr, f_tr, half, rng_pre)
        xb, yb = _balanced_batch(pr_tr, pf_tr, half, rng_probe)
        xa = augment_batch(xa, config.policy, config.seed, "pretrain", epoch, step)
        xb = augment_batch(xb, config.policy, config.seed, "probe", epoch, step)
        return mixed_loss(net, xa, ya, xb, yb, w)

    log = _fit(net, make_loss, steps, config, lambda: _val_bacc(net, x_val, y_val))
    return net, log


def mixed_loss(net, x_pre, y_pre, x_probe, y_probe, w: float) -> Tensor:
    return tn.add(tn.scale(_bce(net, x_pre, y_pre), 1.0 - w), tn.scale(_bce(net, x_probe, y_probe), w))


def _fit(net, make_loss, steps_per_epoch: int, config, validate) -> list[dict]:
    opt = AdamW(net.params, lr=config.lr, weight_decay=config.weight_decay)
    best = validate()
    best_params = net.params.snapshot()
    log = [{"epoch": 0, "val_bacc": best, "loss": float("nan")}]
    bad = 0
    for epoch in range(1, config.max_epochs + 1):
        total = 0.0
        for step in range(steps_per_epoch):
            loss = make_loss(epoch, step)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError("detector loss diverged", (epoch - 1) * steps_per_epoch + step)
            opt.step(tn.backward(loss, net.params))
            total += value
        score = validate()
        log.append({"epoch": epoch, "val_bacc": score, "loss": total / steps_per_epoch})
        if score > best:
            best, best_params, bad = score, net.params.snapshot(), 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    net.params.load(best_params)
    return log


# ---------------------------------------------------------------------------
# persistence


def save_detector(path, net: DetectorNet, extra: dict | None = None) -> None:
    man = {
        "kind": "detector",
        "input_size": net.input_size,
        "channels": list(net.channels),
        "logit_convention": LOGIT_CONVENTION,
    }
    man.update(extra or {})
    archive.save_archive(path, net.params.snapshot(), man)


def load_detector(path) -> DetectorNet:
    man = archive.load_manifest(path)
    entries = archive.load_archive(path)
    dtype = next(iter(entries.values())).dtype
    with tn.precision("f64" if dtype == np.float64 else "f32"):
        net = DetectorNet(man["input_size"], seed=0, channels=tuple(man["channels"]))
    net.params.load(entries)
    return net


def copy_detector(net: DetectorNet) -> DetectorNet:
    with tn.precision("f64" if net.params["fc.W"].data.dtype == np.float64 else "f32"):
        clone = DetectorNet(net.input_size, seed=0, channels=net.channels)
    clone.params.load(net.params.snapshot())
    return clone
