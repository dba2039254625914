"""Detection metrics, robustness sweeps and residual spectra."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from probekit.errors import ContractError

REPORT_FIELDS = ("run_id", "stage", "split", "generator_tag", "metric", "value", "seed", "param")
METRICS = ("bacc", "ap", "loss", "lperc", "score_mean")


@dataclass
class ScoredSample:
    score: float
    label: int
    source_tag: str = ""
    augment_desc: str = ""


def _unpack(scores, labels=None) -> tuple[np.ndarray, np.ndarray]:
    if labels is None:
        items = list(scores)
        scores = [s.score for s in items]
        labels = [s.label for s in items]
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise ContractError("scores and labels differ in length")
    return s, y


def balanced_accuracy(scores, labels=None, threshold: float = 0.5) -> float:
    """Mean of per-class accuracies; predicted fake iff ``score > threshold``."""
    s, y = _unpack(scores, labels)
    pos, neg = y == 1, y == 0
    if not pos.any() or not neg.any():
        raise ContractError("balanced accuracy needs both real and fake samples")
    pred = s > threshold
    return 0.5 * (float(np.mean(pred[pos])) + float(np.mean(~pred[neg])))


def average_precision(scores, labels=None) -> float:
    """Ranked-list AP; ties keep the original sample order (stable sort)."""
    s, y = _unpack(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ContractError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = (y[order] == 1).astype(np.float64)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(s) + 1)
    return float(np.sum(precision * hits) / n_pos)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, run_id, stage, split, generator_tag, metric, value, seed, param="") -> None:
        if metric not in METRICS:
            raise ContractError(f"unknown metric {metric!r}")
        value = float(value)
        if not np.isfinite(value):
            raise ContractError(f"non-finite {metric} value")
        self.rows.append(
            dict(zip(REPORT_FIELDS, (run_id, stage, split, generator_tag, metric, value, int(seed), str(param))))
        )

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({**row, "value": repr(row["value"])})

    def write_jsonl(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                row["value"] = float(row["value"])
                row["seed"] = int(row["seed"])
                rep.rows.append(row)
        return rep


# ---------------------------------------------------------------------------
# robustness


DEFAULT_GRID = {
    "blur": (0.0, 0.5, 1.0, 1.5, 2.0),
    "jpeg": (95, 85, 75, 65),
    "resize": (0.5, 0.75, 1.0, 1.25, 1.5),
}


def apply_postprocess(op: str, strength, images: Sequence[np.ndarray]) -> list[np.ndarray]:
    from probekit import augment

    if op == "blur":
        return [augment.gaussian_blur(x, float(strength)) for x in images]
    if op == "jpeg":
        return [augment.compress_blockdct(x, int(strength)) for x in images]
    if op == "resize":
        return [augment.resize(x, float(strength)) for x in images]
    raise ContractError(f"unknown post-processing op {op!r}")


def robustness_sweep(
    detector,
    images: Sequence[np.ndarray],
    labels: Sequence[int],
    grid: dict | None = None,
    run_id: str = "",
    seed: int = 0,
    generator_tag: str = "",
    split: str = "test",
    chunk: int = 256,
    param_prefix: str = "",
) -> MetricsReport:
    """One bAcc row per (op, strength); images scored with patch-averaged inference."""
    from probekit.detector import predict_patched
    from probekit.workers import parallel_map

    grid = DEFAULT_GRID if grid is None else grid
    rep = MetricsReport()
    for op, strengths in grid.items():
        for strength in strengths:
            processed = apply_postprocess(op, strength, images)
            chunks = [processed[i : i + chunk] for i in range(0, len(processed), chunk)]
            # resize changes dims, so stack per chunk only when shapes agree
            scored = parallel_map(lambda c: predict_patched(detector, _stack_if_uniform(c)), chunks)
            scores = np.concatenate([np.atleast_1d(s) for s in scored]) if scored else np.zeros(0)
            rep.add(run_id, "sweep-robustness", split, generator_tag, "bacc", balanced_accuracy(scores, labels), seed, f"{param_prefix}{op}={strength}")
    return rep


def _stack_if_uniform(images):
    shapes = {np.shape(img) for img in images}
    return np.stack(images) if len(shapes) == 1 else list(images)


# ---------------------------------------------------------------------------
# spectra


def radial_power_profile(residuals: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Radially binned power of (N, H, W) residuals.

    Uses the orthonormal 2-D DFT (so energy is preserved), averages
    ``|F|^2`` over images, and bins frequencies by integer radius from the
    centred DC term. Returns ``(radius, mean_power_per_bin, bin_counts)``;
    ``sum(mean * counts)`` equals the mean spatial energy per image.
    """
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim == 2:
        r = r[None]
    if len(r) == 0:
        raise ContractError("no images for spectrum")
    power = np.abs(np.fft.fftshift(np.fft.fft2(r, norm="ortho"), axes=(-2, -1))) ** 2
    power = power.mean(axis=0)
    h, w = power.shape
    yy, xx = np.indices((h, w))
    rad = np.rint(np.hypot(yy - h // 2, xx - w // 2)).astype(int)
    counts = np.bincount(rad.ravel())
    sums = np.bincount(rad.ravel(), weights=power.ravel())
    keep = counts > 0
    radius = np.arange(len(counts))[keep]
    return radius, sums[keep] / counts[keep], counts[keep]


def residual_spectrum(net, schedule, images: np.ndarray, t_probe: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Radial power profile of ``x - denoise(x)`` at noise level ``t_probe``."""
    from probekit.diffusion import one_step_denoise

    images = np.asarray(images)
    if len(images) == 0:
        raise ContractError("no images for spectrum")
    if not 1 <= t_probe <= schedule.T:
        raise ContractError(f"t_probe {t_probe} outside [1, {schedule.T}]")
    n, h, w = images.shape
    flat = images.reshape(n, -1).astype(np.float64)
    resid = flat - one_step_denoise(net, schedule, flat, t_probe)
    radius, profile, _ = radial_power_profile(resid.reshape(n, h, w))
    return radius, profile


def write_profile_csv(path, radius: Iterable, energy: Iterable) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["radius", "energy"])
        for r, e in zip(radius, energy):
            w.writerow([int(r), repr(float(e))])


def as_dict(sample: ScoredSample) -> dict:
    return asdict(sample)
