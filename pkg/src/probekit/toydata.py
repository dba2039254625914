"""Procedural grayscale "real" images with class conditioning.

Four families stand in for a real photo source: gaussian blobs, linear
gradients, stripes and checkerboards, each with continuous random
attributes and a little additive noise. Item ``i`` of a split is drawn from
its own stream ``(seed, "toydata", split_name, i)`` and has class ``i % C``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from probekit import archive
from probekit.errors import ContractError
from probekit.seeding import derive_rng
from probekit.workers import parallel_map

FAMILIES = ("gaussian-blob", "linear-gradient", "stripes", "checker")
SOURCE_TAGS = ("real", "gen_base", "gen_variant", "probe", "pgd_pixel", "pgd_latent")
NOISE_STD = 0.02


@dataclass
class ToyImage:
    pixels: np.ndarray
    class_id: int
    label: int
    source_tag: str = "real"


@dataclass
class SplitDataset:
    """Column-oriented image set; ``items`` gives a per-image view."""

    pixels: np.ndarray  # (N, H, W)
    class_ids: np.ndarray
    labels: np.ndarray
    source_tags: list[str]
    split_name: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)  # per-item columns, e.g. "seed", "score"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.source_tags = list(self.source_tags)
        n = len(self.pixels)
        if not (len(self.class_ids) == len(self.labels) == len(self.source_tags) == n):
            raise ContractError("dataset columns have different lengths")
        for tag, lab in zip(self.source_tags, self.labels):
            if (tag == "real") != (lab == 0):
                raise ContractError(f"label {lab} inconsistent with source tag {tag!r}")

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def items(self) -> list[ToyImage]:
        return [
            ToyImage(self.pixels[i], int(self.class_ids[i]), int(self.labels[i]), self.source_tags[i])
            for i in range(len(self))
        ]

    def subset(self, idx) -> "SplitDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SplitDataset(
            self.pixels[idx],
            self.class_ids[idx],
            self.labels[idx],
            [self.source_tags[i] for i in idx],
            self.split_name,
            self.seed,
            {k: np.asarray(v)[idx] for k, v in self.extra.items()},
        )

    @staticmethod
    def concat(parts: Sequence["SplitDataset"], split_name: str = "") -> "SplitDataset":
        keys = set.intersection(*(set(p.extra) for p in parts)) if parts else set()
        return SplitDataset(
            np.concatenate([p.pixels for p in parts]),
            np.concatenate([p.class_ids for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [t for p in parts for t in p.source_tags],
            split_name,
            parts[0].seed if parts else 0,
            {k: np.concatenate([np.asarray(p.extra[k]) for p in parts]) for k in sorted(keys)},
        )


def draw_attributes(class_id: int, rng: np.random.Generator) -> dict:
    if class_id == 0:
        return {
            "cx": rng.uniform(0.3, 0.7),
            "cy": rng.uniform(0.3, 0.7),
            "width": rng.uniform(0.10, 0.22),
            "amplitude": rng.uniform(0.6, 0.95),
        }
    if class_id == 1:
        return {"angle": rng.uniform(0, 2 * np.pi), "amplitude": rng.uniform(0.6, 0.95)}
    if class_id == 2:
        return {
            "frequency": rng.uniform(1.5, 3.5),
            "angle": rng.uniform(0, np.pi),
            "phase": rng.uniform(0, 2 * np.pi),
            "amplitude": rng.uniform(0.6, 0.95),
        }
    if class_id == 3:
        return {
            "cells": rng.uniform(2.0, 4.0),
            "offset_x": rng.uniform(0, 1),
            "offset_y": rng.uniform(0, 1),
            "amplitude": rng.uniform(0.6, 0.95),
        }
    raise ContractError(f"class_id {class_id} out of range [0, {len(FAMILIES)})")


def render(class_id: int, attrs: dict, size: int = 16) -> np.ndarray:
    """Noise-free image of one family; pattern in [0, 1] mapped to ±amplitude."""
    u = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(u, u)  # xx varies along columns
    if class_id == 0:
        r2 = (xx - attrs["cx"]) ** 2 + (yy - attrs["cy"]) ** 2
        p = np.exp(-r2 / (2 * attrs["width"] ** 2))
    elif class_id == 1:
        proj = (xx - 0.5) * np.cos(attrs["angle"]) + (yy - 0.5) * np.sin(attrs["angle"])
        p = np.clip(0.5 + proj / np.sqrt(2), 0, 1)
    elif class_id == 2:
        proj = xx * np.cos(attrs["angle"]) + yy * np.sin(attrs["angle"])
        p = 0.5 + 0.5 * np.sin(2 * np.pi * attrs["frequency"] * proj + attrs["phase"])
    elif class_id == 3:
        k = attrs["cells"]
        s = np.sin(np.pi * k * (xx + attrs["offset_x"] / k)) * np.sin(np.pi * k * (yy + attrs["offset_y"] / k))
        p = 0.5 + 0.5 * np.tanh(4 * s)
    else:
        raise ContractError(f"class_id {class_id} out of range [0, {len(FAMILIES)})")
    return attrs["amplitude"] * (2 * p - 1)


def sample_real(
    class_id: int,
    rng: np.random.Generator,
    size: int = 16,
    n_classes: int = 4,
    noise_std: float = NOISE_STD,
) -> ToyImage:
    if not 0 <= class_id < n_classes or class_id >= len(FAMILIES):
        raise ContractError(f"class_id {class_id} out of range [0, {n_classes})")
    img = render(class_id, draw_attributes(class_id, rng), size)
    img = img + noise_std * rng.standard_normal(img.shape)
    return ToyImage(np.clip(img, -1, 1), class_id, 0, "real")


def make_split(
    n_per_class: int,
    seed: int,
    split_name: str,
    size: int = 16,
    n_classes: int = 4,
    dtype=np.float32,
) -> SplitDataset:
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    if n_classes > len(FAMILIES):
        raise ContractError(f"at most {len(FAMILIES)} classes are available")

    def one(i: int) -> ToyImage:
        return sample_real(i % n_classes, derive_rng(seed, "toydata", split_name, i), size, n_classes)

    imgs = parallel_map(one, range(n_per_class * n_classes))
    return SplitDataset(
        np.stack([im.pixels for im in imgs]).astype(dtype),
        [im.class_id for im in imgs],
        [0] * len(imgs),
        ["real"] * len(imgs),
        split_name,
        seed,
    )


def save_dataset(path, ds: SplitDataset) -> None:
    entries = {f"img/{i}": ds.pixels[i] for i in range(len(ds))}
    items = []
    for i in range(len(ds)):
        row = {"class_id": int(ds.class_ids[i]), "label": int(ds.labels[i]), "source_tag": ds.source_tags[i]}
        for k, v in ds.extra.items():
            val = np.asarray(v)[i]
            row[k] = val.item() if hasattr(val, "item") else val
        items.append(row)
    manifest = {"split_name": ds.split_name, "seed": int(ds.seed), "count": len(ds), "items": items}
    archive.save_archive(path, entries, manifest)


def load_dataset(path) -> SplitDataset:
    path = Path(path)
    entries = archive.load_archive(path)
    manifest = archive.load_manifest(path)
    items = manifest["items"]
    pixels = np.stack([entries[f"img/{i}"] for i in range(len(items))])
    extra_keys = sorted(set(items[0]) - {"class_id", "label", "source_tag"}) if items else []
    return SplitDataset(
        pixels,
        [it["class_id"] for it in items],
        [it["label"] for it in items],
        [it["source_tag"] for it in items],
        manifest.get("split_name", ""),
        manifest.get("seed", 0),
        {k: np.array([it[k] for it in items]) for k in extra_keys},
    )
