"""Low-rank adapters on the denoiser's hidden linear layers.

Each target weight ``W`` (out x in) is replaced at call time by
``W + (alpha / r) * B @ A`` with ``A`` (r x in) Gaussian and ``B``
(out x r) zero at attach time, so a fresh adapter is an exact no-op.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from probekit import archive
from probekit import tensor as tn
from probekit.errors import ContractError, ShapeError
from probekit.seeding import derive_rng
from probekit.tensor import ParamStore, Tensor


class LoraParams:
    def __init__(self, rank: int, alpha: float, targets: Sequence[str]):
        self.rank = rank
        self.alpha = float(alpha)
        self.targets = list(targets)
        self.store = ParamStore()

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def entries(self) -> dict:
        return {t: (self.store[f"lora/{t}/A"], self.store[f"lora/{t}/B"]) for t in self.targets}

    def effective_weight(self, target: str, base: Tensor) -> Tensor:
        a, b = self.entries[target]
        return effective_weight(base, a, b, self.scale)

    def delta(self, target: str) -> np.ndarray:
        a, b = self.entries[target]
        return self.scale * (b.data @ a.data)

    def manifest(self) -> dict:
        return {"kind": "lora", "rank": self.rank, "alpha": self.alpha, "targets": self.targets}


def effective_weight(base: Tensor, a: Tensor, b: Tensor, scale: float) -> Tensor:
    """``base + scale * b @ a``; the base enters as a constant."""
    if b.shape[1] != a.shape[0] or (b.shape[0], a.shape[1]) != base.shape:
        raise ShapeError(f"lora shapes B{b.shape} A{a.shape} do not match weight {base.shape}")
    return tn.add(tn.stop_grad(base), tn.scale(tn.matmul(b, a), scale))


def attach_lora(net, rank: int = 4, targets: Sequence[str] | None = None, seed: int = 0, alpha: float | None = None) -> LoraParams:
    """Create adapters for ``targets`` (default: both hidden layers) and freeze the base."""
    targets = list(net.HIDDEN if targets is None else targets)
    lora = LoraParams(rank, rank if alpha is None else alpha, targets)
    rng = derive_rng(seed, "lora-init")
    for name in targets:
        key = f"{name}.W"
        if key not in net.params:
            raise ContractError(f"unknown lora target {name!r}")
        out_dim, in_dim = net.params[key].shape
        if not 1 <= rank <= min(in_dim, out_dim):
            raise ContractError(f"rank {rank} invalid for {name} ({out_dim}x{in_dim})")
        dtype = net.params[key].data.dtype
        lora.store.add(f"lora/{name}/A", (rng.standard_normal((rank, in_dim)) / np.sqrt(rank)).astype(dtype))
        lora.store.add(f"lora/{name}/B", np.zeros((out_dim, rank), dtype=dtype))
    net.params.freeze()
    return lora


def numerical_rank(m: np.ndarray, tol: float = 1e-9, max_iter: int = 20000, seed: int = 0) -> int:
    """Count singular values above ``tol`` by deflated power iteration."""
    m = np.array(m, dtype=np.float64)
    rng = np.random.default_rng(seed)
    count = 0
    for _ in range(min(m.shape)):
        v = rng.standard_normal(m.shape[1])
        v /= np.linalg.norm(v)
        sigma = 0.0
        for _ in range(max_iter):
            u = m @ v
            s_u = np.linalg.norm(u)
            if s_u == 0:
                sigma = 0.0
                break
            u /= s_u
            w = m.T @ u
            new_sigma = np.linalg.norm(w)
            v = w / new_sigma
            if abs(new_sigma - sigma) <= 1e-15 * new_sigma:
                sigma = new_sigma
                break
            sigma = new_sigma
        if sigma <= tol:
            break
        count += 1
        m -= sigma * np.outer(m @ v / sigma, v)
    return count


def save_lora(path, lora: LoraParams) -> None:
    archive.save_archive(path, lora.store.snapshot(), lora.manifest())


def load_lora(path) -> LoraParams:
    man = archive.load_manifest(path)
    entries = archive.load_archive(path)
    lora = LoraParams(man["rank"], man["alpha"], man["targets"])
    for name, arr in entries.items():
        lora.store.add(name, arr)
    return lora
