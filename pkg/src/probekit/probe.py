"""Detector-guided probing of the generator through a LoRA adapter.

The generator is steered to minimize ``softplus(z)`` of the detector's fake
logit ``z`` (i.e. ``-log(1 - p_fake)``) plus ``lam`` times a perceptual
distance to the unadapted generator's output for the same latent and class.

Gradients reach the adapter only through network calls at the steps of a
:class:`TrainStepPlan`; every network input is detached, so between steps
the gradient is carried by the scalar ``a_t`` coefficients alone.
:func:`drtune_gradient_manual` evaluates that sum explicitly and serves as
an independent check on autodiff through the unrolled sampler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from probekit import diffusion
from probekit import tensor as tn
from probekit.detector import detector_logits, predict
from probekit.errors import ContractError, TrainingError
from probekit.lora import LoraParams, attach_lora
from probekit.optim import SGD
from probekit.seeding import derive_rng, derive_seed
from probekit.tensor import ParamStore, Tensor
from probekit.toydata import SplitDataset


@dataclass(frozen=True)
class TrainStepPlan:
    T: int
    K: int
    t_s: int
    steps: tuple

    @property
    def stride(self) -> int:
        return self.T // self.K


def make_train_steps(
    T: int,
    K: int,
    t_s: int | None = None,
    rng: np.random.Generator | None = None,
    convention: str = "printed",
) -> TrainStepPlan:
    """Steps ``{t_s, t_s + T//K, ...}`` inside ``[1, T]``.

    ``convention="printed"`` enumerates ``K + 1`` candidates
    (``t_s + k * (T // K)`` for ``k = 0..K``) and keeps those ``<= T``;
    ``convention="k"`` enumerates exactly ``K``. Either way the first ``K``
    candidates must fit, which bounds the valid start range to
    ``[1, T - (K - 1) * (T // K)]``; a random start is drawn uniformly from it.
    """
    if not 1 <= K <= T:
        raise ContractError(f"need 1 <= K <= T, got K={K}, T={T}")
    if convention not in ("printed", "k"):
        raise ContractError(f"unknown step-count convention {convention!r}")
    stride = T // K
    hi = T - (K - 1) * stride
    if t_s is None:
        rng = rng if rng is not None else np.random.default_rng()
        t_s = int(rng.integers(1, hi + 1))
    if not 1 <= t_s <= hi:
        raise ContractError(f"start step {t_s} puts plan outside [1, {T}] (max start {hi})")
    count = K + 1 if convention == "printed" else K
    steps = tuple(t_s + k * stride for k in range(count) if t_s + k * stride <= T)
    return TrainStepPlan(T, K, t_s, steps)


def empty_plan(T: int) -> TrainStepPlan:
    return TrainStepPlan(T, 0, 0, ())


class PerceptualExtractor:
    """Three stride-2 conv layers (8/16/32 channels, ReLU) with fixed random weights."""

    def __init__(self, seed: int = 0, channels: tuple = (8, 16, 32)):
        rng = derive_rng(seed, "perceptual-init")
        dt = tn.get_dtype()
        self.channels = tuple(channels)
        self.params = ParamStore()
        c_in = 1
        for i, c in enumerate(self.channels):
            w = rng.standard_normal((c, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))
            self.params.add(f"conv{i + 1}.W", w.astype(dt), frozen=True)
            c_in = c

    def features(self, x: Tensor) -> list[Tensor]:
        n, h, w = x.shape
        f = tn.reshape(x, (n, 1, h, w))
        out = []
        for i in range(len(self.channels)):
            f = tn.relu(tn.conv2d(f, self.params[f"conv{i + 1}.W"], stride=2, pad=1))
            out.append(f)
        return out


def probe_loss(detector, x: Tensor) -> Tensor:
    """Mean ``softplus(z)`` over the batch (``== -log(1 - p_fake)``)."""
    return tn.mean(tn.softplus(detector_logits(detector, x)))


def perceptual_loss(extractor: PerceptualExtractor, x_adapted: Tensor, x_base) -> Tensor:
    """Sum over feature maps of the mean squared feature difference."""
    x_base = x_base if isinstance(x_base, Tensor) else Tensor(np.asarray(x_base, dtype=x_adapted.data.dtype))
    if x_base.shape != x_adapted.shape:
        raise ContractError(f"perceptual loss dims differ: {x_adapted.shape} vs {x_base.shape}")
    with tn.no_grad():
        fb = extractor.features(tn.stop_grad(x_base))
    fa = extractor.features(x_adapted)
    total = None
    for a, b in zip(fa, fb):
        term = tn.mse(a, b)
        total = term if total is None else tn.add(total, term)
    return total


@dataclass
class StepResult:
    total: float
    l_probe: float
    l_perc: float
    grads: dict
    x_adapted: np.ndarray  # (N, H, W) unclamped
    x_base: np.ndarray


def generator_objective(detector, extractor, x: Tensor, x_base: np.ndarray, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    lp = probe_loss(detector, x)
    lc = perceptual_loss(extractor, x, x_base)
    total = lp if lam == 0 else tn.add(lp, tn.scale(lc, lam))
    return total, lp, lc


def probe_step(
    net,
    lora: LoraParams,
    detector,
    extractor: PerceptualExtractor,
    schedule,
    class_ids,
    seeds,
    lam: float,
    plan: TrainStepPlan,
    guidance: float = 2.0,
    grad_branches: str = "both",
) -> StepResult:
    """One evaluation of ``L_probe + lam * L_perc`` and its LoRA gradient."""
    size = net.image_size
    with tn.no_grad():
        base = diffusion.sample(net, schedule, class_ids, seeds, guidance)
    x_base = base.x0.data.reshape(-1, size, size)
    with net.params.frozen(), detector.params.frozen():
        res = diffusion.sample(net, schedule, class_ids, seeds, guidance, lora, plan, grad_branches=grad_branches)
        x = tn.reshape(res.x0, (-1, size, size))
        total, lp, lc = generator_objective(detector, extractor, x, x_base, lam)
        grads = tn.backward(total, lora.store)
    return StepResult(float(total.data), float(lp.data), float(lc.data), grads, x.data.copy(), x_base)


def output_gradient(detector, extractor, x0: np.ndarray, x_base: np.ndarray, lam: float) -> np.ndarray:
    """dL/dx0 of the generator objective at a fixed output (N, H, W)."""
    leaf = Tensor(x0, requires_grad=True)
    with detector.params.frozen():
        total, _, _ = generator_objective(detector, extractor, leaf, x_base, lam)
        tn.backward(total, inputs=[leaf])
    return leaf.grad


def drtune_gradient_manual(
    trajectory,
    dL_dx0: np.ndarray,
    plan: TrainStepPlan,
    schedule,
    net,
    lora: LoraParams,
    class_ids,
    guidance: float = 2.0,
    grad_branches: str = "both",
    per_step: bool = False,
):
    """Sum over planned steps of ``(dL/dx0 * prod_{s<t} a_s) * b_t * d eps(x_t, t)/d lora``.

    ``trajectory[t]`` are the recorded chain values (N, D). With
    ``per_step=True`` also returns ``{t: GradMap}`` of the individual terms.
    """
    if len(trajectory) != schedule.T + 1 or any(trajectory[t] is None for t in plan.steps):
        raise ContractError("trajectory does not cover the plan")
    g0 = np.asarray(dL_dx0).reshape(len(trajectory[0]), -1)
    a = np.array([diffusion.ddim_coeffs(schedule, t)[0] for t in range(1, schedule.T + 1)])
    total = {n: np.zeros_like(lora.store[n].data) for n in lora.store.trainable()}
    terms = {}
    with net.params.frozen():
        for t in sorted(plan.steps):
            _, b, _ = diffusion.ddim_coeffs(schedule, t)
            coef = float(np.prod(a[: t - 1])) * b
            x_t = Tensor(trajectory[t])
            eps = net.guided_eps(x_t, t, class_ids, guidance, lora, grad_branches)
            cot = Tensor((coef * g0).astype(eps.data.dtype))
            grads = tn.backward(tn.sum(tn.mul(eps, cot)), lora.store)
            for n, g in grads.items():
                total[n] = total[n] + g
            if per_step:
                terms[t] = grads
    return (total, terms) if per_step else total


# ---------------------------------------------------------------------------
# the probing loop


@dataclass
class ProbeConfig:
    lam: float = 1.0
    lr: float = 1e-3
    momentum: float = 0.9
    batch: int = 16
    n_prompts: int = 2000
    K: int = 5
    t_s: int = 5
    t_s_mode: str = "fixed"
    rounds: int = 1
    rank: int = 4
    alpha: float | None = None
    seed: int = 0
    step_convention: str = "printed"
    grad_branches: str = "both"
    guidance: float = 2.0
    extractor_seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lam must be >= 0")
        if self.rounds < 1:
            raise ContractError("rounds must be >= 1")
        if self.t_s_mode not in ("fixed", "random"):
            raise ContractError(f"unknown t_s_mode {self.t_s_mode!r}")
        if self.grad_branches not in ("both", "cond"):
            raise ContractError(f"unknown grad_branches {self.grad_branches!r}")


@dataclass
class ProbeResult:
    lora: LoraParams
    samples: SplitDataset
    log: list = field(default_factory=list)


class ProbeAborted(TrainingError):
    def __init__(self, step: int, last_good: dict):
        self.last_good = last_good
        super().__init__("probe loss became non-finite", step)


def prompt_schedule(config: ProbeConfig, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Class conditions and latent seeds for every probing request."""
    rng = derive_rng(config.seed, "probe-prompts")
    classes = rng.integers(0, n_classes, size=config.n_prompts)
    seeds = np.array([derive_seed(config.seed, "probe-latent", i) for i in range(config.n_prompts)], dtype=np.int64)
    return classes, seeds


def run_probe(net, schedule, detector, config: ProbeConfig, extractor: PerceptualExtractor | None = None) -> ProbeResult:
    """One epoch of adapter optimization over ``config.n_prompts`` requests.

    Every adapted image generated along the way is kept as a probe sample
    (label 1, tag ``"probe"``) together with its seed, class, optimization
    step, its detector score and the score of the seed-paired base image.
    """
    extractor = extractor or PerceptualExtractor(config.extractor_seed)
    lora = attach_lora(net, config.rank, seed=derive_seed(config.seed, "lora"), alpha=config.alpha)
    opt = SGD(lora.store, lr=config.lr, momentum=config.momentum)
    classes, seeds = prompt_schedule(config, net.n_classes)
    plan_rng = derive_rng(config.seed, "probe-plans")
    fixed = config.t_s_mode == "fixed"
    size = net.image_size
    images, scores, base_scores, steps = [], [], [], []
    log = []
    n_steps = math.ceil(config.n_prompts / config.batch)
    for step in range(n_steps):
        sl = slice(step * config.batch, min((step + 1) * config.batch, config.n_prompts))
        plan = make_train_steps(
            schedule.T,
            config.K,
            config.t_s if fixed else None,
            None if fixed else plan_rng,
            config.step_convention,
        )
        res = probe_step(
            net, lora, detector, extractor, schedule, classes[sl], seeds[sl],
            config.lam, plan, config.guidance, config.grad_branches,
        )
        if not np.isfinite(res.total) or not all(np.all(np.isfinite(g)) for g in res.grads.values()):
            raise ProbeAborted(step, lora.store.snapshot())
        exported = np.clip(res.x_adapted, -1, 1)
        images.append(exported)
        scores.append(predict(detector, exported))
        base_scores.append(predict(detector, np.clip(res.x_base, -1, 1)))
        steps.append(np.full(len(exported), step))
        log.append({"step": step, "l_probe": res.l_probe, "l_perc": res.l_perc, "total": res.total, "t_s": plan.t_s})
        opt.step(res.grads)
    pixels = np.concatenate(images).reshape(-1, size, size)
    samples = SplitDataset(
        pixels,
        classes,
        np.ones(len(pixels), dtype=np.int64),
        ["probe"] * len(pixels),
        "probe",
        config.seed,
        {
            "seed": seeds,
            "score": np.concatenate(scores),
            "base_score": np.concatenate(base_scores),
            "step": np.concatenate(steps),
        },
    )
    return ProbeResult(lora, samples, log)


def replay_samples(net, schedule, lora, class_ids, seeds, guidance: float) -> np.ndarray:
    """Re-generate images with a fixed adapter (clamped, (N, H, W))."""
    return diffusion.generate_images(net, schedule, class_ids, seeds, guidance, lora)
