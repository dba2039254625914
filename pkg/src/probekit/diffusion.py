"""Class-conditional DDIM generator on flattened grayscale images.

The sampler step is written in coefficient form,
``x[t-1] = a_t * x[t] + b_t * eps_hat(x[t], t) + c_t * noise``, so the same
code path serves plain sampling and gradient-routed sampling (network input
detached, network call differentiable only at planned steps).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from probekit import tensor as tn
from probekit.errors import ConfigError, ContractError, ShapeError, TrainingError
from probekit.seeding import derive_rng
from probekit.tensor import ParamStore, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # beta[t-1] for t = 1..T
    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] = 1
    eta: float = 0.0

    def coeffs(self, t: int) -> tuple[float, float, float]:
        return ddim_coeffs(self, t)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.05, eta: float = 0.0) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    if eta < 0:
        raise ConfigError("eta must be >= 0")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(T, beta, alpha_bar, float(eta))


def ddim_coeffs(schedule: NoiseSchedule, t: int) -> tuple[float, float, float]:
    if not 1 <= t <= schedule.T:
        raise ContractError(f"timestep {t} outside [1, {schedule.T}]")
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    sigma = schedule.eta * np.sqrt((1 - ab_prev) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_prev)
    a = np.sqrt(ab_prev / ab_t)
    b = np.sqrt(max(1 - ab_prev - sigma**2, 0.0)) - a * np.sqrt(1 - ab_t)
    return float(a), float(b), float(sigma)


def q_sample(x0, t: int, eps, schedule: NoiseSchedule):
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`` (arrays or Tensors)."""
    if np.shape(getattr(x0, "data", x0)) != np.shape(getattr(eps, "data", eps)):
        raise ShapeError("q_sample: x0 and eps dims differ")
    t_arr = np.asarray(t)
    ab = schedule.alpha_bar[t_arr]
    if t_arr.ndim:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(getattr(x0, "data", x0)) - 1))
    if isinstance(x0, Tensor):
        dt = x0.data.dtype
        return tn.add(tn.mul(x0, Tensor(np.sqrt(ab).astype(dt))), tn.mul(eps, Tensor(np.sqrt(1 - ab).astype(dt))))
    dt = np.result_type(np.asarray(x0).dtype, np.float32)
    return (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps).astype(dt)


def timestep_embedding(t, n_freq: int = 32, max_period: float = 1000.0, dtype=np.float32) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.exp(-np.log(max_period) * np.arange(n_freq) / n_freq)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


# ---------------------------------------------------------------------------
# network


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = tn.matmul(x, tn.transpose(w))
    return out if b is None else tn.add(out, b)


def _init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng, gain: float = 1.0) -> None:
    w = rng.standard_normal((n_out, n_in)) * gain / np.sqrt(n_in)
    store.add(f"{name}.W", w.astype(tn.get_dtype()))
    store.add(f"{name}.b", np.zeros(n_out, dtype=tn.get_dtype()))


class DenoiserNet:
    """MLP epsilon-predictor with sinusoidal time and class embeddings.

    Layers: ``in_proj`` (image -> width), time MLP (64 -> width -> width),
    a class table with ``n_classes + 1`` rows (the last row is the null class
    used for classifier-free guidance), two residual hidden layers
    ``hidden1``/``hidden2`` and ``out_proj`` back to image dims.

    When a schedule is given the output is preconditioned,
    ``eps_hat = skip_t * x_t + out_t * F``: the width-limited MLP cannot
    represent the near-identity map eps-prediction needs at high noise, so
    that part is carried by a fixed per-step linear skip.
    """

    HIDDEN = ("hidden1", "hidden2")

    def __init__(
        self,
        image_size: int = 16,
        n_classes: int = 4,
        width: int = 128,
        seed: int = 0,
        n_freq: int = 32,
        schedule: "NoiseSchedule | None" = None,
        data_var: float = 0.25,
    ):
        self.image_size = image_size
        self.schedule = schedule
        self.data_var = float(data_var)
        self.n_classes = n_classes
        self.width = width
        self.n_freq = n_freq
        self.dim = image_size * image_size
        self.graph_calls = 0  # forward calls recorded with gradient
        rng = derive_rng(seed, "denoiser-init")
        p = ParamStore()
        _init_linear(p, "in_proj", self.dim, width, rng)
        _init_linear(p, "time_mlp1", 2 * n_freq, width, rng)
        _init_linear(p, "time_mlp2", width, width, rng)
        p.add("class_emb", (rng.standard_normal((n_classes + 1, width)) * 0.5).astype(tn.get_dtype()))
        _init_linear(p, "hidden1", width, width, rng)
        _init_linear(p, "hidden2", width, width, rng)
        _init_linear(p, "out_proj", width, self.dim, rng, gain=0.1)
        self.params = p

    @property
    def null_class(self) -> int:
        return self.n_classes

    def precond(self, t, dtype) -> tuple[np.ndarray, np.ndarray]:
        """Per-row (skip, out) factors: eps_hat = skip * x_t + out * F.

        ``skip`` is the least-squares coefficient of eps on x_t for data of
        variance ``data_var``; ``out`` rescales F to a unit-variance target.
        """
        ab = self.schedule.alpha_bar[np.asarray(t)]
        var_x = ab * self.data_var + 1 - ab
        skip = np.sqrt(1 - ab) / var_x
        out = np.sqrt(ab * self.data_var / var_x)
        return skip[:, None].astype(dtype), out[:, None].astype(dtype)

    def layer_weight(self, name: str, lora=None) -> Tensor:
        w = self.params[f"{name}.W"]
        if lora is not None and name in lora.entries:
            return lora.effective_weight(name, w)
        return w

    def forward(self, x: Tensor, t, class_ids, lora=None) -> Tensor:
        """eps prediction for a batch ``x`` of shape (N, H*W)."""
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"denoiser expects (N, {self.dim}), got {x.shape}")
        n = x.shape[0]
        p = self.params
        t_arr = np.broadcast_to(np.asarray(t), (n,))
        temb = Tensor(timestep_embedding(t_arr, self.n_freq, dtype=x.data.dtype))
        temb = tn.silu(_linear(temb, p["time_mlp1.W"], p["time_mlp1.b"]))
        temb = _linear(temb, p["time_mlp2.W"], p["time_mlp2.b"])
        cemb = tn.embed_lookup(p["class_emb"], np.broadcast_to(np.asarray(class_ids), (n,)))
        h = tn.silu(tn.add(tn.add(_linear(x, p["in_proj.W"], p["in_proj.b"]), temb), cemb))
        for name in self.HIDDEN:
            h = tn.add(h, tn.silu(_linear(h, self.layer_weight(name, lora), p[f"{name}.b"])))
        out = _linear(h, p["out_proj.W"], p["out_proj.b"])
        if self.schedule is not None:
            skip, scale_out = self.precond(t_arr, x.data.dtype)
            out = tn.add(tn.mul(x, Tensor(skip)), tn.mul(out, Tensor(scale_out)))
        if out.requires_grad:
            self.graph_calls += 1
        return out

    def guided_eps(self, x: Tensor, t, class_ids, guidance: float, lora=None, grad_branches: str = "both") -> Tensor:
        """Classifier-free guided eps: ``e_u + g (e_c - e_u)``.

        ``g == 0`` evaluates only the unconditional branch and ``g == 1`` only
        the conditional one. With ``grad_branches == "cond"`` the
        unconditional branch is evaluated without gradient.
        """
        n = x.shape[0]
        cls = np.broadcast_to(np.asarray(class_ids), (n,))
        null = np.full(n, self.null_class)
        if guidance == 0:
            return self.forward(x, t, null, lora)
        if guidance == 1:
            return self.forward(x, t, cls, lora)
        if grad_branches == "cond":
            with tn.no_grad():
                e_u = self.forward(x, t, null, lora)
            e_c = self.forward(x, t, cls, lora)
        else:
            both = self.forward(tn.concat([x, x], axis=0), t, np.concatenate([cls, null]), lora)
            e_c, e_u = both[:n], both[n:]
        return tn.add(e_u, tn.scale(tn.sub(e_c, e_u), guidance))


# ---------------------------------------------------------------------------
# training


@dataclass
class DenoiserTrainConfig:
    steps: int = 3000
    lr: float = 2e-3
    batch: int = 128
    cond_drop: float = 0.1
    seed: int = 0
    log_every: int = 0
    # preconditioner variance; None uses the empirical pixel variance.
    # Small values let the skip path strip noise the narrow MLP cannot model.
    data_var: float | None = 0.01


def train_denoiser(
    dataset,
    schedule: NoiseSchedule,
    config: DenoiserTrainConfig,
    net: DenoiserNet | None = None,
    width: int = 128,
) -> tuple[DenoiserNet, list[float]]:
    """Fit eps-prediction MSE with uniform timesteps and class dropout.

    Returns the trained net and the per-step training loss.
    """
    from probekit.optim import Adam

    pixels = np.asarray(dataset.pixels)
    n, size, _ = pixels.shape
    x_all = pixels.reshape(n, -1).astype(tn.get_dtype())
    classes = np.asarray(dataset.class_ids)
    if net is None:
        n_classes = int(classes.max()) + 1 if n else 1
        net = DenoiserNet(size, n_classes, width, seed=config.seed, schedule=schedule, data_var=float(x_all.var()) if config.data_var is None else config.data_var)
    rng = derive_rng(config.seed, "train-denoiser")
    opt = Adam(net.params, lr=config.lr)
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch)
        t = rng.integers(1, schedule.T + 1, size=config.batch)
        eps = rng.standard_normal((config.batch, net.dim)).astype(x_all.dtype)
        drop = rng.random(config.batch) < config.cond_drop
        c = np.where(drop, net.null_class, classes[idx])
        x_t = q_sample(x_all[idx], t, eps, schedule).astype(x_all.dtype)
        loss = tn.mse(net.forward(Tensor(x_t), t, c), Tensor(eps))
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError("denoiser loss diverged", step)
        grads = tn.backward(loss, net.params)
        opt.step(grads, lr_scale=_cosine(step, config.steps))
        losses.append(value)
    net.graph_calls = 0
    return net, losses


def _cosine(step: int, total: int) -> float:
    return 0.5 * (1 + np.cos(np.pi * step / max(total, 1)))


def denoiser_loss(net: DenoiserNet, dataset, schedule: NoiseSchedule, n: int = 256, seed: int = 0) -> float:
    """Held-out eps-MSE with a fixed noise draw (for before/after checks)."""
    rng = derive_rng(seed, "denoiser-eval")
    pixels = np.asarray(dataset.pixels)
    idx = rng.integers(0, len(pixels), size=n)
    x0 = pixels[idx].reshape(n, -1).astype(tn.get_dtype())
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    with tn.no_grad():
        pred = net.forward(Tensor(q_sample(x0, t, eps, schedule)), t, np.asarray(dataset.class_ids)[idx])
    return float(np.mean((pred.data - eps) ** 2))


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampleRequest:
    class_id: int
    guidance_scale: float = 2.0
    seed: int = 0
    grad_plan: object | None = None
    record_trajectory: bool = False


@dataclass
class SampleResult:
    x0: Tensor  # (N, H*W), unclamped
    trajectory: list | None = None  # trajectory[t] = x_t values, t = 0..T
    noise: dict = field(default_factory=dict)


def initial_latents(seeds: Sequence[int], dim: int, dtype=None) -> np.ndarray:
    dtype = dtype or tn.get_dtype()
    return np.stack([np.random.default_rng(int(s)).standard_normal(dim) for s in seeds]).astype(dtype)


def step_noise(seeds: Sequence[int], t: int, dim: int, dtype) -> np.ndarray:
    return np.stack([derive_rng(int(s), "ddim-noise", t).standard_normal(dim) for s in seeds]).astype(dtype)


def sample(
    net: DenoiserNet,
    schedule: NoiseSchedule,
    class_ids: Sequence[int],
    seeds: Sequence[int],
    guidance: float = 2.0,
    lora=None,
    plan=None,
    record_trajectory: bool = False,
    x_start: Tensor | None = None,
    t_start: int | None = None,
    grad_branches: str = "both",
    detach_input: bool = True,
) -> SampleResult:
    """Run the DDIM chain from ``t_start`` (default T) down to 0.

    Without a plan every network call is detached. With a plan, calls at
    ``t in plan.steps`` are recorded (input passed through ``stop_grad``),
    all others are detached, and the ``a_t * x_t`` path stays
    differentiable. ``x_start`` overrides the seeded latent (it may require
    grad, e.g. for latent-space attacks).
    """
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if class_ids.size and (class_ids.min() < 0 or class_ids.max() >= net.n_classes):
        raise ContractError(f"class ids must be in [0, {net.n_classes})")
    t0 = schedule.T if t_start is None else t_start
    if not 1 <= t0 <= schedule.T:
        raise ContractError(f"start step {t0} outside [1, {schedule.T}]")
    train_steps = set()
    if plan is not None:
        train_steps = set(plan.steps)
        bad = [t for t in train_steps if not 1 <= t <= schedule.T]
        if bad:
            raise ContractError(f"plan steps {bad} outside [1, {schedule.T}]")
    dtype = tn.get_dtype()
    x = x_start if x_start is not None else Tensor(initial_latents(seeds, net.dim, dtype))
    traj = [None] * (schedule.T + 1) if record_trajectory else None
    for t in range(t0, 0, -1):
        if traj is not None:
            traj[t] = x.data.copy()
        a, b, c = ddim_coeffs(schedule, t)
        x_in = tn.stop_grad(x) if detach_input else x
        if t in train_steps and tn.grad_enabled():
            eps = net.guided_eps(x_in, t, class_ids, guidance, lora, grad_branches)
        else:
            with tn.no_grad():
                eps = net.guided_eps(x_in, t, class_ids, guidance, lora, grad_branches)
        nxt = tn.add(tn.scale(x, a), tn.scale(eps, b))
        if c > 0:
            nxt = tn.add(nxt, Tensor(c * step_noise(seeds, t, net.dim, x.data.dtype)))
        x = nxt
    if traj is not None:
        traj[0] = x.data.copy()
    return SampleResult(x, traj)


def sample_requests(net, schedule, requests: Sequence[SampleRequest], lora=None) -> SampleResult:
    """Batch a homogeneous list of :class:`SampleRequest`."""
    if not requests:
        raise ContractError("no requests")
    g = requests[0].guidance_scale
    plan = requests[0].grad_plan
    if any(r.guidance_scale != g or r.grad_plan is not plan for r in requests):
        raise ContractError("requests in one batch must share guidance scale and plan")
    return sample(
        net,
        schedule,
        [r.class_id for r in requests],
        [r.seed for r in requests],
        g,
        lora,
        plan,
        any(r.record_trajectory for r in requests),
    )


def generate_images(net, schedule, class_ids, seeds, guidance: float, lora=None, batch: int = 512) -> np.ndarray:
    """Export-ready images (N, H, W), clamped to [-1, 1]."""
    class_ids = np.asarray(class_ids)
    seeds = np.asarray(seeds)
    out = []
    with tn.no_grad():
        for i in range(0, len(class_ids), batch):
            res = sample(net, schedule, class_ids[i : i + batch], seeds[i : i + batch], guidance, lora)
            out.append(res.x0.data)
    x = np.concatenate(out) if out else np.zeros((0, net.dim), dtype=tn.get_dtype())
    return np.clip(x, -1, 1).reshape(-1, net.image_size, net.image_size)


def one_step_denoise(net: DenoiserNet, schedule: NoiseSchedule, x: np.ndarray, t: int, class_ids=None) -> np.ndarray:
    """Estimate x0 treating ``x`` (N, D) as a sample at noise level ``t``."""
    n = len(x)
    cls = np.full(n, net.null_class) if class_ids is None else np.asarray(class_ids)
    with tn.no_grad():
        eps = net.forward(Tensor(x.astype(tn.get_dtype())), t, cls).data
    ab = schedule.alpha_bar[t]
    return (x - np.sqrt(1 - ab) * eps) / np.sqrt(ab)


# ---------------------------------------------------------------------------
# persistence


def net_manifest(net: DenoiserNet, schedule: NoiseSchedule, guidance: float, tag: str = "gen_base") -> dict:
    return {
        "kind": "denoiser",
        "tag": tag,
        "image_size": net.image_size,
        "C": net.n_classes,
        "width": net.width,
        "n_freq": net.n_freq,
        "data_var": net.data_var,
        "preconditioned": net.schedule is not None,
        "T": schedule.T,
        "beta_start": float(schedule.beta[0]),
        "beta_end": float(schedule.beta[-1]),
        "eta": schedule.eta,
        "g": guidance,
    }


def save_net(path, net: DenoiserNet, schedule: NoiseSchedule, guidance: float, tag: str = "gen_base") -> None:
    from probekit import archive

    archive.save_archive(path, net.params.snapshot(), net_manifest(net, schedule, guidance, tag))


def load_net(path) -> tuple[DenoiserNet, NoiseSchedule, dict]:
    from probekit import archive

    man = archive.load_manifest(path)
    entries = archive.load_archive(path)
    dtype = next(iter(entries.values())).dtype
    schedule = make_schedule(man["T"], man["beta_start"], man["beta_end"], man["eta"])
    with tn.precision("f64" if dtype == np.float64 else "f32"):
        net = DenoiserNet(
            man["image_size"],
            man["C"],
            man["width"],
            seed=0,
            n_freq=man["n_freq"],
            schedule=schedule if man.get("preconditioned", True) else None,
            data_var=man.get("data_var", 0.25),
        )
    net.params.load(entries)
    return net, schedule, man
