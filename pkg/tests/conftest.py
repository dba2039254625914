import numpy as np
import pytest

from probekit import diffusion, probe
from probekit import tensor as tn
from probekit.detector import DetectorNet
from probekit.lora import attach_lora


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm error relative to the reference's max-norm."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    return 0.0 if scale == 0 else float(np.max(np.abs(a - b)) / scale)


def tiny_setup(T: int, seed: int, size: int = 8, width: int = 8, guidance: float = 2.0):
    """A width-8 generator with a random (non-zero) adapter, a critic and an extractor, all 64-bit."""
    rng = np.random.default_rng(seed)
    s = diffusion.make_schedule(T, 0.05, 0.4)
    net = diffusion.DenoiserNet(size, 2, width, seed=seed, schedule=s, data_var=0.1)
    lora = attach_lora(net, rank=2, seed=seed)
    for name in lora.store.names():
        if name.endswith("/B"):
            lora.store[name].data[...] = 0.3 * rng.standard_normal(lora.store[name].shape)
    det = DetectorNet(size, seed=seed)
    ext = probe.PerceptualExtractor(seed)
    cls = rng.integers(0, 2, size=3)
    seeds = rng.integers(0, 2**31, size=3)
    return dict(schedule=s, net=net, lora=lora, det=det, ext=ext, cls=cls, seeds=seeds, g=guidance)


def autodiff_grads(setup, plan, lam=0.5):
    s, net, lora = setup["schedule"], setup["net"], setup["lora"]
    size = net.image_size
    with tn.no_grad():
        x_base = diffusion.sample(net, s, setup["cls"], setup["seeds"], setup["g"]).x0.data.reshape(-1, size, size)
    with net.params.frozen(), setup["det"].params.frozen():
        res = diffusion.sample(net, s, setup["cls"], setup["seeds"], setup["g"], lora, plan)
        total, _, _ = probe.generator_objective(setup["det"], setup["ext"], tn.reshape(res.x0, (-1, size, size)), x_base, lam)
        return tn.backward(total, lora.store)


def manual_grads(setup, plan, lam=0.5, per_step=False):
    s, net, lora = setup["schedule"], setup["net"], setup["lora"]
    size = net.image_size
    with tn.no_grad():
        x_base = diffusion.sample(net, s, setup["cls"], setup["seeds"], setup["g"]).x0.data.reshape(-1, size, size)
        traj = diffusion.sample(net, s, setup["cls"], setup["seeds"], setup["g"], lora, record_trajectory=True).trajectory
    g0 = probe.output_gradient(setup["det"], setup["ext"], traj[0].reshape(-1, size, size), x_base, lam)
    return probe.drtune_gradient_manual(traj, g0, plan, s, net, lora, setup["cls"], setup["g"], per_step=per_step)


# acceptance lines, echoed once more at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    with tn.precision("f64"):
        yield
