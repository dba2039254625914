import numpy as np
import pytest
from conftest import autodiff_grads, manual_grads, rel_err, tiny_setup
from hypothesis import given, settings
from hypothesis import strategies as st

from probekit import diffusion, lora as lr, probe
from probekit import tensor as tn
from probekit.detector import DetectorNet
from probekit.errors import ContractError
from probekit.tensor import ParamStore, Tensor

pytestmark = pytest.mark.usefixtures("f64")


# ---------------------------------------------------------------------------
# adapters


def test_zero_b_leaves_weight_exact():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((6, 5)))
    a = Tensor(rng.standard_normal((2, 5)))
    b = Tensor(np.zeros((6, 2)))
    assert lr.effective_weight(w, a, b, 1.0).data.tobytes() == w.data.tobytes()


def test_alpha_equal_rank_means_unit_scale():
    l = lr.LoraParams(rank=4, alpha=4, targets=["hidden1"])
    assert l.scale == 1.0
    rng = np.random.default_rng(1)
    w, a, b = (rng.standard_normal(s) for s in ((6, 5), (4, 5), (6, 4)))
    np.testing.assert_allclose(lr.effective_weight(Tensor(w), Tensor(a), Tensor(b), l.scale).data, w + b @ a)


def test_effective_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    w = Tensor(rng.standard_normal((5, 4)))
    x = Tensor(rng.standard_normal((3, 5)))
    store = ParamStore({"A": rng.standard_normal((2, 4)), "B": rng.standard_normal((5, 2))})

    def fn(p):
        weff = lr.effective_weight(w, p["A"], p["B"], 0.5)
        return tn.sum(tn.sigmoid(tn.matmul(x, weff)))

    assert tn.finite_diff_check(fn, store) < 1e-4


def test_base_weight_gets_no_gradient_through_adapter():
    rng = np.random.default_rng(3)
    store = ParamStore({"W": rng.standard_normal((3, 3)), "A": rng.standard_normal((1, 3)), "B": rng.standard_normal((3, 1))})
    loss = tn.sum(lr.effective_weight(store["W"], store["A"], store["B"], 1.0))
    assert not np.any(tn.backward(loss, store)["W"])


@pytest.mark.parametrize("rank", [1, 2, 4])
def test_delta_rank_is_bounded(rank):
    net = diffusion.DenoiserNet(8, 2, 16, seed=0)
    l = lr.attach_lora(net, rank=rank, seed=0)
    rng = np.random.default_rng(rank)
    for name in l.store.names():
        l.store[name].data[...] = rng.standard_normal(l.store[name].shape)
    for target in l.targets:
        delta = l.delta(target)
        assert lr.numerical_rank(delta, 1e-9) == np.linalg.matrix_rank(delta, tol=1e-9) <= rank


def test_attach_validates_targets_and_rank():
    net = diffusion.DenoiserNet(8, 2, 16, seed=0)
    with pytest.raises(ContractError):
        lr.attach_lora(net, targets=["attention"])
    with pytest.raises(ContractError):
        lr.attach_lora(diffusion.DenoiserNet(8, 2, 16, seed=0), rank=0)


def test_lora_roundtrip(tmp_path):
    net = diffusion.DenoiserNet(8, 2, 16, seed=0)
    l = lr.attach_lora(net, rank=3, seed=4, alpha=6.0)
    lr.save_lora(tmp_path / "l.ptar", l)
    back = lr.load_lora(tmp_path / "l.ptar")
    assert back.rank == 3 and back.scale == 2.0
    for k, v in l.store.snapshot().items():
        np.testing.assert_array_equal(back.store[k].data, v)


# ---------------------------------------------------------------------------
# step plans


def test_reference_plan():
    assert probe.make_train_steps(35, 5, t_s=5).steps == (5, 12, 19, 26, 33)
    assert probe.make_train_steps(35, 5, t_s=5, convention="k").steps == (5, 12, 19, 26, 33)


def test_full_plan_with_unit_stride():
    assert probe.make_train_steps(9, 9, t_s=1).steps == tuple(range(1, 10))


def test_printed_convention_keeps_extra_step_when_it_fits():
    assert probe.make_train_steps(35, 5, t_s=1).steps == (1, 8, 15, 22, 29)
    assert probe.make_train_steps(10, 2, t_s=1).steps == (1, 6)
    assert probe.make_train_steps(12, 5, t_s=1).steps == (1, 3, 5, 7, 9, 11)
    assert probe.make_train_steps(12, 5, t_s=1, convention="k").steps == (1, 3, 5, 7, 9)


def test_random_plans_stay_in_range():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        T = int(rng.integers(1, 60))
        K = int(rng.integers(1, T + 1))
        plan = probe.make_train_steps(T, K, rng=rng)
        assert all(1 <= t <= T for t in plan.steps)
        assert len(plan.steps) in (K, K + 1)


def test_plan_rejects_bad_start():
    with pytest.raises(ContractError):
        probe.make_train_steps(35, 5, t_s=20)
    with pytest.raises(ContractError):
        probe.make_train_steps(5, 6)


# ---------------------------------------------------------------------------
# losses


def _const_detector(z: float) -> DetectorNet:
    d = DetectorNet(8, seed=0)
    for name in d.params.names():
        d.params[name].data[...] = 0.0
    d.params["fc.b"].data[...] = z
    return d


@pytest.mark.parametrize("z,expected", [(0.0, np.log(2.0)), (-20.0, 2.061153622438558e-09)])
def test_probe_loss_values(z, expected):
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (4, 8, 8)))
    assert probe.probe_loss(_const_detector(z), x).item() == pytest.approx(expected, rel=1e-9)


def test_probe_loss_gradient_is_positive_in_logit():
    for z in np.linspace(-30, 30, 13):
        leaf = Tensor(np.array([z]), requires_grad=True)
        tn.backward(tn.mean(tn.softplus(leaf)), inputs=[leaf])
        assert leaf.grad[0] > 0


def test_perceptual_loss_zero_and_nonnegative():
    ext = probe.PerceptualExtractor(0)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (2, 8, 8))
    assert probe.perceptual_loss(ext, Tensor(x), x).item() == 0.0
    for _ in range(20):
        assert probe.perceptual_loss(ext, Tensor(rng.uniform(-1, 1, (2, 8, 8))), x).item() >= 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_losses_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    det = DetectorNet(8, seed=seed % 1000)
    ext = probe.PerceptualExtractor(seed % 1000)
    base = rng.uniform(-1, 1, (2, 8, 8))
    store = ParamStore({"x": rng.uniform(-1, 1, (2, 8, 8))})
    with det.params.frozen():
        # relu kinks make rare instances non-smooth; a 1e-6 step keeps them negligible
        assert tn.finite_diff_check(lambda p: probe.probe_loss(det, p["x"]), store, 1e-6) < 1e-4
        assert tn.finite_diff_check(lambda p: probe.perceptual_loss(ext, p["x"], base), store, 1e-6) < 1e-4


# ---------------------------------------------------------------------------
# gradient routing


def test_empty_plan_gives_zero_gradients():
    setup = tiny_setup(3, seed=0)
    for grads in (autodiff_grads(setup, probe.empty_plan(3)), manual_grads(setup, probe.empty_plan(3))):
        assert set(grads) == set(setup["lora"].store.names())
        assert all(not np.any(g) for g in grads.values())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_three_step_chain_matches_autodiff(seed):
    setup = tiny_setup(3, seed)
    plan = probe.make_train_steps(3, 3, t_s=1)
    auto, man = autodiff_grads(setup, plan), manual_grads(setup, plan)
    assert max(rel_err(auto[k], man[k]) for k in auto) < 1e-6


def test_single_step_term_matches_one_step_autodiff():
    setup = tiny_setup(5, seed=4)
    full = probe.make_train_steps(5, 5, t_s=1)
    _, terms = manual_grads(setup, full, per_step=True)
    for t in full.steps:
        one = probe.TrainStepPlan(5, 1, t, (t,))
        auto = autodiff_grads(setup, one)
        assert max(rel_err(auto[k], terms[t][k]) for k in auto) < 1e-6


def test_cond_only_branch_option_routes_through_conditional_call():
    setup = tiny_setup(3, seed=5)
    plan = probe.make_train_steps(3, 3, t_s=1)
    both = manual_grads(setup, plan)
    s, net, lora = setup["schedule"], setup["net"], setup["lora"]
    with tn.no_grad():
        traj = diffusion.sample(net, s, setup["cls"], setup["seeds"], 2.0, lora, record_trajectory=True).trajectory
    g0 = np.ones((3, 8, 8))
    cond = probe.drtune_gradient_manual(traj, g0, plan, s, net, lora, setup["cls"], 2.0, "cond")
    assert any(not np.allclose(cond[k], both[k]) for k in cond)


def test_probe_step_contract():
    setup = tiny_setup(5, seed=6)
    net, lora = setup["net"], setup["lora"]
    for name in lora.store.names():
        if name.endswith("/B"):
            lora.store[name].data[...] = 0.0
    plan = probe.make_train_steps(5, 2, t_s=1)
    args = (net, lora, setup["det"], setup["ext"], setup["schedule"], setup["cls"], setup["seeds"])
    r0 = probe.probe_step(*args, 0.0, plan)
    assert r0.total == r0.l_probe
    r1 = probe.probe_step(*args, 1.0, plan)
    assert r1.l_perc == 0.0  # zero-init adapter: adapted == base
    assert set(r1.grads) == set(lora.store.names())


def _frozen_state(net, det, ext):
    return [p.params.snapshot() for p in (net, det, ext)]


def test_run_probe_leaves_frozen_weights_untouched():
    setup = tiny_setup(5, seed=7)
    net, det, ext = setup["net"], setup["det"], setup["ext"]
    net.params.unfreeze()
    before = _frozen_state(net, det, ext)
    cfg = probe.ProbeConfig(n_prompts=12, batch=4, K=2, t_s=1, lr=0.05, seed=1)
    res = probe.run_probe(net, setup["schedule"], det, cfg, ext)
    after = _frozen_state(net, det, ext)
    for b, a in zip(before, after):
        assert b.keys() == a.keys()
        assert all(b[k].tobytes() == a[k].tobytes() for k in b)
    assert len(res.samples) == 12 and set(res.samples.source_tags) == {"probe"}
    assert res.samples.pixels.min() >= -1 and res.samples.pixels.max() <= 1


def test_probe_config_validation():
    with pytest.raises(ContractError):
        probe.ProbeConfig(lam=-1)
    with pytest.raises(ContractError):
        probe.ProbeConfig(rounds=0)
