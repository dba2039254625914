import numpy as np
import pytest

from probekit import augment as aug
from probekit import diffusion, toydata
from probekit.detector import DetectorNet, predict
from probekit.errors import ContractError, ShapeError


@pytest.fixture(scope="module")
def images():
    return toydata.make_split(25, seed=0, split_name="train").pixels


def _random_images(n, size=16, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, size, size))


# ---------------------------------------------------------------------------
# block DCT


def test_quality_100_error_within_rounding_bound():
    x = _random_images(100, 16, seed=1)
    err = np.abs(aug.compress_blockdct(x, 100) - x)
    # 2/255 on the [0, 1] scale is 4/255 in [-1, 1] units
    assert err.max() <= 4 / 255


def test_dct_basis_is_orthonormal():
    d = aug._dct_matrix(8)
    np.testing.assert_allclose(d @ d.T, np.eye(8), atol=1e-14)


def test_lower_quality_degrades_more(images):
    grid = (30, 50, 70, 90, 100)
    for x in images[:20]:
        mse = [np.mean((aug.compress_blockdct(x, q) - x) ** 2) for q in grid]
        assert all(a >= b - 1e-12 for a, b in zip(mse, mse[1:]))


def test_constant_image_keeps_dc_within_one_step():
    for q in (10, 50, 75, 100):
        step = aug.quant_steps(q)[0, 0]
        for v in (-0.7, 0.0, 0.3):
            out = aug.compress_blockdct(np.full((16, 16), v), q)
            assert np.ptp(out) < 1e-9
            # DC coefficient is 8x the pixel mean on the 0-255 scale
            assert abs(out[0, 0] - v) * 127.5 <= step / 8 + 1e-9


def test_quality_is_validated():
    with pytest.raises(ContractError):
        aug.compress_blockdct(np.zeros((8, 8)), 0)
    with pytest.raises(ContractError):
        aug.quant_steps(101)


def test_non_multiple_of_eight_keeps_shape():
    x = _random_images(2, 12)
    assert aug.compress_blockdct(x, 75).shape == x.shape


# ---------------------------------------------------------------------------
# blur, noise, resize


def test_blur_sigma_zero_is_bit_identical(images):
    assert aug.gaussian_blur(images, 0.0).tobytes() == images.tobytes()


def test_blur_keeps_constants():
    for sigma in (0.3, 1.0, 2.5):
        x = np.full((16, 16), -0.25)
        np.testing.assert_allclose(aug.gaussian_blur(x, sigma), x, atol=1e-12)


def test_blur_contracts_variance():
    for x in _random_images(100, seed=2):
        assert aug.gaussian_blur(x, 1.0).var() <= x.var()


def test_blur_kernel_radius():
    assert len(aug.gaussian_kernel(1.0)) == 7
    assert len(aug.gaussian_kernel(0.4)) == 5
    with pytest.raises(ContractError):
        aug.gaussian_blur(np.zeros((4, 4)), -1)


def test_noise_std_matches_target():
    x = np.zeros((100, 100))
    out = aug.add_noise(x, 20.0, np.random.default_rng(0))
    target = 20.0 * 2 / 255
    assert abs(out.std() / target - 1) < 0.05


def test_noise_zero_and_determinism(images):
    assert aug.add_noise(images, 0.0, np.random.default_rng(0)).tobytes() == images.tobytes()
    a = aug.add_noise(images, 10.0, np.random.default_rng(4))
    b = aug.add_noise(images, 10.0, np.random.default_rng(4))
    assert a.tobytes() == b.tobytes()


def test_resize_identity_and_shape(images):
    assert aug.resize(images, 1.0).tobytes() == images.tobytes()
    assert aug.resize(images, 0.75).shape[-2:] == (12, 12)
    with pytest.raises(ShapeError):
        aug.resize(np.zeros((4, 4)), 0.1)
    with pytest.raises(ContractError):
        aug.resize(np.zeros((4, 4)), 0)


def test_resize_round_trip_on_smooth_images(images):
    smooth = aug.gaussian_blur(images.astype(np.float64), 1.0)
    back = aug.resize(aug.resize(smooth, 2.0), 0.5)
    # per-pixel bound on the [0, 1] image scale, like the other pixel budgets
    assert np.abs(back - smooth).max() / 2 < 0.05


def _second_difference_filter(v, axis):
    v = np.moveaxis(v, axis, -1)
    out = v.copy()
    out[..., 1:-1] += (v[..., :-2] - 2 * v[..., 1:-1] + v[..., 2:]) / 8
    return np.moveaxis(out, -1, axis)


def test_resize_round_trip_matches_closed_form():
    # half-pixel bilinear x2 then x0.5 is x + D2/8 along each axis away from borders
    x = np.random.default_rng(3).uniform(-0.5, 0.5, (4, 16, 16))
    back = aug.resize(aug.resize(x, 2.0), 0.5)
    ref = _second_difference_filter(_second_difference_filter(x, -1), -2)
    np.testing.assert_allclose(back[:, 1:-1, 1:-1], ref[:, 1:-1, 1:-1], atol=1e-12)


def test_resize_keeps_constants():
    for s in (0.5, 0.75, 1.3, 2.0):
        out = aug.resize(np.full((16, 16), 0.4), s)
        np.testing.assert_allclose(out, 0.4, atol=1e-12)


# ---------------------------------------------------------------------------
# pipeline


def test_identity_policy_is_bit_identical(images):
    pol = aug.AugmentPolicy.identity()
    rng = np.random.default_rng(0)
    for x in images:
        assert aug.random_augment(x, pol, rng).tobytes() == x.tobytes()


def test_random_augment_is_replayable_and_in_range(images):
    pol = aug.AugmentPolicy().with_prob(0.8)
    for i, x in enumerate(images):
        a = aug.random_augment(x, pol, np.random.default_rng(i))
        b = aug.random_augment(x, pol, np.random.default_rng(i))
        assert a.tobytes() == b.tobytes()
        assert a.shape == x.shape and a.dtype == x.dtype
        assert a.min() >= -1 and a.max() <= 1


def test_augment_batch_none_policy_passthrough(images):
    assert aug.augment_batch(images, None, 0) is images


# ---------------------------------------------------------------------------
# PGD


def test_pgd_config_invariants():
    with pytest.raises(ContractError):
        aug.PgdConfig(eps=1 / 255, alpha=2 / 255)
    with pytest.raises(ContractError):
        aug.PgdConfig(steps=0)
    with pytest.raises(ContractError):
        aug.PgdConfig(space="frequency")


def test_pgd_zero_budget_is_identity(images):
    det = DetectorNet(16, seed=0)
    x = images[:4]
    assert aug.pgd_pixel(x, det, aug.PgdConfig(eps=0.0)).tobytes() == x.tobytes()


def test_pgd_budget_and_monotone_score_over_many_calls():
    det = DetectorNet(8, seed=1)
    rng = np.random.default_rng(0)
    for i in range(1000):
        eps = float(rng.choice([1, 2, 4, 8])) / 255
        cfg = aug.PgdConfig(eps=eps, alpha=eps / 2, steps=2)
        x = rng.uniform(-1, 1, (2, 8, 8)).astype(np.float32)
        out = aug.pgd_pixel(x, det, cfg)
        assert np.abs(out - x).max() <= cfg.budget + 2 * np.finfo(np.float32).eps
        assert np.all(predict(det, out) <= predict(det, x))


def test_pgd_lowers_the_score_somewhere(images):
    det = DetectorNet(16, seed=2)
    x = images[:16]
    out = aug.pgd_pixel(x, det, aug.PgdConfig(eps=8 / 255, alpha=2 / 255, steps=5))
    assert predict(det, out).mean() < predict(det, x).mean()


def test_budget_violation_raises():
    with pytest.raises(ContractError):
        aug._check_budget(np.array([0.1]), aug.PgdConfig(eps=1 / 255))


@pytest.fixture(scope="module")
def small_generator():
    s = diffusion.make_schedule(4, 1e-4, 0.25)
    return diffusion.DenoiserNet(8, 2, 8, seed=0, schedule=s, data_var=0.1), s


def test_pgd_latent_zero_budget_equals_plain_sample(small_generator):
    net, s = small_generator
    det = DetectorNet(8, seed=3)
    cls, seeds = [0, 1, 1], [4, 5, 6]
    img, z = aug.pgd_latent(net, s, det, cls, seeds, 2.0, aug.PgdConfig(eps=0.0, space="latent"))
    plain = np.clip(diffusion.sample(net, s, cls, seeds, 2.0).x0.data, -1, 1).reshape(-1, 8, 8)
    assert img.tobytes() == plain.tobytes()


def test_pgd_latent_budget_and_score(small_generator):
    net, s = small_generator
    det = DetectorNet(8, seed=4)
    cls, seeds = [0, 1, 0, 1], [1, 2, 3, 4]
    cfg = aug.PgdConfig(eps=8 / 255, alpha=4 / 255, steps=3, space="latent")
    img, z = aug.pgd_latent(net, s, det, cls, seeds, 2.0, cfg)
    z0 = diffusion.initial_latents(seeds, 64, z.dtype)
    assert np.abs(z - z0).max() <= cfg.budget + 2 * np.finfo(z.dtype).eps
    plain = np.clip(diffusion.sample(net, s, cls, seeds, 2.0).x0.data, -1, 1).reshape(-1, 8, 8)
    assert np.all(predict(det, img) <= predict(det, plain))


def test_pgd_latent_rejects_bad_step(small_generator):
    net, s = small_generator
    with pytest.raises(ContractError):
        aug.pgd_latent(net, s, DetectorNet(8), [0], [0], 2.0, aug.PgdConfig(space="latent", latent_step_t=9))
