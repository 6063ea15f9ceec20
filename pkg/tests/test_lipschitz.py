import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from torch import nn

from oracles import spectral_norm_svd
from trajsynth.core import Dataset
from trajsynth.diffusion import DiffusionConfig, GuidanceConfig, build_denoiser, predict_noise
from trajsynth.diffusion.model import DenoiserModel
from trajsynth.lipschitz import (
    AdjointMismatchError,
    JacobianOracle,
    NonFiniteProbeError,
    check_decoder_ball_bound,
    layer_norms,
    layer_product_bound,
    local_lipschitz_condition,
    power_iteration,
)
from trajsynth.segmentation import LatentCell
from trajsynth.vae import VaeConfig, train_vae

L = 8
MICRO = DiffusionConfig(widths=(4, 8), time_dim=8, emb_dim=8, attention=False, T=20)


def micro_model(seed=0, noise=0.05):
    model = build_denoiser(L, 4, DiffusionConfig(**{**MICRO.to_dict(), "seed": seed}), torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for net in (model.net, model.ema):
            for p in net.parameters():
                p.add_(noise * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


class Scale(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x, t, cond):
        return self.c * x


def stub_model(c=2.0):
    net = Scale(c)
    base = build_denoiser(L, 4, MICRO)
    return DenoiserModel(net, net, MICRO, base.schedule, L, 4)


# --------------------------------------------------------------------------
# power iteration


@pytest.mark.parametrize("n", [1, 3, 10])
def test_identity(n):
    assert power_iteration(JacobianOracle.from_matrix(np.eye(n))) == pytest.approx(1.0, rel=1e-12)


def test_diagonal():
    assert power_iteration(JacobianOracle.from_matrix(np.diag([3.0, 1.0]))) == pytest.approx(3.0, rel=1e-12)


def test_zero_operator():
    assert power_iteration(JacobianOracle.from_matrix(np.zeros((3, 4)))) == 0.0


@given(seed=st.integers(0, 2**31), m=st.integers(1, 12), n=st.integers(1, 12))
def test_matches_svd(seed, m, n):
    a = np.random.default_rng(seed).standard_normal((m, n))
    exact = spectral_norm_svd(a)
    assert abs(power_iteration(JacobianOracle.from_matrix(a), 300, seed) - exact) <= 1e-6 * exact


def test_random_5x7_matches_svd():
    a = np.random.default_rng(5).standard_normal((5, 7))
    assert abs(power_iteration(JacobianOracle.from_matrix(a)) - spectral_norm_svd(a)) < 1e-6 * spectral_norm_svd(a)


@given(arrays(np.float64, (6, 5), elements=st.floats(-10, 10)), st.integers(0, 1000))
def test_history_nondecreasing(a, seed):
    hist = []
    power_iteration(JacobianOracle.from_matrix(a), 50, seed, history=hist)
    h = np.array(hist)
    assert np.all(np.diff(h) >= -1e-9 * max(h.max(), 1.0))


def test_retry_guard_keeps_lower_bound():
    # nearly equal top singular values converge slowly; the result must still be <= sigma_max
    a = np.diag([1.0, 1.0 - 1e-4, 0.5])
    est = power_iteration(JacobianOracle.from_matrix(a), 5, 0)
    assert est <= 1.0 + 1e-12 and est > 0.99


def test_power_iteration_validation():
    with pytest.raises(ValueError):
        power_iteration(JacobianOracle.from_matrix(np.eye(2)), 0)
    with pytest.raises(ValueError):
        JacobianOracle.from_matrix(np.zeros(3))


def test_adjoint_probe():
    a = np.random.default_rng(0).standard_normal((4, 6))
    good = JacobianOracle.from_matrix(a)
    assert good.check_adjoint() < 1e-12
    bad = JacobianOracle(lambda v: a @ v, lambda u: 1.1 * (a.T @ u), 6, 4)
    with pytest.raises(AdjointMismatchError):
        bad.check_adjoint()


# --------------------------------------------------------------------------
# Monte-Carlo estimate on the denoiser


def test_linear_stub_gives_its_scale():
    for s in (1.0, 2.5):
        est = local_lipschitz_condition(stub_model(2.0), np.zeros(4), GuidanceConfig(s), n_samples=7, n_iters=20)
        np.testing.assert_allclose(est.sigma_max, 2.0, rtol=1e-4)
        assert est.L_value == pytest.approx(2.0, rel=1e-4)


def test_end_to_end_stub():
    est = local_lipschitz_condition(stub_model(0.5), np.zeros(4), n_samples=2, n_iters=10, mode="end_to_end",
                                    adjoint_rtol=1e-2)
    assert est.mode == "end_to_end" and est.L_value > 0


def test_per_sample_values_match_exact_jacobian_norm():
    model = micro_model()
    cond = np.linspace(-1, 1, 4)
    g = GuidanceConfig(2.5)
    est = local_lipschitz_condition(model, cond, g, n_samples=4, seed=3, n_iters=200)
    rng = np.random.default_rng(3)
    xs = rng.standard_normal((4, 2, L))
    ts = rng.integers(1, MICRO.T + 1, size=4)
    np.testing.assert_array_equal(est.timesteps, ts)
    for x, t, s in zip(xs, ts, est.sigma_max):
        J = torch.autograd.functional.jacobian(
            lambda z: predict_noise(model, z[None], int(t), cond, g)[0].flatten(), torch.as_tensor(x)
        ).reshape(2 * L, 2 * L)
        exact = spectral_norm_svd(J.numpy())
        # central differences with step 1e-4 carry O(h^2) error
        assert abs(s - exact) < 1e-5 * exact


def test_estimate_is_max_and_serializes():
    est = local_lipschitz_condition(micro_model(), np.zeros(4), n_samples=6, n_iters=30)
    assert est.L_value == est.sigma_max.max() >= est.mean
    assert est.samples_used == 6
    d = est.to_dict()
    assert d["L_value"] == est.L_value and d["mode"] == "per_step_max"


@pytest.fixture(scope="module")
def seed_estimates(overfit_model):
    model, _, cond = overfit_model
    return [local_lipschitz_condition(model, cond, n_samples=300, seed=s, n_iters=30) for s in range(5)]


def _spread(vals):
    med = np.median(vals)
    return max(abs(v - med) / med for v in vals)


@pytest.mark.slow
def test_estimate_mean_stable_across_seeds(seed_estimates):
    assert _spread([e.mean for e in seed_estimates]) < 0.10


@pytest.mark.slow
@pytest.mark.xfail(reason="the max over 300 Monte-Carlo samples is heavy-tailed; it moves by about 15% "
                          "between seeds while the mean stays within 5%", strict=False)
def test_estimate_max_stable_across_seeds(seed_estimates):
    assert _spread([e.L_value for e in seed_estimates]) < 0.10


def test_cell_id_from_latent_cell():
    cell = LatentCell(4, -np.ones(2), np.ones(2), ("a", "b"))
    est = local_lipschitz_condition(micro_model(), cell, n_samples=2, n_iters=5)
    assert est.cell_id == 4


def test_estimate_validation():
    with pytest.raises(ValueError, match="mode"):
        local_lipschitz_condition(stub_model(), np.zeros(4), mode="global")
    with pytest.raises(ValueError):
        local_lipschitz_condition(stub_model(), np.zeros(4), n_samples=0)


def test_nonfinite_probe_raises():
    with pytest.raises(NonFiniteProbeError):
        local_lipschitz_condition(stub_model(float("inf")), np.zeros(4), n_samples=1, n_iters=2)


# --------------------------------------------------------------------------
# decoder bound


class IdentityDecoder:
    latent_dim = 2

    def __init__(self):
        lin = nn.Linear(2, 2)
        with torch.no_grad():
            lin.weight.copy_(torch.eye(2))
            lin.bias.zero_()
        self.decoder = nn.Sequential(lin, nn.Unflatten(1, (1, 2)))

    def decode_batch(self, z):
        return np.asarray(z, dtype=np.float64).reshape(-1, 1, 2)


def test_identity_decoder_bound():
    stub = IdentityDecoder()
    assert layer_product_bound(stub.decoder, 2) == pytest.approx(1.0, rel=1e-12)
    cell = LatentCell(0, np.array([0.0, 0.0]), np.array([3.0, 4.0]), ("a",))
    rep = check_decoder_ball_bound(stub, cell, n_probe=2000)
    assert rep.violations == 0
    assert rep.max_distance <= 2.5 and rep.bound == pytest.approx(2.5)
    assert rep.L_sampled == pytest.approx(1.0, rel=1e-12)


def test_unbounded_cell_rejected():
    cell = LatentCell(0, np.array([-np.inf, 0.0]), np.array([1.0, 1.0]), ("a",))
    with pytest.raises(ValueError, match="bounded"):
        check_decoder_ball_bound(IdentityDecoder(), cell)


def test_layer_norms_reject_non_affine():
    with pytest.raises(TypeError, match="Tanh"):
        layer_norms(nn.Sequential(nn.Linear(2, 3), nn.Tanh()), 2)


def test_layer_norms_match_svd_for_linear_layers():
    torch.manual_seed(0)
    dec = nn.Sequential(nn.Linear(3, 5), nn.ReLU(), nn.Linear(5, 4))
    norms = layer_norms(dec, 3)
    assert norms[1] == ("ReLU", 1.0)
    for (_, n), k in zip([norms[0], norms[2]], [0, 2]):
        w = dec[k].weight.detach().double().numpy()
        assert n == pytest.approx(spectral_norm_svd(w), rel=1e-9)


def test_trained_vae_decoder_respects_bound():
    rng = np.random.default_rng(0)
    s = np.linspace(-1, 1, 16)
    pts = np.clip(np.stack([np.column_stack([s, a * s]) for a in rng.uniform(-1, 1, 64)]), -1, 1)
    vae = train_vae(Dataset(pts, tuple(map(str, range(64)))), VaeConfig(channels=(4, 8), epochs=5, batch_size=16))
    mu, _ = vae.encode_batch(pts)
    lo, hi = mu.min(0), mu.max(0)
    bound_L = layer_product_bound(vae.decoder, vae.latent_dim)
    for k, (a, b) in enumerate([(lo, hi), (lo, 0.5 * (lo + hi))]):
        rep = check_decoder_ball_bound(vae, LatentCell(k, a, b, ("x",)), n_probe=2000, seed=k,
                                       L_layer_product=bound_L)
        assert rep.violations == 0
        assert rep.L_sampled <= bound_L
