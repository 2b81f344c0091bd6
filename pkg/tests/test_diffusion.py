import math

import numpy as np
import pytest

from pdfield import diffcore as dc
from pdfield import diffusion as D
from pdfield.diffcore import Tensor
from pdfield.geometry import PointCloud, make_training_pair


@pytest.fixture(scope="module")
def ref():
    return D.linear_schedule(1000, 1e-4, 0.01)


def small_model(dtype=np.float64, seed=0):
    return D.Denoiser(np.random.default_rng(seed), hidden=16, code_dim=8, point_hidden=8, time_dim=8, dtype=dtype)


class EchoModel:
    """Stands in for the network: returns a fixed leaf tensor as the prediction."""

    dtype = np.float64

    def __init__(self, pred):
        self.pred = Tensor(pred, requires_grad=True)

    def forward_full(self, condition, noisy, t):
        return self.pred


def test_schedule_endpoints(ref):
    assert ref.betas[1] == pytest.approx(1e-4, abs=1e-18)
    assert ref.betas[1000] == pytest.approx(0.01, abs=1e-18)
    assert ref.alpha_bars[1] == pytest.approx(1 - 1e-4, abs=1e-16)


def test_alpha_bar_product_oracle(ref):
    prod = 1.0
    for t in range(1, 1001):
        prod *= 1.0 - (1e-4 + (t - 1) / 999 * (0.01 - 1e-4))
        assert abs(ref.alpha_bars[t] - prod) < 1e-12
    assert 0 < ref.alpha_bars[1000] < 0.01


def test_schedule_monotone(ref):
    assert np.all(np.diff(ref.betas[1:]) > 0)
    assert np.all(np.diff(ref.alpha_bars) < 0)
    np.testing.assert_allclose(ref.alpha_bars[1:], ref.alpha_bars[:-1] * ref.alphas[1:], rtol=1e-15)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.01), (100, 0.01, 1e-4), (100, 0.0, 0.01), (100, 1e-4, 1.0)])
def test_schedule_rejects_bad_parameters(args):
    with pytest.raises(ValueError):
        D.linear_schedule(*args)


def test_desk_schedule_forgets_the_data():
    s = D.scaled_schedule(100)
    assert s.betas[1] == pytest.approx(1e-3) and s.betas[100] == pytest.approx(0.1)
    assert s.alpha_bars[100] < 0.01
    # unscaled betas on a short chain leave most of the signal in place
    assert D.linear_schedule(100, 1e-4, 0.01).alpha_bars[100] > 0.5


def test_q_sample_examples(ref):
    x0 = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(D.q_sample(x0, 10, np.zeros_like(x0), ref), math.sqrt(ref.alpha_bars[10]) * x0)
    eps = np.random.default_rng(1).standard_normal((5, 3))
    out = D.q_sample(x0, 1000, eps, ref)
    ab = ref.alpha_bars[1000]
    # the data term is scaled by sqrt(ab) < 0.1, so the output is mostly the noise
    assert math.sqrt(ab) < 0.1
    np.testing.assert_allclose(out - eps, math.sqrt(ab) * x0 + (math.sqrt(1 - ab) - 1) * eps, atol=1e-14)
    with pytest.raises(ValueError):
        D.q_sample(x0, 0, eps, ref)
    with pytest.raises(ValueError):
        D.q_sample(x0, 1001, eps, ref)


def test_q_sample_per_batch_t(ref):
    x0 = np.ones((2, 4, 3))
    out = D.q_sample(x0, np.array([1, 1000]), np.zeros_like(x0), ref)
    np.testing.assert_allclose(out[0], math.sqrt(ref.alpha_bars[1]))
    np.testing.assert_allclose(out[1], math.sqrt(ref.alpha_bars[1000]))


def test_posterior_inverts_one_step(ref):
    rng = np.random.default_rng(2)
    x0, eps = rng.standard_normal((50, 3)), rng.standard_normal((50, 3))
    state = D.DiffusionState(np.zeros((3, 3)), D.q_sample(x0, 1, eps, ref), 1)
    out = D.reverse_step(None, state, ref, None, eps_hat=eps)
    assert out.t == 0
    assert np.max(np.abs(out.noisy - x0)) < 1e-6


def test_reverse_step_adds_sigma_noise(ref):
    state = D.DiffusionState(np.zeros((2, 3)), np.zeros((4, 3)), 500)
    noise = np.ones((4, 3))
    out = D.reverse_step(None, state, ref, noise, eps_hat=np.zeros((4, 3)))
    np.testing.assert_allclose(out.noisy, math.sqrt(ref.betas[500]))


def test_loss_masks_condition_slots(ref):
    rng = np.random.default_rng(3)
    m, n = 4, 6
    eps = rng.standard_normal((n, 3))
    pred = rng.standard_normal((m + n, 3))
    model = EchoModel(pred)
    loss = D.diffusion_loss(model, rng.standard_normal((m, 3)), rng.standard_normal((n, 3)), 7, eps, ref)
    assert loss.item() == pytest.approx(np.sum((eps - pred[m:]) ** 2) / eps.size, abs=1e-12)
    loss.backward()
    assert np.all(model.pred.grad[:m] == 0.0)
    assert np.any(model.pred.grad[m:] != 0.0)


def test_loss_zero_for_perfect_prediction(ref):
    rng = np.random.default_rng(4)
    eps = rng.standard_normal((6, 3))
    pred = np.concatenate([rng.standard_normal((4, 3)) * 100, eps])
    assert D.diffusion_loss(EchoModel(pred), np.zeros((4, 3)), np.zeros((6, 3)), 3, eps, ref).item() == 0.0


def test_loss_needs_generated_points(ref):
    with pytest.raises(ValueError):
        D.diffusion_loss(small_model(), np.zeros((4, 3)), np.zeros((0, 3)), 3, np.zeros((0, 3)), ref)


def test_denoiser_permutation_properties(ref):
    model = small_model()
    rng = np.random.default_rng(5)
    cond, noisy = rng.standard_normal((12, 3)), rng.standard_normal((9, 3))
    base = model(D.DiffusionState(cond, noisy, 40))
    perm = rng.permutation(9)
    np.testing.assert_allclose(model(D.DiffusionState(cond, noisy[perm], 40)), base[perm], atol=1e-12)
    np.testing.assert_allclose(model(D.DiffusionState(cond[rng.permutation(12)], noisy, 40)), base, atol=1e-6)


def test_denoiser_gradients_match_finite_differences(ref):
    model = small_model()
    rng = np.random.default_rng(6)
    cond, x0 = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 4, 3))
    eps = rng.standard_normal(x0.shape)
    t = np.array([3, 800])
    report = dc.check_gradients(lambda: D.diffusion_loss(model, cond, x0, t, eps, ref), model.parameters())
    assert max(report.values()) < 1e-4, report


def test_sampling_pins_condition_and_is_deterministic():
    s = D.scaled_schedule(20)
    model = small_model(np.float32)
    cond = PointCloud(np.random.default_rng(7).standard_normal((10, 3)))
    seen = []
    out = D.sample_superresolution(model, cond, 25, s, seed=3, chunk_size=10,
                                   callback=lambda st: seen.append(st.condition.copy()))
    assert len(out) == 35 and np.all(np.isfinite(out.points))
    assert np.array_equal(out.points[:10], cond.points)
    assert all(np.array_equal(c[0] if c.ndim == 3 else c, cond.points) for c in seen)
    again = D.sample_superresolution(model, cond, 25, s, seed=3, chunk_size=10)
    assert np.array_equal(out.points, again.points)


def test_chunk_sizes():
    assert D._chunk_sizes(30, 10) == [10, 10, 10]
    assert sum(D._chunk_sizes(31, 10)) == 31 and max(D._chunk_sizes(31, 10)) <= 10


def test_one_training_step_changes_parameters():
    src = PointCloud(np.random.default_rng(8).standard_normal((64, 3)))
    cfg = D.DiffusionConfig(T=20, reference_T=1000, steps=1, batch_size=2, log_every=0)
    model = cfg.build_model(np.random.default_rng(0))
    before = {k: v.copy() for k, v in model.state_dict().items()}
    D.train_diffusion(src, cfg, model=model)
    assert any(not np.array_equal(before[k], v) for k, v in model.state_dict().items())


def test_cosine_learning_rate():
    cfg = D.DiffusionConfig(lr=1e-3, steps=100, lr_schedule="cosine")
    assert cfg.lr_at(0) == 1e-3 and cfg.lr_at(50) == pytest.approx(5e-4)
    assert 0 < cfg.lr_at(99) < 1e-6
    assert D.DiffusionConfig(lr=1e-3).lr_at(99) == 1e-3


@pytest.mark.parametrize("kw", [dict(lr_schedule="step"), dict(ema=1.0), dict(ema=-0.1)])
def test_bad_training_options(kw):
    with pytest.raises(ValueError):
        D.DiffusionConfig(**kw)


def test_ema_weights_lag_the_raw_weights():
    src = PointCloud(np.random.default_rng(8).standard_normal((64, 3)))
    base = dict(T=20, reference_T=1000, steps=3, batch_size=2, log_every=0)
    init = D.DiffusionConfig(**base).build_model(np.random.default_rng(0)).state_dict()
    raw = D.train_diffusion(src, D.DiffusionConfig(**base)).model.state_dict()
    avg = D.train_diffusion(src, D.DiffusionConfig(**base, ema=0.5)).model.state_dict()
    k = "head.layers.0.weight"
    # a running average sits strictly between the start point and the last iterate
    assert 0 < np.abs(avg[k] - init[k]).sum() < np.abs(raw[k] - init[k]).sum()


def test_divergence_aborts_with_checkpoint(tmp_path):
    src = PointCloud(np.random.default_rng(9).standard_normal((64, 3)))
    cfg = D.DiffusionConfig(T=20, reference_T=1000, steps=5, batch_size=2, log_every=0)
    model = cfg.build_model(np.random.default_rng(0))
    model.head.layers[-1].weight.data[:] = np.nan
    with pytest.raises(D.TrainingDiverged):
        D.train_diffusion(src, cfg, checkpoint=tmp_path / "d.ckpt", model=model)
    assert (tmp_path / "d.ckpt").exists()


def test_checkpoint_roundtrip_reproduces_samples(tmp_path):
    s = D.scaled_schedule(20)
    model = small_model(np.float32)
    D.save_denoiser(tmp_path / "m.ckpt", model, s)
    back, s2, meta = D.load_denoiser(tmp_path / "m.ckpt")
    assert meta["schedule"] == {"T": 20, "beta0": s.beta0, "betaT": s.betaT}
    np.testing.assert_array_equal(s2.alpha_bars, s.alpha_bars)
    cond = PointCloud(np.random.default_rng(1).standard_normal((8, 3)))
    a = D.sample_superresolution(model, cond, 8, s, seed=5)
    b = D.sample_superresolution(back, cond, 8, s2, seed=5)
    assert np.array_equal(a.points, b.points)


def test_load_denoiser_rejects_other_kinds(tmp_path):
    dc.save_checkpoint(tmp_path / "x.ckpt", {"w": np.zeros(2)}, {"kind": "field"})
    with pytest.raises(dc.CheckpointError):
        D.load_denoiser(tmp_path / "x.ckpt")


def test_upsample_keeps_input_points_exactly():
    s = D.scaled_schedule(20)
    cloud = PointCloud(np.random.default_rng(2).random((16, 3)) * 5 + 3)
    dense = D.upsample_cloud(small_model(np.float32), s, cloud, factor=4, seed=0)
    assert len(dense) == 64
    assert np.array_equal(dense.points[:16], cloud.points)


def test_pair_loss_uses_the_pair():
    s = D.scaled_schedule(20)
    pair = make_training_pair(PointCloud(np.random.default_rng(3).standard_normal((40, 3))), 0.5, 0.5, 0)
    eps = np.random.default_rng(4).standard_normal(pair.target_extra.points.shape)
    model = small_model()
    a = D.pair_loss(model, pair, 4, eps, s).item()
    b = D.diffusion_loss(model, pair.condition.points, pair.target_extra.points, 4, eps, s).item()
    assert a == b
