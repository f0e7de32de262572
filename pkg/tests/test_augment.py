import numpy as np
import pytest
import torch

from aoifusion import augment as ag
from aoifusion import fusionnet as fn
from aoifusion import neural, sim
from aoifusion.augment import DiffusionConfig, DiffusionModel
from conftest import line_scenario, random_sequence


def test_residual_windows_example(rng):
    seq = random_sequence(rng, K=20, A=2)
    seq.M[:] = 0.0
    seq.M[2:12, 0] = 1.0     # one run of 10 valid slots
    seq.M[0:5, 1] = 1.0      # too short for a window of 8
    eps = np.arange(20.0)[:, None] * [1.0, -1.0]
    seq.D = np.where(seq.M == 1, seq.G + eps, np.nan)
    wins, conds = ag.residual_windows(seq, length=8, stride=2)
    assert wins.shape == (2, 8)
    assert np.allclose(wins[0], np.arange(2.0, 10.0))
    assert np.allclose(wins[1], np.arange(4.0, 12.0))
    speed = np.linalg.norm(np.diff(seq.P, axis=0), axis=1) * seq.rate
    assert conds[0, 0] == pytest.approx(speed[2:10].mean())
    assert conds[0, 1] == pytest.approx(seq.M[2:10].sum(axis=1).mean())


def test_residuals_of_a_noiseless_log_are_zero():
    log = sim.generate(line_scenario(anchors=((50.0, 5.0, 0.0), (0.0, -5.0, 3.0))))
    recs = ag.extract_residuals(log)
    assert len(recs) == int(log.uwb_valid.sum())
    assert max(abs(r.epsilon) for r in recs) < 1e-9
    assert all(r.condition[0] == pytest.approx(10.0, abs=1e-6) for r in recs[5:-5])


def test_residual_file_round_trip(tmp_path):
    recs = [ag.ResidualRecord(0.5, 1, -0.02, (3.0, 4.0))]
    ag.write_residuals(recs, tmp_path / "r.jsonl")
    assert ag.read_residuals(tmp_path / "r.jsonl") == recs


def test_beta_schedule_validation():
    assert len(ag.beta_schedule(10, 1e-4, 0.02)) == 10
    with pytest.raises(ValueError):
        ag.beta_schedule(5, 1e-4, 0.02)
    with pytest.raises(ValueError):
        ag.beta_schedule(20, 0.0, 0.02)


def test_zero_denoiser_sampling_matches_schedule_variance():
    cfg = DiffusionConfig(steps=20, beta_start=0.01, beta_end=0.2, hidden=8)
    model = DiffusionModel(cfg).double()
    with torch.no_grad():
        for p in model.denoiser.parameters():
            p.zero_()
    x = ag.sample_residuals(model, np.zeros((20000, 2)), np.random.default_rng(0))
    betas = ag.beta_schedule(20, 0.01, 0.2)
    v = 1.0
    for t in range(19, -1, -1):
        v = v / (1 - betas[t]) + (betas[t] if t > 0 else 0.0)
    assert x.var() == pytest.approx(v, rel=0.03)
    assert abs(x.mean()) < 4 * np.sqrt(v / x.size) * np.sqrt(8)


def test_denoiser_loss_gradient_check():
    rng = np.random.default_rng(1)
    model = DiffusionModel(DiffusionConfig(hidden=8, length=4, t_embed=4)).double()
    x0 = torch.from_numpy(rng.normal(size=(5, 4)))
    t = torch.from_numpy(rng.integers(0, 50, size=5))
    cond = torch.from_numpy(rng.normal(size=(5, 2)))
    noise = torch.from_numpy(rng.normal(size=(5, 4)))
    f = lambda: model.loss(x0, t, cond, noise)
    assert neural.grad_check(f, list(model.parameters())) < 1e-4


def test_trained_sampler_recovers_a_simple_distribution():
    rng = np.random.default_rng(2)
    wins = rng.normal(2.0, 0.1, size=(2000, 8))
    conds = rng.uniform(0, 5, size=(2000, 2))
    model = ag.train_diffusion(wins, conds, DiffusionConfig(hidden=32, epochs=20, steps=30))
    x = ag.sample_residuals(model, conds[:500], np.random.default_rng(3))
    assert x.mean() == pytest.approx(2.0, abs=0.05)
    assert x.std() == pytest.approx(0.1, rel=0.5)


def test_diffusion_training_is_deterministic_and_round_trips(tmp_path):
    rng = np.random.default_rng(4)
    wins, conds = rng.normal(size=(64, 8)), rng.normal(size=(64, 2))
    cfg = DiffusionConfig(hidden=8, epochs=2, steps=10)
    a, b = ag.train_diffusion(wins, conds, cfg), ag.train_diffusion(wins, conds, cfg)
    assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))
    ag.save_diffusion(a, tmp_path / "d.json")
    c = ag.load_diffusion(tmp_path / "d.json")
    s1 = ag.sample_residuals(a, conds[:3], np.random.default_rng(0))
    s2 = ag.sample_residuals(c, conds[:3], np.random.default_rng(0))
    assert np.array_equal(s1, s2)
    with pytest.raises(ValueError):
        ag.train_diffusion(np.zeros((0, 8)), np.zeros((0, 2)), cfg)


def window(rng, K=20, A=3):
    return fn.make_windows(random_sequence(rng, K=K, A=A, p_visible=0.6), K)[0]


def test_mix_example(rng):
    w = window(rng)
    w.D = np.where(w.M == 1, w.G + 1.0, np.nan)
    out = ag.mix_and_inject(w, np.full(w.M.size, 3.0), alpha_gan=0.5, subset_frac=1.0, rng=rng)
    ok = w.M == 1
    assert np.allclose(out.D[ok], w.G[ok] + 2.0)
    assert np.all(np.isnan(out.D[~ok]))


def test_mix_rejects_bad_alpha(rng):
    with pytest.raises(ValueError):
        ag.mix_and_inject(window(rng), np.zeros(100), alpha_gan=1.5)


@pytest.mark.parametrize("seed", range(20))
def test_injection_preserves_sparsity_and_other_streams(seed):
    rng = np.random.default_rng(seed)
    w = window(rng)
    out = ag.mix_and_inject(w, ag.GaussianGenerator(rng.normal(size=(10, 8))), 0.5, 0.1, rng)
    for name in ("U", "M", "tau", "P", "G"):
        assert getattr(out, name) is getattr(w, name)
    assert np.array_equal(np.isnan(out.D), np.isnan(w.D))
    changed = (out.D != w.D) & (w.M == 1)
    assert changed.sum() <= np.ceil(0.1 * (w.M == 1).sum())


def test_alpha_zero_is_identity(rng):
    w = window(rng)
    out = ag.mix_and_inject(w, np.ones(100), alpha_gan=0.0, rng=rng)
    assert np.array_equal(out.D, w.D, equal_nan=True)


def test_generators_and_comparison(rng):
    real = rng.normal(0.1, 0.05, size=(400, 8))
    train = rng.normal(0.1, 0.05, size=(400, 8))
    conds = np.zeros((400, 2))
    samples = {g.name: g.sample(conds, rng) for g in
               (ag.GaussianGenerator(train), ag.BootstrapGenerator(train), ag.ConstantGenerator(0.5))}
    assert all(s.shape == (400, 8) for s in samples.values())
    rows = {r["generator"]: r for r in ag.compare_generators(real, samples)}
    assert rows["constant"]["ks"] == pytest.approx(1.0)
    assert rows["gaussian"]["ks"] < 0.1 and rows["bootstrap"]["ks"] < 0.1
    assert rows["constant"]["d_mean"] == pytest.approx(0.5 - real.mean())
    with pytest.raises(ValueError):
        ag.compare_generators(real, {"one": real})


def test_augmenter_is_reproducible(rng):
    w = window(rng)
    aug = ag.make_augmenter(ag.ConstantGenerator(0.3), 0.5, 0.5)
    a = aug(w, np.random.default_rng(9))
    b = aug(w, np.random.default_rng(9))
    assert np.array_equal(a.D, b.D, equal_nan=True)
