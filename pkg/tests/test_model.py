import numpy as np
import pytest
import torch

from mugl.errors import ConfigError, OutOfRange, ShapeMismatch
from mugl.kinematics import bone_lengths
from mugl.model import (
    MUGL,
    Condition,
    ModelConfig,
    PosteriorParams,
    config_from_dict,
    full_config,
    generate,
    local_positions,
)
from mugl.diffcore import parameter_count
from mugl.rotations import check_rotation, rot6d_to_matrix
from mugl.sequence import decode_length, sequence_world
from mugl.training import prepare_data

CFG = ModelConfig()


@pytest.fixture(scope="module")
def model():
    return MUGL(CFG).eval()


def cond(classes, views=None):
    classes = torch.as_tensor(classes)
    return Condition(classes, torch.zeros_like(classes) if views is None else torch.as_tensor(views))


def batch(desk, idx):
    manifest, samples = desk
    return prepare_data([samples[i] for i in idx], manifest.skeleton)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(T=12)
    with pytest.raises(ConfigError):
        config_from_dict({"latent": 3})
    assert config_from_dict(CFG.to_dict()) == CFG


def test_parameter_budgets():
    assert parameter_count(MUGL(CFG)) < 200_000
    assert 0.5e6 < parameter_count(MUGL(full_config())) < 2e6


def test_full_config_shapes():
    cfg = full_config()
    m = MUGL(cfg)
    n = 2
    c = Condition(torch.tensor([0, 119]), torch.tensor([0, 2]))
    post = m.encode(torch.zeros(n, cfg.T, cfg.P, cfg.J, 6), torch.zeros(n, cfg.T, cfg.P, 3), torch.ones(n, cfg.T), c)
    out = m.decode(post.mean, c)
    assert out["local6d"].shape == (n, 64, cfg.P, 24, 6) and out["code"].shape == (n, 64)


def test_encode_shape_and_determinism(model, desk):
    d = batch(desk, [0, 1, 60])
    p1 = model.encode(d.local6d, d.global_, d.code, d.condition())
    p2 = model.encode(d.local6d, d.global_, d.code, d.condition())
    assert p1.mean.shape == (3, CFG.latent_dim) == p1.logvar.shape
    assert torch.equal(p1.mean, p2.mean) and torch.equal(p1.logvar, p2.logvar)
    with pytest.raises(ShapeMismatch):
        model.encode(d.local6d[:, :8], d.global_, d.code, d.condition())


def test_encode_depends_on_class(trained, desk):
    d = batch(desk, [0, 1])
    m = trained.model
    a = m.encode(d.local6d, d.global_, d.code, cond([0, 0]))
    b = m.encode(d.local6d, d.global_, d.code, cond([3, 3]))
    assert torch.linalg.vector_norm(a.mean - b.mean) > 0


def test_reparameterize_vanishing_noise():
    mu = torch.linspace(-2, 2, CFG.latent_dim)[None]
    z = MUGL.reparameterize(PosteriorParams(mu, torch.full_like(mu, -float("inf"))), torch.Generator().manual_seed(0))
    assert torch.linalg.vector_norm(z - mu) <= 1e-2 * torch.linalg.vector_norm(mu) + 1e-2


def test_reparameterize_seeded():
    post = PosteriorParams(torch.zeros(2, 4), torch.zeros(2, 4))
    z1 = MUGL.reparameterize(post, torch.Generator().manual_seed(5))
    z2 = MUGL.reparameterize(post, torch.Generator().manual_seed(5))
    assert torch.equal(z1, z2)


def test_reparameterize_monte_carlo_mean():
    n = 100_000
    mu = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    logvar = torch.tensor([0.0, -1.0, 1.0], dtype=torch.float64)
    post = PosteriorParams(mu.expand(n, 3), logvar.expand(n, 3))
    z = MUGL.reparameterize(post, torch.Generator().manual_seed(0))
    sigma = torch.exp(0.5 * logvar)
    assert torch.all((z.mean(0) - mu).abs() < 3 * sigma / np.sqrt(n))
    assert torch.allclose(z.std(0), sigma, rtol=0.02)


def test_condition_latent(model):
    z = torch.randn(2, CFG.latent_dim, generator=torch.Generator().manual_seed(0))
    a = model.condition_latent(z, cond([0, 0]))
    assert a.shape == (2, CFG.stage_channels(CFG.stages), CFG.seed_steps)
    assert torch.equal(a, model.condition_latent(z, cond([0, 0])))
    b = model.condition_latent(z, cond([1, 1]))
    assert torch.linalg.vector_norm(a - b) > 0


def test_decoder_shapes_and_validity(model):
    g = torch.Generator().manual_seed(1)
    z_cv = torch.randn(100, CFG.stage_channels(CFG.stages), CFG.seed_steps, generator=g)
    with torch.no_grad():
        local = model.decode_local(z_cv)
        glob = model.decode_global(z_cv)
        code = model.decode_length_seq(z_cv)
    assert local.shape == (100, CFG.T, CFG.P, CFG.J, 6)
    assert glob.shape == (100, CFG.T, CFG.P, 3)
    check_rotation(rot6d_to_matrix(local))
    assert torch.isfinite(glob).all()
    assert torch.all(code[:, 1:] >= code[:, :-1])


def test_zero_decoder_gives_identity_zero_and_half():
    m = MUGL(CFG)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    z_cv = torch.randn(3, CFG.stage_channels(CFG.stages), CFG.seed_steps)
    local = m.decode_local(z_cv)
    np.testing.assert_allclose(rot6d_to_matrix(local).detach().numpy(), np.broadcast_to(np.eye(3), local.shape[:-1] + (3, 3)))
    assert torch.equal(m.decode_global(z_cv), torch.zeros(3, CFG.T, CFG.P, 3))
    code = m.decode_length_seq(z_cv)
    assert torch.equal(code, torch.full_like(code, 0.5))
    assert list(decode_length(code.detach().numpy())) == [CFG.T] * 3


def test_local_positions_conserve_bones(model, desk):
    manifest, _ = desk
    sk = manifest.skeleton
    z_cv = torch.randn(4, CFG.stage_channels(CFG.stages), CFG.seed_steps)
    pos = local_positions(model.decode_local(z_cv).double(), sk).detach().numpy()
    rest = bone_lengths(sk.rest, sk.tree)
    assert np.abs(bone_lengths(pos, sk.tree) - rest).max() / rest.min() < 1e-5


def test_forward_is_seeded(model, desk):
    d = batch(desk, [3, 50])
    o1 = model(d.local6d, d.global_, d.code, d.condition(), torch.Generator().manual_seed(2))
    o2 = model(d.local6d, d.global_, d.code, d.condition(), torch.Generator().manual_seed(2))
    assert torch.equal(o1["z"], o2["z"]) and torch.equal(o1["local6d"], o2["local6d"])


def test_generate_contract(trained, desk):
    manifest, _ = desk
    m = trained.model
    assert generate(m, 1, 0, seed=0) == []
    a = generate(m, 1, 5, seed=3, person_counts=manifest.person_counts)
    b = generate(m, 1, 5, seed=3, person_counts=manifest.person_counts)
    assert a == b and len(a) == 5
    for s in a:
        assert 1 <= s.length <= CFG.T and s.class_label == 1
        # single-person classes carry a copy of person 1 with zero displacement
        np.testing.assert_array_equal(s.local[:, 0], s.local[:, 1])
        np.testing.assert_array_equal(s.displacements, 0)
    with pytest.raises(OutOfRange):
        generate(m, 9, 1, seed=0)


def test_generate_300_per_class_and_upsampling(trained, desk):
    manifest, _ = desk
    seqs = generate(trained.model, 2, 300, seed=1, person_counts=manifest.person_counts)
    assert len(seqs) == 300
    sk = manifest.skeleton
    rest = bone_lengths(sk.rest, sk.tree)
    for s in seqs[:20]:
        world = sequence_world(s, sk)
        assert np.abs(bone_lengths(world, sk.tree) - rest).max() / rest.min() < 1e-4
    up = generate(trained.model, 2, 3, seed=1, person_counts=manifest.person_counts, upsample=4)
    assert up[0].T == 4 * CFG.T
    for s, u in zip(seqs[:3], up):
        assert u.length == round((s.length - 1) * (4 * CFG.T - 1) / (CFG.T - 1)) + 1
        np.testing.assert_allclose(u.trajectory[-1], s.trajectory[-1], atol=1e-5)


def test_trained_lengths_in_range(trained):
    seqs = generate(trained.model, 0, 50, seed=9)
    assert all(1 <= s.length <= CFG.T for s in seqs)
