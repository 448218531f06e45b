import numpy as np
import pytest

from lff.config import ModelConfig
from lff.dit import Model, assemble_conditioning
from lff.adapter import build_audio_context
from lff.data import generate_scene, encode
from lff.errors import ConfigError, DimensionError
from lff.guidance import BranchSet, GuidanceConfig, cfg_combine, evaluate_branches, guidance_combine, guided_velocity
from lff.tensor import Rng, Tensor


def _branches(seed=0, shape=(3, 4)):
    rng = np.random.default_rng(seed)
    return BranchSet(*(rng.standard_normal(shape) for _ in range(3)))


def test_zero_scales_return_full_bitwise():
    b = _branches()
    out = guidance_combine(b, GuidanceConfig(alpha=0.0, beta=0.0))
    assert np.array_equal(out, b.d_full)


def test_equal_branches_fixed_point():
    v = np.random.default_rng(1).standard_normal((5, 2))
    out = guidance_combine(BranchSet(v, v.copy(), v.copy()), GuidanceConfig(alpha=4.5, beta=3.0))
    assert np.abs(out - v).max() <= 1e-12


def test_default_scales_on_unit_branches():
    cfg = GuidanceConfig()
    assert (cfg.alpha, cfg.beta) == (4.5, 3.0)
    assert guidance_combine(BranchSet(1.0, 0.0, 0.0), cfg) == 8.5


@pytest.mark.parametrize("alpha,beta", [(0.0, 1.0), (4.5, 3.0), (2.0, 0.0), (7.25, 0.5)])
def test_affine_decomposition(alpha, beta):
    b = _branches(2)
    out = guidance_combine(b, GuidanceConfig(alpha=alpha, beta=beta))
    expected = alpha * (b.d_full - b.d_no_audio) + beta * (b.d_full - b.d_no_refined)
    assert np.abs((out - b.d_full) - expected).max() <= 1e-12


def test_coefficients_sum_to_one():
    for a, bt in [(0, 0), (1, 2), (4.5, 3.0), (10, 0.1)]:
        assert guidance_combine(BranchSet(1.0, 1.0, 1.0), GuidanceConfig(alpha=a, beta=bt)) == pytest.approx(1.0, abs=1e-12)


def test_cfg_examples():
    c, u = np.array([3.0]), np.array([1.0])
    assert cfg_combine(c, u, 1.0)[0] == 3.0
    assert cfg_combine(c, u, 0.0)[0] == 1.0
    assert cfg_combine(c, u, 2.0)[0] == 5.0
    with pytest.raises(DimensionError):
        cfg_combine(np.zeros(2), np.zeros(3), 1.0)


def test_cfg_is_native_with_beta_zero():
    b = _branches(3)
    s = 2.5
    native = guidance_combine(BranchSet(b.d_full, b.d_no_audio, b.d_no_refined * 1e6), GuidanceConfig(alpha=s, beta=0.0))
    np.testing.assert_allclose(cfg_combine(b.d_full, b.d_no_audio, 1 + s), native, atol=1e-12)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        BranchSet(np.zeros(2), np.zeros(2), np.zeros(3))


def test_combine_requires_native_mode():
    with pytest.raises(ConfigError):
        guidance_combine(_branches(), GuidanceConfig(mode="cfg"))


def test_validation_messages():
    errs = GuidanceConfig(mode="x", alpha=-1).validate()
    assert any(e.startswith("guidance.mode") for e in errs)
    assert any(e.startswith("guidance.alpha") for e in errs)


# -- branches on a real (tiny) model -----------------------------------------

CFG = ModelConfig(dim=8, blocks=1, heads=2, height=8, width=8, freq_dim=8, adapter_blocks=1, text_tokens=2)


def _setup(seed=0, frames=4, amp=None):
    scene = generate_scene(Rng(seed), frames, 8, 8, CFG.audio_dim, amplitude=amp)
    ctx = build_audio_context(scene.audio, CFG.context_k if CFG.context_k < frames else frames - 1)
    pack = assemble_conditioning(scene.reference_frame, ctx, frames, CFG)
    z = np.random.default_rng(seed).standard_normal((frames, 3, 8, 8))
    return scene, pack, z


def test_dead_audio_pathway_makes_branches_coincide():
    model = Model.init(CFG, 0)
    for k in list(model.params):
        if ".audio_attn." in k:
            model.params[k] = Tensor(np.zeros(model.params[k].shape))
    _, pack, z = _setup()
    b = evaluate_branches(model, z, pack, 0.6)
    np.testing.assert_allclose(b.d_full, b.d_no_audio, atol=1e-12)
    np.testing.assert_allclose(b.d_full, b.d_no_refined, atol=1e-12)


def test_branches_pure_and_distinct():
    model = Model.init(CFG, 1)
    _, pack, z = _setup(1)
    b1 = evaluate_branches(model, z, pack, 0.3)
    b2 = evaluate_branches(model, z, pack, 0.3)
    for name in ("d_full", "d_no_audio", "d_no_refined"):
        assert np.array_equal(getattr(b1, name), getattr(b2, name))
    assert not np.allclose(b1.d_full, b1.d_no_audio)
    assert not np.allclose(b1.d_full, b1.d_no_refined)


def test_no_refined_branch_ignores_audio():
    model = Model.init(CFG, 2)
    _, pack, z = _setup(2, amp=np.zeros(4))
    _, pack2, _ = _setup(2, amp=np.ones(4))
    # same reference frame, different audio tracks
    pack2.reference_latent[...] = pack.reference_latent
    pack2.reference_frame[...] = pack.reference_frame
    assert not np.array_equal(pack.audio.values, pack2.audio.values)
    a = evaluate_branches(model, z, pack, 0.5)
    b = evaluate_branches(model, z, pack2, 0.5)
    assert np.array_equal(a.d_no_refined, b.d_no_refined)
    assert np.array_equal(a.d_no_audio, b.d_no_audio)
    assert not np.allclose(a.d_full, b.d_full)


def test_guided_velocity_modes():
    model = Model.init(CFG, 3)
    _, pack, z = _setup(3)
    b = evaluate_branches(model, z, pack, 0.4)
    np.testing.assert_array_equal(guided_velocity(model, z, pack, 0.4, GuidanceConfig(mode="off")), b.d_full)
    np.testing.assert_allclose(guided_velocity(model, z, pack, 0.4, GuidanceConfig()),
                               guidance_combine(b, GuidanceConfig()), atol=1e-12)
    np.testing.assert_allclose(guided_velocity(model, z, pack, 0.4, GuidanceConfig(mode="cfg", cfg_scale=2.0)),
                               cfg_combine(b.d_full, b.d_no_audio, 2.0), atol=1e-12)
