import dataclasses

import numpy as np
import pytest

from lff import tensor as T
from lff.adapter import (ContextualAudio, TimestepEmbeds, adapter_forward, build_audio_context,
                         init_adapter_params, init_time_params, repeat_shift, timestep_embed)
from lff.config import ModelConfig
from lff.errors import ConfigError, DimensionError
from lff.layers import scope
from lff.tensor import Rng, Tensor
from oracles import central_difference, reference_adapter, rel_error

CFG = ModelConfig(dim=8, heads=2, freq_dim=8, audio_dim=2, context_k=1, adapter_blocks=2, audio_radius=None)


def test_context_example():
    ctx = build_audio_context(np.array([[1.0], [2.0], [3.0]]), 1)
    np.testing.assert_array_equal(ctx.values, [[1, 1, 2], [1, 2, 3], [2, 3, 3]])
    assert ctx.values.shape == (3, 3)


def test_context_k0_is_identity():
    a = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(build_audio_context(a, 0).values, a)


def test_context_errors():
    with pytest.raises(ConfigError):
        build_audio_context(np.zeros((3, 2)), 3)
    with pytest.raises(ConfigError):
        build_audio_context(np.zeros((3, 2)), -1)
    with pytest.raises(DimensionError):
        ContextualAudio(np.zeros((3, 5)), 1, 2)


def test_context_window():
    ctx = build_audio_context(np.arange(10.0)[:, None], 2)
    w = ctx.window(3, 6)
    assert w.frames == 3
    np.testing.assert_array_equal(w.values[0], [1, 2, 3, 4, 5])


def test_repeat_shift_example():
    out = repeat_shift(Tensor([[1.0, 2.0]]), Tensor([[0.5, 0.0], [0.0, -1.0]]))
    np.testing.assert_array_equal(out.data, [[1.5, 2.0], [1.0, 1.0]])
    with pytest.raises(DimensionError):
        repeat_shift(Tensor([[1.0, 2.0]]), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("d", [8, 16, 32])
def test_timestep_embedding_shapes(d):
    cfg = dataclasses.replace(CFG, dim=d, freq_dim=16)
    params = init_time_params(cfg, Rng(0))
    te = timestep_embed(0.3, params, cfg)
    assert te.e.shape == (1, d) and te.e0.shape == (6, d)
    assert not np.allclose(te.e0.data, timestep_embed(0.7, params, cfg).e0.data)


def _setup(seed=0, frames=4, tokens=12):
    rng = Rng(seed)
    params = init_adapter_params(CFG, rng)
    params.update(init_time_params(CFG, rng))
    g = np.random.default_rng(seed)
    # non-trivial modulation and shift
    params["adapter.r"] = Tensor(g.standard_normal((2, CFG.dim)) * 0.3)
    audio = g.standard_normal((frames, CFG.audio_width))
    z = g.standard_normal((tokens, CFG.dim))
    return params, audio, z


def test_matches_reference_implementation():
    params, audio, z = _setup()
    te = timestep_embed(0.4, params, CFG)
    out = adapter_forward(Tensor(audio), te, Tensor(z), scope(params, "adapter"), CFG)
    p = {k: v.data for k, v in scope(params, "adapter").items()}
    ref = reference_adapter(audio, te.e.data, te.e0.data, z, p, CFG.adapter_blocks, CFG.eps)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_locality_mask_matches_reference():
    cfg = dataclasses.replace(CFG, audio_radius=0)
    params, audio, z = _setup(1, frames=3, tokens=6)
    frames = np.repeat(np.arange(3), 2)
    te = timestep_embed(0.8, params, cfg)
    out = adapter_forward(Tensor(audio), te, Tensor(z), scope(params, "adapter"), cfg, frames)
    p = {k: v.data for k, v in scope(params, "adapter").items()}
    mask = np.arange(3)[:, None] == frames[None, :]
    ref = reference_adapter(audio, te.e.data, te.e0.data, z, p, cfg.adapter_blocks, cfg.eps, mask)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_output_shape_and_width_checks():
    params, audio, z = _setup()
    te = timestep_embed(0.5, params, CFG)
    ap = scope(params, "adapter")
    assert adapter_forward(Tensor(audio), te, Tensor(z), ap, CFG).shape == (4, CFG.dim)
    with pytest.raises(DimensionError):
        adapter_forward(Tensor(audio[:, :-1]), te, Tensor(z), ap, CFG)
    with pytest.raises(DimensionError):
        adapter_forward(Tensor(audio), te, Tensor(z[:, :-1]), ap, CFG)


def _collapsed(params):
    p = dict(params)
    for k in ("time.mlp.w2", "time.mlp.b2", "time.proj.b", "adapter.r"):
        p[k] = Tensor(np.zeros(p[k].shape))
    return p


def test_zero_modulation_is_timestep_invariant():
    params, audio, z = _setup(2)
    p = _collapsed(params)
    ap = scope(p, "adapter")
    te1, te2 = timestep_embed(0.1, p, CFG), timestep_embed(0.9, p, CFG)
    assert np.all(te1.e0.data == 0) and np.all(te1.e.data == 0)
    a = adapter_forward(Tensor(audio), te1, Tensor(z), ap, CFG).data
    b = adapter_forward(Tensor(audio), te2, Tensor(z), ap, CFG).data
    assert np.abs(a - b).max() <= 1e-12


def test_live_modulation_depends_on_timestep():
    params, audio, z = _setup(3)
    ap = scope(params, "adapter")
    a = adapter_forward(Tensor(audio), timestep_embed(0.1, params, CFG), Tensor(z), ap, CFG).data
    b = adapter_forward(Tensor(audio), timestep_embed(0.9, params, CFG), Tensor(z), ap, CFG).data
    assert np.abs(a - b).max() > 1e-3


def test_latent_sensitivity():
    params, audio, z = _setup(4)
    te = timestep_embed(0.5, params, CFG)
    ap = scope(params, "adapter")
    a = adapter_forward(Tensor(audio), te, Tensor(z), ap, CFG).data
    b = adapter_forward(Tensor(audio), te, Tensor(z + 0.5), ap, CFG).data
    assert np.abs(a - b).max() > 1e-4
    off = dataclasses.replace(CFG, adapter_cattn=False)
    a = adapter_forward(Tensor(audio), te, Tensor(z), ap, off).data
    b = adapter_forward(Tensor(audio), te, Tensor(z + 0.5), ap, off).data
    np.testing.assert_array_equal(a, b)


def test_modulation_variants():
    params, audio, z = _setup(5)
    ap = scope(params, "adapter")
    for mode in ("off", "random"):
        cfg = dataclasses.replace(CFG, modulation=mode)
        a = adapter_forward(Tensor(audio), timestep_embed(0.1, params, cfg), Tensor(z), ap, cfg).data
        b = adapter_forward(Tensor(audio), timestep_embed(0.9, params, cfg), Tensor(z), ap, cfg).data
        np.testing.assert_array_equal(a, b)


# -- gradients ------------------------------------------------------------


def _scalar_adapter(params, audio, z, t, probe):
    te = timestep_embed(t, params, CFG)
    return adapter_forward(audio, te, z, scope(params, "adapter"), CFG), te


def test_input_gradients():
    params, audio, z = _setup(6, frames=3, tokens=5)
    probe = np.random.default_rng(0).standard_normal((3, CFG.dim))
    a, zz = Tensor(audio, requires_grad=True), Tensor(z, requires_grad=True)
    with T.GradTape() as tape:
        out, _ = _scalar_adapter(params, a, zz, 0.35, probe)
        loss = T.tsum(out * probe)
    ga, gz = tape.gradient(loss, [a, zz])

    def f_audio(x):
        return float((_scalar_adapter(params, Tensor(x), Tensor(z), 0.35, probe)[0].data * probe).sum())

    def f_z(x):
        return float((_scalar_adapter(params, Tensor(audio), Tensor(x), 0.35, probe)[0].data * probe).sum())

    assert rel_error(ga, central_difference(f_audio, audio)) <= 1e-5
    assert rel_error(gz, central_difference(f_z, z)) <= 1e-5


def test_parameter_gradients():
    params, audio, z = _setup(7, frames=3, tokens=5)
    probe = np.random.default_rng(1).standard_normal((3, CFG.dim))
    tracked = T.track(params)
    with T.GradTape() as tape:
        out, _ = _scalar_adapter(tracked, Tensor(audio), Tensor(z), 0.6, probe)
        loss = T.tsum(out * probe)
    grads = T.grad_dict(tape, loss, tracked)
    live = [k for k in params if not k.startswith(("adapter.rand", "adapter.raw", "adapter.null"))]
    for name in live:
        def f(x, name=name):
            p = dict(params)
            p[name] = Tensor(x)
            return float((_scalar_adapter(p, Tensor(audio), Tensor(z), 0.6, probe)[0].data * probe).sum())

        numeric = central_difference(f, params[name].data)
        if name.endswith(".k.b"):
            # softmax ignores a shift shared by all keys: the exact gradient is zero
            assert np.abs(grads[name]).max() <= 1e-12 and np.abs(numeric).max() <= 1e-8, name
        else:
            assert rel_error(grads[name], numeric) <= 1e-5, name
    for name in ("adapter.rand_e", "adapter.raw.w", "adapter.null_audio"):
        assert np.all(grads[name] == 0)
