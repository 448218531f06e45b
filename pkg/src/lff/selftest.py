"""Built-in invariant checks, run by ``python -m lff selftest``.

Each check is small and fast; together they touch every module. The pytest
suite goes deeper, this is the copy that ships with the package.
"""

from __future__ import annotations

import dataclasses
import math
import tempfile
import traceback
from pathlib import Path

import numpy as np

from lff import tensor as T
from lff.adapter import build_audio_context, repeat_shift, timestep_embed
from lff.config import ExperimentConfig, ModelConfig
from lff.data import encode, generate_scene, read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor
from lff.dit import Model, assemble_conditioning, init_params, injection, velocity
from lff.errors import ConfigError, FormatError
from lff.flow import flow_forward, loss_branch, masked_loss, velocity_target
from lff.guidance import BranchSet, GuidanceConfig, cfg_combine, guidance_combine
from lff.layers import attention, scope
from lff.metrics import ciede2000, frame_ciede, latent_drift, sync_proxy
from lff.tensor import Rng, Tensor
from lff.windowing import (StepLog, dwsw_sample, euler_step, log_weights, make_plan, plain_window_sample,
                           stub_weighting_ablation)

CHECKS = []
_TINY = ModelConfig(dim=8, blocks=1, heads=2, height=8, width=8, freq_dim=8, adapter_blocks=1, text_tokens=2,
                    context_k=1, audio_dim=2)


def check(fn):
    CHECKS.append(fn)
    return fn


def _fd_check(f, x, g, tol=1e-5, h=1e-6):
    x = np.array(x, dtype=np.float64)
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        hi = f(x)
        x[i] = old - h
        lo = f(x)
        x[i] = old
        num[i] = (hi - lo) / (2 * h)
    scale = max(np.abs(num).max(), np.abs(g).max(), 1e-8)
    assert np.abs(num - g).max() / scale <= tol, f"gradient mismatch {np.abs(num - g).max() / scale:.2e}"


# -- tensor-core ------------------------------------------------------------


@check
def tensor_matmul_and_layer_norm():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])
    ln = T.layer_norm(Tensor(np.random.default_rng(0).standard_normal((4, 6))), eps=0.0).data
    assert np.allclose(ln.mean(-1), 0, atol=1e-12) and np.allclose(ln.std(-1), 1, atol=1e-12)


@check
def tensor_gradients():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    probe = rng.standard_normal((3, 2))

    def f(x):
        return float((T.gelu(T.matmul(Tensor(x), Tensor(b))).data * probe).sum())

    xa = Tensor(a, requires_grad=True)
    with T.GradTape() as tape:
        loss = T.tsum(T.gelu(T.matmul(xa, Tensor(b))) * probe)
    _fd_check(f, a, tape.gradient(loss, [xa])[0])


@check
def tensor_adam_lr_zero_and_rng():
    p = {"w": Tensor(np.ones(3))}
    new, st = T.adam_step(p, {"w": np.ones(3)}, T.adam_init(p), 0.0)
    assert np.array_equal(new["w"].data, p["w"].data) and st.step == 1
    assert np.array_equal(Rng(5).normal((4,)), Rng(5).normal((4,)))


# -- synth-data --------------------------------------------------------------


@check
def data_scene_and_sync():
    sc = generate_scene(Rng(0), 32)
    assert np.array_equal(sc.video[0], sc.reference_frame)
    assert np.all(sc.lip_mask <= sc.face_mask)
    assert sync_proxy(sc.amplitude, sc.video, sc.lip_mask) >= 0.99


@check
def data_tnsr_round_trip():
    x = np.random.default_rng(2).standard_normal((2, 3, 4))
    assert np.array_equal(tensor_from_bytes(tensor_to_bytes(x)), x)
    try:
        tensor_from_bytes(b"XXXX" + tensor_to_bytes(x)[4:])
    except FormatError as exc:
        assert exc.offset == 0
    else:
        raise AssertionError("bad magic accepted")
    with tempfile.TemporaryDirectory() as d:
        write_tensor(Path(d) / "x.tnsr", x.astype(np.float32))
        assert read_tensor(Path(d) / "x.tnsr").dtype == np.float32


# -- audio-adapter ------------------------------------------------------------


@check
def adapter_context_and_shift():
    ctx = build_audio_context(np.array([[1.0], [2.0], [3.0]]), 1)
    assert np.array_equal(ctx.values, [[1, 1, 2], [1, 2, 3], [2, 3, 3]])
    out = repeat_shift(Tensor([[1.0, 2.0]]), Tensor([[0.5, 0.0], [0.0, -1.0]]))
    assert np.array_equal(out.data, [[1.5, 2.0], [1.0, 1.0]])


@check
def adapter_collapse():
    params = init_params(_TINY, 0)
    for k in ("time.mlp.w2", "time.mlp.b2", "time.proj.b", "adapter.r"):
        params[k] = Tensor(np.zeros(params[k].shape))
    sc = generate_scene(Rng(1), 3, 8, 8, 2)
    pack = assemble_conditioning(sc.reference_frame, build_audio_context(sc.audio, 1), 3, _TINY)
    z = np.random.default_rng(3).standard_normal((3, 3, 8, 8))
    from lff.dit import embed_tokens, refine_audio

    tok = embed_tokens(z, pack, params, _TINY)
    a = refine_audio(pack, timestep_embed(0.1, params, _TINY), tok, params, _TINY).data
    b = refine_audio(pack, timestep_embed(0.9, params, _TINY), tok, params, _TINY).data
    assert np.abs(a - b).max() <= 1e-12


# -- flow-dit -----------------------------------------------------------------


@check
def flow_algebra():
    rng = np.random.default_rng(4)
    for _ in range(100):
        x0, n, t = rng.standard_normal(6), rng.standard_normal(6), rng.uniform()
        assert np.abs(flow_forward(x0, n, t) - t * velocity_target(x0, n) - x0).max() <= 1e-12


@check
def loss_branches():
    q = np.random.default_rng(5).uniform(size=100000)
    freq = {b: np.mean([loss_branch(float(v)) == b for v in q[:20000]]) for b in ("combined", "face", "lip")}
    assert abs(freq["combined"] - 0.4) < 0.02 and abs(freq["face"] - 0.1) < 0.02 and abs(freq["lip"] - 0.5) < 0.02
    zero = masked_loss(Tensor(np.ones((1, 3, 4, 4))), np.zeros((1, 3, 4, 4)), np.zeros((4, 4)), np.ones((4, 4)), 0.45)
    assert zero.item() == 0.0


@check
def dit_conditioning_and_injection():
    sc = generate_scene(Rng(6), 4, 8, 8, 2)
    pack = assemble_conditioning(sc.reference_frame, build_audio_context(sc.audio, 1), 4, _TINY)
    assert np.all(pack.temporal_mask[0] == 1) and np.all(pack.temporal_mask[1:] == 0)
    assert np.all(pack.reference_latent[1:] == 0)
    p = scope(init_params(_TINY, 1), "dit.block0")
    g = np.random.default_rng(7)
    x, a, i = (Tensor(g.standard_normal(s)) for s in ((6, 8), (2, 8), (3, 8)))
    full = injection(x, a, i, p, _TINY).data
    parts = attention(x, a, scope(p, "audio_attn"), 2).data + attention(x, i, scope(p, "img_attn"), 2).data
    assert np.abs(full - parts).max() <= 1e-12


@check
def dit_null_audio_isolation():
    model = Model.init(_TINY, 2)
    sc = generate_scene(Rng(8), 3, 8, 8, 2)
    pack = assemble_conditioning(sc.reference_frame, build_audio_context(sc.audio, 1), 3, _TINY)
    other = dataclasses.replace(pack, audio=build_audio_context(sc.audio[::-1] * 3.0, 1))
    z = np.random.default_rng(9).standard_normal((3, 3, 8, 8))
    assert np.array_equal(model.velocity(z, pack, 0.5, "null"), model.velocity(z, other, 0.5, "null"))
    assert np.array_equal(model.velocity(z, pack, 0.5, "none"), model.velocity(z, other, 0.5, "none"))


@check
def dit_gradient():
    params = init_params(_TINY, 3)
    sc = generate_scene(Rng(10), 2, 8, 8, 2)
    pack = assemble_conditioning(sc.reference_frame, build_audio_context(sc.audio, 1), 2, _TINY)
    rng = np.random.default_rng(11)
    z, probe = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((2, 3, 8, 8))
    zt = Tensor(z, requires_grad=True)
    with T.GradTape() as tape:
        loss = T.tsum(velocity(params, _TINY, zt, pack, 0.4) * probe)
    _fd_check(lambda x: float((velocity(params, _TINY, Tensor(x), pack, 0.4).data * probe).sum()), z,
              tape.gradient(loss, [zt])[0])


# -- guidance -----------------------------------------------------------------


@check
def guidance_identities():
    rng = np.random.default_rng(12)
    b = BranchSet(*(rng.standard_normal(5) for _ in range(3)))
    assert np.array_equal(guidance_combine(b, GuidanceConfig(alpha=0.0, beta=0.0)), b.d_full)
    assert guidance_combine(BranchSet(1.0, 0.0, 0.0), GuidanceConfig()) == 8.5
    out = guidance_combine(b, GuidanceConfig())
    expect = 4.5 * (b.d_full - b.d_no_audio) + 3.0 * (b.d_full - b.d_no_refined)
    assert np.abs(out - b.d_full - expect).max() <= 1e-12
    assert cfg_combine(np.array([3.0]), np.array([1.0]), 2.0)[0] == 5.0


# -- windowing ----------------------------------------------------------------


@check
def window_weights_and_plan():
    assert abs(log_weights(3)[1] - math.log(1 + (math.e - 1) / 2)) <= 1e-12
    for m in range(2, 65):
        assert np.all(np.diff(log_weights(m)) > 0)
    assert make_plan(8, 4, 2).schedule == ((0, 4), (2, 6), (4, 8))
    assert make_plan(9, 4, 2).schedule == ((0, 4), (2, 6), (4, 8), (6, 9))
    rng = np.random.default_rng(13)
    for _ in range(200):
        m = int(rng.integers(2, 10))
        l = int(rng.integers(m + 1, 20))
        L = int(rng.integers(l, 100))
        s = make_plan(L, l, m).schedule
        assert s[0][0] == 0 and s[-1][1] == L
        assert all(b[0] - a[0] == l - m for a, b in zip(s, s[1:]))


@check
def window_sampler_properties():
    def elementwise(z, s, e, t, tn, motion=None):
        return z * (1 - 0.5 * (t - tn))

    z = np.random.default_rng(14).standard_normal((20, 2))
    a = dwsw_sample(elementwise, z, make_plan(20, 8, 3), 5)
    b = dwsw_sample(elementwise, z, make_plan(20, 20, 3), 5)
    assert np.abs(a - b).max() <= 1e-12
    log = StepLog()
    plan = make_plan(12, 6, 2)
    dwsw_sample(elementwise, np.zeros((12, 1)), plan, 3, log=log)
    assert all(k > 0 and s > 0 for k, s, _ in log.fusions)
    assert [c[1:] for c in log.calls[:len(plan.schedule)]] == list(plan.schedule)
    const = lambda z, s, e, t, tn, motion=None: np.full_like(z, 2.0)
    assert np.array_equal(plain_window_sample(const, np.zeros((12, 1)), plan, 2),
                          dwsw_sample(const, np.zeros((12, 1)), plan, 2))
    x0, n = np.array([0.2]), np.array([1.5])
    assert abs(euler_step(n, n - x0, 1.0, 0.0) - x0).max() <= 1e-12
    res = stub_weighting_ablation()
    assert res["logarithmic"] <= res["fixed"]


# -- metrics ------------------------------------------------------------------


@check
def metrics_ciede_and_drift():
    from lff.metrics import delta_e00

    assert abs(delta_e00((50, 2.6772, -79.7751), (50, 0, -82.7485)) - 2.0425) <= 5e-5
    rng = np.random.default_rng(15)
    a, b = rng.random(3), rng.random(3)
    assert ciede2000(a, a) == 0 and abs(ciede2000(a, b) - ciede2000(b, a)) <= 1e-12
    f = rng.random((3, 4, 4))
    assert frame_ciede(f, f) == 0
    clip = rng.standard_normal((4, 2))
    ms, ss = latent_drift(np.concatenate([clip + 0.1 * i for i in range(4)]), 4)
    assert np.allclose(ms, 0.1 * np.arange(4), atol=1e-12) and np.allclose(ss, 0, atol=1e-12)


# -- harness ------------------------------------------------------------------


@check
def config_validation():
    cfg = ExperimentConfig()
    assert cfg.validate() == []
    cfg.window.overlap = 1
    cfg.train.lr = -1
    errs = cfg.validate()
    assert any(e.startswith("window.overlap") for e in errs) and any(e.startswith("train.lr") for e in errs)
    assert ExperimentConfig.from_dict(ExperimentConfig().to_dict()) == ExperimentConfig()
    try:
        ExperimentConfig.from_dict({"model": {"dimm": 3}})
    except ConfigError:
        pass
    else:
        raise AssertionError("unknown key accepted")


def run_all(verbose: bool = False) -> list[str]:
    failures = []
    for fn in CHECKS:
        try:
            fn()
            ok, msg = True, ""
        except Exception as exc:  # noqa: BLE001 - every failure is reported
            ok, msg = False, f"{type(exc).__name__}: {exc}"
            if verbose:
                traceback.print_exc()
        if not ok:
            failures.append(fn.__name__)
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {fn.__name__}{(': ' + msg) if msg else ''}")
    if verbose:
        print(f"{len(CHECKS) - len(failures)}/{len(CHECKS)} checks passed")
    return failures
