import tracemalloc

import numpy as np
import pytest

from segstitch import tensor as T
from segstitch.attention import PatchGrid, dual_attention, embed_patches, init_attention
from segstitch.errors import ConfigurationError, DimensionError, UsageError
from segstitch.losses import soft_dice_loss
from segstitch.model import (ModelConfig, build_model, decoder_forward, downsample, encoder_forward, forward,
                             predict_labels, tokens_to_volume)
from segstitch.nmode import SolverConfig
from segstitch.profile import count_flops, count_params, matmul_maccs, profile
from segstitch.tensor import Tensor


def tiny(**kw):
    base = dict(in_channels=1, num_classes=2, input_shape=(32, 32, 32), patch_size=2, stage_widths=(8, 16, 32, 64),
                blocks_per_stage=1, heads=(1, 2, 2, 4), window=8)
    base.update(kw)
    return ModelConfig(**base)


def random_input(cfg, batch=1, seed=0):
    return np.random.default_rng(seed).standard_normal((batch, cfg.in_channels) + cfg.input_shape)


def closed_form_params(cin, k, p, widths, blocks):
    """Layer-by-layer parameter count written out from the layer shapes."""
    c1 = widths[0]
    total = p ** 3 * cin + p ** 3 * cin * c1  # token weights + linear embed
    for s, c in enumerate(widths):
        if s:
            total += 27 * widths[s - 1] * c + c + 2 * c  # conv + bias + group norm
        total += blocks * (2 * c + 6 * c * c + c * c + c)  # norm, 6 attention matrices, W1 + b
    for c_in, c in zip(widths[:0:-1], widths[-2::-1]):
        total += 8 * c_in * c + c + 27 * 2 * c * c + c + c * c + c
    return total + p ** 3 * c1 * c1 + c1 + k * c1 + k


def test_build_is_deterministic():
    a, b, c = build_model(tiny(), 3), build_model(tiny(), 3), build_model(tiny(), 4)
    assert list(a.named()) == list(b.named())
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))
    assert not all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), c.parameters()))


def test_initial_values():
    p = build_model(tiny())
    for name, t in p.named().items():
        if name.endswith(".m") or name.endswith(".b") or name.endswith("beta"):
            assert not t.data.any(), name
        if name.endswith("gamma"):
            assert np.all(t.data == 1), name
    w = p.stages[0].blocks[0].attention.w_q.data
    assert abs(w.std() - 0.02) < 0.01 and np.abs(w).max() <= 0.04 + 1e-7


@pytest.mark.parametrize("blocks", [1, 3])
def test_tiny_param_total_matches_closed_form(blocks):
    cfg = tiny(blocks_per_stage=blocks)
    assert count_params(build_model(cfg)).total_params == closed_form_params(1, 2, 2, (8, 16, 32, 64), blocks)
    assert closed_form_params(1, 2, 2, (8, 16, 32, 64), 1) == 207554


def test_doubling_widths_quadruples_square_projections():
    a = build_model(tiny()).named()
    b = build_model(tiny(stage_widths=(16, 32, 64, 128))).named()
    for name, t in a.items():
        if ".attn." in name or name.endswith("ode.w1") or ".fuse.w" in name or ".down.w" in name:
            assert b[name].size == 4 * t.size, name
        elif name.endswith((".b", "beta", "gamma")) and name != "head.conv.b":
            assert b[name].size == 2 * t.size, name
    assert b["head.conv.w"].size == 2 * a["head.conv.w"].size


def test_invalid_divisibility_names_axis():
    with pytest.raises(ConfigurationError, match="axis W"):
        tiny(input_shape=(32, 24, 32))
    with pytest.raises(ConfigurationError, match="heads"):
        tiny(heads=(3, 2, 2, 4))


def test_stage_grids_and_output_shape():
    cfg = tiny()
    p = build_model(cfg)
    with T.no_grad():
        feats, tokens = encoder_forward(Tensor(random_input(cfg)), p)
        logits = decoder_forward(feats, p)
    assert [f.shape[2:] for f in feats] == [(16,) * 3, (8,) * 3, (4,) * 3, (2,) * 3]
    assert [f.shape[1] for f in feats] == [8, 16, 32, 64]
    assert tokens.shape == (1, 8, 64)
    assert logits.shape == (1, 2, 32, 32, 32)
    assert predict_labels(logits).shape == (1, 32, 32, 32)


def test_forward_is_composition_and_finite_in_checked_mode():
    cfg = tiny()
    p = build_model(cfg, 1)
    x = Tensor(random_input(cfg, seed=1))
    with T.no_grad(), T.checked():
        a = forward(x, p).data
        b = decoder_forward(encoder_forward(x, p)[0], p).data
    assert np.isfinite(a).all()
    assert np.array_equal(a, b)


def test_input_shape_mismatch():
    p = build_model(tiny())
    with pytest.raises(DimensionError):
        forward(T.zeros((1, 1, 32, 32, 16)), p)


def test_missing_skip_is_usage_error():
    cfg = tiny()
    p = build_model(cfg)
    with T.no_grad():
        feats, _ = encoder_forward(Tensor(random_input(cfg)), p)
    with pytest.raises(UsageError):
        decoder_forward(feats[1:], p)
    with pytest.raises(UsageError):
        decoder_forward(feats[:2] + [None, feats[3]], p)


def test_batch_permutation():
    cfg = tiny()
    p = build_model(cfg, 2)
    x = random_input(cfg, batch=3, seed=2)
    with T.no_grad():
        out = forward(Tensor(x), p).data
        perm = forward(Tensor(x[[2, 0, 1]]), p).data
    assert np.allclose(perm, out[[2, 0, 1]], atol=1e-6)


def test_gradient_reaches_every_parameter():
    cfg = tiny()
    p = build_model(cfg, 3)
    labels = np.random.default_rng(3).integers(0, 2, (2,) + cfg.input_shape)
    loss = soft_dice_loss(forward(Tensor(random_input(cfg, batch=2, seed=3)), p), labels)
    T.backward(loss)
    named = p.named()
    for name, t in named.items():
        assert t.grad is not None and np.isfinite(t.grad).all(), name
    for key in ("stem.token_wt", "enc1.block0.attn.m", "enc3.block0.attn.m", "enc1.block0.ode.w1",
                "dec1.ode.w1"):
        assert np.abs(named[key].grad).max() > 0, key


def test_no_attention_no_ode_is_pure_conv_path():
    cfg = tiny(attention_enabled=False, ode_enabled=False)
    p = build_model(cfg, 4)
    assert all(not st.blocks for st in p.stages)
    assert all(d.ode is None for d in p.decoder)
    x = Tensor(random_input(cfg, seed=4))
    with T.no_grad():
        feats, _ = encoder_forward(x, p)
        tokens, grid = embed_patches(x, p.stem)
        vol = tokens_to_volume(tokens, grid)
        ref = [vol]
        for st in p.stages[1:]:
            vol = downsample(vol, st.down, cfg.groups)
            ref.append(vol)
    for f, r in zip(feats, ref):
        assert np.array_equal(f.data, r.data)


def test_attention_off_keeps_norm_and_ode():
    p = build_model(tiny(attention_enabled=False), 5)
    bp = p.stages[0].blocks[0]
    assert bp.attention is None and bp.ode is not None
    maps = []
    with T.no_grad():
        forward(Tensor(random_input(p.config)), p, maps=maps)
    assert maps == []


def test_decoder_ode_switch():
    p = build_model(tiny(decoder_ode=False))
    assert all(d.ode is None for d in p.decoder)
    assert all(b.ode is not None for st in p.stages for b in st.blocks)
    assert not any(k.startswith("dec") and ".ode." in k for k in p.named())


def test_ablation_topology_param_order():
    counts = {(a, o): count_params(build_model(tiny(attention_enabled=a, ode_enabled=o))).total_params
              for a in (True, False) for o in (True, False)}
    assert counts[(False, False)] < min(v for k, v in counts.items() if k != (False, False))
    assert counts[(True, True)] == max(counts.values())


def test_fine_branch_window_translation_equivariance():
    # with M = 0 the coarse branch vanishes, so shifting by one whole window shifts the output
    rng = np.random.default_rng(6)
    layout = PatchGrid((4, 4, 2), (2, 2, 2))
    with T.precision("f64"):
        p = init_attention(4, 2, 8, rng, std=0.5)
        x = rng.standard_normal((1, 4, 4, 2, 4))
        out = dual_attention(Tensor(x.reshape(1, 32, 4)), p, layout)[0].data.reshape(x.shape)
        rolled = np.roll(x, 2, axis=1)
        out_r = dual_attention(Tensor(rolled.reshape(1, 32, 4)), p, layout)[0].data.reshape(x.shape)
    assert np.allclose(out_r, np.roll(out, 2, axis=1), atol=1e-12)


def test_batch_two_memory_budget():
    cfg = tiny(num_classes=3, input_shape=(64, 64, 32), heads=(2, 2, 4, 4), window=64)
    p = build_model(cfg)
    labels = np.zeros((2,) + cfg.input_shape, dtype=np.int64)
    tracemalloc.start()
    try:
        T.backward(soft_dice_loss(forward(Tensor(random_input(cfg, batch=2)), p), labels))
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    assert peak < 2 * 2 ** 30


# --- cost accounting ---------------------------------------------------------


def test_matmul_maccs_definition():
    assert matmul_maccs(8, 8, 8) == 512


def test_ode_maccs_linear_in_steps():
    m = [count_flops(tiny(solver=SolverConfig("euler", 1.0, n))).total_maccs for n in (2, 4, 6)]
    assert m[1] - m[0] == m[2] - m[1] > 0


def test_totals_are_sums_of_parts():
    rep = profile(tiny())
    assert rep.total_params == sum(rep.params.values())
    assert rep.total_maccs == sum(rep.maccs.values())
    assert rep.gflops == 2 * rep.total_maccs / 1e9
    assert "total" in rep.table()
    fine = count_params(build_model(tiny()), depth=3)
    assert fine.total_params == rep.total_params


def test_count_flops_is_symbolic():
    big = ModelConfig(input_shape=(512, 512, 256), stage_widths=(64, 128, 256, 512), heads=(4, 4, 8, 8))
    rep = count_flops(big)
    assert rep.total_maccs > 0
    assert count_flops(big, batch=2).total_maccs == 2 * rep.total_maccs


def test_count_flops_counts_attention_linearly():
    small = count_flops(tiny(input_shape=(32, 32, 32))).maccs["enc1"]
    wide = count_flops(tiny(input_shape=(64, 32, 32))).maccs["enc1"]
    assert wide == 2 * small
