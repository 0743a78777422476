"""Collage movement, temporal branch, block fusion, and whole-model behavior."""
import numpy as np
import pytest

from vidconv import tensor as T
from vidconv.errors import ConfigError, ShapeError
from vidconv.model import (CollageLayout, ModelConfig, build_model, collage, frame_mean,
                           make_config, temporal_dilated_conv, tile_grid, uncollage)
from conftest import rng


def toy_config(**kw):
    base = dict(num_classes=2, input_size=(64, 64), drop_path_rate=0.0, head_dropout=0.0)
    base.update(kw)
    return make_config("toy", **base)


# ---------------------------------------------------------------------------
# collage / uncollage

def test_collage_placement_row_major():
    # L=9, grid 3x3, tiles 28x28: frame 4 pixel (5, 6) lands at (33, 34)
    frames = np.zeros((9, 1, 28, 28), dtype=np.float32)
    frames[4, 0, 5, 6] = 1.0
    out = collage(T.Tensor(frames), CollageLayout(grid=(3, 3)))
    assert out.shape == (1, 1, 84, 84)
    assert out.data[0, 0, 33, 34] == 1.0
    assert out.data.sum() == 1.0
    assert CollageLayout(grid=(3, 3)).cell(4) == (1, 1)


def test_collage_identity_1x1():
    x = rng(0).standard_normal((3, 2, 8, 8)).astype(np.float32)
    out = collage(T.Tensor(x), CollageLayout(grid=(1, 1)))
    np.testing.assert_array_equal(out.data, x)
    back = uncollage(T.Tensor(x), CollageLayout(grid=(1, 1)))
    np.testing.assert_array_equal(back.data, x)


def test_collage_round_trips_bit_exact():
    layout = CollageLayout(grid=(4, 4))
    x = rng(1).standard_normal((16 * 2, 3, 5, 7)).astype(np.float32)
    t = T.Tensor(x)
    rt = uncollage(collage(t, layout), layout)
    assert np.array_equal(rt.data, x)
    y = rng(2).standard_normal((2, 3, 20, 28)).astype(np.float32)
    rt2 = collage(uncollage(T.Tensor(y), layout), layout)
    assert np.array_equal(rt2.data, y)


def test_collage_rejects_partial_clips():
    with pytest.raises(ShapeError):
        collage(T.Tensor(np.zeros((7, 1, 4, 4), np.float32)), CollageLayout(grid=(3, 3)))


def test_collage_gradient_is_inverse_scatter():
    layout = CollageLayout(grid=(2, 2))
    x = T.Tensor(rng(3).standard_normal((4, 2, 3, 3)).astype(np.float32), requires_grad=True)
    y = collage(x, layout)
    T.backward(T.sum_all(T.mul(y, y)))
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-6)


# ---------------------------------------------------------------------------
# temporal dilated conv

def test_temporal_conv_output_is_tile_size():
    x = T.Tensor(rng(4).standard_normal((2, 5, 84, 84)).astype(np.float32))
    w = T.Tensor(rng(5).standard_normal((5, 1, 3, 3)).astype(np.float32))
    out = temporal_dilated_conv(x, w, None, CollageLayout(grid=(3, 3)))
    assert out.shape == (2, 5, 28, 28)


def test_temporal_conv_delta_kernel_selects_center_tile():
    layout = CollageLayout(grid=(3, 3))
    frames = rng(6).standard_normal((9, 4, 6, 6)).astype(np.float32)
    coll = collage(T.Tensor(frames), layout)
    w = np.zeros((4, 1, 3, 3), dtype=np.float32)
    w[:, 0, 1, 1] = 1.0
    out = temporal_dilated_conv(coll, T.Tensor(w), None, layout)
    np.testing.assert_array_equal(out.data, frames[4][None])


def test_temporal_conv_matches_gather_oracle():
    layout = CollageLayout(grid=(3, 3))
    r = rng(7)
    x = r.standard_normal((1, 3, 12, 12)).astype(np.float32)
    w = r.standard_normal((3, 1, 3, 3)).astype(np.float32)
    out = temporal_dilated_conv(T.Tensor(x), T.Tensor(w), None, layout).data
    ht, wt = 4, 4
    ref = np.zeros_like(out)
    for c in range(3):
        for y in range(ht):
            for xo in range(wt):
                acc = 0.0
                for i in range(3):
                    for j in range(3):
                        acc += w[c, 0, i, j] * x[0, c, y + i * ht, xo + j * wt]
                ref[0, c, y, xo] = acc
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_temporal_conv_rejects_indivisible_extents():
    x = T.Tensor(np.zeros((1, 2, 10, 9), np.float32))
    w = T.Tensor(np.zeros((2, 1, 3, 3), np.float32))
    with pytest.raises(ShapeError):
        temporal_dilated_conv(x, w, None, CollageLayout(grid=(3, 3)))


def test_tile_grid_all_cells_identical():
    t = rng(8).standard_normal((2, 3, 4, 5)).astype(np.float32)
    tiled = tile_grid(T.Tensor(t), 3, 3).data
    for i in range(3):
        for j in range(3):
            np.testing.assert_array_equal(tiled[:, :, i * 4:(i + 1) * 4, j * 5:(j + 1) * 5], t)


def test_tile_and_frame_mean_gradients():
    r = rng(9)
    x = T.Tensor(r.standard_normal((1, 2, 3, 3)).astype(np.float64), requires_grad=True)
    T.backward(T.sum_all(tile_grid(x, 2, 2)))
    np.testing.assert_allclose(x.grad, np.full(x.shape, 4.0))
    f = T.Tensor(r.standard_normal((6, 4)).astype(np.float64), requires_grad=True)
    T.backward(T.sum_all(frame_mean(f, 3)))
    np.testing.assert_allclose(f.grad, np.full((6, 4), 1.0 / 3.0))


# ---------------------------------------------------------------------------
# block behavior

def _copy_shared_weights(src, dst):
    """Copy every parameter that exists under the same name in both models."""
    sp, dp = src.parameters(), dst.parameters()
    for name, p in dp.items():
        if name in sp:
            p.data = sp[name].data.copy()


def test_block_alpha_zero_equals_plain_block_bitwise():
    cfg_plain = toy_config(use_temporal_branch=False, use_neck=False)
    cfg_temp = toy_config(use_neck=False)
    plain = build_model(cfg_plain, seed_or_zero := 0)
    temp = build_model(cfg_temp, 1)
    _copy_shared_weights(plain, temp)
    for name, p in temp.parameters().items():
        if name.endswith("temporal.alpha"):
            p.data = np.zeros_like(p.data)
    clip = rng(10).random((9, 3, 64, 64)).astype(np.float32)
    a = plain.forward(clip, training=False).data
    b = temp.forward(clip, training=False).data
    assert np.array_equal(a, b)


def test_block_fusion_affine_in_alpha():
    cfg = toy_config(use_neck=False)
    model = build_model(cfg, 2)
    block = model.stages[2][0]  # first stage-3 block carries the temporal branch
    x = T.Tensor(rng(11).standard_normal((1, 32, 12, 12)).astype(np.float32))
    base_alpha = block.alpha.data.copy()

    def fusion(scale):
        block.alpha.data = base_alpha * scale
        return block.fuse(x, collaged=True).data

    f0, f1, f2 = fusion(0.0), fusion(1.0), fusion(2.0)
    block.alpha.data = base_alpha
    s = block.dw(x).data
    assert np.array_equal(f0, s)  # alpha=0 reduces the fusion to the spatial path
    np.testing.assert_allclose(f2 - f0, 2 * (f1 - f0), atol=1e-5)


def test_block_matches_straightline_reference():
    # full block on a 1x8x12x12 collage (grid 2x2) vs raw-numpy composition
    cfg = make_config("toy", num_classes=2, input_size=(64, 64), grid=(2, 2), frames=4,
                      drop_path_rate=0.0)
    model = build_model(cfg, 3)
    block = model.stages[2][0]
    c = 32
    x = rng(12).standard_normal((1, c, 12, 12)).astype(np.float32)

    out = block(T.Tensor(x), collaged=True, training=False, rng=None).data

    from conftest import conv2d_loops
    s = conv2d_loops(x, block.dw.weight.data, block.dw.bias.data,
                     padding=(3, 3), groups=c)
    ht, wt = 6, 6
    t = np.zeros((1, c, ht, wt))
    for ci in range(c):
        for y in range(ht):
            for xo in range(wt):
                acc = block.temporal_b.data[ci]
                for i in range(2):
                    for j in range(2):
                        acc += block.temporal_weight.data[ci, 0, i, j] * x[0, ci, y + i * ht, xo + j * wt]
                t[0, ci, y, xo] = acc
    tiled = np.tile(t, (1, 1, 2, 2))
    f = s + block.alpha.data[None, :, None, None] * tiled
    mu = f.mean(axis=1, keepdims=True)
    xc = f - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    xhat = xc / np.sqrt(var + 1e-6)
    y = block.norm.gamma.data[None, :, None, None] * xhat + block.norm.beta.data[None, :, None, None]
    y = np.einsum("oc,nchw->nohw", block.pw1.weight.data[:, :, 0, 0], y) + \
        block.pw1.bias.data[None, :, None, None]
    u = np.sqrt(2 / np.pi) * (y + 0.044715 * y ** 3)
    y = 0.5 * y * (1 + np.tanh(u))
    y = np.einsum("oc,nchw->nohw", block.pw2.weight.data[:, :, 0, 0], y) + \
        block.pw2.bias.data[None, :, None, None]
    y = block.layer_scale.data[None, :, None, None] * y
    ref = x + y
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_vidconv_block_composed_gradients():
    # finite differences through the whole fusion + MLP + residual in 64-bit
    from conftest import check_gradients
    r = rng(13)
    c, grid = 4, (2, 2)
    layout = CollageLayout(grid=grid)
    arrays = {
        "x": r.standard_normal((1, c, 8, 8)),
        "dw_w": r.standard_normal((c, 1, 7, 7)) * 0.2,
        "dw_b": 0.1 * r.standard_normal(c),
        "t_w": r.standard_normal((c, 1, 2, 2)) * 0.3,
        "t_b": 0.1 * r.standard_normal(c),
        "alpha": 0.5 * r.standard_normal(c),
        "g": 1.0 + 0.1 * r.standard_normal(c),
        "b": 0.1 * r.standard_normal(c),
        "pw1": r.standard_normal((4 * c, c, 1, 1)) * 0.3,
        "pw1b": 0.1 * r.standard_normal(4 * c),
        "pw2": r.standard_normal((c, 4 * c, 1, 1)) * 0.3,
        "pw2b": 0.1 * r.standard_normal(c),
        "ls": 0.5 + 0.1 * r.standard_normal(c),
    }

    def build(t):
        s = T.conv2d(t["x"], t["dw_w"], t["dw_b"],
                     T.ConvSpec(kernel=(7, 7), padding=(3, 3), groups=c))
        tt = temporal_dilated_conv(t["x"], t["t_w"], t["t_b"], layout)
        f = T.add(s, T.scale_channels(tile_grid(tt, *grid), t["alpha"]))
        y = T.layer_norm_channels(f, t["g"], t["b"])
        y = T.conv2d(y, t["pw1"], t["pw1b"], T.ConvSpec(kernel=(1, 1)))
        y = T.gelu(y)
        y = T.conv2d(y, t["pw2"], t["pw2b"], T.ConvSpec(kernel=(1, 1)))
        y = T.scale_channels(y, t["ls"])
        out = T.add(t["x"], y)
        return T.sum_all(T.mul(out, out))

    check_gradients(build, arrays, rel_tol=1e-4)


# ---------------------------------------------------------------------------
# whole model

def test_forward_shape_trace_toy():
    model = build_model(toy_config(), 0)
    clip = rng(14).random((9, 3, 64, 64)).astype(np.float32)
    caps = {"stage2": None, "stage3": None, "stage4": None}
    logits = model.forward(clip, capture=caps)
    assert caps["stage2"].shape == (1, 16, 24, 24)   # collage of 9 8x8 tiles
    assert caps["stage3"].shape == (1, 32, 12, 12)
    assert caps["stage4"].shape == (1, 64, 6, 6)
    assert logits.shape == (1, 2)


def test_forward_eval_deterministic():
    model = build_model(toy_config(), 1)
    clip = rng(15).random((9, 3, 64, 64)).astype(np.float32)
    a = model.forward(clip, training=False).data
    b = model.forward(clip, training=False).data
    assert np.array_equal(a, b)


def test_perframe_model_permutation_invariant():
    cfg = toy_config(stacking_stage=None, use_temporal_branch=False, use_neck=False)
    model = build_model(cfg, 2)
    clip = rng(16).random((9, 3, 64, 64)).astype(np.float32)
    base = model.forward(clip, training=False).data
    perm = rng(17).permutation(9)
    shuffled = model.forward(clip[perm], training=False).data
    np.testing.assert_allclose(base, shuffled, atol=1e-5)


def test_collage_model_not_permutation_invariant():
    model = build_model(toy_config(), 3)
    clip = rng(18).random((9, 3, 64, 64)).astype(np.float32)
    base = model.forward(clip, training=False).data
    shuffled = model.forward(clip[::-1].copy(), training=False).data
    assert not np.allclose(base, shuffled, atol=1e-4)


def test_boundary_pixel_influences_adjacent_tile():
    # 7x7 spatial convs on the collage mix across tile borders by design
    model = build_model(toy_config(use_neck=False), 4)
    clip = rng(19).random((9, 3, 64, 64)).astype(np.float32)
    caps = {"stage3": None}
    model.forward(clip, capture=caps)
    base = caps["stage3"].data.copy()
    pert = clip.copy()
    pert[0, :, 32, 63] += 0.5  # right edge of frame 0
    caps2 = {"stage3": None}
    model.forward(pert, capture=caps2)
    diff = np.abs(caps2["stage3"].data - base)[0].sum(axis=0)  # (12, 12) collage
    tile = 4  # stage-3 tile size at 64px input
    assert diff[:tile, tile:2 * tile].sum() > 0  # adjacent tile (frame 1) changed


def test_gradient_reaches_every_parameter():
    model = build_model(toy_config(use_neck=True), 5)
    clip = rng(20).random((2 * 9, 3, 64, 64)).astype(np.float32)
    logits = model.forward(clip, training=True, rng=np.random.default_rng(0))
    loss, _ = T.softmax_cross_entropy(logits, np.array([0, 1]))
    T.backward(loss)
    dead = [name for name, p in model.parameters().items()
            if p.grad is None or not np.any(p.grad != 0)]
    assert not dead, f"parameters with zero gradient: {dead}"


def test_temporal_params_only_after_stacking_stage():
    model = build_model(toy_config(use_neck=False), 6)
    names = model.parameters().keys()
    assert not any(n.startswith(("stage1.", "stage2.")) and ".temporal" in n for n in names)
    assert any(n.startswith("stage3.") and n.endswith("temporal.alpha") for n in names)
    assert any(n.startswith("stage4.") and n.endswith("temporal.alpha") for n in names)


def test_stacking_none_with_branch_keeps_later_net_temporal():
    cfg = toy_config(stacking_stage=None, use_neck=False)
    model = build_model(cfg, 7)
    names = model.parameters().keys()
    assert any(n.startswith("stage3.") and ".temporal" in n for n in names)
    clip = rng(21).random((9, 3, 64, 64)).astype(np.float32)
    assert model.forward(clip).shape == (1, 2)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        make_config("tiny", num_classes=400, frames=8)  # frames != grid product
    with pytest.raises(ConfigError):
        make_config("tiny", num_classes=400, input_size=(100, 224))
    with pytest.raises(ConfigError):
        make_config("nope")
    with pytest.raises(ConfigError):
        ModelConfig(stacking_stage=5, num_classes=10).validate()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build_model(toy_config(), 8)
    path = str(tmp_path / "ckpt" / "m")
    model.save_checkpoint(path, meta={"epoch": 3})
    clone = build_model(toy_config(), 99)
    meta, extra = clone.load_checkpoint(path)
    assert meta["epoch"] == 3
    assert not extra
    for name, p in model.parameters().items():
        assert np.array_equal(p.data, clone.parameters()[name].data), name
    clip = rng(22).random((9, 3, 64, 64)).astype(np.float32)
    assert np.array_equal(model.forward(clip).data, clone.forward(clip).data)


def test_checkpoint_shape_mismatch_names_offender(tmp_path):
    model = build_model(toy_config(), 9)
    path = str(tmp_path / "m")
    model.save_checkpoint(path)
    other = build_model(toy_config(num_classes=4), 9)
    with pytest.raises(ConfigError, match="head.weight"):
        other.load_checkpoint(path)


def test_param_count_monotone_tiny_small_base():
    counts = [build_model(make_config(v, num_classes=400), 0).num_params()
              for v in ("tiny",)]
    # instantiate only tiny; compare small/base symbolically in analysis tests
    assert counts[0] == 44_736_112
