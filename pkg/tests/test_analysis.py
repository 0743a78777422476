"""Cost accounting, shuffle mechanics, CAM contracts, latency, ablation rows."""
import numpy as np
import pytest

from vidconv.analysis import (ablation_rows, benchmark_latency, cam_from_capture,
                              compute_cam, count_flops, count_params, order_permutation,
                              plan_layers, write_pgm)
from vidconv.errors import ConfigError
from vidconv.model import build_model, make_config
from conftest import rng


def pct(value, target):
    return abs(value - target) / target


# ---------------------------------------------------------------------------
# parameter accounting

@pytest.mark.parametrize("variant,classes,target", [
    ("tiny", 400, 44.7e6),
    ("small", 400, 66.4e6),
    ("base", 400, 107.4e6),
])
def test_param_counts_match_reference_within_2pct(variant, classes, target):
    rep = count_params(make_config(variant, num_classes=classes))
    assert pct(rep.params, target) <= 0.02


def test_param_count_neckless_stage2_tiny():
    cfg = make_config("tiny", num_classes=400, use_neck=False)
    rep = count_params(cfg)
    assert pct(rep.params, 28.19e6) <= 0.02
    assert rep.params == 28_191_088


def test_param_counts_strictly_increasing_by_variant():
    counts = [count_params(make_config(v, num_classes=400)).params
              for v in ("tiny", "small", "base")]
    assert counts[0] < counts[1] < counts[2]


def test_symbolic_count_equals_instantiated_model():
    for kwargs in (dict(), dict(use_neck=False), dict(stacking_stage=None, use_temporal_branch=False, use_neck=False)):
        cfg = make_config("toy", num_classes=5, input_size=(64, 64), **kwargs)
        assert count_params(cfg).params == build_model(cfg, 0).num_params()
    cfg = make_config("tiny", num_classes=400)
    assert count_params(cfg).params == build_model(cfg, 0).num_params()


def test_neck_conv_parameter_count_example():
    cfg = make_config("tiny", num_classes=400)
    neck = [l for l in plan_layers(cfg) if l.name == "neck.conv"][0]
    assert neck.params == 768 * 2304 * 9 + 2304  # 15,927,552 = ~15.93M


def test_stacking_stage_param_series():
    # stacking later leaves fewer temporal blocks: 28.20 / 28.19 / 28.15 / 28.13 M
    targets = [28.20e6, 28.19e6, 28.15e6, 28.13e6]
    for stage, target in zip((1, 2, 3, 4), targets):
        cfg = make_config("tiny", num_classes=400, use_neck=False, stacking_stage=stage)
        assert pct(count_params(cfg).params, target) <= 0.02, stage


# ---------------------------------------------------------------------------
# FLOP accounting

@pytest.mark.parametrize("variant,frames,grid,target", [
    ("tiny", 9, (3, 3), 40.9e9),
    ("small", 9, (3, 3), 79.0e9),
    ("base", 9, (3, 3), 139.2e9),
    ("small", 16, (4, 4), 140.4e9),
])
def test_flop_counts_match_reference_within_5pct(variant, frames, grid, target):
    cfg = make_config(variant, num_classes=400, grid=grid, frames=frames)
    rep = count_flops(cfg, frames=frames, input_size=(224, 224))
    assert pct(rep.flops_per_view, target) <= 0.05


def test_flops_breakdown_formula_invariant():
    cfg = make_config("tiny", num_classes=400)
    for layer in count_flops(cfg).breakdown:
        if layer.kind == "conv":
            kh, kw = layer.kernel
            expect = (layer.items * layer.cout * layer.out_hw[0] * layer.out_hw[1] *
                      (layer.cin // layer.groups) * kh * kw)
            assert layer.macs == expect, layer.name


def test_flops_halving_input_quarters_every_conv():
    # 448 -> 224 keeps every downsampled extent integral, so the scaling is exact
    cfg = make_config("tiny", num_classes=400)
    full = {l.name: l.macs for l in count_flops(cfg, input_size=(448, 448)).breakdown
            if l.kind == "conv"}
    half = {l.name: l.macs for l in count_flops(cfg, input_size=(224, 224)).breakdown
            if l.kind == "conv"}
    assert full.keys() == half.keys()
    for name in full:
        if name == "head":
            continue
        assert full[name] == 4 * half[name], name


def test_cost_report_totals_and_formats():
    rep = count_flops(make_config("toy", num_classes=4, input_size=(64, 64)))
    rep.check_totals()
    assert "TOTAL" in rep.to_table()
    assert rep.to_jsonl().count("\n") == len(rep.breakdown)
    assert rep.elt_flops > 0  # norm/act work tracked separately from the headline


# ---------------------------------------------------------------------------
# shuffle permutation mechanics

def test_order_permutation_forms():
    np.testing.assert_array_equal(order_permutation("normal", 5), np.arange(5))
    np.testing.assert_array_equal(order_permutation("reverse", 5), np.arange(5)[::-1])
    p = order_permutation("random", 9, np.random.default_rng(0))
    assert sorted(p.tolist()) == list(range(9))
    np.testing.assert_array_equal(order_permutation([2, 0, 1], 3), [2, 0, 1])
    with pytest.raises(ConfigError):
        order_permutation([0, 0, 1], 3)
    with pytest.raises(ConfigError):
        order_permutation("sideways", 3)


# ---------------------------------------------------------------------------
# CAM

def test_cam_single_channel_proportional_to_activation():
    acts = np.zeros((1, 3, 4, 4), dtype=np.float32)
    acts[0, 1] = rng(1).random((4, 4)).astype(np.float32)
    grads = np.zeros_like(acts)
    grads[0, 1] = 1.0  # only channel 1 carries class evidence
    cam = cam_from_capture(acts, grads)
    np.testing.assert_allclose(cam[0], acts[0, 1], atol=1e-6)


def test_cam_invariant_to_positive_activation_rescaling():
    r = rng(2)
    acts = r.random((1, 4, 5, 5)).astype(np.float32)
    grads = r.standard_normal((1, 4, 5, 5)).astype(np.float32)
    from vidconv.analysis import _normalize_cam
    a = _normalize_cam(cam_from_capture(acts, grads))
    b = _normalize_cam(cam_from_capture(3.7 * acts, grads))
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_compute_cam_contract_on_toy_model():
    model = build_model(make_config("toy", num_classes=3, input_size=(64, 64)), 0)
    clip = rng(3).random((9, 3, 64, 64)).astype(np.float32)
    cam = compute_cam(model, clip, class_index=1)
    assert cam.shape == (9, 2, 2)  # stage-4 tiles at 64px input
    assert cam.min() >= 0.0 and cam.max() <= 1.0
    assert cam.max() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        compute_cam(model, clip, class_index=7)


def test_write_pgm(tmp_path):
    img = rng(4).random((6, 8))
    path = tmp_path / "map.pgm"
    write_pgm(path, img)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n8 6\n255\n")
    assert len(raw) == len(b"P5\n8 6\n255\n") + 48


# ---------------------------------------------------------------------------
# latency benchmark

def test_latency_ordering_and_linearity():
    toy = make_config("toy", num_classes=4, input_size=(64, 64), grid=(2, 2), frames=4)
    one = benchmark_latency(toy, views=1, warmup_runs=2, timed_runs=7)
    two = benchmark_latency(toy, views=2, warmup_runs=2, timed_runs=7)
    ratio = (2 * two["median_ms_per_view"]) / one["median_ms_per_view"]
    assert 1.4 <= ratio <= 2.6  # two views cost about twice one view
    assert one["hardware"]
    with pytest.raises(ConfigError):
        benchmark_latency(toy, timed_runs=2)


# ---------------------------------------------------------------------------
# ablation row structure

def test_temporal_branch_suite_rows():
    base = make_config("toy", num_classes=2, input_size=(64, 64))
    rows = ablation_rows("temporal_branch", base)
    assert len(rows) == 4
    combos = [(cfg.use_temporal_branch, cfg.stacking_stage) for _, cfg, _ in rows]
    assert combos == [(False, None), (False, 2), (True, None), (True, 2)]


def test_stacking_stage_suite_rows():
    base = make_config("toy", num_classes=2, input_size=(64, 64))
    rows = ablation_rows("stacking_stage", base)
    assert [cfg.stacking_stage for _, cfg, _ in rows] == [1, 2, 3, 4]


def test_grid_suite_rows():
    base = make_config("toy", num_classes=2, input_size=(64, 64), grid=(3, 3), frames=9)
    rows = ablation_rows("grid_resolution", base)
    assert len(rows) == 4
    assert rows[0][1].stacking_stage is None and rows[0][1].frames == 9
    assert rows[1][1].grid == (2, 2) and rows[1][1].frames == 4 and rows[1][2] == 2
    assert rows[2][1].grid == (3, 3) and rows[2][1].frames == 9
    assert rows[3][1].grid == (4, 4) and rows[3][1].frames == 16
    with pytest.raises(ConfigError):
        ablation_rows("bogus", base)
