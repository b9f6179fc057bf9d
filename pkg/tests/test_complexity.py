import numpy as np
import pytest

from mfennet.complexity import (
    TABLE1,
    Convention,
    calibration,
    count_flops,
    count_params,
    report,
    tune_depths,
)
from mfennet.model import ModelConfig, ModelGraph, build_mfennet, build_unet_baseline


def single_conv(cin, cout, k, size):
    g = ModelGraph("mfennet", ModelConfig(in_channels=cin, input_size=size))
    g._rng = np.random.default_rng(0)
    g.output = g.conv("c", "input", cin, cout, k, level=0)
    return g


def manifest_total(graph) -> int:
    total = 0
    for line in graph.manifest().splitlines():
        _, dims = line.split("\t")
        total += int(np.prod([int(d) for d in dims.split("x")]))
    return total


def test_single_conv_counts():
    g = single_conv(3, 32, 3, 16)
    assert count_params(g) == 896
    g2 = single_conv(32, 64, 3, 128)
    rows = report(g2, (1, 32, 128, 128)).rows
    assert rows[0].flops == 9 * 32 * 64 * 128 * 128 == 301_989_888


def test_pointwise_conv_is_c_squared_hw():
    g = single_conv(16, 16, 1, 32)
    assert report(g, (1, 16, 32, 32)).rows[0].flops == 16 * 16 * 32 * 32


def test_empty_graph():
    g = ModelGraph("mfennet", ModelConfig())
    assert report(g, (1, 3, 16, 16)).total_params == 0


@pytest.mark.parametrize(
    "depths", [(0, 0, 0, 0, 0), (1, 1, 1, 1, 1), (2, 2, 2, 2, 2), (1, 4, 2, 2, 0), (3, 0, 2, 1, 4), (0, 0, 0, 0, 4)]
)
def test_params_match_manifest_bruteforce(depths):
    g = build_mfennet(ModelConfig(blocks_per_stage=depths))
    assert count_params(g) == manifest_total(g) == sum(p.size for p in g.store)


def test_flops_scale_by_four():
    for g in (build_mfennet(ModelConfig(), allocate=False), build_unet_baseline(allocate=False)):
        assert count_flops(g, (1, 3, 256, 256)) == 4 * count_flops(g, (1, 3, 128, 128))


def test_mac_as_two_doubles_conv_rows_only():
    g = build_mfennet(ModelConfig(), allocate=False)
    one = report(g, (1, 3, 256, 256))
    two = report(g, (1, 3, 256, 256), Convention.MAC_AS_TWO)
    for a, b in zip(one.rows, two.rows):
        assert b.flops == (2 * a.flops if a.kind == "conv" else a.flops)
    assert two.conv_flops == 2 * one.conv_flops


def test_report_is_pure_and_consistent():
    g = build_mfennet(ModelConfig(), allocate=False)
    a = report(g, (1, 3, 256, 256))
    b = report(g, (1, 3, 256, 256))
    assert a.csv() == b.csv()
    assert a.total_flops == sum(r.flops for r in a.rows)
    assert a.total_params == count_params(build_mfennet(ModelConfig()))
    assert a.csv().splitlines()[0] == "name,params,flops"
    assert "Params (M): 11.14" in a.summary()


def test_batch_scales_flops_not_params():
    g = build_mfennet(ModelConfig(), allocate=False)
    a, b = report(g, (1, 3, 64, 64)), report(g, (3, 3, 64, 64))
    assert b.total_flops == 3 * a.total_flops and b.total_params == a.total_params


def test_calibration_values():
    mf = calibration(report(build_mfennet(ModelConfig(), allocate=False), (1, 3, 256, 256)))
    assert mf["params"] == 11_144_257
    assert abs(mf["params_delta"]) < 0.10 and abs(mf["flops_delta"]) < 0.15
    un = calibration(report(build_unet_baseline(allocate=False), (1, 3, 256, 256)))
    assert abs(un["params_delta"]) < 0.02 and abs(un["flops_delta"]) < 0.15
    assert TABLE1["unet"]["params"] == 31.04e6


def test_tuning_recovers_shipped_depths():
    res = tune_depths(max_blocks=4)
    assert res.blocks_per_stage == (1, 4, 2, 2, 0)
    assert res.params == 11_144_257
