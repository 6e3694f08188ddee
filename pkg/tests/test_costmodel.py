import numpy as np
import pytest

from fedlps import costmodel
from fedlps.costmodel import DeviceProfile, CostConfigError
from fedlps.netcore import mlp
from fedlps.sparsity import ImportanceIndicator, UnitMask, build_mask, derive_pattern


def edge_macs(arch, pattern):
    """Count kept weights one edge at a time."""
    widths = [layer.out_dim for layer in arch[:-1]]
    alive, start = [], 0
    for w in widths:
        alive.append([bool(b) for b in pattern[start:start + w]])
        start += w
    keep_in = [[True] * arch[0].in_dim] + alive
    keep_out = alive + [[True] * arch[-1].out_dim]
    total = 0
    for layer_in, layer_out in zip(keep_in, keep_out):
        for o in layer_out:
            for i in layer_in:
                total += o and i
    return total


def test_zero_iterations_cost_nothing():
    arch = mlp([3, 2, 2])
    mask = build_mask(np.array([1, 0], dtype=np.int8), arch)
    assert costmodel.flops_of_round(arch, mask, 20, 0) == 0


def test_random_mask_matches_edge_enumeration():
    rng = np.random.default_rng(0)
    arch = mlp([8, 6, 4])
    pattern = rng.integers(0, 2, size=6).astype(np.int8)
    mask = build_mask(pattern, arch)
    assert costmodel.retained_macs(arch, mask) == edge_macs(arch, pattern)
    assert costmodel.flops_of_round(arch, mask, 20, 3) == 6 * edge_macs(arch, pattern) * 20 * 3


def test_three_layer_reference_point():
    # dense 1024-wide stack, forward only, one sample: 2 FLOPs per multiply-accumulate
    arch = mlp([1024, 1024, 1024])
    assert costmodel.forward_flops(arch) == 2 * (1024 ** 2 * 2)
    assert costmodel.forward_flops(arch) == pytest.approx(4.19e6, rel=2e-3)


def test_upload_size_full_and_floor():
    arch = mlp([4, 4, 4, 2])
    dense = 4 * 5 + 4 * 5 + 2 * 5
    assert costmodel.upload_size(UnitMask.full(arch), arch) == dense + 1
    floor = build_mask(np.array([1, 0, 0, 0, 1, 0, 0, 0], dtype=np.int8), arch)
    assert costmodel.upload_size(floor, arch) == (4 + 1) + (1 + 1) + (2 + 2) + 1


def test_pattern_words_round_up():
    assert costmodel.pattern_words(32) == 1
    assert costmodel.pattern_words(33) == 2
    assert costmodel.pattern_words(128) == 4


def test_half_ratio_upload_below_dense():
    arch = mlp([32, 64, 64, 10])
    q = ImportanceIndicator(np.random.default_rng(0).random(128), (64, 64))
    half = build_mask(derive_pattern(q, 0.5), arch)
    assert costmodel.upload_size(half, arch) < costmodel.upload_size(None, arch)


def test_local_cost_examples():
    profile = DeviceProfile(4.0, 6.0)
    assert costmodel.local_cost(2.0, 3.0, profile, alpha=2.0) == 1.5
    assert costmodel.local_cost(2.0, 0.0, profile, alpha=2.0) == 0.5


def test_local_cost_random_reevaluation():
    rng = np.random.default_rng(1)
    for _ in range(100):
        f_hat, b_hat, f, b, alpha = rng.uniform(0.1, 1e6, size=5)
        got = costmodel.local_cost(f_hat, b_hat, DeviceProfile(f, b), alpha)
        assert got == f_hat / f + alpha * b_hat / b


def test_doubling_compute_halves_compute_term():
    t1 = costmodel.local_cost(3.0, 0.0, DeviceProfile(5.0, 1.0))
    t2 = costmodel.local_cost(3.0, 0.0, DeviceProfile(10.0, 1.0))
    assert t2 == t1 / 2


def test_global_cost_is_slowest_client():
    assert costmodel.global_cost([1.0]) == 1.0
    assert costmodel.global_cost([1.0, 2.5, 0.3]) == 2.5
    times = np.random.default_rng(2).random(10).tolist()
    assert costmodel.global_cost(times) == max(times)
    with pytest.raises(CostConfigError):
        costmodel.global_cost([])


def test_device_levels_scale_reference():
    p = DeviceProfile.for_level(0.25)
    assert p.flops_capacity == 727e9 * 0.25
    assert p.bandwidth_capacity == 1e6 * 0.25
    with pytest.raises(CostConfigError):
        DeviceProfile(0.0, 1.0)


def test_jitter_stays_in_band():
    base = DeviceProfile.for_level(1.0)
    rng = np.random.default_rng(3)
    for _ in range(50):
        f = base.jittered(rng).flops_capacity / base.flops_capacity
        assert 0.8 <= f <= 1.2


def test_negative_alpha_rejected():
    with pytest.raises(CostConfigError):
        costmodel.local_cost(1.0, 1.0, DeviceProfile(1.0, 1.0), alpha=-1.0)


def test_costs_monotone_in_ratio():
    arch = mlp([16, 33, 20, 10])
    q = ImportanceIndicator(np.random.default_rng(4).standard_normal(53), (33, 20))
    grid = [0.05 * i for i in range(1, 21)]
    flops = [costmodel.flops_of_round(arch, build_mask(derive_pattern(q, s), arch), 20, 5) for s in grid]
    uploads = [costmodel.upload_size(build_mask(derive_pattern(q, s), arch), arch) for s in grid]
    assert flops == sorted(flops)
    assert uploads == sorted(uploads)
