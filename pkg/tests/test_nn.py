import numpy as np
import pytest

from dgnet import tensor as T
from dgnet.errors import ConfigurationError, DimensionError, ValidationError
from dgnet.nn import (ARCH_ARMS, CBM, CCI, DGNet, LAPLACIAN_KERNEL, ModelConfig, SenseBlock, build_ablation,
                      cbm_params, laplacian_highpass, matched_width, param_count)
from dgnet.tensor import Tensor


@pytest.fixture
def small_config():
    return ModelConfig(variant="custom", n1=1, n2=1, base_width=6, sense_blocks=1)


def test_variant_presets():
    s, l = ModelConfig.for_variant("s"), ModelConfig.for_variant("L")
    assert (s.n1, s.n2) == (3, 3)
    assert (l.n1, l.n2) == (6, 6)


@pytest.mark.parametrize("kwargs", [
    dict(variant="s", n1=4),
    dict(variant="x"),
    dict(base_width=10),
    dict(ablation="nope"),
    dict(n1=0, variant="custom"),
    dict(frr_on_rgb=True, ablation="wo_cci"),
])
def test_model_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        ModelConfig(**kwargs)


def test_cbm_params_formula():
    # conv without bias + BN affine
    assert cbm_params(4, 8) == 4 * 8 * 9 + 16
    assert cbm_params(6, 6, groups=3) == 6 * 2 * 9 + 12
    m = CBM(4, 8, np.random.default_rng(0))
    assert sum(p.data.size for p in m.parameters()) == cbm_params(4, 8)


def test_param_count_excludes_fixed_laplacian(small_config):
    model = DGNet(small_config)
    fixed = [p for p in model.parameters() if not p.trainable]
    assert fixed and all(np.array_equal(p.data[0, 0], LAPLACIAN_KERNEL) for p in fixed)
    assert model.param_count() == sum(p.data.size for p in model.parameters(trainable_only=True))
    assert sum(model.module_counts().values()) == model.param_count()


def test_forward_shape_and_range(small_config, rng):
    model = DGNet(small_config)
    out = model(Tensor(rng.random((2, 3, 16, 24))))
    assert out.shape == (2, 3, 16, 24)
    assert out.data.min() >= 0 and out.data.max() <= 1


@pytest.mark.parametrize("shape, err", [
    ((1, 3, 12, 16), DimensionError),
    ((1, 3, 16, 20), DimensionError),
    ((1, 4, 16, 16), DimensionError),
    ((3, 16, 16), DimensionError),
])
def test_forward_rejects_bad_shapes(small_config, shape, err):
    with pytest.raises(err):
        DGNet(small_config)(Tensor(np.zeros(shape)))


def test_forward_rejects_out_of_range(small_config):
    x = np.full((1, 3, 16, 16), 0.5)
    x[0, 0, 0, 0] = 1.5
    with pytest.raises(ValidationError):
        DGNet(small_config)(Tensor(x))


def test_same_seed_same_weights(small_config):
    a, b = DGNet(small_config, seed=3), DGNet(small_config, seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_parameter_names_are_unique(small_config):
    names = [n for n, _ in DGNet(small_config).named_parameters()]
    assert len(names) == len(set(names))


def test_laplacian_zero_on_constant_and_ramp(f64):
    yy, xx = np.mgrid[0:16, 0:16].astype(np.float64)
    ramp = 0.01 * yy - 0.02 * xx + 0.3
    img = np.stack([np.full((16, 16), 0.4), ramp, ramp[::-1]])[None]
    out = laplacian_highpass(Tensor(img)).data
    assert np.abs(out[:, :, 1:-1, 1:-1]).max() <= 1e-12


def test_laplacian_point_response(f64):
    img = np.zeros((1, 1, 5, 5))
    img[0, 0, 2, 2] = 1.0
    out = laplacian_highpass(Tensor(img)).data[0, 0]
    np.testing.assert_array_equal(out[1:4, 1:4], LAPLACIAN_KERNEL)


def cci_input_sets(cin):
    """Input channels read by each of the 3 groups of the doubled input [f, f]."""
    per = 2 * cin // 3
    return [{c % cin for c in range(g * per, (g + 1) * per)} for g in range(3)]


@pytest.mark.parametrize("cin", [3, 6])
def test_cci_groups_read_channel_pairs(cin, rng, f64):
    cci = CCI(cin, 6, 2, np.random.default_rng(0))
    cci.eval()
    x = Tensor(rng.random((1, cin, 8, 8)), requires_grad=True)
    third = cci.grouped(x).shape[1] // 3
    for g, allowed in enumerate(cci_input_sets(cin)):
        x.grad = None
        T.backward(T.total(T.slice_channels(cci.grouped(x), g * third, (g + 1) * third)))
        touched = set(np.flatnonzero(np.abs(x.grad).sum(axis=(0, 2, 3))))
        assert touched == allowed


def test_cci_rgb_pairs():
    assert cci_input_sets(3) == [{0, 1}, {2, 0}, {1, 2}]


def test_sense_block_is_gated_residual(rng, f64):
    blk = SenseBlock(6, np.random.default_rng(0))
    blk.eval()
    x = Tensor(rng.normal(size=(1, 6, 8, 8)))
    gate = T.sigmoid(blk.gate(blk.smooth(blk.attention(x)))).data
    assert gate.min() >= 0 and gate.max() <= 1
    np.testing.assert_allclose(blk(x).data - x.data, gate, atol=1e-12)


def test_sense_block_without_smoothing(rng, f64):
    blk = SenseBlock(6, np.random.default_rng(0), use_smoothing=False)
    blk.eval()
    x = Tensor(rng.normal(size=(1, 6, 8, 8)))
    np.testing.assert_allclose(blk(x).data - x.data, T.sigmoid(blk.attention(x)).data, atol=1e-12)


@pytest.mark.parametrize("arm", ARCH_ARMS)
def test_every_arm_builds_and_runs(arm, rng):
    model = build_ablation(ModelConfig.for_variant("s"), arm)
    out = model(Tensor(rng.random((1, 3, 16, 16))))
    assert out.shape == (1, 3, 16, 16)


def test_removal_arms_drop_modules():
    cfg = ModelConfig.for_variant("s")
    assert build_ablation(cfg, "remove_frr").frr is None
    assert build_ablation(cfg, "remove_frs").frs is None
    full = param_count(cfg)
    assert param_count(cfg.with_ablation("remove_frr")) < full
    assert param_count(cfg.with_ablation("wo_senb")) < full


@pytest.mark.parametrize("arm, key", [("instead_frr", "frr"), ("instead_frs", "frs"),
                                      ("instead_all", "frr"), ("instead_all", "frs")])
def test_instead_arms_match_parameter_budget(arm, key):
    model = build_ablation(ModelConfig.for_variant("s"), arm)
    got, want = model.module_counts()[key], model.reference_counts[key]
    assert abs(got - want) / want <= 0.05


def test_matched_width_minimizes_gap():
    w, depth = 39, 6
    target = 123_903
    h = matched_width(w, depth, target)

    def count(k):
        chans = [w] + [k] * (depth - 1) + [w]
        return sum(cbm_params(a, b) for a, b in zip(chans[:-1], chans[1:]))

    assert abs(count(h) - target) <= min(abs(count(h - 1) - target), abs(count(h + 1) - target))


def test_frr_on_rgb_variant(rng):
    cfg = ModelConfig.for_variant("s", frr_on_rgb=True)
    model = DGNet(cfg)
    assert model.stem is None
    assert model(Tensor(rng.random((1, 3, 16, 16)))).shape == (1, 3, 16, 16)
