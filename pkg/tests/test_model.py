"""Architecture fidelity: the published per-layer table, parameter totals,
scaling law, forward behavior, FLOPs accounting, and the summary export."""

import numpy as np
import pytest

from latup import nn
from latup import tensor as T
from latup.errors import ConfigError, ShapeError
from latup.model import (
    DEFAULT_L2_SCOPE,
    Network,
    NetworkSpec,
    build_latupnet,
    count_parameters,
    estimate_flops,
    forward,
    layer_table,
    pc_block,
    spec_digest,
    summary,
)

# The 36 reference rows for the default configuration, exactly as
# published: name -> (output shape, parameter count).
REFERENCE_ROWS = {
    "enc1_pc_embed": ((128, 128, 128, 32), 2624),
    "enc1_pc_1_conv": ((128, 128, 128, 32), 1056),
    "enc1_pc_2_conv": ((128, 128, 128, 32), 27680),
    "enc1_pc_3_conv": ((128, 128, 128, 32), 128032),
    "enc1_pc_1_maxpool": ((64, 64, 64, 32), 0),
    "enc1_pc_2_maxpool": ((64, 64, 64, 32), 0),
    "enc1_pc_3_maxpool": ((64, 64, 64, 32), 0),
    "enc1_pc_concat": ((64, 64, 64, 96), 0),
    "enc2_SE_mult": ((64, 64, 64, 96), 2304),
    "enc2_conv1": ((64, 64, 64, 64), 165952),
    "enc2_instance_norm": ((64, 64, 64, 64), 128),
    "enc2_conv2": ((64, 64, 64, 64), 110656),
    "enc2_dropout": ((64, 64, 64, 64), 0),
    "enc2_maxpool": ((32, 32, 32, 64), 0),
    "enc3_SE_mult": ((32, 32, 32, 64), 1024),
    "enc3_conv1": ((32, 32, 32, 128), 221312),
    "enc3_instance_norm": ((32, 32, 32, 128), 256),
    "enc3_conv2": ((32, 32, 32, 128), 442496),
    "enc3_dropout": ((32, 32, 32, 128), 0),
    "enc3_maxpool": ((16, 16, 16, 128), 0),
    "bn_SE_mult": ((16, 16, 16, 128), 4096),
    "dec3_upsample": ((32, 32, 32, 128), 0),
    "dec3_conv1": ((32, 32, 32, 128), 131200),
    "dec3_instance_norm": ((32, 32, 32, 128), 256),
    "dec3_concat": ((32, 32, 32, 256), 0),
    "dec3_conv2": ((32, 32, 32, 128), 884864),
    "dec2_upsample": ((64, 64, 64, 128), 0),
    "dec2_conv1": ((64, 64, 64, 64), 65600),
    "dec2_instance_norm": ((64, 64, 64, 64), 128),
    "dec2_concat": ((64, 64, 64, 128), 0),
    "dec2_conv2": ((64, 64, 64, 64), 221248),
    "dec1_upsample": ((128, 128, 128, 64), 0),
    "dec1_conv1": ((128, 128, 128, 32), 16416),
    "dec1_concat": ((128, 128, 128, 64), 0),
    "dec1_conv2": ((128, 128, 128, 32), 55328),
    "prob_map": ((128, 128, 128, 4), 132),
}

TOTAL_PARAMETERS = 3_069_060

TINY = NetworkSpec(input_shape=(16, 16, 16, 3), base_filters=8)


def closed_form_total(f: int, r: int = 8, modalities: int = 3) -> int:
    """Independent per-layer parameter formula summed over the layer list."""
    conv = lambda k, cin, cout: k ** 3 * cin * cout + cout
    se = lambda c: 2 * c * c // r
    inorm = lambda c: 2 * c
    total = conv(3, modalities, f) + conv(1, f, f) + conv(3, f, f) + conv(5, f, f)
    for cin, cout in ((3 * f, 2 * f), (2 * f, 4 * f)):  # enc2, enc3
        total += se(cin) + conv(3, cin, cout) + inorm(cout) + conv(3, cout, cout)
    total += se(4 * f)  # bottleneck
    for cin, cout, skip in ((4 * f, 4 * f, 4 * f), (4 * f, 2 * f, 2 * f), (2 * f, f, f)):
        total += (conv(2, cin, cout) + inorm(cout) + se(cout)
                  + conv(3, cout + skip, cout) + conv(3, cout, cout))
    total += conv(1, f, 4)
    return total


class TestLayerTable:
    def test_total_parameters_exact(self):
        rows = layer_table(NetworkSpec())
        assert sum(r.params for r in rows) == TOTAL_PARAMETERS

    def test_all_reference_rows_match(self):
        byname = {r.name: r for r in layer_table(NetworkSpec())}
        assert len(REFERENCE_ROWS) == 36
        for name, (shape, params) in REFERENCE_ROWS.items():
            row = byname[name]
            assert tuple(row.out_shape) == shape, name
            assert row.params == params, name

    def test_layer_names_unique(self):
        names = [r.name for r in layer_table(NetworkSpec())]
        assert len(names) == len(set(names))

    def test_reference_row_input_shapes(self):
        byname = {r.name: r for r in layer_table(NetworkSpec())}
        assert byname["enc2_conv1"].in_shape == (64, 64, 64, 96)
        assert byname["dec3_conv2"].in_shape == (32, 32, 32, 256)
        assert byname["prob_map"].in_shape == (128, 128, 128, 32)

    def test_scaling_law_matches_closed_form(self):
        for f in (8, 16, 32):
            got = sum(r.params for r in layer_table(NetworkSpec(base_filters=f)))
            assert got == closed_form_total(f)
        assert closed_form_total(32) == TOTAL_PARAMETERS

    @pytest.mark.parametrize("spec,err", [
        (NetworkSpec(input_shape=(30, 32, 32, 3)), "divisible by 8"),
        (NetworkSpec(base_filters=12, se_reduction=8), "se_reduction"),
        (NetworkSpec(dropout_rate=1.0), "dropout"),
        (NetworkSpec(input_shape=(32, 32, 32)), "input_shape"),
    ])
    def test_invalid_specs(self, spec, err):
        with pytest.raises(ConfigError, match=err):
            spec.validate()


class TestNetwork:
    def test_count_parameters_matches_table(self):
        net = build_latupnet(TINY, seed=0)
        total, per_layer = count_parameters(net)
        rows = {r.name: r.params for r in net.layers}
        assert per_layer == rows
        assert total == sum(rows.values()) == closed_form_total(8)

    def test_forward_shapes_and_softmax(self):
        spec = NetworkSpec(input_shape=(32, 32, 32, 3), base_filters=8)
        net = build_latupnet(spec, seed=0)
        x = T.Tensor(np.random.default_rng(0).uniform(0, 1, (1, 32, 32, 32, 3))
                     .astype(np.float32))
        probs, _ = net.forward(x)
        assert probs.shape == (1, 32, 32, 32, 4)
        sums = probs.data.sum(axis=-1)
        assert np.abs(sums - 1.0).max() <= 1e-5

    def test_inference_deterministic(self):
        net = build_latupnet(TINY, seed=3)
        x = T.Tensor(np.random.default_rng(1).uniform(0, 1, (1, 16, 16, 16, 3))
                     .astype(np.float32))
        a, _ = net.forward(x, training=False)
        b, _ = net.forward(x, training=False)
        assert a.data.tobytes() == b.data.tobytes()

    def test_training_seeded_deterministic(self):
        net = build_latupnet(TINY, seed=3)
        x = T.Tensor(np.random.default_rng(1).uniform(0, 1, (1, 16, 16, 16, 3))
                     .astype(np.float32))
        a, _ = net.forward(x, training=True, seed=5)
        b, _ = net.forward(x, training=True, seed=5)
        c, _ = net.forward(x, training=True, seed=6)
        assert a.data.tobytes() == b.data.tobytes()
        assert a.data.tobytes() != c.data.tobytes()

    def test_intermediate_shapes_match_table(self):
        net = build_latupnet(TINY, seed=0)
        x = T.Tensor(np.random.default_rng(2).uniform(0, 1, (1, 16, 16, 16, 3))
                     .astype(np.float32))
        names = [r.name for r in net.layers]
        _, captured = net.forward(x, capture=names)
        for row in net.layers:
            assert captured[row.name].shape == (1,) + tuple(row.out_shape), row.name

    def test_capture_aliases_and_errors(self):
        net = build_latupnet(TINY, seed=0)
        x = T.Tensor(np.zeros((1, 16, 16, 16, 3), np.float32))
        probs, cap = net.forward(x, capture=("prob_map", "prob_map-input"))
        assert cap["prob_map"].shape == (1, 16, 16, 16, 4)
        assert cap["prob_map-input"].shape == (1, 16, 16, 16, 8)
        with pytest.raises(ConfigError, match="unknown capture"):
            net.forward(x, capture=("no_such_layer",))

    def test_input_shape_mismatch(self):
        net = build_latupnet(TINY, seed=0)
        with pytest.raises(ShapeError):
            net.forward(T.Tensor(np.zeros((1, 8, 8, 8, 3), np.float32)))

    def test_init_deterministic_per_seed(self):
        a = build_latupnet(TINY, seed=9).named_parameters()
        b = build_latupnet(TINY, seed=9).named_parameters()
        c = build_latupnet(TINY, seed=10).named_parameters()
        for name in a:
            assert a[name].data.tobytes() == b[name].data.tobytes()
        assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a)

    def test_l2_scope_names_exist(self):
        names = {r.name for r in layer_table(NetworkSpec())}
        assert set(DEFAULT_L2_SCOPE) <= names

    def test_digest_distinguishes_specs(self):
        assert spec_digest(NetworkSpec()) != spec_digest(NetworkSpec(base_filters=16))
        assert spec_digest(TINY) == spec_digest(NetworkSpec(
            input_shape=(16, 16, 16, 3), base_filters=8))


class TestPCBlock:
    def test_zero_params_zero_output(self):
        embed = nn.Conv3dParams(T.Tensor(np.zeros((3, 3, 3, 3, 1))),
                                T.Tensor(np.zeros(1)))
        paths = [nn.Conv3dParams(T.Tensor(np.zeros((k, k, k, 1, 1))),
                                 T.Tensor(np.zeros(1))) for k in (1, 3, 5)]
        x = T.Tensor(np.random.default_rng(3).uniform(0, 1, (1, 4, 4, 4, 3)))
        out = pc_block(x, embed, *paths)
        assert out.shape == (1, 2, 2, 2, 3)
        assert (out.data == 0).all()

    def test_output_shape_default_scale(self):
        rows = {r.name: r for r in layer_table(NetworkSpec())}
        assert rows["enc1_pc_concat"].out_shape == (64, 64, 64, 96)

    def test_standalone_matches_builder(self):
        net = build_latupnet(TINY, seed=4)
        x = T.Tensor(np.random.default_rng(4).uniform(0, 1, (1, 16, 16, 16, 3))
                     .astype(np.float32))
        _, cap = net.forward(x, capture=("enc1_pc_concat",))
        standalone = pc_block(
            x, net.params["enc1_pc_embed"], net.params["enc1_pc_1_conv"],
            net.params["enc1_pc_2_conv"], net.params["enc1_pc_3_conv"])
        np.testing.assert_array_equal(standalone.data, cap["enc1_pc_concat"].data)

    def test_odd_extent_rejected(self):
        net = build_latupnet(NetworkSpec(input_shape=(16, 16, 16, 3), base_filters=8))
        x = T.Tensor(np.zeros((1, 5, 5, 5, 3), np.float32))
        with pytest.raises(ShapeError):
            pc_block(x, net.params["enc1_pc_embed"], net.params["enc1_pc_1_conv"],
                     net.params["enc1_pc_2_conv"], net.params["enc1_pc_3_conv"])


class TestFlops:
    def test_one_cubed_conv_macs(self):
        # 1x1x1 conv: exactly one multiply per voxel per channel pair
        _, records = estimate_flops(NetworkSpec())
        byname = {r.name: r for r in records}
        assert byname["prob_map"].macs == 128 ** 3 * 1 * 32 * 4

    def test_embed_macs(self):
        _, records = estimate_flops(NetworkSpec())
        byname = {r.name: r for r in records}
        assert byname["enc1_pc_embed"].macs == 128 ** 3 * 2592

    def test_every_conv_matches_closed_form(self):
        spec = NetworkSpec(input_shape=(32, 32, 32, 3), base_filters=8)
        _, records = estimate_flops(spec)
        byname = {r.name: r for r in records}
        for row in layer_table(spec):
            if row.kind == "conv":
                vox = int(np.prod(row.out_shape[:3]))
                expected = vox * row.kernel_size ** 3 * row.in_shape[-1] * row.filters
                assert byname[row.name].macs == expected, row.name

    def test_spatial_doubling_multiplies_by_eight(self):
        small = {r.name: r for r in estimate_flops(
            NetworkSpec(input_shape=(16, 16, 16, 3), base_filters=8))[1]}
        large = {r.name: r for r in estimate_flops(
            NetworkSpec(input_shape=(32, 32, 32, 3), base_filters=8))[1]}
        for name, rec in small.items():
            if rec.macs:
                if "SE" in name:  # dense products do not scale with volume
                    continue
                assert large[name].macs == 8 * rec.macs, name

    def test_deterministic(self):
        a = estimate_flops(NetworkSpec())
        b = estimate_flops(NetworkSpec())
        assert a == b


class TestSummary:
    def test_contains_reference_rows_and_total(self):
        text = summary(NetworkSpec())
        assert "3,069,060" in text
        for name in ("enc1_pc_embed", "bn_SE_mult", "prob_map"):
            assert name in text
        assert "165952" in text  # enc2_conv1

    def test_golden_file(self, tmp_path):
        golden = summary(NetworkSpec(input_shape=(32, 32, 32, 3), base_filters=8))
        again = summary(NetworkSpec(input_shape=(32, 32, 32, 3), base_filters=8))
        assert golden == again
        columns = golden.splitlines()[0]
        for header in ("Layer", "Input Shape", "Layer Type", "Stride",
                       "Output Shape", "Parameters"):
            assert header in columns
