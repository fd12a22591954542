import numpy as np
import pytest

from advstress import compress
from advstress import tensor as T
from advstress.models import (
    BinarizedConv2d,
    Conv2d,
    ForwardCtx,
    GlobalAvgPool,
    Linear,
    Model,
    build_model,
    conv_spatial_sizes,
    softmax_np,
)
from advstress.tensor import Tensor
from advstress.training import TrainSpec, evaluate_accuracy, train_model


from conftest import texture_dataset


class TestArchitectures:
    @pytest.mark.parametrize("arch", ["cifar_small", "mnist_tiny", "micro"])
    def test_forward_shapes(self, arch):
        m = build_model(arch, num_classes=10, seed=1)
        x = Tensor(np.zeros((2, *m.input_shape), dtype=np.float32))
        feats, logits = m.forward_parts(x)
        assert logits.shape == (2, 10)
        assert feats.ndim == 4

    def test_cam_tail_enforced(self):
        with pytest.raises(ValueError, match="global average pooling"):
            Model("bad", (1, 8, 8), 2, [("fc", Linear(8, 2)), ("pool", GlobalAvgPool())])

    @pytest.mark.parametrize("binary", [{"scheme": "xnor"}, {"scheme": "abc", "num_bases": 3}])
    def test_binary_variant_parameter_layout_matches(self, binary):
        a = dict(build_model("micro", seed=3).named_arrays())
        b = dict(build_model("micro", seed=3, binary=binary).named_arrays())
        assert set(a) == set(b)
        for k in a:
            assert a[k].shape == b[k].shape

    def test_spatial_sizes(self):
        m = build_model("cifar_small", seed=0)
        sizes = conv_spatial_sizes(m)
        assert sizes["stem_conv"] == (32, 32)
        assert sizes["block2.conv1"] == (16, 16)
        assert sizes["block3.conv2"] == (8, 8)
        assert sizes["block3.sc_conv"] == (8, 8)


class TestTraining:
    def test_loss_decreases_and_accuracy_rises(self):
        rng = np.random.default_rng(0)
        x, y = texture_dataset(rng, n=128)
        m = build_model("micro", num_classes=4, seed=0)
        hist = train_model(m, x, y, TrainSpec(epochs=8, lr=0.2, batch_size=32, seed=1))
        assert hist[-1]["loss"] < hist[0]["loss"]
        assert evaluate_accuracy(m, x, y) > 0.7

    def test_training_is_deterministic(self):
        rng = np.random.default_rng(1)
        x, y = texture_dataset(rng)
        spec = TrainSpec(epochs=2, lr=0.05, batch_size=16, seed=5)
        weights = []
        for _ in range(2):
            m = build_model("micro", num_classes=4, seed=2)
            train_model(m, x, y, spec)
            weights.append(np.concatenate([t.reshape(-1) for _, t in m.named_arrays()]))
        assert weights[0].tobytes() == weights[1].tobytes()


class TestDistill:
    def test_soft_target_matches_hand_softmax(self):
        # teacher logits [2, 0] at T=2 soften to softmax([1, 0]).
        soft = softmax_np(np.array([[2.0, 0.0]]) / 2.0)
        np.testing.assert_allclose(soft, [[0.7310586, 0.2689414]], atol=1e-6)

    def test_mix_one_identical_to_plain_training(self):
        rng = np.random.default_rng(2)
        x, y = texture_dataset(rng)
        teacher = build_model("micro", num_classes=4, seed=7)
        spec = TrainSpec(epochs=2, lr=0.05, batch_size=16, seed=9)

        plain = build_model("micro", num_classes=4, seed=11)
        train_model(plain, x, y, spec)
        kd = build_model("micro", num_classes=4, seed=11)
        train_model(kd, x, y, spec, teacher=teacher, temperature=4.0, mix=1.0)

        for (_, a), (_, b) in zip(plain.named_arrays(), kd.named_arrays()):
            assert a.tobytes() == b.tobytes()

    def test_onehot_teacher_at_t1_reduces_to_ce(self):
        # KL(onehot || q) = CE(q, label) - entropy(onehot) = CE(q, label).
        from advstress.training import _kl_to_soft_target

        rng = np.random.default_rng(3)
        logits = Tensor(rng.standard_normal((4, 3)).astype(np.float32))
        labels = np.array([0, 2, 1, 1])
        onehot = np.eye(3, dtype=np.float32)[labels]
        kl = _kl_to_soft_target(logits, onehot, temperature=1.0).item()
        ce = T.softmax_cross_entropy(logits, labels).item()
        # Entropy of a clipped one-hot is ~1e-11, not exactly 0.
        assert kl == pytest.approx(ce, abs=1e-5)

    def test_temperature_must_be_positive(self):
        teacher = build_model("micro", num_classes=4, seed=0)
        with pytest.raises(ValueError, match="temperature"):
            compress.distill(teacher, "micro", temperature=0.0, mix=0.5,
                             x=np.zeros((1, 1, 8, 8), dtype=np.float32),
                             y=np.zeros(1, dtype=np.int64), spec=TrainSpec(epochs=0))


class TestPrune:
    def _four_weight_model(self):
        rng = np.random.default_rng(0)
        conv = Conv2d(1, 1, 2, padding=1, rng=rng)
        conv.weight.data = np.array([0.1, -0.5, 0.3, -0.2],
                                    dtype=np.float32).reshape(1, 1, 2, 2)
        return Model("m", (1, 4, 4), 2, [
            ("c", conv), ("pool", GlobalAvgPool()), ("fc", Linear(1, 2, rng=rng)),
        ])

    def test_weight_regularity_zeroes_smallest(self):
        pruned = compress.prune(self._four_weight_model(), "weight", 0.5)
        got = pruned.layers[0][1].weight.data.reshape(-1)
        np.testing.assert_array_equal(got, [0.0, -0.5, 0.3, 0.0])

    def test_sparsity_zero_is_identity_with_full_mask(self):
        m = build_model("micro", num_classes=4, seed=1)
        pruned = compress.prune(m, "weight", 0.0)
        for (_, a), (_, b) in zip(m.named_arrays(), pruned.named_arrays()):
            np.testing.assert_array_equal(a, b)
        for _, layer in pruned.conv_layers():
            assert layer.mask is not None and layer.mask.all()

    def test_filter_regularity_zeroes_whole_filters(self):
        m = build_model("micro", num_classes=4, seed=2)
        pruned = compress.prune(m, "filter", 0.5)
        conv = pruned.layers[0][1]  # 4 filters
        per_filter = np.abs(conv.weight.data).sum(axis=(1, 2, 3))
        assert int((per_filter == 0).sum()) == 2

    def test_kernel_regularity_zeroes_whole_kernels(self):
        m = build_model("micro", num_classes=4, seed=3)
        pruned = compress.prune(m, "kernel", 0.5)
        for _, conv in pruned.conv_layers():
            kn = np.abs(conv.weight.data).sum(axis=(2, 3))
            n_zero = int((kn == 0).sum())
            assert n_zero == round(0.5 * kn.size)

    def test_sparsity_one_rejected(self):
        m = build_model("micro", num_classes=4, seed=0)
        with pytest.raises(ValueError, match="sparsity"):
            compress.prune(m, "weight", 1.0)

    @pytest.mark.parametrize("k", [1, 3])
    def test_masks_persist_through_training(self, k):
        rng = np.random.default_rng(4)
        x, y = texture_dataset(rng, n=48)
        m = build_model("micro", num_classes=4, seed=5)
        pruned = compress.prune(m, "weight", 0.5)
        masks = {p: l.mask.copy() for p, l in pruned.conv_layers()}
        before = {p: l.weight.data.copy() for p, l in pruned.conv_layers()}
        train_model(pruned, x, y, TrainSpec(epochs=k, lr=0.1, batch_size=16, seed=6))
        moved = 0
        for p, layer in pruned.conv_layers():
            zeroed = masks[p] == 0
            assert np.all(layer.weight.data[zeroed] == 0.0)
            moved += int(np.any(layer.weight.data[~zeroed] != before[p][~zeroed]))
        assert moved > 0  # training actually updated the surviving weights

    def test_original_model_untouched(self):
        m = build_model("micro", num_classes=4, seed=6)
        before = {k: v.copy() for k, v in m.named_arrays()}
        compress.prune(m, "filter", 0.5)
        for k, v in m.named_arrays():
            np.testing.assert_array_equal(v, before[k])
        assert all(layer.mask is None for _, layer in m.conv_layers())


class TestBinarize:
    def test_xnor_fixed_point_weights(self):
        layer = BinarizedConv2d(1, 1, 2, scheme="xnor")
        layer.weight.data = np.array([[[[0.5, -0.5], [0.5, -0.5]]]], dtype=np.float32)
        eff = layer.effective_weight_array()
        np.testing.assert_array_equal(eff, layer.weight.data)
        bases, scales = layer.basis_signs_and_scales()
        np.testing.assert_array_equal(bases[0].reshape(-1), [1, -1, 1, -1])
        assert scales[0][0] == 0.5

    def test_xnor_alpha_is_mean_abs(self):
        layer = BinarizedConv2d(1, 1, 1, scheme="xnor")
        layer.weight.data = np.array([1.0, -3.0], dtype=np.float32).reshape(2, 1, 1, 1)
        # per-filter alpha: filters are single weights here
        eff = layer.effective_weight_array().reshape(-1)
        np.testing.assert_array_equal(eff, [1.0, -3.0])
        layer2 = BinarizedConv2d(2, 1, 1, scheme="xnor")
        layer2.weight.data = np.array([[1.0], [-3.0]], dtype=np.float32).reshape(1, 2, 1, 1)
        _, scales = layer2.basis_signs_and_scales()
        assert scales[0][0] == 2.0  # mean(|1|, |-3|) over the filter
        np.testing.assert_array_equal(
            layer2.effective_weight_array().reshape(-1), [2.0, -2.0])

    def test_sign_zero_is_positive(self):
        layer = BinarizedConv2d(1, 1, 1, scheme="xnor")
        layer.weight.data = np.zeros((1, 1, 1, 1), dtype=np.float32)
        bases, _ = layer.basis_signs_and_scales()
        assert bases[0][0, 0, 0, 0] == 1.0

    def _abc_residual(self, w, m):
        layer = BinarizedConv2d(1, 1, 2, scheme="abc", num_bases=m)
        layer.weight.data = np.asarray(w, dtype=np.float32).reshape(1, 1, 2, 2)
        return float(np.linalg.norm(layer.weight.data - layer.effective_weight_array()))

    def test_abc_more_bases_reduce_residual(self):
        w = [1.0, -1.0, 2.0, -2.0]
        assert self._abc_residual(w, 2) < self._abc_residual(w, 1)

    def test_abc_residual_non_increasing_in_bases(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal(4)
        residuals = [self._abc_residual(w, m) for m in range(1, 5)]
        for a, b in zip(residuals, residuals[1:]):
            assert b <= a + 1e-5

    def test_effective_weight_value_counts(self):
        m_x = compress.binarize_xnor(build_model("micro", num_classes=4, seed=9))
        for _, layer in m_x.conv_layers():
            if isinstance(layer, BinarizedConv2d):
                eff = layer.effective_weight_array()
                for f in range(eff.shape[0]):
                    assert len(np.unique(eff[f])) <= 2
        m_a = compress.binarize_abc(build_model("micro", num_classes=4, seed=9), 3)
        for _, layer in m_a.conv_layers():
            if isinstance(layer, BinarizedConv2d):
                assert len(np.unique(layer.effective_weight_array())) <= 2 ** 3

    def test_first_and_last_layers_stay_full_precision(self):
        m = compress.binarize_xnor(build_model("cifar_small", seed=10))
        convs = m.conv_layers()
        assert isinstance(convs[0][1], Conv2d)  # stem
        assert isinstance(m.final_linear(), Linear)
        assert any(isinstance(l, BinarizedConv2d) for _, l in convs)

    def test_weights_transfer_by_name(self):
        src = build_model("micro", num_classes=4, seed=11)
        out = compress.binarize_xnor(src)
        src_arrays = dict(src.named_arrays())
        for name, arr in out.named_arrays():
            np.testing.assert_array_equal(arr, src_arrays[name])

    @pytest.mark.parametrize("binary", [{"scheme": "xnor"}, {"scheme": "abc", "num_bases": 3}])
    def test_packed_path_matches_float_sim_exactly(self, binary):
        rng = np.random.default_rng(12)
        m = build_model("micro", num_classes=4, seed=13, binary=binary)
        x = rng.uniform(0, 1, size=(3, 1, 8, 8)).astype(np.float32)
        a = m.scores(x, packed=False)
        b = m.scores(x, packed=True)
        assert a.tobytes() == b.tobytes()

    def test_num_bases_below_one_rejected(self):
        with pytest.raises(ValueError, match="num_bases"):
            compress.binarize_abc(build_model("micro", num_classes=4, seed=0), 0)


class TestCompressionStats:
    def test_vanilla_vs_itself(self):
        m = build_model("micro", num_classes=4, seed=0)
        stats = compress.compression_stats(m, m)
        assert stats.compression_ratio == 1.0
        assert stats.ncc == 1.0

    def test_architecture_mismatch(self):
        a = build_model("micro", num_classes=4, seed=0)
        b = build_model("mnist_tiny", num_classes=4, seed=0)
        with pytest.raises(ValueError, match="architecture"):
            compress.compression_stats(a, b)

    def test_xnor_conv_bit_accounting(self):
        rng = np.random.default_rng(1)
        vanilla = Model("m", (1, 4, 4), 2, [
            ("c", Conv2d(1, 4, 3, padding=1, rng=rng)),
            ("pool", GlobalAvgPool()),
            ("fc", Linear(4, 2, rng=rng)),
        ])
        binary = Model("m", (1, 4, 4), 2, [
            ("c", BinarizedConv2d(1, 4, 3, padding=1, rng=rng)),
            ("pool", GlobalAvgPool()),
            ("fc", Linear(4, 2, rng=rng)),
        ])
        p = 4 * 1 * 3 * 3
        f = 4
        delta = compress._param_bits(vanilla) - compress._param_bits(binary)
        assert delta == 32 * p - (p + 32 * f)

    def test_filter_pruned_layer_macs_halve(self):
        m = build_model("micro", num_classes=4, seed=2)
        base = compress._weighted_macs(m, compress.BINARY_MAC_WEIGHT)
        conv2 = dict(m.conv_layers())["conv2"]
        mask = np.ones_like(conv2.weight.data)
        mask[: conv2.out_ch // 2] = 0.0
        conv2.mask = mask
        after = compress._weighted_macs(m, compress.BINARY_MAC_WEIGHT)
        sizes = conv_spatial_sizes(m)
        conv2_macs = sizes["conv2"][0] * sizes["conv2"][1] * 9 * 4 * 8
        assert base - after == pytest.approx(conv2_macs / 2)

    def test_compressed_ratios_at_least_one(self):
        base = build_model("micro", num_classes=4, seed=3)
        for variant in [
            compress.prune(base, "weight", 0.5),
            compress.binarize_xnor(base),
            compress.binarize_abc(base, 3),
        ]:
            stats = compress.compression_stats(variant, base)
            assert stats.compression_ratio >= 1.0
            assert 0.0 < stats.ncc <= 1.0
