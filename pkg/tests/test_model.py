import numpy as np
import pytest

from slimshot import tensor as T
from slimshot.model import (LayerSpec, MaskSet, build_model, build_vgg19, forward_masked,
                            he_init, load_model, save_model)
from slimshot.tensor import Tensor

from helpers import random_batch, random_tiny_net, unit_saliency_from_weights


def test_vgg19_structure_full_width():
    m = build_vgg19(num_classes=10, width_multiplier=1.0)
    convs = [s for s in m.specs if s.kind == "conv"]
    linears = [s for s in m.specs if s.kind == "linear"]
    assert [c.out_channels for c in convs] == [64, 64, 128, 128, 256, 256, 256,
                                               512, 512, 512, 512, 512, 512]
    assert [l.units for l in linears] == [1024, 512, 10]
    assert sum(1 for s in m.specs if s.kind == "maxpool") == 4
    # all conv outputs and hidden linears prunable; classifier output is not
    assert all(c.prunable for c in convs)
    assert [l.prunable for l in linears] == [True, True, False]


def test_vgg19_quarter_width():
    m = build_vgg19(num_classes=10, width_multiplier=0.25)
    first_conv = next(s for s in m.specs if s.kind == "conv")
    assert first_conv.out_channels == 16


def test_vgg19_zero_width_errors():
    with pytest.raises(ValueError):
        build_vgg19(width_multiplier=0.0)


def test_shape_inference_matches_actual_shapes():
    for mult in (1.0, 0.25, 0.125):
        m = build_vgg19(num_classes=10, width_multiplier=mult)
        trace = []
        m.apply(np.zeros((2,) + m.input_shape, np.float32), mode="eval", trace=trace)
        assert trace == m.infer_shapes()


def test_all_ones_mask_is_bit_exact():
    m = build_vgg19(num_classes=10, width_multiplier=0.125, seed=3)
    x, _ = random_batch(m, 4, 0)
    plain = m.forward(x, mode="eval").data
    masked = forward_masked(m, MaskSet.ones(m), x, mode="eval").data
    assert np.array_equal(plain, masked)
    plain_t = m.apply(x, mode="train", update_running=False).logits.data
    masked_t = forward_masked(m, MaskSet.ones(m), x, mode="train").data
    assert np.array_equal(plain_t, masked_t)


def test_mask_gradient_toy_linear():
    # one linear unit, weights [1,2], input [1,1], loss = preactivation
    specs = [LayerSpec("linear", units=1, prunable=True)]
    m = build_model(specs, (2,), dtype="float64")
    m.layers[0]["weight"].data = np.array([[1.0, 2.0]])
    m.layers[0]["bias"].data = np.array([0.0])
    res = m.apply(np.array([[1.0, 1.0]]), mode="eval", masks=MaskSet.ones(m))
    res.logits.sum().backward()
    assert res.mask_leaves[0].grad[0] == 3.0


def test_mask_gradient_equals_weight_saliency_sum():
    # dL/dm_u == sum_w w * dL/dw + b * dL/db on randomized tiny nets (64-bit)
    for seed in range(6):
        model = random_tiny_net(seed, dtype="float64")
        x, y = random_batch(model, 6, seed + 100)
        masks = MaskSet.ones(model)
        res = model.apply(x, mode="train", masks=masks, update_running=False)
        loss = T.softmax_cross_entropy(res.logits, y)
        model.zero_grad()
        loss.backward()
        for li in model.prunable_layers():
            mask_grad = res.mask_leaves[li].grad
            weight_sum = unit_saliency_from_weights(model, li)
            denom = np.maximum(np.abs(mask_grad), 1e-9)
            assert np.max(np.abs(mask_grad - weight_sum) / denom) < 1e-4


def test_masked_unit_is_exactly_dead():
    model = random_tiny_net(2, dtype="float32")
    x, _ = random_batch(model, 3, 7)
    masks = MaskSet.ones(model)
    li = model.prunable_layers()[0]
    masks.values[li][0] = 0.0
    # eval and train mode: logits finite and channel contributes nothing
    out = forward_masked(model, masks, x, mode="eval")
    assert np.isfinite(out.data).all()
    out_t = forward_masked(model, masks, x, mode="train")
    assert np.isfinite(out_t.data).all()


def test_mask_validation_errors():
    model = random_tiny_net(1)
    masks = MaskSet.ones(model)
    li = model.prunable_layers()[0]
    masks.values[li] = masks.values[li][:-1]
    with pytest.raises(ValueError):
        forward_masked(model, masks, np.zeros((1,) + model.input_shape))
    masks = MaskSet.ones(model)
    masks.values[li][0] = 0.5
    with pytest.raises(ValueError):
        forward_masked(model, masks, np.zeros((1,) + model.input_shape))


def test_he_init_statistics():
    specs = [LayerSpec("conv", out_channels=400, kernel=3, padding=1, prunable=True),
             LayerSpec("relu"), LayerSpec("maxpool"), LayerSpec("avgpool"),
             LayerSpec("flatten"), LayerSpec("linear", units=2)]
    m = build_model(specs, (3, 8, 8), seed=42)
    w = m.layers[0]["weight"].data
    assert w.size >= 10_000
    assert abs(w.std() - np.sqrt(2 / 27)) / np.sqrt(2 / 27) < 0.05
    assert np.all(m.layers[0]["bias"].data == 0)


def test_he_init_seed_determinism():
    a = build_vgg19(width_multiplier=0.125, seed=5)
    b = build_vgg19(width_multiplier=0.125, seed=5)
    for (_, _, ta), (_, _, tb) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(ta.data, tb.data)
    c = build_vgg19(width_multiplier=0.125, seed=6)
    diffs = max(np.abs(ta.data - tc.data).max()
                for (_, _, ta), (_, _, tc) in zip(a.parameters(), c.parameters())
                if ta.data.size)
    assert diffs > 0


def test_serialization_roundtrip(tmp_path):
    model = random_tiny_net(4, dtype="float32")
    x, _ = random_batch(model, 2, 11)
    model.forward(x, mode="train")  # move running stats off their defaults
    before = model.forward(x, mode="eval").data
    arch, blob = tmp_path / "arch.json", tmp_path / "params.bin"
    save_model(model, arch, blob)
    loaded = load_model(arch, blob)
    after = loaded.forward(x, mode="eval").data
    assert np.array_equal(before, after)
    assert [s.to_dict() for s in loaded.specs] == [s.to_dict() for s in model.specs]


def test_serialization_truncated_blob(tmp_path):
    model = random_tiny_net(5)
    arch, blob = tmp_path / "arch.json", tmp_path / "params.bin"
    save_model(model, arch, blob)
    data = blob.read_bytes()
    blob.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_model(arch, blob)


def test_clone_is_independent():
    model = random_tiny_net(6)
    clone = model.clone()
    model.layers[0]["weight"].data += 1.0
    assert not np.array_equal(model.layers[0]["weight"].data, clone.layers[0]["weight"].data)


def test_astype_roundtrip():
    model = random_tiny_net(7, dtype="float32")
    m64 = model.astype("float64")
    assert m64.layers[0]["weight"].data.dtype == np.float64
    x, _ = random_batch(model, 2, 13)
    a = model.forward(x, mode="eval").data
    b = m64.forward(x.astype(np.float64), mode="eval").data
    assert np.allclose(a, b, rtol=1e-4, atol=1e-5)
