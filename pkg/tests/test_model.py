import numpy as np
import pytest

from fdcheck import assert_grads_close, numeric_grad
from ttaseg import sbct
from ttaseg.model import (ModelConfig, SegModel, load_checkpoint, lora_param_names,
                          save_checkpoint, tokens_to_grid)
from ttaseg.synthdata import BoxPrompt
from ttaseg.tensor import Tensor, no_grad


def _image(config, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (3, config.image_size, config.image_size))


def _box(config):
    s = config.image_size
    return BoxPrompt(s * 0.25, s * 0.25, s * 0.75, s * 0.75)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(image_size=60)
    with pytest.raises(ValueError, match="lowres"):
        ModelConfig(lowres_size=8)
    with pytest.raises(ValueError, match="lora_targets"):
        ModelConfig(lora_targets="xz")
    with pytest.raises(ValueError, match="attention_heads"):
        ModelConfig(embed_dim=30)


def test_encode_token_shape(model64):
    z = model64.encode(_image(model64.config))
    assert z.shape == (64, 32)


def test_encode_rejects_wrong_size(model64):
    with pytest.raises(ValueError, match="expected"):
        model64.encode(np.zeros((3, 32, 32)))


def test_channel_permutation_changes_embedding(model64):
    x = _image(model64.config)
    z = model64.encode(x).data
    z_perm = model64.encode(x[[1, 2, 0]]).data
    assert not np.allclose(z, z_perm)


def test_lora_zero_b_is_identity(model64):
    x = _image(model64.config)
    base = model64.encode(x).data
    adapted = model64.clone()
    adapted.attach_lora(seed=5)
    assert np.array_equal(adapted.encode(x).data, base)
    out_base = model64.forward(x, _box(model64.config))
    out_adapted = adapted.forward(x, _box(model64.config))
    assert np.array_equal(out_base.m_high.data, out_adapted.m_high.data)
    assert np.array_equal(out_base.s_iou.data, out_adapted.s_iou.data)


def test_lora_delta_has_bounded_rank(model64):
    model64.attach_lora(seed=1)
    a = model64.params["enc0.attn.q.lora_a"].data
    b = model64.params["enc0.attn.q.lora_b"].data
    b = b + np.random.default_rng(2).normal(size=b.shape)
    delta = b @ a
    assert np.linalg.matrix_rank(delta) <= model64.config.lora_rank


def test_lora_parameter_count(model64):
    model64.attach_lora(seed=0)
    names = lora_param_names(model64.config)
    count = sum(model64.params[n].size for n in names)
    cfg = model64.config
    d = cfg.embed_dim
    assert count == cfg.encoder_blocks * 2 * cfg.lora_rank * (d + d)


def test_lora_double_attach_rejected(model64):
    model64.attach_lora(seed=0)
    with pytest.raises(ValueError, match="already"):
        model64.attach_lora(seed=0)


def test_lora_targets_config_switch(tmp_path):
    wide = SegModel.build(ModelConfig(lora_targets="qkvo"), seed=4)
    wide.attach_lora(seed=4)
    names = {n for n in wide.params if ".lora_" in n}
    assert len(names) == wide.config.encoder_blocks * 4 * 2
    assert "enc0.attn.k.lora_a" in names and "enc1.attn.o.lora_b" in names
    # the switch survives the checkpoint round trip
    save_checkpoint(wide, tmp_path / "w.ckpt")
    assert load_checkpoint(tmp_path / "w.ckpt").config.lora_targets == "qkvo"


def test_prompt_encoding_deterministic_and_box_sensitive(model64):
    s = model64.config.image_size
    full = BoxPrompt(0.0, 0.0, float(s), float(s))
    quarter = BoxPrompt(0.0, 0.0, s / 2, s / 2)
    e1 = model64.encode_prompt(full).data
    e2 = model64.encode_prompt(full).data
    e3 = model64.encode_prompt(quarter).data
    assert np.array_equal(e1, e2)
    assert not np.allclose(e1, e3)
    assert e1.shape == (1, model64.config.embed_dim)


def test_prompt_rejects_out_of_bounds(model64):
    with pytest.raises(ValueError, match="exceeds"):
        model64.encode_prompt(BoxPrompt(0.0, 0.0, 65.0, 10.0))


def test_decode_outputs(model64):
    out = model64.forward(_image(model64.config), _box(model64.config))
    assert 0.0 < float(out.s_iou.data) < 1.0
    assert out.m_low.shape == (16, 16)
    assert out.m_high.shape == (64, 64)
    for t in (out.m_low, out.m_high, out.s_iou, out.z):
        assert np.all(np.isfinite(t.data))


def test_forward_bit_deterministic(model64):
    x = _image(model64.config)
    a = model64.forward(x, _box(model64.config))
    b = model64.forward(x, _box(model64.config))
    assert np.array_equal(a.m_high.data, b.m_high.data)
    assert np.array_equal(a.s_iou.data, b.s_iou.data)


def test_clone_shares_no_storage(model64):
    twin = model64.clone()
    for name in model64.params:
        assert twin.params[name].data is not model64.params[name].data
    twin.params["pos_embed"].data[0, 0] += 1.0
    assert model64.params["pos_embed"].data[0, 0] != twin.params["pos_embed"].data[0, 0]


def test_gradient_reaches_curve_scalars_through_forward(model16):
    params = sbct.init_identity()
    x = np.random.default_rng(3).uniform(0, 1, (16, 16))
    out = model16.forward(sbct.transform_gray(x, params), _box(model16.config))
    (1.0 - out.s_iou).backward()
    assert params.u.grad is not None
    assert np.linalg.norm(params.u.grad) > 0.0


def test_frozen_weights_receive_no_gradient(model16):
    model16.attach_lora(seed=2)
    model16.set_trainable(lambda n: ".lora_" in n or n.startswith("prompt."))
    out = model16.forward(_image(model16.config, 4), _box(model16.config))
    out.m_high.sum().backward()
    for name, p in model16.params.items():
        if p.requires_grad:
            assert p.grad is not None, name
        else:
            assert p.grad is None, name


def test_trainable_enumeration(model64):
    model64.attach_lora(seed=0)
    model64.set_trainable(lambda n: ".lora_" in n or n.startswith("prompt."))
    names = set(model64.trainable())
    assert all((".lora_" in n) or n.startswith("prompt.") for n in names)
    assert len([n for n in names if ".lora_" in n]) == 8  # 2 blocks x q,v x A,B


def test_tokens_to_grid_layout():
    z = Tensor(np.arange(8.0).reshape(4, 2))
    grid = tokens_to_grid(z)
    assert grid.shape == (2, 2, 2)
    assert grid.data[0].tolist() == [[0.0, 2.0], [4.0, 6.0]]
    with pytest.raises(ValueError, match="square"):
        tokens_to_grid(Tensor(np.zeros((3, 2))))


def test_no_grad_forward_builds_no_graph(model64):
    model64.set_trainable(lambda n: True)
    with no_grad():
        out = model64.forward(_image(model64.config), _box(model64.config))
    assert not out.m_high.requires_grad


# -- checkpoint io -------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(model64, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model64, path)
    loaded = load_checkpoint(path)
    x = _image(model64.config)
    a = model64.forward(x, _box(model64.config))
    b = loaded.forward(x, _box(model64.config))
    assert np.array_equal(a.m_high.data, b.m_high.data)
    assert np.array_equal(a.m_low.data, b.m_low.data)
    assert np.array_equal(a.s_iou.data, b.s_iou.data)
    for name in model64.params:
        assert np.array_equal(model64.params[name].data, loaded.params[name].data)


def test_checkpoint_roundtrip_with_lora(model16, tmp_path):
    model16.attach_lora(seed=9)
    model16.params["enc0.attn.q.lora_b"].data[:] = 0.5
    path = tmp_path / "m.ckpt"
    save_checkpoint(model16, path)
    loaded = load_checkpoint(path)
    assert loaded.has_lora
    assert np.array_equal(loaded.params["enc0.attn.q.lora_b"].data,
                          model16.params["enc0.attn.q.lora_b"].data)


def test_checkpoint_rejects_corrupt_magic(model16, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model16, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_wrong_shape_naming_tensor(model16, tmp_path):
    path = tmp_path / "m.ckpt"
    bad = model16.clone()
    bad.params["pos_embed"] = Tensor(np.zeros((2, 2)))
    save_checkpoint(bad, path)
    with pytest.raises(ValueError, match="pos_embed"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(model16, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model16, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_config16_shapes(model16):
    out = model16.forward(_image(model16.config, 5), _box(model16.config))
    assert out.m_low.shape == (4, 4)
    assert out.m_high.shape == (16, 16)
    assert out.z.shape == (4, 8)


def test_full_path_gradcheck_small(model16):
    """End-to-end finite-difference check on a few scalars of every
    trainable family (the exhaustive sweep lives in the acceptance suite)."""
    rng = np.random.default_rng(0)
    model16.attach_lora(seed=1)
    for name in lora_param_names(model16.config):
        model16.params[name].data = 0.05 * rng.normal(size=model16.params[name].shape)
    model16.set_trainable(lambda n: ".lora_" in n or n.startswith("prompt."))
    params = sbct.init_identity()
    x = rng.uniform(0, 1, (16, 16))
    box = _box(model16.config)

    def loss_tensor():
        out = model16.forward(sbct.transform_gray(x, params), box)
        return (1.0 - out.s_iou) + out.m_high.sigmoid().mean()

    loss_tensor().backward()
    grads = {"sbct": params.u.grad.copy(),
             "lora": model16.params["enc0.attn.v.lora_a"].grad.copy(),
             "prompt": model16.params["prompt.freq"].grad.copy()}

    def f():
        return float(loss_tensor().data)

    assert_grads_close(grads["sbct"], numeric_grad(f, params.u), rtol=1e-4, atol=1e-7, label="sbct")
    assert_grads_close(grads["lora"], numeric_grad(f, model16.params["enc0.attn.v.lora_a"]),
                       rtol=1e-4, atol=1e-7, label="lora_a")
    assert_grads_close(grads["prompt"], numeric_grad(f, model16.params["prompt.freq"]),
                       rtol=1e-4, atol=1e-7, label="prompt.freq")
