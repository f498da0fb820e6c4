import numpy as np
import pytest

from mitoshift import diffcore as dc
from mitoshift.backbone import (ViTConfig, VptViT, EmbeddingHeads, load_checkpoint,
                                patchify, save_checkpoint)
from mitoshift.diffcore import Tensor
from mitoshift.errors import ConfigError, DataError, ShapeError

from conftest import random_images, tiny_cfg


def test_patch_count():
    assert ViTConfig().num_patches == 64
    assert patchify(np.zeros((2, 64, 64, 3), np.uint8), 8).shape == (2, 64, 192)


def test_zero_image_gives_position_embedding():
    m = VptViT(ViTConfig(), seed=1)
    m.params["patch_embed.b"].data[:] = 0.0
    e = m.patch_embed(np.zeros((1, 64, 64, 3), np.uint8))
    assert np.array_equal(e.data[0], m.params["pos_embed"].data)


def test_patch_embedding_is_local():
    m = VptViT(tiny_cfg(), seed=0)
    a = random_images(1, 16, 1)
    b = a.copy()
    b[0, 4:8, 8:12] = 255 - b[0, 4:8, 8:12]  # patch (1, 2) -> index 6
    ea = m.patch_embed(a, with_pos=False).data[0]
    eb = m.patch_embed(b, with_pos=False).data[0]
    changed = np.where(np.any(ea != eb, axis=1))[0]
    assert changed.tolist() == [6]


def test_patch_embed_size_mismatch():
    m = VptViT(tiny_cfg(), seed=0)
    with pytest.raises(ShapeError):
        m.patch_embed(np.zeros((1, 12, 12, 3), np.uint8))


@pytest.mark.parametrize("kw", [dict(image_side=30), dict(embed_dim=18, num_heads=4), dict(prompt_len=-1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ViTConfig(**kw).validate()


def test_vpt_sequence_trace():
    m = VptViT(ViTConfig(num_layers=4, prompt_len=4), seed=0)
    trace = []
    m.forward_vpt(m.patch_embed(random_images(1, 64)), trace=trace)
    assert trace == [(69, 65)] * 4


@pytest.mark.parametrize("plen", [0, 1, 3, 6])
def test_output_length_independent_of_prompt_len(plen):
    m = VptViT(tiny_cfg(prompt_len=plen), seed=0)
    trace = []
    logits, feat = m.forward_vpt(m.patch_embed(random_images(2, 16)), trace=trace)
    assert all(out == 17 for _, out in trace)
    assert logits.shape == (2, 2) and feat.shape == (2, 16)


def test_prompt_len_zero_equals_plain():
    m = VptViT(tiny_cfg(prompt_len=0), seed=3)
    x = random_images(3, 16)
    a, _ = m.forward_vpt(m.patch_embed(x))
    b, _ = m.forward_plain(m.patch_embed(x))
    assert np.array_equal(a.data, b.data)


def test_prompts_change_output():
    m = VptViT(tiny_cfg(), seed=3)
    x = random_images(2, 16)
    a, _ = m.forward_vpt(m.patch_embed(x))
    b, _ = m.forward_plain(m.patch_embed(x))
    assert not np.array_equal(a.data, b.data)


def test_prompt_gradients_nonzero_every_layer():
    m = VptViT(tiny_cfg(num_layers=3), seed=0, adaptation="vpt")
    with dc.Tape() as tape:
        logits, _ = m.forward(random_images(4, 16))
        loss = dc.cross_entropy(logits, [0, 1, 1, 0])
    dc.backward(loss, tape)
    for l in range(3):
        g = m.params[f"prompts.{l}"].grad
        assert g is not None and np.abs(g).max() > 0


def test_lora_zero_b_is_bitwise_base():
    m = VptViT(tiny_cfg(), seed=5, adaptation="lora")
    x = random_images(3, 16)
    a, fa = m.forward_lora(m.patch_embed(x))
    b, fb = m.forward_plain(m.patch_embed(x))
    assert np.array_equal(a.data, b.data) and np.array_equal(fa.data, fb.data)


def test_lora_full_rank_reconstructs_delta():
    cfg = tiny_cfg(lora_rank=16)
    m = VptViT(cfg, seed=2, adaptation="lora")
    ref = VptViT(cfg, seed=2, adaptation="lora")
    r = np.random.default_rng(9)
    x = random_images(2, 16)
    for l in range(cfg.num_layers):
        dW = 0.1 * r.normal(size=(16, 48))
        A, B = np.eye(16), dW  # A @ B == dW exactly factorised at full rank
        m.params[f"lora.{l}.A"].data = A
        m.params[f"lora.{l}.B"].data = B
        ref.params[f"blocks.{l}.qkv.w"].data = ref.params[f"blocks.{l}.qkv.w"].data + dW
    a, _ = m.forward_lora(m.patch_embed(x))
    b, _ = ref.forward_plain(ref.patch_embed(x))
    assert np.max(np.abs(a.data - b.data)) <= 1e-10


def test_lora_gradient_reaches_factors_only():
    m = VptViT(tiny_cfg(), seed=0, adaptation="lora")
    m.params["lora.0.B"].data = 0.01 * np.ones_like(m.params["lora.0.B"].data)
    with dc.Tape() as tape:
        logits, _ = m.forward(random_images(2, 16))
        loss = dc.cross_entropy(logits, [0, 1])
    dc.backward(loss, tape)
    assert np.abs(m.params["lora.0.A"].grad).max() > 0
    assert np.abs(m.params["lora.1.B"].grad).max() > 0
    assert m.params["blocks.0.qkv.w"].grad is None


@pytest.mark.parametrize("policy, prefixes", [
    ("vpt", ("prompts.", "cls_token", "head.", "domain_head.")),
    ("lora", ("lora.", "head.", "domain_head.")),
    ("head_only", ("head.", "domain_head.")),
])
def test_freeze_policy_partition(policy, prefixes):
    m = VptViT(tiny_cfg(), seed=0, adaptation=policy)
    trainable = {id(t) for t in m.trainable()}
    frozen = {id(t) for t in m.frozen()}
    assert not trainable & frozen and len(trainable | frozen) == len(m.params)
    for name, t in m.params.items():
        assert t.requires_grad == name.startswith(prefixes)


def test_logits_deterministic():
    x = random_images(2, 16)
    a, _ = VptViT(tiny_cfg(), seed=4).forward(x)
    b, _ = VptViT(tiny_cfg(), seed=4).forward(x)
    assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_round_trip(tmp_path):
    m = VptViT(tiny_cfg(), num_domains=3, seed=4, adaptation="lora")
    m.params["lora.1.B"].data += 0.5
    save_checkpoint(m, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.adaptation == "lora" and back.cfg == m.cfg
    assert back.domain_head.num_domains == 3
    for k, t in m.params.items():
        assert np.array_equal(back.params[k].data, t.data)
    save_checkpoint(back, tmp_path / "d.bin")
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_embedding_heads_checkpoint(tmp_path):
    m = EmbeddingHeads(8, 2, 2, seed=1)
    save_checkpoint(m, tmp_path / "e.bin")
    back = load_checkpoint(tmp_path / "e.bin")
    v = np.random.default_rng(0).normal(size=(3, 8))
    assert np.array_equal(back.predict_proba(v), m.predict_proba(v))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_checkpoint(tmp_path / "missing.bin")
    (tmp_path / "bad.bin").write_bytes(b"garbage!")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.bin")
