import math

import numpy as np
import pytest

from mitoshift import diffcore as dc
from mitoshift.backbone import VptViT
from mitoshift.diffcore import Tensor
from mitoshift.domain_adapt import DomainHead, GrlCoeff, domain_logits, grl

from conftest import random_images, tiny_cfg


def test_grl_forward_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(grl(Tensor(x), 0.7).data, x)


@pytest.mark.parametrize("lam, g, expected", [
    (1.0, [1.0, -2.0, 3.0], [-1.0, 2.0, -3.0]),
    (0.37, [2.0, -4.0], [-0.74, 1.48]),
])
def test_grl_backward_scaling(lam, g, expected):
    x = Tensor(np.zeros(len(g)), requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.sum_(grl(x, lam) * np.array(g))
    dc.backward(loss, tape)
    assert np.allclose(x.grad, expected, rtol=0, atol=1e-15)


def test_grl_rejects_negative():
    with pytest.raises(ValueError):
        grl(Tensor([1.0]), -0.1)


def test_dann_ramp_values():
    c = GrlCoeff(schedule="dann_ramp", gamma=10.0)
    assert c.at(0.0) == 0.0
    for p in np.linspace(0, 1, 11):
        assert c.at(p) == pytest.approx(2 / (1 + math.exp(-10 * p)) - 1, abs=1e-15)
        assert 0 <= c.at(p) < 1
    assert GrlCoeff(0.4).at(0.9) == 0.4


def test_domain_head_shape():
    head = DomainHead(16, 3, rng=np.random.default_rng(0))
    assert head(Tensor(np.zeros((5, 16)))).shape == (5, 3)
    assert head.fc1_w.shape == (16, 64)


def _domain_grads(model, x, d, lam, use_grl=True):
    for t in model.params.values():
        t.grad = None
    with dc.Tape() as tape:
        _, feat = model.forward(x)
        logits = domain_logits(feat, model.domain_head, lam) if use_grl else model.domain_head(feat)
        loss = dc.cross_entropy(logits, d)
    dc.backward(loss, tape)
    return {k: None if t.grad is None else t.grad.copy() for k, t in model.params.items() if t.requires_grad}


@pytest.fixture(scope="module")
def twin_setup():
    m = VptViT(tiny_cfg(), num_domains=3, seed=1, adaptation="vpt")
    return m, random_images(6, 16, 2), np.array([0, 1, 2, 0, 1, 2])


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_backbone_gradient_is_reversed_twin(twin_setup, lam):
    m, x, d = twin_setup
    plain = _domain_grads(m, x, d, 0.0, use_grl=False)
    rev = _domain_grads(m, x, d, lam)
    for k, g in rev.items():
        if k.startswith("domain_head."):
            assert np.array_equal(g, plain[k])  # heads: ordinary gradient
        elif k.startswith(("prompts.", "cls_token")):
            g = np.zeros_like(plain[k]) if g is None else g
            assert np.max(np.abs(g - (-lam) * plain[k])) <= 1e-10


def test_lambda_zero_blocks_backbone(twin_setup):
    m, x, d = twin_setup
    g = _domain_grads(m, x, d, 0.0)
    for k in ("prompts.0", "prompts.1", "cls_token"):
        assert g[k] is None or not np.any(g[k])


def test_backward_linear_in_lambda(twin_setup):
    m, x, d = twin_setup
    g1, g2 = _domain_grads(m, x, d, 1.0), _domain_grads(m, x, d, 2.0)
    for k in ("prompts.0", "cls_token"):
        assert np.array_equal(g2[k], 2.0 * g1[k])
