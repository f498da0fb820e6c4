import numpy as np
import pytest

from mitoshift import diffcore as dc
from mitoshift.backbone import ViTConfig, VptViT
from mitoshift.diffcore import Tensor
from mitoshift.domain_adapt import DomainHead

TINY = dict(image_side=16, patch_size=4, embed_dim=16, num_layers=2, num_heads=2,
            mlp_ratio=2, num_classes=2, prompt_len=2, lora_rank=2)


def tiny_cfg(**kw):
    return ViTConfig(**{**TINY, **kw})


def random_images(n, side, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, side, side, 3), dtype=np.uint8)


@pytest.fixture
def tiny_model():
    return VptViT(tiny_cfg(), num_domains=3, seed=0, adaptation="vpt")


def frozen_copy(head: DomainHead) -> DomainHead:
    twin = DomainHead.__new__(DomainHead)
    for k in ("fc1_w", "fc1_b", "fc2_w", "fc2_b"):
        setattr(twin, k, Tensor(getattr(head, k).data.copy()))
    return twin


def grl_surrogate(model, x, y, d, lam, w_d):
    """Scalar whose true gradient is the one the reversal layer produces.

    F = L_cls(b) - lam * w_d * L_dom(b, h0) + w_d * L_dom(b0, h): backbone
    parameters see the reversed domain gradient, domain-head parameters the
    ordinary one, evaluated around the current point (b0, h0).
    """
    _, feat0 = model.forward(x)
    feat0 = Tensor(feat0.data.copy())
    head0 = frozen_copy(model.domain_head)

    def f():
        logits, feat = model.forward(x)
        lc = dc.cross_entropy(logits, y)
        ld_b = dc.cross_entropy(head0(feat), d)
        ld_h = dc.cross_entropy(model.domain_head(feat0), d)
        return lc - ld_b * (lam * w_d) + ld_h * w_d
    return f


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
